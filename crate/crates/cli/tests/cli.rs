use std::path::Path;
use std::process::{Command, Output};

fn patchflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchflow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn demo(dir: &Path, seed: &str, workers: &str) {
    let out = patchflow(&[
        "oracle-demo",
        "--seed",
        seed,
        "--workers",
        workers,
        "--dims",
        "2,2,4,16",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

const ASSETS: [&str; 3] = ["scene.ply", "sdf.xlt", "occupancy.xlt"];

#[test]
fn oracle_demo_is_byte_identical_across_runs_and_workers() {
    let root = tempfile::tempdir().unwrap();
    let runs: Vec<_> = [("1", "a"), ("1", "b"), ("8", "c"), ("8", "d")]
        .iter()
        .map(|(w, name)| {
            let dir = root.path().join(name);
            demo(&dir, "5", w);
            dir
        })
        .collect();
    for file in ASSETS {
        let first = std::fs::read(runs[0].join(file)).unwrap();
        assert!(!first.is_empty());
        for other in &runs[1..] {
            assert_eq!(first, std::fs::read(other.join(file)).unwrap(), "{file} differs in {}", other.display());
        }
    }
    let other_seed = root.path().join("e");
    demo(&other_seed, "6", "1");
    assert_ne!(
        std::fs::read(runs[0].join("scene.ply")).unwrap(),
        std::fs::read(other_seed.join("scene.ply")).unwrap()
    );
}

#[test]
fn generate_from_written_config_and_inspect() {
    let root = tempfile::tempdir().unwrap();
    let demo_dir = root.path().join("demo");
    demo(&demo_dir, "2", "1");
    let gen_dir = root.path().join("gen");
    let out = patchflow(&[
        "generate",
        demo_dir.join("prior.spr").to_str().unwrap(),
        "--config",
        demo_dir.join("config.json").to_str().unwrap(),
        "--out",
        gen_dir.to_str().unwrap(),
        "--workers",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ASSETS {
        assert_eq!(
            std::fs::read(demo_dir.join(file)).unwrap(),
            std::fs::read(gen_dir.join(file)).unwrap(),
            "{file}"
        );
    }
    let out = patchflow(&["inspect", gen_dir.join("occupancy.xlt").to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("shape    [32, 32, 16]"), "{text}");
}

#[test]
fn voxelize_round_trips_exported_points() {
    let root = tempfile::tempdir().unwrap();
    let demo_dir = root.path().join("demo");
    demo(&demo_dir, "3", "1");
    let vox = root.path().join("vox.xlt");
    let out = patchflow(&[
        "voxelize",
        demo_dir.join("scene.ply").to_str().unwrap(),
        "--dims",
        "2,2,4,16",
        "--out",
        vox.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("occupied voxels of [32, 32, 16]"), "{text}");
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let bad = root.path().join("bad.json");
    std::fs::write(&bad, r#"{"n_iters": 2}"#).unwrap();
    let out = patchflow(&["generate", "missing.spr", "--config", bad.to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));

    let good = root.path().join("good.json");
    std::fs::write(&good, "{}").unwrap();
    let out_dir = root.path().join("out");
    let out = patchflow(&[
        "generate",
        root.path().join("missing.spr").to_str().unwrap(),
        "--config",
        good.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let report = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
    assert!(report.contains("\"error\": \"load"), "{report}");

    let out = patchflow(&["oracle-demo", "--dims", "2,2,3,16", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(patchflow(&["no-such-command"]).status.code(), Some(2));
}
