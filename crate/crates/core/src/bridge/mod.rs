//! Remote vector-field providers over the XFP1 framed binary protocol.

mod frame;
mod message;
mod net;

pub use frame::{decode_frame, encode_frame, Frame, FrameError, FrameReader, FrameType, Inbound, HEADER_LEN, MAGIC, MAX_PAYLOAD};
pub use message::{decode_request, decode_response, encode_request, encode_response, EvalRequest, MODE_DENSE, MODE_SPARSE};
pub use net::{handle_frame, serve_provider, spawn_server, Endpoint, RemoteProvider, ServerHandle, DEFAULT_TIMEOUT};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{Error, Result};
    use crate::flowcore::{OracleField, PatchLatent, Placement, VectorFieldProvider, ZeroField};
    use crate::lattice::{DenseLatent, SparseLatent};
    use crate::priors::ConditionEmbedding;
    use std::io::{Read, Write};
    use std::net::TcpStream;
    use std::sync::Arc;
    use std::time::Duration;

    fn local() -> Endpoint {
        "127.0.0.1:0".parse().unwrap()
    }

    fn read_frame(s: &mut TcpStream, reader: &mut FrameReader) -> Frame {
        let mut buf = [0u8; 4096];
        loop {
            if let Some(Inbound::Frame(f)) = reader.next_event() {
                return f;
            }
            let n = s.read(&mut buf).unwrap();
            assert!(n > 0, "server closed");
            reader.push(&buf[..n]);
        }
    }

    fn request_bytes(id: u64, t: f32) -> Vec<u8> {
        encode_frame(&Frame {
            kind: FrameType::Request,
            request_id: id,
            payload: encode_request(&EvalRequest {
                t,
                latent: PatchLatent::Dense(DenseLatent::filled([2, 2, 2, 1], 1.0)),
                condition: vec![],
            }),
        })
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!("tcp://1.2.3.4:5".parse::<Endpoint>().unwrap(), Endpoint::Tcp("1.2.3.4:5".into()));
        assert_eq!("localhost:9".parse::<Endpoint>().unwrap(), Endpoint::Tcp("localhost:9".into()));
        assert_eq!("unix:/tmp/x".parse::<Endpoint>().unwrap(), Endpoint::Unix("/tmp/x".into()));
        assert!("nonsense".parse::<Endpoint>().is_err());
    }

    #[test]
    fn zero_server_returns_zero_vectors() {
        let server = spawn_server(Arc::new(ZeroField), &local()).unwrap();
        let client = RemoteProvider::connect(server.endpoint()).unwrap();
        let z = PatchLatent::Dense(DenseLatent::gaussian([4, 4, 4, 2], 1));
        let v = client.evaluate(&z, &ConditionEmbedding::from_bytes(vec![]), 0.5).unwrap();
        assert_eq!(v, PatchLatent::Dense(DenseLatent::zeros([4, 4, 4, 2])));
    }

    #[test]
    fn remote_oracle_matches_local_bitwise() {
        let target = DenseLatent::gaussian([8, 8, 4, 1], 3);
        let slat = SparseLatent::from_entries([8, 8, 4], 2, vec![([1, 2, 3], vec![0.25, -0.5]), ([6, 6, 0], vec![1.0, 2.0])])
            .unwrap();
        let oracle = Arc::new(OracleField::new(Some(target), Some(slat)).with_spread(0.3));
        let server = spawn_server(oracle.clone(), &local()).unwrap();
        let client = RemoteProvider::connect(server.endpoint()).unwrap();
        let cond = Placement::window(4, 4, 4).attach(&ConditionEmbedding::from_bytes(b"img".to_vec()));
        let z = PatchLatent::Dense(DenseLatent::gaussian([4, 4, 4, 1], 4));
        assert_eq!(
            client.evaluate(&z, &cond, 0.3).unwrap(),
            oracle.evaluate(&z, &cond, 0.3).unwrap()
        );
        let zs = PatchLatent::Sparse(
            SparseLatent::from_entries([4, 4, 4], 2, vec![([2, 2, 0], vec![0.1, 0.2]), ([3, 3, 3], vec![0.3, 0.4])]).unwrap(),
        );
        assert_eq!(
            client.evaluate(&zs, &cond, 0.9).unwrap(),
            oracle.evaluate(&zs, &cond, 0.9).unwrap()
        );
    }

    #[test]
    fn remote_errors_surface_with_request_id() {
        // the oracle needs placement; without it the server replies with an error frame
        let oracle = Arc::new(OracleField::new(Some(DenseLatent::zeros([4, 4, 4, 1])), None));
        let server = spawn_server(oracle, &local()).unwrap();
        let client = RemoteProvider::connect(server.endpoint()).unwrap();
        let z = PatchLatent::Dense(DenseLatent::zeros([4, 4, 4, 1]));
        match client.evaluate(&z, &ConditionEmbedding::from_bytes(vec![]), 0.5) {
            Err(Error::Provider(m)) => assert!(m.starts_with("request 1: remote error")),
            other => panic!("{other:?}"),
        }
    }

    struct Slow;

    impl VectorFieldProvider for Slow {
        fn evaluate(&self, latent: &PatchLatent, _: &ConditionEmbedding, t: f32) -> Result<PatchLatent> {
            // later-issued requests with small t finish first
            std::thread::sleep(Duration::from_millis((t * 50.0) as u64));
            let PatchLatent::Dense(d) = latent else {
                return Err(Error::Provider("dense only".into()));
            };
            Ok(PatchLatent::Dense(DenseLatent::filled(d.shape(), t)))
        }
    }

    #[test]
    fn hundred_concurrent_requests() {
        let server = spawn_server(Arc::new(Slow), &local()).unwrap();
        let client = Arc::new(RemoteProvider::connect(server.endpoint()).unwrap());
        let handles: Vec<_> = (0..100)
            .map(|n| {
                let client = client.clone();
                std::thread::spawn(move || {
                    let t = 1.0 - n as f32 / 100.0;
                    let z = PatchLatent::Dense(DenseLatent::zeros([2, 2, 2, 1]));
                    let v = client.evaluate(&z, &ConditionEmbedding::from_bytes(vec![]), t).unwrap();
                    assert_eq!(v, PatchLatent::Dense(DenseLatent::filled([2, 2, 2, 1], t)));
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
    }

    #[test]
    fn malformed_frames_get_error_frames() {
        let server = spawn_server(Arc::new(ZeroField), &local()).unwrap();
        let Endpoint::Tcp(addr) = server.endpoint().clone() else { unreachable!() };
        let mut s = TcpStream::connect(addr).unwrap();
        let mut reader = FrameReader::new();
        // undecodable request payload
        s.write_all(&encode_frame(&Frame {
            kind: FrameType::Request,
            request_id: 41,
            payload: vec![1, 2, 3],
        }))
        .unwrap();
        let f = read_frame(&mut s, &mut reader);
        assert_eq!((f.kind, f.request_id), (FrameType::Error, 41));
        assert!(std::str::from_utf8(&f.payload).is_ok());
        // unknown type
        let mut bad = request_bytes(42, 0.5);
        bad[4] = 9;
        s.write_all(&bad).unwrap();
        let f = read_frame(&mut s, &mut reader);
        assert_eq!((f.kind, f.request_id), (FrameType::Error, 42));
        // garbage, then a valid request on the same connection
        s.write_all(b"not a frame").unwrap();
        let f = read_frame(&mut s, &mut reader);
        assert_eq!((f.kind, f.request_id), (FrameType::Error, 0));
        s.write_all(&request_bytes(43, 0.5)).unwrap();
        let mut f = read_frame(&mut s, &mut reader);
        while f.request_id == 0 {
            f = read_frame(&mut s, &mut reader);
        }
        assert_eq!((f.kind, f.request_id), (FrameType::Response, 43));
    }

    #[test]
    fn server_close_fails_pending_requests() {
        let server = spawn_server(Arc::new(Slow), &local()).unwrap();
        let client = Arc::new(RemoteProvider::connect(server.endpoint()).unwrap());
        let c = client.clone();
        let pending = std::thread::spawn(move || {
            let z = PatchLatent::Dense(DenseLatent::zeros([2, 2, 2, 1]));
            c.evaluate(&z, &ConditionEmbedding::from_bytes(vec![]), 1.0)
        });
        std::thread::sleep(Duration::from_millis(15));
        server.shutdown();
        assert!(matches!(pending.join().unwrap(), Err(Error::Provider(_))));
        let z = PatchLatent::Dense(DenseLatent::zeros([2, 2, 2, 1]));
        assert!(matches!(
            client.evaluate(&z, &ConditionEmbedding::from_bytes(vec![]), 0.5),
            Err(Error::Provider(_))
        ));
    }

    #[test]
    fn client_times_out() {
        let server = spawn_server(Arc::new(Slow), &local()).unwrap();
        let client = RemoteProvider::connect(server.endpoint())
            .unwrap()
            .with_timeout(Duration::from_millis(5));
        let z = PatchLatent::Dense(DenseLatent::zeros([2, 2, 2, 1]));
        match client.evaluate(&z, &ConditionEmbedding::from_bytes(vec![]), 1.0) {
            Err(Error::Provider(m)) => assert!(m.contains("request 1") && m.contains("no response")),
            other => panic!("{other:?}"),
        }
    }

    fn idle_then_request(idle: Duration) {
        let server = spawn_server(Arc::new(ZeroField), &local()).unwrap();
        let client = RemoteProvider::connect(server.endpoint()).unwrap();
        std::thread::sleep(idle);
        let z = PatchLatent::Dense(DenseLatent::zeros([2, 2, 2, 1]));
        assert!(client.evaluate(&z, &ConditionEmbedding::from_bytes(vec![]), 0.5).is_ok());
    }

    #[test]
    fn idle_connection_survives() {
        idle_then_request(Duration::from_secs(2));
    }

    #[test]
    #[ignore = "takes over a minute"]
    fn idle_connection_survives_a_minute() {
        idle_then_request(Duration::from_secs(61));
    }

    #[cfg(unix)]
    #[test]
    fn unix_socket_transport() {
        let dir = tempfile::tempdir().unwrap();
        let ep = Endpoint::Unix(dir.path().join("xfp1.sock"));
        let server = spawn_server(Arc::new(ZeroField), &ep).unwrap();
        let client = RemoteProvider::connect(server.endpoint()).unwrap();
        let z = PatchLatent::Dense(DenseLatent::filled([2, 2, 2, 1], 3.0));
        let v = client.evaluate(&z, &ConditionEmbedding::from_bytes(vec![]), 0.5).unwrap();
        assert_eq!(v, PatchLatent::Dense(DenseLatent::zeros([2, 2, 2, 1])));
    }
}
