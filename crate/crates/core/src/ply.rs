//! ASCII PLY point clouds: `x y z` float properties with optional
//! `red green blue` uchar colors.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn to_ascii(&self) -> String {
        let mut out = String::new();
        out.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(out, "element vertex {}", self.points.len());
        out.push_str("property float x\nproperty float y\nproperty float z\n");
        if self.colors.is_some() {
            out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        }
        out.push_str("end_header\n");
        for (n, p) in self.points.iter().enumerate() {
            let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
            if let Some(colors) = &self.colors {
                let c = colors[n];
                let _ = write!(out, " {} {} {}", c[0], c[1], c[2]);
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cursor = Lines {
            lines: text.lines(),
            offset: 0,
        };

        let (at, first) = cursor.next();
        if first.map(str::trim) != Some("ply") {
            return Err(Error::parse(at, "missing 'ply' magic line"));
        }
        let mut vertex_count: Option<usize> = None;
        let mut in_vertex = false;
        let mut props: Vec<String> = Vec::new();
        loop {
            let (at, line) = cursor.next();
            let line = line.ok_or_else(|| Error::parse(at, "header ended before end_header"))?;
            let words: Vec<&str> = line.split_whitespace().collect();
            match words.as_slice() {
                ["format", "ascii", "1.0"] => {}
                ["format", other, ..] => {
                    return Err(Error::parse(at, format!("unsupported PLY format '{other}'")))
                }
                ["comment", ..] | ["obj_info", ..] | [] => {}
                ["element", "vertex", n] => {
                    let n = n
                        .parse()
                        .map_err(|_| Error::parse(at, format!("bad vertex count '{n}'")))?;
                    vertex_count = Some(n);
                    in_vertex = true;
                }
                ["element", _, n] => {
                    if n.parse::<usize>().map_err(|_| Error::parse(at, "bad element count"))? != 0 {
                        return Err(Error::parse(at, "only vertex elements are supported"));
                    }
                    in_vertex = false;
                }
                ["property", _ty, name] if in_vertex => props.push(name.to_string()),
                ["property", ..] => {}
                ["end_header"] => break,
                _ => return Err(Error::parse(at, format!("unrecognised header line '{line}'"))),
            }
        }
        let count = vertex_count.ok_or_else(|| Error::parse(cursor.offset, "no vertex element"))?;
        let find = |name: &str| props.iter().position(|p| p == name);
        let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(Error::parse(cursor.offset, "vertex element lacks x/y/z")),
        };
        let rgb = match (find("red"), find("green"), find("blue")) {
            (Some(r), Some(g), Some(b)) => Some([r, g, b]),
            _ => None,
        };
        let mut points = Vec::with_capacity(count);
        let mut colors = rgb.map(|_| Vec::with_capacity(count));
        for _ in 0..count {
            let (at, line) = cursor.next();
            let line = line.ok_or_else(|| Error::parse(at, "fewer vertices than declared"))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < props.len() {
                return Err(Error::parse(at, "vertex line has too few fields"));
            }
            let float = |i: usize| -> Result<f32> {
                fields[i]
                    .parse::<f32>()
                    .map_err(|_| Error::parse(at, format!("bad float '{}'", fields[i])))
            };
            points.push([float(ix)?, float(iy)?, float(iz)?]);
            if let (Some(cols), Some([r, g, b])) = (colors.as_mut(), rgb) {
                let byte = |i: usize| -> Result<u8> {
                    fields[i]
                        .parse::<u8>()
                        .map_err(|_| Error::parse(at, format!("bad color '{}'", fields[i])))
                };
                cols.push([byte(r)?, byte(g)?, byte(b)?]);
            }
        }
        Ok(PointCloud { points, colors })
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }
}

struct Lines<'a> {
    lines: std::str::Lines<'a>,
    offset: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> (usize, Option<&'a str>) {
        let at = self.offset;
        let line = self.lines.next();
        if let Some(l) = line {
            self.offset += l.len() + 1;
        }
        (at, line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_cloud_header() {
        let text = PointCloud::default().to_ascii();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 0\n"));
        assert!(text.ends_with("end_header\n"));
        assert_eq!(PointCloud::parse(&text).unwrap(), PointCloud::default());
    }

    #[test]
    fn colored_round_trip() {
        let cloud = PointCloud {
            points: vec![[0.015625, 1.5, -2.0], [3.0, 4.25, 0.1]],
            colors: Some(vec![[255, 0, 7], [1, 2, 3]]),
        };
        assert_eq!(PointCloud::parse(&cloud.to_ascii()).unwrap(), cloud);
    }

    #[test]
    fn rejects_binary_and_truncation() {
        assert!(PointCloud::parse("ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        assert!(matches!(PointCloud::parse(text), Err(Error::Parse { .. })));
        assert!(PointCloud::parse("").is_err());
    }
}
