use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

/// Triangle mesh as read from an OFF file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn face_area(&self, face: &[usize; 3]) -> f64 {
        let [a, b, c] = face.map(|i| self.vertices[i]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cross = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        0.5 * super::norm(&cross)
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses an OFF mesh. Accepts the ModelNet variant where the counts follow
/// the `OFF` keyword on the same line. Polygons with more than three
/// vertices are fan-triangulated.
pub fn parse_off(text: &str) -> Result<Mesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (header_line, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| parse_err(header_line, "missing OFF header"))?
        .trim();
    let (counts_line, counts) = if rest.is_empty() {
        lines
            .next()
            .ok_or_else(|| parse_err(header_line + 1, "missing element counts"))?
    } else {
        (header_line, rest)
    };
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(counts_line, format!("invalid element counts {counts:?}")))?;
    let (nv, nf) = match counts.as_slice() {
        [nv, nf] | [nv, nf, _] => (*nv, *nf),
        _ => return Err(parse_err(counts_line, "expected vertex, face and edge counts")),
    };

    let mut mesh = Mesh {
        vertices: Vec::with_capacity(nv),
        faces: Vec::with_capacity(nf),
    };
    let mut last_line = counts_line;
    for _ in 0..nv {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(last_line + 1, format!("expected {nv} vertices")))?;
        last_line = ln;
        let coords: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(ln, format!("invalid vertex {line:?}")))?;
        if coords.len() != 3 {
            return Err(parse_err(ln, "vertex needs three coordinates"));
        }
        mesh.vertices.push([coords[0], coords[1], coords[2]]);
    }
    for _ in 0..nf {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(last_line + 1, format!("expected {nf} faces")))?;
        last_line = ln;
        let mut fields = line.split_whitespace();
        let k: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| parse_err(ln, format!("invalid face {line:?}")))?;
        if k < 3 {
            return Err(parse_err(ln, format!("face with {k} vertices")));
        }
        let idx: Vec<usize> = fields
            .take(k)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(ln, format!("invalid face index in {line:?}")))?;
        if idx.len() != k {
            return Err(parse_err(ln, format!("face declares {k} vertices, found {}", idx.len())));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= nv) {
            return Err(parse_err(ln, format!("vertex index {bad} out of range (have {nv})")));
        }
        for j in 1..k - 1 {
            mesh.faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(mesh)
}

/// Samples `n` points uniformly over the mesh surface: faces are chosen in
/// proportion to area, positions are barycentric-uniform within a face.
pub fn sample_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<PointCloud> {
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in &mesh.faces {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Degenerate("mesh has zero surface area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let fi = cumulative.partition_point(|&c| c <= u).min(mesh.faces.len() - 1);
            let [a, b, c] = mesh.faces[fi].map(|i| mesh.vertices[i]);
            let r1 = rng.random::<f64>().sqrt();
            let r2 = rng.random::<f64>();
            let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
            [0, 1, 2].map(|k| wa * a[k] + wb * b[k] + wc * c[k])
        })
        .collect();
    Ok(PointCloud::new(points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_off() {
        let mesh = parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2").unwrap();
        assert_eq!(mesh.vertices.len(), 3);
        assert_eq!(mesh.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn single_line_header() {
        let mesh = parse_off("OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(mesh.faces.len(), 1);
    }

    #[test]
    fn out_of_range_index_names_line() {
        let err = parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 5").unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 6);
                assert!(message.contains('5'));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quad_is_fan_triangulated() {
        let mesh = parse_off("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n").unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn malformed_header_and_truncation() {
        assert!(matches!(parse_off("PLY\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n2 0 1\n"),
            Err(Error::Parse { line: 6, .. })
        ));
    }

    #[test]
    fn samples_lie_in_triangle_plane() {
        let mesh = Mesh {
            vertices: vec![[0.0, 0.0, 1.0], [1.0, 0.0, 2.0], [0.0, 1.0, 3.0]],
            faces: vec![[0, 1, 2]],
        };
        // plane: z = 1 + x + 2y
        let cloud = sample_surface(&mesh, 1000, 7).unwrap();
        assert_eq!(cloud.len(), 1000);
        for p in &cloud.points {
            assert!((p[2] - (1.0 + p[0] + 2.0 * p[1])).abs() < 1e-9);
            assert!(p[0] >= -1e-12 && p[1] >= -1e-12 && p[0] + p[1] <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn area_weighted_face_choice() {
        // Triangle A area 1 (x < 0), triangle B area 3 (x > 10).
        let mesh = Mesh {
            vertices: vec![
                [-2.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [-2.0, 2.0, 0.0],
                [11.0, 0.0, 0.0],
                [14.0, 0.0, 0.0],
                [11.0, 2.0, 0.0],
            ],
            faces: vec![[0, 1, 2], [3, 4, 5]],
        };
        assert!((mesh.face_area(&[0, 1, 2]) - 1.0).abs() < 1e-12);
        assert!((mesh.face_area(&[3, 4, 5]) - 3.0).abs() < 1e-12);
        let cloud = sample_surface(&mesh, 10_000, 3).unwrap();
        let frac = cloud.points.iter().filter(|p| p[0] > 5.0).count() as f64 / 10_000.0;
        // binomial sd at p=0.75, n=1e4 is ~0.0043; 3% is ~7 sd
        assert!((frac - 0.75).abs() < 0.03, "fraction {frac}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let mesh = parse_off("OFF\n4 2 0\n0 0 0\n1 0 0\n1 1 0\n0 1 1\n3 0 1 2\n3 0 2 3\n").unwrap();
        assert_eq!(sample_surface(&mesh, 50, 1).unwrap(), sample_surface(&mesh, 50, 1).unwrap());
        assert_ne!(sample_surface(&mesh, 50, 1).unwrap(), sample_surface(&mesh, 50, 2).unwrap());
    }

    #[test]
    fn zero_area_is_degenerate() {
        let mesh = Mesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            faces: vec![[0, 1, 2]],
        };
        assert!(matches!(sample_surface(&mesh, 10, 0), Err(Error::Degenerate(_))));
    }
}
