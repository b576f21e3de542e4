//! Object File Format meshes and area-weighted surface sampling.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

/// Triangle mesh. Polygons are fan-triangulated on parse.
#[derive(Clone, Debug, PartialEq)]
pub struct OffMesh {
    pub vertices: Vec<Point>,
    pub faces: Vec<[usize; 3]>,
}

fn perr<T>(line: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        line,
        message: message.into(),
    })
}

/// Non-empty lines with comments stripped, paired with 1-based line numbers.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_tokens(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        for (i, raw) in self.inner.by_ref() {
            self.last = i + 1;
            let body = raw.split('#').next().unwrap_or("");
            let toks: Vec<&str> = body.split_whitespace().collect();
            if !toks.is_empty() {
                return Ok((i + 1, toks));
            }
        }
        perr(
            self.last + 1,
            format!("unexpected end of file, expected {what}"),
        )
    }
}

fn num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse()
        .or_else(|_| perr(line, format!("invalid {what} {tok:?}")))
}

/// Parses OFF text. The header keyword may be fused with the counts
/// (`OFF1024 2048 0`), a quirk of some published datasets.
pub fn parse_off(text: &str) -> Result<OffMesh> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (line, toks) = lines.next_tokens("OFF header")?;
    let Some(rest) = toks[0].strip_prefix("OFF") else {
        return perr(line, format!("expected OFF header, found {:?}", toks[0]));
    };
    let mut counts: Vec<&str> = Vec::new();
    if !rest.is_empty() {
        counts.push(rest);
    }
    counts.extend(&toks[1..]);
    let mut count_line = line;
    if counts.is_empty() {
        let (l, t) = lines.next_tokens("vertex/face/edge counts")?;
        count_line = l;
        counts = t;
    }
    if counts.len() < 2 || counts.len() > 3 {
        return perr(
            count_line,
            format!("expected counts \"V F E\", found {:?}", counts.join(" ")),
        );
    }
    let nv: usize = num(counts[0], count_line, "vertex count")?;
    let nf: usize = num(counts[1], count_line, "face count")?;
    if counts.len() == 3 {
        num::<usize>(counts[2], count_line, "edge count")?;
    }

    let mut vertices = Vec::with_capacity(nv.min(1 << 20));
    for k in 0..nv {
        let (l, t) = lines.next_tokens(&format!("vertex {} of {nv}", k + 1))?;
        if t.len() < 3 {
            return perr(l, format!("vertex needs 3 coordinates, found {}", t.len()));
        }
        let mut p: Point = [0.0; 3];
        for (d, tok) in t[..3].iter().enumerate() {
            p[d] = num(tok, l, "coordinate")?;
            if !p[d].is_finite() {
                return perr(l, format!("non-finite coordinate {tok:?}"));
            }
        }
        vertices.push(p);
    }

    let mut faces = Vec::with_capacity(nf.min(1 << 20));
    for k in 0..nf {
        let (l, t) = lines.next_tokens(&format!("face {} of {nf}", k + 1))?;
        let n: usize = num(t[0], l, "face vertex count")?;
        if n < 3 {
            return perr(l, format!("face needs at least 3 vertices, found {n}"));
        }
        if t.len() - 1 < n {
            return perr(l, format!("face lists {} of {n} indices", t.len() - 1));
        }
        let idx: Vec<usize> = t[1..=n]
            .iter()
            .map(|tok| {
                let i: usize = num(tok, l, "vertex index")?;
                if i >= nv {
                    return perr(l, format!("vertex index {i} out of range (V = {nv})"));
                }
                Ok(i)
            })
            .collect::<Result<_>>()?;
        for j in 1..n - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(OffMesh { vertices, faces })
}

/// Serializes as OFF text; coordinates use shortest round-trip formatting.
pub fn write_off(mesh: &OffMesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "OFF\n{} {} 0", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        let _ = writeln!(s, "{:?} {:?} {:?}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

impl OffMesh {
    pub fn triangle(&self, f: usize) -> [Point; 3] {
        self.faces[f].map(|i| self.vertices[i])
    }

    pub fn area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        let u: Point = std::array::from_fn(|k| b[k] - a[k]);
        let v: Point = std::array::from_fn(|k| c[k] - a[k]);
        let x = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
    }
}

/// Surface sample: triangles chosen with probability proportional to area,
/// then a uniform point inside via square-root barycentric coordinates.
/// Zero-area triangles are never chosen.
pub fn sample_mesh<R: Rng + ?Sized>(
    mesh: &OffMesh,
    n_points: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    if n_points == 0 {
        return Err(Error::Config("points per cloud must be positive".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.area(f);
        cumulative.push(total);
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DegenerateInput("mesh has no surface area".into()));
    }
    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let x = rng.random_range(0.0..total);
        let f = cumulative
            .partition_point(|&c| c <= x)
            .min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.triangle(f);
        let r1 = rng.random::<f64>().sqrt();
        let r2 = rng.random::<f64>();
        let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
        points.push(std::array::from_fn(|k| wa * a[k] + wb * b[k] + wc * c[k]));
    }
    PointCloud::new(points, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    const TETRA: &str = "OFF\n# unit tetrahedron\n4 4 6\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n\
        3 0 2 1\n3 0 1 3\n3 0 3 2\n3 1 2 3\n";

    #[test]
    fn tetrahedron() {
        let m = parse_off(TETRA).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.faces.len(), 4);
        assert_eq!(m.faces[1], [0, 1, 3]);
    }

    #[test]
    fn fused_header_and_quad_fan() {
        let m = parse_off("OFF4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3 255 0 0\n").unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn errors_carry_lines() {
        let cases = [
            ("", 1),
            ("PLY\n", 1),
            ("OFF\n3 x 0\n", 2),
            ("OFF\n3 1 0\n0 0 0\n1 0 0\n", 5),
            ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n", 6),
            ("OFF\n3 1 0\n0 0 0\n1 0\n0 1 0\n3 0 1 2\n", 4),
            ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n2 0 1\n", 6),
        ];
        for (text, line) in cases {
            match parse_off(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn serialize_roundtrip() {
        let m = parse_off(TETRA).unwrap();
        assert_eq!(parse_off(&write_off(&m)).unwrap(), m);
        let odd = OffMesh {
            vertices: vec![
                [0.1, -1e-300, 3.0e10],
                [1.0 / 3.0, 2.5, -0.0],
                [7.0, 8.0, 9.0],
            ],
            faces: vec![[2, 1, 0]],
        };
        assert_eq!(parse_off(&write_off(&odd)).unwrap(), odd);
    }

    #[test]
    fn single_triangle_samples_inside() {
        let m = OffMesh {
            vertices: vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
        };
        let c = sample_mesh(&m, 2000, &mut rng::stream(1)).unwrap();
        for p in &c.points {
            // barycentric (u, v) with p = u·B + v·C
            let (u, v) = (p[0] / 2.0, p[1]);
            assert!(u >= 0.0 && v >= 0.0 && u + v <= 1.0 + 1e-12 && p[2] == 0.0);
        }
    }

    #[test]
    fn zero_area_faces_never_chosen() {
        let m = OffMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [0.0, 1.0, 5.0],
                [1.0, 1.0, 5.0],
            ],
            faces: vec![[0, 1, 2], [0, 3, 4], [1, 1, 1]],
        };
        let c = sample_mesh(&m, 1000, &mut rng::stream(2)).unwrap();
        assert!(c.points.iter().all(|p| p[1] > 0.0 || p == &[0.0; 3]));
        let flat = OffMesh {
            vertices: m.vertices.clone(),
            faces: vec![[0, 1, 2]],
        };
        assert!(matches!(
            sample_mesh(&flat, 5, &mut rng::stream(3)),
            Err(Error::DegenerateInput(_))
        ));
    }
}
