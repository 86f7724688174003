//! Triangle meshes and the ASCII `v`/`f` interchange format.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Faces with twice-area at or below this are dropped on load.
const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() < 3 {
            return Err(Error::invalid("mesh needs at least 3 vertices"));
        }
        if !self.vertices.iter().all(|v| v.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("mesh has non-finite vertices"));
        }
        let n = self.vertices.len();
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::invalid(format!("face {f:?} indexes past {n} vertices")));
        }
        Ok(())
    }

    /// Removes zero-area faces.
    pub fn drop_degenerate_faces(&mut self) {
        let verts = &self.vertices;
        self.faces.retain(|f| {
            let e1 = verts[f[1]] - verts[f[0]];
            let e2 = verts[f[2]] - verts[f[0]];
            e1.cross(&e2).norm() > DEGENERATE_AREA
        });
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }

    /// Centers the bounding box at the origin and scales its diagonal to 1.
    pub fn normalize_to_canonical(&mut self) {
        let (lo, hi) = self.bounds();
        let center = (lo + hi) * 0.5;
        let diag = (hi - lo).norm();
        for v in &mut self.vertices {
            *v = (*v - center) / diag;
        }
    }

    /// Axis-aligned cube of the given side, centered at the origin, outward-wound.
    pub fn cube(side: f64) -> Self {
        let h = side * 0.5;
        let vertices = (0..8)
            .map(|i| {
                Vec3::new(
                    if i & 1 == 0 { -h } else { h },
                    if i & 2 == 0 { -h } else { h },
                    if i & 4 == 0 { -h } else { h },
                )
            })
            .collect();
        let faces = vec![
            [0, 2, 1],
            [1, 2, 3],
            [4, 5, 6],
            [5, 7, 6],
            [0, 1, 4],
            [1, 5, 4],
            [2, 6, 3],
            [3, 6, 7],
            [0, 4, 2],
            [2, 4, 6],
            [1, 3, 5],
            [3, 7, 5],
        ];
        Self { vertices, faces }
    }

    /// Regular icosahedron (20 faces) with circumradius `radius`.
    pub fn icosahedron(radius: f64) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let raw = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ];
        let vertices = raw.iter().map(|p| Vec3::new(p[0], p[1], p[2]).normalize() * radius).collect();
        let faces = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        Self { vertices, faces }
    }

    /// Latitude/longitude sphere with `radius(theta, phi)` giving the distance
    /// from the origin; `stacks` rings including both poles.
    pub fn uv_sphere(segments: usize, stacks: usize, radius: impl Fn(f64, f64) -> f64) -> Self {
        assert!(segments >= 3 && stacks >= 3);
        let mut vertices = Vec::with_capacity(2 + segments * (stacks - 2));
        vertices.push(Vec3::new(0.0, radius(0.0, 0.0), 0.0));
        for i in 1..stacks - 1 {
            let theta = std::f64::consts::PI * i as f64 / (stacks - 1) as f64;
            for j in 0..segments {
                let phi = std::f64::consts::TAU * j as f64 / segments as f64;
                let r = radius(theta, phi);
                vertices.push(Vec3::new(r * theta.sin() * phi.cos(), r * theta.cos(), r * theta.sin() * phi.sin()));
            }
        }
        let south = vertices.len();
        vertices.push(Vec3::new(0.0, -radius(std::f64::consts::PI, 0.0), 0.0));
        let ring = |i: usize, j: usize| 1 + (i - 1) * segments + j % segments;
        let mut faces = Vec::new();
        for j in 0..segments {
            faces.push([0, ring(1, j + 1), ring(1, j)]);
        }
        for i in 1..stacks - 2 {
            for j in 0..segments {
                let (a, b) = (ring(i, j), ring(i, j + 1));
                let (c, d) = (ring(i + 1, j), ring(i + 1, j + 1));
                faces.push([a, b, d]);
                faces.push([a, d, c]);
            }
        }
        for j in 0..segments {
            faces.push([south, ring(stacks - 2, j), ring(stacks - 2, j + 1)]);
        }
        Self { vertices, faces }
    }
}

/// Parses `v x y z` and `f a b c ...` records. Other record types are ignored;
/// polygons are fan-triangulated; `a/b/c` index forms and negative
/// (relative) indices are accepted. Degenerate faces are dropped.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let line = line.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut xyz = [0.0; 3];
                for c in &mut xyz {
                    let tok = tokens.next().ok_or_else(|| err("vertex needs 3 coordinates".into()))?;
                    *c = tok.parse::<f64>().map_err(|e| err(format!("bad coordinate {tok:?}: {e}")))?;
                    if !c.is_finite() {
                        return Err(err(format!("non-finite coordinate {tok:?}")));
                    }
                }
                vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let idx = tokens
                    .map(|tok| {
                        let head = tok.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|e| err(format!("bad face index {tok:?}: {e}")))?;
                        let n = vertices.len() as i64;
                        let resolved = match i {
                            0 => return Err(err("face index 0 is invalid".into())),
                            i if i > 0 => i - 1,
                            i => n + i,
                        };
                        if resolved < 0 || resolved >= n {
                            return Err(err(format!("face index {i} out of range")));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() < 3 {
                    return Err(err("face needs at least 3 vertices".into()));
                }
                for w in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[w], idx[w + 1]]);
                }
            }
            _ => {}
        }
    }
    let mut mesh = Mesh::new(vertices, faces).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    mesh.drop_degenerate_faces();
    Ok(mesh)
}

pub fn write_obj(mesh: &Mesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}
