//! Whitespace-separated `x y z` point lists, one point per line; `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub fn parse_points(text: &str) -> Result<Vec<Vec3>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse { line: i + 1, msg: format!("expected 3 coordinates, found {}", fields.len()) });
        }
        let mut p = Vec3::zeros();
        for (c, f) in fields.iter().enumerate() {
            p[c] = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("'{f}' is not a finite number") })?;
        }
        out.push(p);
    }
    Ok(out)
}

pub fn format_points(points: &[Vec3]) -> String {
    let mut s = String::new();
    for p in points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

pub fn read_points(path: &Path) -> Result<Vec<Vec3>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Load { path: path.to_path_buf(), msg: e.to_string() })?;
    parse_points(&text)
}
