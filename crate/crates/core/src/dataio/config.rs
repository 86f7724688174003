//! Plain-text tool configuration: `key = value` lines grouped in `[section]`s.
//!
//! ```text
//! # per-category settings
//! [bottle]
//! symmetry = axis 0 1 0
//! symmetry_steps = 64
//! lambda_mask = 0.2
//!
//! [fit]
//! max_iters = 500
//!
//! [icp]
//! correspondence_radius = 0.05
//! ```
//! Section names other than `fit`, `icp` and `ransac` declare categories.
//! Category keys: `symmetry` (`none` or `axis x y z`), `symmetry_steps`,
//! `lambda_pose`, `lambda_nocs`, `lambda_recon`, `lambda_mask`, `lambda_reg`, `beta`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fit::FitConfig;
use crate::geometry::Vec3;
use crate::losses::{LossWeights, SymmetrySpec};
use crate::registration::IcpConfig;
use crate::shape::procedural::CATEGORIES;
use crate::umeyama::RansacConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct CategorySettings {
    pub symmetry: SymmetrySpec,
    pub weights: LossWeights,
}

impl Default for CategorySettings {
    fn default() -> Self {
        Self { symmetry: SymmetrySpec::None, weights: LossWeights::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToolConfig {
    pub categories: BTreeMap<String, CategorySettings>,
    pub fit: FitConfig,
    pub icp: IcpConfig,
    pub ransac: RansacConfig,
}

/// Bottles and bowls are treated as symmetric about their canonical up axis (+y).
pub fn default_symmetry(category: &str) -> SymmetrySpec {
    match category {
        "bottle" | "bowl" => SymmetrySpec::Axis { axis: Vec3::y(), steps: SymmetrySpec::DEFAULT_STEPS },
        _ => SymmetrySpec::None,
    }
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            categories: CATEGORIES
                .iter()
                .map(|&c| {
                    (c.to_string(), CategorySettings { symmetry: default_symmetry(c), weights: LossWeights::default() })
                })
                .collect(),
            fit: FitConfig::default(),
            icp: IcpConfig::default(),
            ransac: RansacConfig::default(),
        }
    }
}

impl ToolConfig {
    pub fn category(&self, name: &str) -> Result<&CategorySettings> {
        self.categories.get(name).ok_or_else(|| Error::invalid(format!("unknown category '{name}'")))
    }
}

fn number<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Parse { line, msg: format!("'{key}' expects a number, got '{value}'") })
}

fn parse_symmetry(line: usize, value: &str, steps: usize) -> Result<SymmetrySpec> {
    let words: Vec<&str> = value.split_whitespace().collect();
    match words.as_slice() {
        ["none"] => Ok(SymmetrySpec::None),
        ["axis", x, y, z] => {
            let axis =
                Vec3::new(number(line, "symmetry", x)?, number(line, "symmetry", y)?, number(line, "symmetry", z)?);
            if !(axis.iter().all(|c| c.is_finite()) && axis.norm() > 1e-9) {
                return Err(Error::Parse { line, msg: "symmetry axis must be a non-zero vector".into() });
            }
            Ok(SymmetrySpec::Axis { axis: axis.normalize(), steps })
        }
        _ => Err(Error::Parse { line, msg: format!("symmetry must be 'none' or 'axis x y z', got '{value}'") }),
    }
}

/// Parses a configuration, starting from the built-in defaults; categories
/// named in the text override or extend the default set.
pub fn parse_category_config(text: &str) -> Result<ToolConfig> {
    let mut cfg = ToolConfig::default();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .map(str::trim)
                .ok_or_else(|| Error::Parse { line, msg: "unterminated section header".into() })?;
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Parse { line, msg: format!("invalid section name '{name}'") });
            }
            if !matches!(name, "fit" | "icp" | "ransac") {
                cfg.categories.entry(name.to_string()).or_insert_with(|| CategorySettings {
                    symmetry: default_symmetry(name),
                    weights: LossWeights::default(),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) =
            content.split_once('=').ok_or_else(|| Error::Parse { line, msg: "expected 'key = value'".into() })?;
        let (key, value) = (key.trim(), value.trim());
        let Some(sec) = section.as_deref() else {
            return Err(Error::Parse { line, msg: "setting outside of a [section]".into() });
        };
        let unknown = || Error::Parse { line, msg: format!("unknown key '{key}' in [{sec}]") };
        match sec {
            "fit" => match key {
                "max_iters" => cfg.fit.max_iters = number(line, key, value)?,
                "lr_rotation" => cfg.fit.lr_rotation = number(line, key, value)?,
                "lr_depth" => cfg.fit.lr_depth = number(line, key, value)?,
                "lr_offset" => cfg.fit.lr_offset = number(line, key, value)?,
                "lr_scale" => cfg.fit.lr_scale = number(line, key, value)?,
                "lr_shape" => cfg.fit.lr_shape = number(line, key, value)?,
                "lr_decay" => cfg.fit.lr_decay = number(line, key, value)?,
                "sigma_initial" => cfg.fit.sigma.initial = number(line, key, value)?,
                "sigma_factor" => cfg.fit.sigma.factor = number(line, key, value)?,
                "sigma_every" => cfg.fit.sigma.every = number(line, key, value)?,
                "sigma_min" => cfg.fit.sigma.min = number(line, key, value)?,
                "convergence_tol" => cfg.fit.convergence_tol = number(line, key, value)?,
                "optimize_scale" => cfg.fit.optimize_scale = number(line, key, value)?,
                "lambda_reg" => cfg.fit.lambda_reg = number(line, key, value)?,
                _ => return Err(unknown()),
            },
            "icp" => match key {
                "max_iters" => cfg.icp.max_iters = number(line, key, value)?,
                "correspondence_radius" => cfg.icp.correspondence_radius = number(line, key, value)?,
                "trim_fraction" => cfg.icp.trim_fraction = number(line, key, value)?,
                "color_weight" => cfg.icp.color_weight = number(line, key, value)?,
                _ => return Err(unknown()),
            },
            "ransac" => match key {
                "iterations" => cfg.ransac.iterations = number(line, key, value)?,
                "sample_size" => cfg.ransac.sample_size = number(line, key, value)?,
                "inlier_threshold" => cfg.ransac.inlier_threshold = number(line, key, value)?,
                "seed" => cfg.ransac.seed = number(line, key, value)?,
                _ => return Err(unknown()),
            },
            category => {
                let entry = cfg.categories.get_mut(category).expect("inserted at header");
                let w = &mut entry.weights;
                match key {
                    "symmetry" => {
                        let steps = match entry.symmetry {
                            SymmetrySpec::Axis { steps, .. } => steps,
                            SymmetrySpec::None => SymmetrySpec::DEFAULT_STEPS,
                        };
                        entry.symmetry = parse_symmetry(line, value, steps)?;
                    }
                    "symmetry_steps" => {
                        let steps: usize = number(line, key, value)?;
                        if steps < 2 {
                            return Err(Error::Parse { line, msg: "symmetry_steps must be at least 2".into() });
                        }
                        entry.symmetry = entry.symmetry.with_steps(steps);
                    }
                    "lambda_pose" => w.pose = number(line, key, value)?,
                    "lambda_nocs" => w.nocs = number(line, key, value)?,
                    "lambda_recon" => w.recon = number(line, key, value)?,
                    "lambda_mask" => w.mask = number(line, key, value)?,
                    "lambda_reg" => w.reg = number(line, key, value)?,
                    "beta" => w.beta = number(line, key, value)?,
                    _ => return Err(unknown()),
                }
                w.validate().map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            }
        }
    }
    cfg.icp.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ToolConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Load { path: path.to_path_buf(), msg: e.to_string() })?;
    parse_category_config(&text)
}
