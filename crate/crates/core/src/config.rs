//! Flat `key = value` pipeline configuration with strict key checking.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::cda::CdaDims;
use crate::error::{Error, Result};
use crate::fpn::FpnWidths;
use crate::geometry::HypothesisSpacing;
use crate::metrics::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    Learned,
    Photometric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub mode: FeatureMode,
    pub coarse_hypotheses: usize,
    pub fine_hypotheses: usize,
    pub spacing: HypothesisSpacing,
    /// Fine search half-width in units of the local coarse spacing.
    pub fine_radius_factor: f32,
    pub fpn: FpnWidths,
    pub cda: CdaDims,
    pub loss: LossWeights,
    pub seed: u64,
    pub tile_size: usize,
    pub source_views: usize,
    pub temperature: f32,
    pub photometric_temperature: f32,
    /// Half-width of the cost aggregation window in weight-free mode.
    pub bypass_radius: usize,
    pub photometric_opacity: f32,
    /// Isotropic Gaussian radius in pixels for weight-free clouds.
    pub photometric_scale: f32,
    pub mm_per_unit: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: FeatureMode::Learned,
            coarse_hypotheses: 64,
            fine_hypotheses: 8,
            spacing: HypothesisSpacing::UniformDepth,
            fine_radius_factor: 2.0,
            fpn: FpnWidths::default(),
            cda: CdaDims::default(),
            loss: LossWeights::default(),
            seed: 0,
            tile_size: 16,
            source_views: 3,
            temperature: 1.0,
            photometric_temperature: 1e-5,
            bypass_radius: 1,
            photometric_opacity: 0.99,
            photometric_scale: 0.25,
            mm_per_unit: 100.0,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        msg: format!("invalid value '{value}' for '{key}'"),
    })
}

impl PipelineConfig {
    pub fn photometric() -> Self {
        PipelineConfig {
            mode: FeatureMode::Photometric,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(Error::Config {
                    line,
                    msg: format!("expected 'key = value', found '{body}'"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key '{key}'"),
                });
            }
            cfg.set(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => {
                self.mode = match value {
                    "learned" => FeatureMode::Learned,
                    "photometric" => FeatureMode::Photometric,
                    _ => return Err(Error::Config { line, msg: format!("mode must be learned or photometric, got '{value}'") }),
                }
            }
            "spacing" => {
                self.spacing = match value {
                    "depth" => HypothesisSpacing::UniformDepth,
                    "inverse_depth" => HypothesisSpacing::UniformInverseDepth,
                    _ => return Err(Error::Config { line, msg: format!("spacing must be depth or inverse_depth, got '{value}'") }),
                }
            }
            "coarse_hypotheses" => self.coarse_hypotheses = parse(line, key, value)?,
            "fine_hypotheses" => self.fine_hypotheses = parse(line, key, value)?,
            "fine_radius_factor" => self.fine_radius_factor = parse(line, key, value)?,
            "fpn_coarse_width" => self.fpn.coarse = parse(line, key, value)?,
            "fpn_fine_width" => self.fpn.fine = parse(line, key, value)?,
            "cda_attention_dim" => self.cda.attention = parse(line, key, value)?,
            "gaussian_dim" => self.cda.output = parse(line, key, value)?,
            "beta_s" => self.loss.beta_s = parse(line, key, value)?,
            "beta_p" => self.loss.beta_p = parse(line, key, value)?,
            "gamma_coarse" => self.loss.gamma[0] = parse(line, key, value)?,
            "gamma_fine" => self.loss.gamma[1] = parse(line, key, value)?,
            "seed" => self.seed = parse(line, key, value)?,
            "tile_size" => self.tile_size = parse(line, key, value)?,
            "source_views" => self.source_views = parse(line, key, value)?,
            "temperature" => self.temperature = parse(line, key, value)?,
            "photometric_temperature" => self.photometric_temperature = parse(line, key, value)?,
            "bypass_radius" => self.bypass_radius = parse(line, key, value)?,
            "photometric_opacity" => self.photometric_opacity = parse(line, key, value)?,
            "photometric_scale" => self.photometric_scale = parse(line, key, value)?,
            "mm_per_unit" => self.mm_per_unit = parse(line, key, value)?,
            _ => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key '{key}'"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("config", msg));
        if self.coarse_hypotheses < 2 || self.fine_hypotheses < 2 {
            return bad("each stage needs at least 2 hypotheses");
        }
        if self.mode == FeatureMode::Learned && (self.coarse_hypotheses % 2 != 0 || self.fine_hypotheses % 2 != 0) {
            return bad("learned mode needs an even hypothesis count per stage");
        }
        if self.tile_size == 0 || self.source_views < 2 {
            return bad("tile_size must be positive and source_views at least 2");
        }
        if self.fpn.coarse == 0 || self.fpn.fine == 0 || self.cda.attention == 0 || self.cda.output == 0 {
            return bad("network widths must be positive");
        }
        let positive = [
            self.fine_radius_factor,
            self.temperature,
            self.photometric_temperature,
            self.photometric_opacity,
            self.photometric_scale,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(self.mm_per_unit > 0.0) {
            return bad("radius factor, temperatures, opacity, scale and mm_per_unit must be positive");
        }
        if self.photometric_opacity >= 1.0 {
            return bad("photometric_opacity must be below 1");
        }
        self.loss.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { line, msg } => Error::format(path, format!("line {line}"), msg),
            other => Error::format(path, "config", other.to_string()),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            FeatureMode::Learned => "learned",
            FeatureMode::Photometric => "photometric",
        };
        let spacing = match self.spacing {
            HypothesisSpacing::UniformDepth => "depth",
            HypothesisSpacing::UniformInverseDepth => "inverse_depth",
        };
        let _ = writeln!(s, "mode = {mode}");
        let _ = writeln!(s, "spacing = {spacing}");
        let _ = writeln!(s, "coarse_hypotheses = {}", self.coarse_hypotheses);
        let _ = writeln!(s, "fine_hypotheses = {}", self.fine_hypotheses);
        let _ = writeln!(s, "fine_radius_factor = {}", self.fine_radius_factor);
        let _ = writeln!(s, "fpn_coarse_width = {}", self.fpn.coarse);
        let _ = writeln!(s, "fpn_fine_width = {}", self.fpn.fine);
        let _ = writeln!(s, "cda_attention_dim = {}", self.cda.attention);
        let _ = writeln!(s, "gaussian_dim = {}", self.cda.output);
        let _ = writeln!(s, "beta_s = {}", self.loss.beta_s);
        let _ = writeln!(s, "beta_p = {}", self.loss.beta_p);
        let _ = writeln!(s, "gamma_coarse = {}", self.loss.gamma[0]);
        let _ = writeln!(s, "gamma_fine = {}", self.loss.gamma[1]);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "tile_size = {}", self.tile_size);
        let _ = writeln!(s, "source_views = {}", self.source_views);
        let _ = writeln!(s, "temperature = {}", self.temperature);
        let _ = writeln!(s, "photometric_temperature = {}", self.photometric_temperature);
        let _ = writeln!(s, "bypass_radius = {}", self.bypass_radius);
        let _ = writeln!(s, "photometric_opacity = {}", self.photometric_opacity);
        let _ = writeln!(s, "photometric_scale = {}", self.photometric_scale);
        let _ = writeln!(s, "mm_per_unit = {}", self.mm_per_unit);
        s
    }
}
