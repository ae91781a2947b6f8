//! Run configuration and its `key = value` text format.
//!
//! ```text
//! # desk-scale run
//! preset = desk
//! base_channels = 8
//! patch_scales = 1,3
//! lambda1 = 10
//! ```
//!
//! `preset` (when present) is applied before any other key regardless of
//! its position. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::simulate::FuseMode;
use crate::warpcore::Refinement;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub edge: f64,
    pub global: f64,
    pub frequency: f64,
    pub detail: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            edge: 10.0,
            global: 1.0,
            frequency: 0.1,
            detail: 10.0,
        }
    }
}

impl LossWeights {
    pub fn new(edge: f64, global: f64, frequency: f64, detail: f64) -> Result<Self> {
        let w = LossWeights {
            edge,
            global,
            frequency,
            detail,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.edge, self.global, self.frequency, self.detail];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {all:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MrbVariant {
    #[default]
    Gmlp,
    /// Deformable-convolution variant; reserved.
    Dc,
    /// Deformable-transformer variant; reserved.
    Dt,
}

impl FromStr for MrbVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmlp" => Ok(MrbVariant::Gmlp),
            "dc" => Ok(MrbVariant::Dc),
            "dt" => Ok(MrbVariant::Dt),
            other => Err(Error::Config(format!("unknown mrb_variant {other:?}"))),
        }
    }
}

/// Everything that determines the parameter layout and forward semantics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub pyramid_depth: usize,
    pub base_channels: usize,
    pub correlation_range: usize,
    pub patch_scales: Vec<usize>,
    pub no_mrb: bool,
    pub one_way_warp: bool,
    pub mrb_variant: MrbVariant,
    pub refinement: Refinement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            pyramid_depth: 2,
            base_channels: 16,
            correlation_range: 1,
            patch_scales: vec![1, 3],
            no_mrb: false,
            one_way_warp: false,
            mrb_variant: MrbVariant::Gmlp,
            refinement: Refinement::Multiplicative,
        }
    }
}

impl ModelConfig {
    pub fn channels_at(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.pyramid_depth - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pyramid_depth < 1 {
            return bad("pyramid_depth must be ≥ 1".into());
        }
        if self.base_channels < 1 {
            return bad("base_channels must be ≥ 1".into());
        }
        if self.correlation_range < 1 {
            return bad("correlation_range must be ≥ 1".into());
        }
        if self.patch_scales.is_empty() || self.patch_scales.contains(&0) {
            return bad(format!("patch_scales must be non-empty and positive, got {:?}", self.patch_scales));
        }
        Ok(())
    }

    /// Hex SHA-256 over the fields that define the parameter layout and the
    /// forward semantics.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub patch_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; `None` runs every epoch.
    pub max_steps: Option<usize>,
    pub lr_start: f64,
    pub lr_end: f64,
    pub loss_weights: LossWeights,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub rng_seed: u64,
    pub fuser: FuseMode,
    /// Apply flips/90° rotations to the infrared image only instead of the
    /// whole pair.
    pub deform_only_ir: bool,
    /// Initial logit of the misregistration head.
    pub mask_logit_init: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::full()
    }
}

impl RunConfig {
    /// Full-scale training settings.
    pub fn full() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            patch_size: 256,
            batch_size: 20,
            epochs: 5000,
            max_steps: None,
            lr_start: 2e-4,
            lr_end: 1e-6,
            loss_weights: LossWeights::default(),
            grad_clip: Some(1.0),
            rng_seed: 0,
            fuser: FuseMode::Max,
            deform_only_ir: false,
            mask_logit_init: 2.0,
        }
    }

    /// Minutes-on-a-CPU settings for ≤32 synthetic 64×64 samples.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig {
                base_channels: 8,
                ..ModelConfig::default()
            },
            patch_size: 64,
            batch_size: 8,
            epochs: 50,
            max_steps: Some(200),
            lr_start: 5e-3,
            lr_end: 1e-5,
            ..RunConfig::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(RunConfig::full()),
            "desk" => Ok(RunConfig::desk()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.patch_size % self.model.divisor() != 0 {
            return bad(format!(
                "patch_size {} must be a positive multiple of {}",
                self.patch_size,
                self.model.divisor()
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return bad(format!(
                "need lr_start > lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.loss_weights.validate()
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        fn parse_bool(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
            }
        }
        fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',').map(|p| parse(key, p.trim())).collect()
        }
        let v = value.trim();
        match key {
            "preset" => *self = RunConfig::preset(v)?,
            "pyramid_depth" | "layers" => self.model.pyramid_depth = parse(key, v)?,
            "base_channels" => self.model.base_channels = parse(key, v)?,
            "correlation_range" => self.model.correlation_range = parse(key, v)?,
            "patch_scales" => self.model.patch_scales = parse_list(key, v)?,
            "no_mrb" => self.model.no_mrb = parse_bool(key, v)?,
            "one_way_warp" => self.model.one_way_warp = parse_bool(key, v)?,
            "mrb_variant" => self.model.mrb_variant = v.parse()?,
            "additive_refine" => {
                self.model.refinement = if parse_bool(key, v)? {
                    Refinement::Additive
                } else {
                    Refinement::Multiplicative
                }
            }
            "patch_size" => self.patch_size = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => {
                self.max_steps = match v {
                    "none" | "0" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "lr_start" => self.lr_start = parse(key, v)?,
            "lr_end" => self.lr_end = parse(key, v)?,
            "lambda1" => self.loss_weights.edge = parse(key, v)?,
            "lambda2" => self.loss_weights.global = parse(key, v)?,
            "lambda3" => self.loss_weights.frequency = parse(key, v)?,
            "lambda4" => self.loss_weights.detail = parse(key, v)?,
            "loss_weights" => {
                let w: Vec<f64> = parse_list(key, v)?;
                if w.len() != 4 {
                    return Err(Error::Config(format!("loss_weights needs 4 values, got {}", w.len())));
                }
                self.loss_weights = LossWeights::new(w[0], w[1], w[2], w[3])?;
            }
            "grad_clip" => {
                self.grad_clip = match v {
                    "none" | "off" | "0" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "rng_seed" | "seed" => self.rng_seed = parse(key, v)?,
            "fuser" => self.fuser = v.parse()?,
            "deform_only_ir" => self.deform_only_ir = parse_bool(key, v)?,
            "mask_logit_init" => self.mask_logit_init = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines on top of the full-scale preset.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::full();
        if let Some((_, preset)) = pairs.iter().find(|(k, _)| k == "preset") {
            cfg = RunConfig::preset(preset)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_kv_text(&text)
    }

    /// Render as `key = value` lines accepted by [`RunConfig::from_kv_text`].
    pub fn to_kv_text(&self) -> String {
        let m = &self.model;
        let list = |v: &[usize]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let w = &self.loss_weights;
        [
            format!("pyramid_depth = {}", m.pyramid_depth),
            format!("base_channels = {}", m.base_channels),
            format!("correlation_range = {}", m.correlation_range),
            format!("patch_scales = {}", list(&m.patch_scales)),
            format!("no_mrb = {}", m.no_mrb),
            format!("one_way_warp = {}", m.one_way_warp),
            format!("mrb_variant = {}", serde_json::to_string(&m.mrb_variant).unwrap().trim_matches('"')),
            format!("additive_refine = {}", m.refinement == Refinement::Additive),
            format!("patch_size = {}", self.patch_size),
            format!("batch_size = {}", self.batch_size),
            format!("epochs = {}", self.epochs),
            format!("max_steps = {}", opt(self.max_steps.map(|s| s.to_string()))),
            format!("lr_start = {:e}", self.lr_start),
            format!("lr_end = {:e}", self.lr_end),
            format!("loss_weights = {},{},{},{}", w.edge, w.global, w.frequency, w.detail),
            format!("grad_clip = {}", opt(self.grad_clip.map(|c| c.to_string()))),
            format!("rng_seed = {}", self.rng_seed),
            format!("fuser = {}", self.fuser),
            format!("deform_only_ir = {}", self.deform_only_ir),
            format!("mask_logit_init = {}", self.mask_logit_init),
        ]
        .join("\n")
            + "\n"
    }
}
