//! Flat TOML run configuration.

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::objective::LossWeights;
use crate::{Error, Result};

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "BAM_SEED";

/// Every knob of a training run. Unlisted keys are rejected; missing keys take
/// the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dim: usize,
    pub heads: usize,
    pub num_queries: usize,
    pub points: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Video feature width; 0 means take it from the data.
    pub video_dim: usize,
    /// Text feature width; 0 means take it from the data.
    pub text_dim: usize,

    pub margin: f64,
    pub temperature: f64,
    pub lambda_l1: f64,
    pub lambda_iou: f64,
    pub lambda_qual: f64,
    pub lambda_sal: f64,
    pub lambda_sal_unlabeled: f64,
    pub lambda_regul: f64,
    pub deep_supervision: bool,
    pub detach_quality_target: bool,

    pub lr: f64,
    /// "constant" or "cosine" (decays to zero at the last step).
    pub lr_schedule: String,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps (0: no limit).
    pub max_steps: usize,
    /// Evaluate (and maybe checkpoint) every this many epochs.
    pub eval_every: usize,
    pub seed: u64,
    /// "f32" or "f64".
    pub dtype: String,

    pub clip_stride: f64,
    /// Uniformly subsample longer videos to this many clips (0: keep all).
    pub max_clips: usize,
}

impl Default for Config {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            dim: 256,
            heads: 8,
            num_queries: 10,
            points: 3,
            enc_layers: 2,
            dec_layers: 2,
            video_dim: 0,
            text_dim: 0,
            margin: w.margin,
            temperature: w.temperature,
            lambda_l1: w.l1,
            lambda_iou: w.iou,
            lambda_qual: w.qual,
            lambda_sal: w.sal,
            lambda_sal_unlabeled: w.sal_unlabeled,
            lambda_regul: w.regul,
            deep_supervision: w.deep_supervision,
            detach_quality_target: w.detach_quality_target,
            lr: 1e-4,
            lr_schedule: "constant".into(),
            weight_decay: 1e-4,
            grad_clip: 0.1,
            dropout: 0.1,
            batch_size: 32,
            epochs: 100,
            max_steps: 0,
            eval_every: 10,
            seed: 0,
            dtype: "f32".into(),
            clip_stride: 2.0,
            max_clips: 0,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::from_toml(&std::fs::read_to_string(path)?)?;
        c.apply_env()?;
        Ok(c)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("num_queries", self.num_queries),
            ("points", self.points),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("eval_every", self.eval_every),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        let nonneg = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("margin", self.margin),
            ("lambda_l1", self.lambda_l1),
            ("lambda_iou", self.lambda_iou),
            ("lambda_qual", self.lambda_qual),
            ("lambda_sal", self.lambda_sal),
            ("lambda_sal_unlabeled", self.lambda_sal_unlabeled),
            ("lambda_regul", self.lambda_regul),
            ("clip_stride", self.clip_stride),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be a non-negative number, got {v}")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.dtype()?;
        if !matches!(self.lr_schedule.as_str(), "constant" | "cosine") {
            return Err(Error::Config(format!("unknown lr_schedule {:?}", self.lr_schedule)));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (0-based) of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule.as_str() {
            "cosine" if total > 0 => {
                let t = step as f64 / total as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
            _ => self.lr,
        }
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!("unsupported dtype {other:?}"))),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            l1: self.lambda_l1,
            iou: self.lambda_iou,
            qual: self.lambda_qual,
            sal: self.lambda_sal,
            sal_unlabeled: self.lambda_sal_unlabeled,
            regul: self.lambda_regul,
            margin: self.margin,
            temperature: self.temperature,
            deep_supervision: self.deep_supervision,
            detach_quality_target: self.detach_quality_target,
        }
    }

    /// Architecture, with feature widths filled from the data when unset.
    pub fn model_config(&self, video_dim: usize, text_dim: usize) -> Result<ModelConfig> {
        let pick = |cfg: usize, data: usize, what: &str| -> Result<usize> {
            if cfg != 0 && cfg != data {
                return Err(Error::DimMismatch { what: what.into(), expected: cfg, got: data });
            }
            Ok(data)
        };
        let m = ModelConfig {
            video_dim: pick(self.video_dim, video_dim, "video feature width")?,
            text_dim: pick(self.text_dim, text_dim, "text feature width")?,
            dim: self.dim,
            heads: self.heads,
            num_queries: self.num_queries,
            points: self.points,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
        };
        m.validate()?;
        Ok(m)
    }
}
