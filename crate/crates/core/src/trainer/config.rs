//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 0
//! epochs = 10
//! batch_size = 8
//! learning_rate = 0.05
//! optimizer = "momentum"        # or "sgd"
//! momentum = 0.9
//! poly_power = 0.0              # > 0 enables lr * (1 - step / total)^power
//! grad_clip = 5.0               # 0 disables clipping
//! alpha = 100.0
//! beta = 100.0
//! distance = "l1"               # l1 | l2 | smooth_l1
//! augmentations = ["flip_h"]     # one is drawn per sample
//! loss_layers = "0..4"          # defaults to every layer
//! cam_layers = "2..4"           # defaults to the last two layers
//! holdout = 0
//!
//! [vit]
//! patch_size = 4
//! grid = { h = 8, w = 8 }
//! ...
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AcrError, Result};
use crate::grid::SpatialTransform;
use crate::localization::LayerRange;
use crate::metrics::default_thresholds;
use crate::regularizer::{Distance, LossWeights, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::vit::ViTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub poly_power: f64,
    pub grad_clip: f64,
    pub alpha: f64,
    pub beta: f64,
    pub distance: Distance,
    pub augmentations: Vec<SpatialTransform>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_layers: Option<LayerRange>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cam_layers: Option<LayerRange>,
    /// Trailing samples kept out of training and scored every epoch.
    pub holdout: usize,
    pub vit: ViTConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Momentum,
            momentum: 0.9,
            poly_power: 0.0,
            grad_clip: 5.0,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            distance: Distance::L1,
            augmentations: vec![SpatialTransform::FlipH],
            loss_layers: None,
            cam_layers: None,
            holdout: 0,
            vit: ViTConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AcrError::Config(m));
        self.vit.validate()?;
        self.loss_weights().validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.poly_power >= 0.0 && self.grad_clip >= 0.0) {
            return bad("poly_power and grad_clip must be non-negative".into());
        }
        if self.augmentations.is_empty() {
            return bad("at least one augmentation is required".into());
        }
        self.loss_layers()?;
        self.cam_layers()?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            distance: self.distance,
        }
    }

    pub fn loss_layers(&self) -> Result<LayerRange> {
        let r = match self.loss_layers {
            Some(r) => r,
            None => LayerRange::all(self.vit.num_layers)?,
        };
        r.check(self.vit.num_layers)?;
        Ok(r)
    }

    pub fn cam_layers(&self) -> Result<LayerRange> {
        let r = match self.cam_layers {
            Some(r) => r,
            None => LayerRange::last(2, self.vit.num_layers)?,
        };
        r.check(self.vit.num_layers)?;
        Ok(r)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            layers: self.cam_layers()?,
            thresholds: default_thresholds(),
        })
    }

    pub fn learning_rate_at(&self, step: usize, total_steps: usize) -> f64 {
        if self.poly_power > 0.0 && total_steps > 0 {
            let frac = 1.0 - step as f64 / total_steps as f64;
            self.learning_rate * frac.max(0.0).powf(self.poly_power)
        } else {
            self.learning_rate
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| AcrError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AcrError::Format(e.to_string()))
    }
}

/// Which layers to fuse and which background thresholds to try.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub layers: LayerRange,
    pub thresholds: Vec<f64>,
}
