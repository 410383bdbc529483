use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Mining, PositiveSampling, Weighting};
use crate::model::OptimizerConfig;

/// Which inter-camera objective joins the intra-camera triplet loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum InterMode {
    /// Weighted cross-entropy through the classifier head.
    #[default]
    #[serde(rename = "c")]
    Classification,
    /// Weighted triplet loss.
    #[serde(rename = "d")]
    Discrimination,
    /// Both objectives summed.
    #[serde(rename = "cd")]
    Joint,
}

impl InterMode {
    pub fn uses_classification(self) -> bool {
        matches!(self, InterMode::Classification | InterMode::Joint)
    }

    pub fn uses_triplet(self) -> bool {
        matches!(self, InterMode::Discrimination | InterMode::Joint)
    }

    pub fn label(self) -> &'static str {
        match self {
            InterMode::Classification => "C",
            InterMode::Discrimination => "D",
            InterMode::Joint => "C+D",
        }
    }
}

/// Every knob of a training run. Unknown keys are rejected when
/// deserializing; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Persons per triplet batch.
    pub n_p: usize,
    /// Images per person in a triplet batch, and positives per anchor.
    pub n_k: usize,
    pub margin: f64,
    pub lambda: f64,
    /// Neighbours kept per affinity row.
    pub k: usize,
    /// Total epochs `T`.
    pub epochs: usize,
    /// Intra-camera-only epochs `T'`.
    pub warmup_epochs: usize,
    /// Images per classification batch before dividing among cameras.
    pub classification_images: usize,
    pub inter_mode: InterMode,
    pub weighting: Weighting,
    pub mining: Mining,
    pub mask_same_camera: bool,
    pub positive_sampling: PositiveSampling,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub lr_pretrained: f64,
    pub lr_new: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    /// Validation interval in epochs (0 = final epoch only).
    pub eval_every: usize,
    /// Checkpoint interval in epochs (0 = final epoch only).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        Self {
            n_p: 32,
            n_k: 4,
            margin: 0.3,
            lambda: 1.0,
            k: 6,
            epochs: 300,
            warmup_epochs: 100,
            classification_images: 64,
            inter_mode: InterMode::default(),
            weighting: Weighting::Aw,
            mining: Mining::Hard,
            mask_same_camera: true,
            positive_sampling: PositiveSampling::Random,
            hidden_dim: 64,
            embed_dim: 32,
            lr_pretrained: opt.lr_pretrained,
            lr_new: opt.lr_new,
            momentum: opt.momentum,
            weight_decay: 5e-3,
            decay_epoch: opt.decay_epoch,
            decay_factor: opt.decay_factor,
            eval_every: 10,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr_pretrained: self.lr_pretrained,
            lr_new: self.lr_new,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay_epoch: self.decay_epoch,
            decay_factor: self.decay_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_p", self.n_p),
            ("n_k", self.n_k),
            ("k", self.k),
            ("epochs", self.epochs),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("decay_epoch", self.decay_epoch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_p < 2 || self.n_k < 2 {
            return Err(Error::Config(format!(
                "triplet batches need n_p >= 2 and n_k >= 2, got {} x {}",
                self.n_p, self.n_k
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be finite and >= 0, got {}", self.margin)));
        }
        self.optimizer().validate()
    }

    /// `floor(classification_images / n_cameras)`; zero is rejected.
    pub fn images_per_camera(&self, n_cameras: usize) -> Result<usize> {
        let per = self.classification_images / n_cameras.max(1);
        if per == 0 {
            return Err(Error::Config(format!(
                "floor({} / {n_cameras}) = 0 images per camera in a classification batch",
                self.classification_images
            )));
        }
        Ok(per)
    }

    /// Applies `key=value` overrides; see [`apply_overrides`].
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        apply_overrides(self, overrides)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Applies `key=value` overrides to any flat serializable struct. Values
/// are parsed as JSON and fall back to a bare string; unknown keys are
/// rejected by name.
pub fn apply_overrides<'a, T: Serialize + DeserializeOwned>(
    base: &T,
    overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<T> {
    let mut value = serde_json::to_value(base)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Config("overrides need a struct-shaped config".into()))?;
    for (key, raw) in overrides {
        if !obj.contains_key(key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        obj.insert(key.to_string(), parsed);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}
