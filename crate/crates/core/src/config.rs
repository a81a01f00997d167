//! Experiment configuration, read from strict JSON.

use crate::cra::CounterfactualMode;
use crate::data::{BackgroundMode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelShape;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub weights: u64,
    pub data: u64,
    pub counterfactual: u64,
}

/// Mechanism switches; crop enables the second, zoomed-in stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub fgf: bool,
    pub cra: bool,
    pub lls: bool,
    pub crop: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            fgf: true,
            cra: true,
            lls: true,
            crop: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticOptions {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub object_side_range: [f64; 2],
    pub background_mode: BackgroundMode,
    pub train_bias: f64,
    pub test_bias: f64,
    pub distractors: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            train_per_class: s.train_per_class,
            test_per_class: s.test_per_class,
            object_side_range: s.object_side_range,
            background_mode: s.background_mode,
            train_bias: s.train_bias,
            test_bias: s.test_bias,
            distractors: s.distractors,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticOptions),
    /// Class-per-subdirectory PPM folders.
    Folder { train: PathBuf, test: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic(SyntheticOptions::default())
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub warmup_epochs: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Backbone channel widths; the last is the feature depth.
    pub widths: Vec<usize>,
    /// Number of attention maps.
    pub parts: usize,
    pub gaussian_hidden: usize,
    /// Multiplier on the unit-norm pooled features before the classifier.
    pub bap_scale: f64,
    pub theta: f64,
    pub margin: f64,
    pub counterfactual_mode: CounterfactualMode,
    pub lambda_effect: f64,
    /// Weight of the term pulling the Gaussian centre toward the attention
    /// centroid.
    pub lambda_gaussian: f64,
    /// Backpropagate into the backbone through the pass that feeds the
    /// Gaussian head. Off by default: that pass then costs a forward only.
    pub fgf_backprop: bool,
    pub toggles: Toggles,
    pub seeds: Seeds,
    pub image_side: usize,
    pub num_classes: usize,
    pub data: DataSource,
    /// Evaluate every this many epochs; the final epoch is always evaluated.
    /// Zero evaluates only at the end.
    pub eval_every: u64,
    /// Write a checkpoint every this many epochs; zero writes only the final one.
    pub checkpoint_every: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 5e-2,
            lr_decay_factor: 0.1,
            warmup_epochs: 5,
            momentum: 0.9,
            weight_decay: 5e-4,
            widths: vec![8, 16, 16, 32],
            parts: 8,
            gaussian_hidden: 16,
            bap_scale: 10.0,
            theta: 0.5,
            margin: 0.1,
            counterfactual_mode: CounterfactualMode::UniformRandom,
            lambda_effect: 1.0,
            lambda_gaussian: 10.0,
            fgf_backprop: false,
            toggles: Toggles::default(),
            seeds: Seeds::default(),
            image_side: 48,
            num_classes: 8,
            data: DataSource::default(),
            eval_every: 0,
            checkpoint_every: 0,
            eval_batch_size: 100,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map_or_else(|| "<document>".to_string(), str::to_string);
            Error::Config { field, msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        positive("epochs", self.epochs as f64)?;
        positive("batch_size", self.batch_size as f64)?;
        positive("eval_batch_size", self.eval_batch_size as f64)?;
        positive("lr", self.lr)?;
        positive("lr_decay_factor", self.lr_decay_factor)?;
        positive("bap_scale", self.bap_scale)?;
        positive("parts", self.parts as f64)?;
        positive("gaussian_hidden", self.gaussian_hidden as f64)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if !(self.lambda_effect >= 0.0) {
            return Err(Error::config("lambda_effect", "must be nonnegative"));
        }
        if !(self.lambda_gaussian >= 0.0) {
            return Err(Error::config("lambda_gaussian", "must be nonnegative"));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::config("theta", format!("must lie in (0, 1), got {}", self.theta)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::config("margin", "must be nonnegative"));
        }
        if self.image_side == 0 || self.image_side % 4 != 0 {
            return Err(Error::config("image_side", format!("{} is not a positive multiple of 4", self.image_side)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least two classes"));
        }
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::config("widths", format!("{:?} needs at least two positive widths", self.widths)));
        }
        if let Some(spec) = self.synthetic_spec() {
            spec.validate().map_err(|e| Error::config("data", e.to_string()))?;
        }
        Ok(())
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            widths: self.widths.clone(),
            parts: self.parts,
            num_classes: self.num_classes,
            gaussian_hidden: self.gaussian_hidden,
        }
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match &self.data {
            DataSource::Synthetic(o) => Some(SyntheticSpec {
                num_classes: self.num_classes,
                image_side: self.image_side,
                train_per_class: o.train_per_class,
                test_per_class: o.test_per_class,
                object_side_range: o.object_side_range,
                background_mode: o.background_mode,
                train_bias: o.train_bias,
                test_bias: o.test_bias,
                distractors: o.distractors,
                seed: self.seeds.data,
            }),
            DataSource::Folder { .. } => None,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(TrainConfig::from_json("{}").unwrap(), TrainConfig::default());
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = TrainConfig::default();
        c.toggles.cra = false;
        c.data = DataSource::Folder {
            train: "a".into(),
            test: "b".into(),
        };
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = TrainConfig::from_json(r#"{"foo": 1}"#).unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        let err = TrainConfig::from_json(r#"{"toggles": {"fgf": true, "bar": 0}}"#).unwrap_err();
        assert!(err.to_string().contains("bar"), "{err}");
    }

    #[test]
    fn invalid_values_name_their_field() {
        for (doc, field) in [
            (r#"{"lr": 0}"#, "lr"),
            (r#"{"theta": 1.0}"#, "theta"),
            (r#"{"image_side": 30}"#, "image_side"),
            (r#"{"momentum": 1.5}"#, "momentum"),
            (r#"{"epochs": 0}"#, "epochs"),
        ] {
            match TrainConfig::from_json(doc).unwrap_err() {
                Error::Config { field: f, .. } => assert_eq!(f, field),
                e => panic!("{doc}: {e}"),
            }
        }
    }

    #[test]
    fn digest_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.lr = 0.01;
        assert_ne!(a.digest(), b.digest());
    }
}
