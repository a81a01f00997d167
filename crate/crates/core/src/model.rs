//! The full network: backbone, Gaussian head, attention head, classifier.

use crate::attention::{AttentionHead, BoundAttentionHead};
use crate::backbone::{BackboneWeights, BoundBackbone, LayerSpec};
use crate::error::{Error, Result};
use crate::fgf::{BoundGaussianHead, GaussianHead};
use crate::nn::{BatchNorm, Binder, BoundLinear, Linear};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    pub widths: Vec<usize>,
    pub parts: usize,
    pub num_classes: usize,
    pub gaussian_hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: BackboneWeights,
    pub gaussian: GaussianHead,
    pub attention: AttentionHead,
    /// Shared by both stages and by the counterfactual branch.
    pub classifier: Linear,
}

pub struct BoundModel {
    pub backbone: BoundBackbone,
    pub gaussian: BoundGaussianHead,
    pub attention: BoundAttentionHead,
    pub classifier: BoundLinear,
}

impl Model {
    pub fn new(shape: &ModelShape, seed: u64) -> Result<Self> {
        if shape.num_classes < 2 {
            return Err(Error::invalid("model", "need at least two classes"));
        }
        let spec = LayerSpec::new(shape.widths.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = BackboneWeights::init_with(&spec, &mut rng);
        let c = spec.out_channels();
        let gaussian = GaussianHead::new(c, shape.gaussian_hidden, &mut rng);
        let attention = AttentionHead::new(c, shape.parts, &mut rng)?;
        let classifier = Linear::new(shape.parts * c, shape.num_classes, &mut rng);
        Ok(Self {
            backbone,
            gaussian,
            attention,
            classifier,
        })
    }

    /// Binds every parameter, in [`Model::named_params`] order.
    pub fn bind(&self, b: &mut Binder) -> BoundModel {
        BoundModel {
            backbone: self.backbone.bind(b),
            gaussian: self.gaussian.bind(b),
            attention: self.attention.bind(b),
            classifier: self.classifier.bind(b),
        }
    }

    /// Every trainable array with its canonical name, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.backbone.named_params();
        v.extend(self.gaussian.named_params());
        v.extend(self.attention.named_params());
        v.push(("classifier.weight".into(), &self.classifier.weight));
        v.push(("classifier.bias".into(), &self.classifier.bias));
        v
    }

    /// Same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.backbone.params_mut();
        v.extend(self.gaussian.params_mut());
        v.extend(self.attention.params_mut());
        v.push(&mut self.classifier.weight);
        v.push(&mut self.classifier.bias);
        v
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn norms(&self) -> Vec<(String, &BatchNorm)> {
        let mut v: Vec<(String, &BatchNorm)> = self
            .backbone
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("backbone.{i}"), &b.norm))
            .collect();
        v.push(("attention".into(), &self.attention.norm));
        v
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut v: Vec<&mut BatchNorm> = self.backbone.blocks.iter_mut().map(|b| &mut b.norm).collect();
        v.push(&mut self.attention.norm);
        v
    }

    /// Batch-norm running statistics as named vectors.
    pub fn named_stats(&self) -> Vec<(String, &[f64])> {
        self.norms()
            .into_iter()
            .flat_map(|(n, bn)| {
                [
                    (format!("{n}.running_mean"), bn.running_mean.as_slice()),
                    (format!("{n}.running_var"), bn.running_var.as_slice()),
                ]
            })
            .collect()
    }

    /// Same order as [`Model::named_stats`].
    pub fn stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.norms_mut()
            .into_iter()
            .flat_map(|bn| [&mut bn.running_mean, &mut bn.running_var])
            .collect()
    }
}
