//! Two-layer MLP embedding network, linear classifier head and momentum SGD.
//!
//! Gradients are closed-form. `backward` always returns the gradient of the
//! *sum* over the batch, so callers control the reduction.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `v = W2 relu(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub inputs: Array2<f64>,
    pub pre_activation: Array2<f64>,
    pub hidden: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub inputs: Option<Array2<f64>>,
}

impl ModelGrads {
    pub fn zeros_like(model: &EmbeddingModel) -> Self {
        Self {
            w1: Array2::zeros(model.w1.raw_dim()),
            b1: Array1::zeros(model.b1.raw_dim()),
            w2: Array2::zeros(model.w2.raw_dim()),
            b2: Array1::zeros(model.b2.raw_dim()),
            inputs: None,
        }
    }

    /// Adds the parameter gradients of `other`; input gradients are dropped.
    pub fn accumulate(&mut self, other: &ModelGrads) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }

    pub fn scale(&mut self, factor: f64) {
        self.w1 *= factor;
        self.b1 *= factor;
        self.w2 *= factor;
        self.b2 *= factor;
    }
}

fn he_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let std = (2.0 / cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

impl EmbeddingModel {
    /// He fan-in initialization for weights, zero biases.
    pub fn new(d_in: usize, hidden: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: he_matrix(hidden, d_in, rng),
            b1: Array1::zeros(hidden),
            w2: he_matrix(embed_dim, hidden, rng),
            b2: Array1::zeros(embed_dim),
        }
    }

    pub fn zeros(d_in: usize, hidden: usize, embed_dim: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, d_in)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((embed_dim, hidden)),
            b2: Array1::zeros(embed_dim),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.d_in() {
            return Err(Error::Dimension {
                what: "model input",
                expected: self.d_in(),
                got: x.len(),
            });
        }
        let row = x.insert_axis(Axis(0));
        Ok(self.forward_batch(row)?.row(0).to_owned())
    }

    /// Embeds each row of `x`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.d_in() {
            return Err(Error::Dimension {
                what: "model input",
                expected: self.d_in(),
                got: x.ncols(),
            });
        }
        let pre_activation = x.dot(&self.w1.t()) + &self.b1;
        let hidden = pre_activation.mapv(relu);
        let output = hidden.dot(&self.w2.t()) + &self.b2;
        Ok(ForwardCache {
            inputs: x.to_owned(),
            pre_activation,
            hidden,
            output,
        })
    }

    /// Exact gradients of `sum_i <upstream_i, v_i>` with respect to every
    /// parameter (and optionally the inputs).
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>, input_grads: bool) -> Result<ModelGrads> {
        if upstream.dim() != cache.output.dim() {
            return Err(Error::Contract(format!(
                "upstream gradient shape {:?} does not match output shape {:?}",
                upstream.dim(),
                cache.output.dim()
            )));
        }
        let w2 = upstream.t().dot(&cache.hidden);
        let b2 = upstream.sum_axis(Axis(0));
        let mut g_hidden = upstream.dot(&self.w2);
        ndarray::Zip::from(&mut g_hidden)
            .and(&cache.pre_activation)
            .for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        let w1 = g_hidden.t().dot(&cache.inputs);
        let b1 = g_hidden.sum_axis(Axis(0));
        let inputs = input_grads.then(|| g_hidden.dot(&self.w1));
        Ok(ModelGrads { w1, b1, w2, b2, inputs })
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Fully connected layer producing one score per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    pub fn new(classes: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: he_matrix(classes, embed_dim, rng),
            bias: Array1::zeros(classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn scores(&self, embeddings: ArrayView2<f64>) -> Result<Array2<f64>> {
        if embeddings.ncols() != self.embed_dim() {
            return Err(Error::Dimension {
                what: "classifier input",
                expected: self.embed_dim(),
                got: embeddings.ncols(),
            });
        }
        Ok(embeddings.dot(&self.weight.t()) + &self.bias)
    }

    /// Returns parameter gradients and the gradient with respect to the
    /// embeddings, for upstream `grad_scores` (batch x classes).
    pub fn backward(&self, embeddings: ArrayView2<f64>, grad_scores: ArrayView2<f64>) -> Result<(HeadGrads, Array2<f64>)> {
        if grad_scores.nrows() != embeddings.nrows() || grad_scores.ncols() != self.num_classes() {
            return Err(Error::Contract(format!(
                "score gradient shape {:?} does not match batch {} x classes {}",
                grad_scores.dim(),
                embeddings.nrows(),
                self.num_classes()
            )));
        }
        let grads = HeadGrads {
            weight: grad_scores.t().dot(&embeddings),
            bias: grad_scores.sum_axis(Axis(0)),
        };
        Ok((grads, grad_scores.dot(&self.weight)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Learning rate of the embedding body.
    pub lr_pretrained: f64,
    /// Learning rate of the classifier head.
    pub lr_new: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_pretrained: 0.1,
            lr_new: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            decay_epoch: 200,
            decay_factor: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_pretrained > 0.0 && self.lr_new > 0.0) {
            return Err(Error::Config("learning rates must be strictly positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.decay_factor > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("decay_factor must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }

    /// `(body, head)` learning rates for a 1-based epoch.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        if epoch >= self.decay_epoch {
            (self.lr_pretrained * self.decay_factor, self.lr_new * self.decay_factor)
        } else {
            (self.lr_pretrained, self.lr_new)
        }
    }
}

/// Momentum buffers, `v <- mu v + g; theta <- theta - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: OptimizerConfig,
    pub velocity: Option<ModelGrads>,
    pub head_velocity: Option<HeadGrads>,
}

pub struct Gradients<'a> {
    pub model: &'a ModelGrads,
    pub head: Option<&'a HeadGrads>,
}

impl Sgd {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            velocity: None,
            head_velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut EmbeddingModel, head: &mut ClassifierHead, grads: Gradients<'_>, epoch: usize) -> Result<()> {
        let g = grads.model;
        for (name, finite) in [
            ("w1", g.w1.iter().all(|v| v.is_finite())),
            ("b1", g.b1.iter().all(|v| v.is_finite())),
            ("w2", g.w2.iter().all(|v| v.is_finite())),
            ("b2", g.b2.iter().all(|v| v.is_finite())),
        ] {
            if !finite {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        if let Some(h) = grads.head {
            if !h.weight.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient("head.weight"));
            }
            if !h.bias.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient("head.bias"));
            }
        }

        let (lr_body, lr_head) = self.config.learning_rates(epoch);
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        let vel = self.velocity.get_or_insert_with(|| ModelGrads::zeros_like(model));
        update(&mut model.w1.view_mut(), &mut vel.w1.view_mut(), &g.w1.view(), lr_body, mu, wd);
        update1(&mut model.b1, &mut vel.b1, &g.b1, lr_body, mu, wd);
        update(&mut model.w2.view_mut(), &mut vel.w2.view_mut(), &g.w2.view(), lr_body, mu, wd);
        update1(&mut model.b2, &mut vel.b2, &g.b2, lr_body, mu, wd);

        if let Some(h) = grads.head {
            let hv = self.head_velocity.get_or_insert_with(|| HeadGrads {
                weight: Array2::zeros(head.weight.raw_dim()),
                bias: Array1::zeros(head.bias.raw_dim()),
            });
            update(&mut head.weight.view_mut(), &mut hv.weight.view_mut(), &h.weight.view(), lr_head, mu, wd);
            update1(&mut head.bias, &mut hv.bias, &h.bias, lr_head, mu, wd);
        }
        Ok(())
    }
}

fn update(
    param: &mut ndarray::ArrayViewMut2<f64>,
    vel: &mut ndarray::ArrayViewMut2<f64>,
    grad: &ArrayView2<f64>,
    lr: f64,
    mu: f64,
    wd: f64,
) {
    ndarray::Zip::from(param).and(vel).and(grad).for_each(|p, v, &g| {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    });
}

fn update1(param: &mut Array1<f64>, vel: &mut Array1<f64>, grad: &Array1<f64>, lr: f64, mu: f64, wd: f64) {
    ndarray::Zip::from(param).and(vel).and(grad).for_each(|p, v, &g| {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    });
}
