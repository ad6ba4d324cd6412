use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{BufferId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{BnStats, Graph, ParamId, Scalar, Tensor, Var};

/// Whether batch normalization uses batch statistics (and updates its running
/// estimates) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// He-normal initialization: samples from `Normal(0, sqrt(2 / fan_in))`.
pub fn he_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| T::from_f64(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches numel")
}

/// Per-point linear layer `y = x·Wᵀ + b`, applied identically to every row.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl SharedMlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        assert!(in_dim > 0 && out_dim > 0, "{name}: empty layer");
        let weight = store.add_param(format!("{name}.weight"), he_init(&[out_dim, in_dim], in_dim, rng));
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros([out_dim]));
        SharedMlp {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if g.shape(x).last() != Some(&self.in_dim) {
            return Err(Error::Shape {
                op: "shared_mlp",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.out_dim, self.in_dim],
            });
        }
        let w = store.bind(g, self.weight);
        let b = store.bind(g, self.bias);
        g.linear(x, w, Some(b))
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Batch normalization over every non-channel axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones([channels])),
            channels,
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        }
    }

    /// In train mode the running statistics move toward the batch statistics:
    /// `r ← (1 − momentum)·r + momentum·s`, with the unbiased batch variance.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        if g.shape(x).last() != Some(&self.channels) {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.channels],
            });
        }
        let gamma = store.bind(g, self.gamma);
        let beta = store.bind(g, self.beta);
        let eps = T::from_f64(self.eps);
        match mode {
            Mode::Train => {
                let rows = g.value(x).numel() / self.channels;
                let (y, stats) = g.batch_norm(x, gamma, beta, BnStats::Batch { eps })?;
                let (mean, var) = stats.expect("batch statistics");
                let m = T::from_f64(self.momentum);
                let keep = T::one() - m;
                let unbias = T::from_f64(rows as f64 / (rows - 1) as f64);
                for (r, &s) in store.buffer_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                    *r = keep * *r + m * s;
                }
                for (r, &s) in store.buffer_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                    *r = keep * *r + m * s * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.buffer(self.running_mean).data().to_vec();
                let var = store.buffer(self.running_var).data().to_vec();
                let (y, _) = g.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnStats::Fixed {
                        mean: &mean,
                        var: &var,
                        eps,
                    },
                )?;
                Ok(y)
            }
        }
    }
}

/// Shared MLP → batch norm → ReLU, the basic per-point block.
#[derive(Clone, Debug)]
pub struct MlpBnRelu {
    pub mlp: SharedMlp,
    pub bn: BatchNorm,
}

impl MlpBnRelu {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        MlpBnRelu {
            mlp: SharedMlp::new(store, name, in_dim, out_dim, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_dim),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let y = self.mlp.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, mode)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        let cfg = AttentionConfig { d_model, heads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible into {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub query: SharedMlp,
    pub key: SharedMlp,
    pub value: SharedMlp,
    pub output: SharedMlp,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(MultiHeadAttention {
            cfg,
            query: SharedMlp::new(store, &format!("{name}.query"), d, d, rng),
            key: SharedMlp::new(store, &format!("{name}.key"), d, d, rng),
            value: SharedMlp::new(store, &format!("{name}.value"), d, d, rng),
            output: SharedMlp::new(store, &format!("{name}.output"), d, d, rng),
        })
    }

    /// `x` is `[B, N, d_model]` (or `[N, d_model]`, treated as B = 1).
    ///
    /// Returns the projected output (same shape as `x`) and, with `record`,
    /// the attention weights `[B, h, N, N]`, each row a distribution over keys.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        record: bool,
    ) -> Result<(Var, Option<Tensor<T>>)> {
        self.cfg.validate()?;
        let in_shape = g.shape(x).to_vec();
        let (b, n) = match in_shape.as_slice() {
            [n, d] if *d == self.cfg.d_model => (1, *n),
            [b, n, d] if *d == self.cfg.d_model => (*b, *n),
            _ => {
                return Err(Error::Shape {
                    op: "multi_head_attention",
                    lhs: in_shape,
                    rhs: vec![self.cfg.d_model],
                })
            }
        };
        let flat = [b, n, self.cfg.d_model];
        let q = self.query.forward(g, store, x)?;
        // Scaling the queries is cheaper than scaling the N×N scores.
        let q = g.scale(q, T::from_f64(1.0 / (self.cfg.d_k() as f64).sqrt()));
        let q = g.reshape(q, &flat)?;
        let k = self.key.forward(g, store, x)?;
        let k = g.reshape(k, &flat)?;
        let v = self.value.forward(g, store, x)?;
        let v = g.reshape(v, &flat)?;
        let weights = if record {
            Some(g.attention_weights(q, k, self.cfg.heads)?)
        } else {
            None
        };
        let heads = g.attention(q, k, v, self.cfg.heads)?;
        let merged = g.reshape(heads, &in_shape)?;
        let out = self.output.forward(g, store, merged)?;
        Ok((out, weights))
    }
}

/// Two shared-MLP layers with a ReLU between: `d_model → d_ff → d_model`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub expand: SharedMlp,
    pub contract: SharedMlp,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            expand: SharedMlp::new(store, &format!("{name}.expand"), d_model, d_ff, rng),
            contract: SharedMlp::new(store, &format!("{name}.contract"), d_ff, d_model, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let hidden = self.expand.forward(g, store, x)?;
        let hidden = g.relu(hidden);
        self.contract.forward(g, store, hidden)
    }
}
