//! Stacked self-attention encoders over all points of a cloud.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, BatchNorm, FeedForward, Mode, MultiHeadAttention, ParamStore};
use crate::pointcloud::PointCloud;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AfeConfig {
    pub n_encoders: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl AfeConfig {
    pub fn reference() -> Self {
        AfeConfig {
            n_encoders: 3,
            d_model: 512,
            heads: 4,
            d_ff: 1024,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            heads: self.heads,
        }
    }

    pub fn d_k(&self) -> usize {
        self.attention().d_k()
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.d_ff == 0 {
            return Err(Error::invalid("feed-forward width must be positive"));
        }
        Ok(())
    }
}

/// One encoder: `x ← BN(x + MHA(x))`, then `x ← BN(x + FFN(x))`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub attention: MultiHeadAttention,
    pub norm1: BatchNorm,
    pub ffn: FeedForward,
    pub norm2: BatchNorm,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &AfeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Encoder {
            attention: MultiHeadAttention::new(store, &format!("{name}.attention"), cfg.attention(), rng)?,
            norm1: BatchNorm::new(store, &format!("{name}.norm1"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff, rng),
            norm2: BatchNorm::new(store, &format!("{name}.norm2"), cfg.d_model),
        })
    }

    /// Returns the encoded features and, with `record`, the attention
    /// weights `[B, h, N, N]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
        record: bool,
    ) -> Result<(Var, Option<Tensor<T>>)> {
        let (att, weights) = self.attention.forward(g, store, x, record)?;
        let x = g.add(x, att)?;
        let x = self.norm1.forward(g, store, x, mode)?;
        let f = self.ffn.forward(g, store, x)?;
        let x = g.add(x, f)?;
        let x = self.norm2.forward(g, store, x, mode)?;
        Ok((x, weights))
    }
}

/// Attention weights of one head of one encoder for one cloud of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub encoder: usize,
    pub head: usize,
    pub batch: usize,
    pub n: usize,
    /// Row-major `n × n`; row `i` is the distribution of query `i` over keys.
    pub weights: Vec<f32>,
}

impl AttentionRecord {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }
}

#[derive(Clone, Debug)]
pub struct Afe {
    pub cfg: AfeConfig,
    pub encoders: Vec<Encoder>,
}

impl Afe {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: AfeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoders = (0..cfg.n_encoders)
            .map(|e| Encoder::new(store, &format!("{name}.encoder{e}"), &cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Afe { cfg, encoders })
    }

    /// `x` is `[B, N, d_model]`. With `record`, every head of every encoder
    /// is copied out for every cloud.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
        record: bool,
    ) -> Result<(Var, Vec<AttentionRecord>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.d_model {
            return Err(Error::Shape {
                op: "attention_encoder",
                lhs: shape,
                rhs: vec![self.cfg.d_model],
            });
        }
        let (b, n, h) = (shape[0], shape[1], self.cfg.heads);
        let mut records = Vec::new();
        let mut x = x;
        for (e, enc) in self.encoders.iter().enumerate() {
            let (y, weights) = enc.forward(g, store, x, mode, record)?;
            if let Some(weights) = weights {
                let w = weights.data();
                for bi in 0..b {
                    for hi in 0..h {
                        let start = (bi * h + hi) * n * n;
                        records.push(AttentionRecord {
                            encoder: e,
                            head: hi,
                            batch: bi,
                            n,
                            weights: w[start..start + n * n].iter().map(|v| v.as_f64() as f32).collect(),
                        });
                    }
                }
            }
            x = y;
        }
        Ok((x, records))
    }
}

/// For each head of `encoder` (0-based) on batch item 0, the `top` largest
/// weights in row `query`, in descending order with ties to the lower index.
pub fn top_attention(
    records: &[AttentionRecord],
    query: usize,
    encoder: usize,
    top: usize,
) -> Result<Vec<Vec<(usize, f32)>>> {
    let mut heads: Vec<&AttentionRecord> = records
        .iter()
        .filter(|r| r.encoder == encoder && r.batch == 0)
        .collect();
    if heads.is_empty() {
        return Err(Error::invalid(format!("no attention recorded for encoder {encoder}")));
    }
    heads.sort_by_key(|r| r.head);
    let n = heads[0].n;
    if query >= n {
        return Err(Error::Index { op: "top_attention", index: query, len: n });
    }
    if top == 0 || top > n {
        return Err(Error::invalid(format!("top = {top} must lie in 1..={n}")));
    }
    Ok(heads
        .iter()
        .map(|r| {
            let row = r.row(query);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order.into_iter().take(top).map(|j| (j, row[j])).collect()
        })
        .collect())
}

/// CSV with header `encoder,head,rank,point_index,weight`, one row per
/// selected point per head.
pub fn attention_csv(encoder: usize, tops: &[Vec<(usize, f32)>]) -> String {
    let mut out = String::from("encoder,head,rank,point_index,weight\n");
    for (head, list) in tops.iter().enumerate() {
        for (rank, (idx, w)) in list.iter().enumerate() {
            let _ = writeln!(out, "{encoder},{head},{rank},{idx},{w:.8}");
        }
    }
    out
}

/// ASCII PLY of `cloud` for one head: selected points in red shaded by
/// weight, the rest gray, the query point yellow with `query` set to 1.
pub fn attention_ply(cloud: &PointCloud, query: usize, top: &[(usize, f32)]) -> String {
    let n = cloud.len();
    let mut color = vec![[160u8, 160, 160]; n];
    let max = top.first().map_or(1.0, |t| t.1.max(f32::MIN_POSITIVE));
    for &(i, w) in top {
        let s = (w / max).clamp(0.0, 1.0);
        color[i] = [255, (200.0 * (1.0 - s)) as u8, (200.0 * (1.0 - s)) as u8];
    }
    color[query] = [255, 255, 0];
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nproperty uchar query\nend_header\n"
    );
    for (i, p) in cloud.points().iter().enumerate() {
        let [r, g, b] = color[i];
        let _ = writeln!(
            out,
            "{:.6} {:.6} {:.6} {r} {g} {b} {}",
            p[0],
            p[1],
            p[2],
            u8::from(i == query)
        );
    }
    out
}
