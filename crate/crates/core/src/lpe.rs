//! Local proximity encoding: per-point features pooled over each point's
//! k-nearest neighborhood.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighborhood::NeighborhoodIndex;
use crate::nn::{MlpBnRelu, Mode, ParamStore};
use crate::pointcloud::PointCloud;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LpeConfig {
    /// Width of the lifted per-point features.
    pub c: usize,
    /// Neighbors per point, the point itself included.
    pub k: usize,
    /// Output width.
    pub c_out: usize,
    /// Hidden widths of the neighbor MLP between its input and `c_out`.
    pub hidden: Vec<usize>,
    pub use_normals: bool,
}

impl LpeConfig {
    pub fn reference() -> Self {
        LpeConfig {
            c: 64,
            k: 32,
            c_out: 512,
            hidden: vec![128],
            use_normals: false,
        }
    }

    /// Per-point input width: coordinates, plus normals when used.
    pub fn input_width(&self) -> usize {
        if self.use_normals {
            6
        } else {
            3
        }
    }

    /// Width of the local geometry attached to every neighbor: offset, plus
    /// the neighbor's normal when used.
    pub fn geometry_width(&self) -> usize {
        self.input_width()
    }

    pub fn neighbor_input_width(&self) -> usize {
        self.geometry_width() + self.c
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.k == 0 || self.c_out == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid(format!("degenerate local encoder widths {self:?}")));
        }
        Ok(())
    }
}

/// A batch of clouds prepared for the encoder: per-point inputs, neighbor
/// rows into the flattened batch, and per-neighbor local geometry.
///
/// Each neighbor list is stored sorted by point index, so the result does not
/// depend on the order in which a [`NeighborhoodIndex`] lists neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct LpeInput<T = f32> {
    pub batch: usize,
    pub n: usize,
    pub k: usize,
    pub use_normals: bool,
    /// `[B·N, 3 or 6]`
    pub points: Tensor<T>,
    /// `B·N·K` rows into `points`.
    pub neighbors: Vec<usize>,
    /// `[B·N, K, 3 or 6]`
    pub geometry: Tensor<T>,
}

impl<T: Scalar> LpeInput<T> {
    pub fn new(items: &[(&PointCloud, &NeighborhoodIndex)], use_normals: bool) -> Result<Self> {
        let (first, nb0) = items
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let (n, k) = (first.len(), nb0.k());
        let width = if use_normals { 6 } else { 3 };
        let mut points = Vec::with_capacity(items.len() * n * width);
        let mut neighbors = Vec::with_capacity(items.len() * n * k);
        let mut geometry = Vec::with_capacity(items.len() * n * k * width);
        for (b, (cloud, nb)) in items.iter().enumerate() {
            if cloud.len() != n || nb.n() != n || nb.k() != k {
                return Err(Error::invalid(format!(
                    "batch item {b} has {} points and neighborhoods {}×{}, expected {n}×{k}",
                    cloud.len(),
                    nb.n(),
                    nb.k()
                )));
            }
            let normals = if use_normals {
                Some(cloud.normals().ok_or_else(|| {
                    Error::invalid(format!("batch item {b} has no normals"))
                })?)
            } else {
                None
            };
            let pts = cloud.points();
            for i in 0..n {
                points.extend(pts[i].iter().map(|&v| T::from_f64(v)));
                if let Some(ns) = normals {
                    points.extend(ns[i].iter().map(|&v| T::from_f64(v)));
                }
                let mut order: Vec<usize> = (0..k).collect();
                order.sort_by_key(|&j| nb.row(i)[j]);
                for j in order {
                    let src = nb.row(i)[j];
                    neighbors.push(b * n + src);
                    geometry.extend(nb.offset(i, j).iter().map(|&v| T::from_f64(v)));
                    if let Some(ns) = normals {
                        geometry.extend(ns[src].iter().map(|&v| T::from_f64(v)));
                    }
                }
            }
        }
        let rows = items.len() * n;
        Ok(LpeInput {
            batch: items.len(),
            n,
            k,
            use_normals,
            points: Tensor::new([rows, width], points)?,
            neighbors,
            geometry: Tensor::new([rows, k, width], geometry)?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> LpeInput<U> {
        LpeInput {
            batch: self.batch,
            n: self.n,
            k: self.k,
            use_normals: self.use_normals,
            points: self.points.cast(),
            neighbors: self.neighbors.clone(),
            geometry: self.geometry.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Lpe {
    pub cfg: LpeConfig,
    pub lift: MlpBnRelu,
    pub layers: Vec<MlpBnRelu>,
}

impl Lpe {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: LpeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let lift = MlpBnRelu::new(store, &format!("{name}.lift"), cfg.input_width(), cfg.c, rng);
        let mut widths = vec![cfg.neighbor_input_width()];
        widths.extend(&cfg.hidden);
        widths.push(cfg.c_out);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| MlpBnRelu::new(store, &format!("{name}.neighbor{i}"), w[0], w[1], rng))
            .collect();
        Ok(Lpe { cfg, lift, layers })
    }

    /// Returns `[B·N, c_out]` local descriptors.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        input: &LpeInput<T>,
        mode: Mode,
    ) -> Result<Var> {
        if input.k != self.cfg.k {
            return Err(Error::invalid(format!(
                "neighborhoods built with k = {}, encoder expects k = {}",
                input.k, self.cfg.k
            )));
        }
        if input.use_normals != self.cfg.use_normals {
            return Err(Error::invalid(format!(
                "input normals {} but encoder configured with normals {}",
                input.use_normals, self.cfg.use_normals
            )));
        }
        let rows = input.batch * input.n;
        let x = g.input(input.points.clone());
        let lifted = self.lift.forward(g, store, x, mode)?;
        let gathered = g.gather_rows(lifted, &input.neighbors, &[rows, input.k])?;
        let geometry = g.input(input.geometry.clone());
        let mut h = g.concat(&[geometry, gathered], 2)?;
        for layer in &self.layers {
            h = layer.forward(g, store, h, mode)?;
        }
        g.mean(h, 1)
    }
}
