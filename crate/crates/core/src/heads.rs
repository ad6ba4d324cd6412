//! Per-point shape head and the point-cloud classifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MlpBnRelu, Mode, ParamStore, SharedMlp};
use crate::pointcloud::ShapeLabel;
use crate::tensor::{Graph, Scalar, Var};

/// Total scalar parameters held by a store.
pub fn count_parameters<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.count()
}

/// Shared MLP + batch norm + ReLU blocks, then a linear layer to 4 logits.
#[derive(Clone, Debug)]
pub struct DecompositionHead {
    pub layers: Vec<MlpBnRelu>,
    pub out: SharedMlp,
}

impl DecompositionHead {
    /// `widths` runs from the input width through the hidden widths; the
    /// final 4-way layer is added here.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::invalid(format!("bad head widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| MlpBnRelu::new(store, &format!("{name}.layer{i}"), w[0], w[1], rng))
            .collect();
        let last = *widths.last().expect("non-empty");
        let out = SharedMlp::new(store, &format!("{name}.out"), last, ShapeLabel::ALL.len(), rng);
        Ok(DecompositionHead { layers, out })
    }

    /// Logits `[.., 4]` for features `[.., F]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, store, h, mode)?;
        }
        self.out.forward(g, store, h)
    }
}

/// Row-wise argmax mapped to a label, ties to the lower label id.
pub fn predict_labels<T: Scalar>(logits: &[T]) -> Vec<ShapeLabel> {
    logits
        .chunks(ShapeLabel::ALL.len())
        .map(|row| ShapeLabel::from_index(argmax(row)))
        .collect()
}

/// Index of the largest element, first on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Width of the frozen per-point features fed to the head.
    pub feature_width: usize,
    /// 3 for coordinates only, 6 with normals.
    pub coord_width: usize,
    pub stage_widths: Vec<usize>,
    pub n_classes: usize,
}

impl ClassifierConfig {
    pub fn reference(n_classes: usize, use_normals: bool) -> Self {
        ClassifierConfig {
            feature_width: 512,
            coord_width: if use_normals { 6 } else { 3 },
            stage_widths: vec![256, 256, 128, 128],
            n_classes,
        }
    }

    /// Half-width stages for narrow backbones.
    pub fn desk(n_classes: usize, use_normals: bool, feature_width: usize) -> Self {
        ClassifierConfig {
            feature_width,
            coord_width: if use_normals { 6 } else { 3 },
            stage_widths: vec![128, 128, 64, 64],
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_width == 0
            || !matches!(self.coord_width, 3 | 6)
            || self.stage_widths.is_empty()
            || self.stage_widths.contains(&0)
            || self.n_classes < 2
        {
            return Err(Error::invalid(format!("bad classifier configuration {self:?}")));
        }
        Ok(())
    }
}

/// Stages that each see the previous features concatenated with the point
/// coordinates, a max-pool over points, and a linear layer to class logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub cfg: ClassifierConfig,
    pub stages: Vec<MlpBnRelu>,
    pub out: SharedMlp,
}

impl ClassifierHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: ClassifierConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut width = cfg.feature_width;
        let mut stages = Vec::new();
        for (i, &w) in cfg.stage_widths.iter().enumerate() {
            stages.push(MlpBnRelu::new(store, &format!("{name}.stage{i}"), width + cfg.coord_width, w, rng));
            width = w;
        }
        let out = SharedMlp::new(store, &format!("{name}.out"), width, cfg.n_classes, rng);
        Ok(ClassifierHead { cfg, stages, out })
    }

    /// `features` is `[B, N, F]`, `coords` `[B, N, 3 or 6]`; returns `[B, n_classes]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        features: Var,
        coords: Var,
        mode: Mode,
    ) -> Result<Var> {
        let fs = g.shape(features).to_vec();
        let cs = g.shape(coords).to_vec();
        if fs.len() != 3 || cs.len() != 3 || fs[..2] != cs[..2] || fs[2] != self.cfg.feature_width || cs[2] != self.cfg.coord_width {
            return Err(Error::Shape { op: "classifier_head", lhs: fs, rhs: cs });
        }
        let mut h = features;
        for stage in &self.stages {
            let joined = g.concat(&[h, coords], 2)?;
            h = stage.forward(g, store, joined, mode)?;
        }
        let pooled = g.max(h, 1)?;
        self.out.forward(g, store, pooled)
    }
}
