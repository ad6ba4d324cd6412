//! Assembled networks: the per-point decomposer and the classifier that
//! reads its frozen features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afe::{Afe, AfeConfig, AttentionRecord};
use crate::error::{Error, Result};
use crate::heads::{predict_labels, ClassifierConfig, ClassifierHead, DecompositionHead};
use crate::lpe::{Lpe, LpeConfig, LpeInput};
use crate::neighborhood::build_neighborhoods;
use crate::nn::{Mode, ParamStore};
use crate::pointcloud::{PointCloud, ShapeLabel};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecomposerConfig {
    pub lpe: LpeConfig,
    pub afe: AfeConfig,
    /// Hidden widths of the shape head after the encoder width.
    pub head_hidden: Vec<usize>,
}

impl DecomposerConfig {
    /// Full-size widths: 64-wide lifted features, 32 neighbors, 512-wide
    /// encoders with 4 heads, head 512→256→128→4.
    pub fn reference() -> Self {
        DecomposerConfig {
            lpe: LpeConfig::reference(),
            afe: AfeConfig::reference(),
            head_hidden: vec![256, 128],
        }
    }

    /// Narrow widths that train in minutes on one core.
    pub fn desk(use_normals: bool) -> Self {
        DecomposerConfig {
            lpe: LpeConfig {
                c: 32,
                k: 16,
                c_out: 64,
                hidden: vec![],
                use_normals,
            },
            afe: AfeConfig {
                n_encoders: 3,
                d_model: 64,
                heads: 4,
                d_ff: 128,
            },
            head_hidden: vec![32, 16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lpe.validate()?;
        self.afe.validate()?;
        if self.lpe.c_out != self.afe.d_model {
            return Err(Error::invalid(format!(
                "local encoder width {} differs from attention width {}",
                self.lpe.c_out, self.afe.d_model
            )));
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::invalid("zero-width head layer"));
        }
        Ok(())
    }

    fn head_widths(&self) -> Vec<usize> {
        std::iter::once(self.afe.d_model).chain(self.head_hidden.iter().copied()).collect()
    }
}

pub struct DecomposerOutput {
    /// `[B, N, d_model]` encoder features.
    pub features: Var,
    /// `[B·N, 4]` shape logits.
    pub logits: Var,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct Decomposer<T = f32> {
    pub cfg: DecomposerConfig,
    pub store: ParamStore<T>,
    pub lpe: Lpe,
    pub afe: Afe,
    pub head: DecompositionHead,
}

impl<T: Scalar> Decomposer<T> {
    pub fn new(cfg: DecomposerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lpe = Lpe::new(&mut store, "lpe", cfg.lpe.clone(), &mut rng)?;
        let afe = Afe::new(&mut store, "afe", cfg.afe, &mut rng)?;
        let head = DecompositionHead::new(&mut store, "head", &cfg.head_widths(), &mut rng)?;
        Ok(Decomposer { cfg, store, lpe, afe, head })
    }

    pub fn k(&self) -> usize {
        self.cfg.lpe.k
    }

    pub fn use_normals(&self) -> bool {
        self.cfg.lpe.use_normals
    }

    /// The same weights evaluated with a different neighborhood size.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        let mut out = self.clone();
        out.cfg.lpe.k = k;
        out.lpe.cfg.k = k;
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Decomposer<U> {
        Decomposer {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            lpe: self.lpe.clone(),
            afe: self.afe.clone(),
            head: self.head.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Build neighborhoods at this model's `k` and pack the clouds into one batch.
    pub fn prepare(&self, clouds: &[&PointCloud]) -> Result<LpeInput<T>> {
        let nbs = clouds
            .iter()
            .map(|c| build_neighborhoods(c, self.k()))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<_> = clouds.iter().copied().zip(nbs.iter()).collect();
        LpeInput::new(&items, self.use_normals())
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        input: &LpeInput<T>,
        mode: Mode,
        record: bool,
    ) -> Result<DecomposerOutput> {
        let local = self.lpe.forward(g, &mut self.store, input, mode)?;
        let local = g.reshape(local, &[input.batch, input.n, self.cfg.lpe.c_out])?;
        let (features, attention) = self.afe.forward(g, &mut self.store, local, mode, record)?;
        let logits = self.head.forward(g, &mut self.store, features, mode)?;
        let logits = g.reshape(logits, &[input.batch * input.n, ShapeLabel::ALL.len()])?;
        Ok(DecomposerOutput { features, logits, attention })
    }

    /// Eval-mode labels for one cloud.
    pub fn predict(&mut self, cloud: &PointCloud) -> Result<Vec<ShapeLabel>> {
        let input = self.prepare(&[cloud])?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &input, Mode::Eval, false)?;
        Ok(predict_labels(g.value(out.logits).data()))
    }

    /// Eval-mode labels and attention records for one cloud.
    pub fn predict_with_attention(&mut self, cloud: &PointCloud) -> Result<(Vec<ShapeLabel>, Vec<AttentionRecord>)> {
        let input = self.prepare(&[cloud])?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &input, Mode::Eval, true)?;
        Ok((predict_labels(g.value(out.logits).data()), out.attention))
    }

    /// Eval-mode encoder features `[N, d_model]` for one cloud.
    pub fn features(&mut self, cloud: &PointCloud) -> Result<Tensor<T>> {
        let input = self.prepare(&[cloud])?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &input, Mode::Eval, false)?;
        g.value(out.features).clone().reshape([cloud.len(), self.cfg.afe.d_model])
    }
}

/// Per-point coordinates (and normals) as classifier inputs.
pub fn coordinate_rows<T: Scalar>(cloud: &PointCloud, use_normals: bool) -> Result<Vec<T>> {
    let normals = if use_normals {
        Some(cloud.normals().ok_or_else(|| Error::invalid("cloud has no normals"))?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(cloud.len() * 6);
    for (i, p) in cloud.points().iter().enumerate() {
        out.extend(p.iter().map(|&v| T::from_f64(v)));
        if let Some(ns) = normals {
            out.extend(ns[i].iter().map(|&v| T::from_f64(v)));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Classifier<T = f32> {
    pub cfg: ClassifierConfig,
    pub store: ParamStore<T>,
    pub head: ClassifierHead,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(cfg: ClassifierConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, "classifier", cfg.clone(), &mut rng)?;
        Ok(Classifier { cfg, store, head })
    }

    pub fn use_normals(&self) -> bool {
        self.cfg.coord_width == 6
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// `features` `[B, N, F]`, `coords` `[B, N, 3 or 6]` → logits `[B, n_classes]`.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        features: Tensor<T>,
        coords: Tensor<T>,
        mode: Mode,
    ) -> Result<Var> {
        let f = g.input(features);
        let c = g.input(coords);
        self.head.forward(g, &mut self.store, f, c, mode)
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            head: self.head.clone(),
        }
    }
}
