//! Training loops, metrics, ablations and checkpoints.
//!
//! Training is single-threaded and draws every random choice (validation
//! split, batch order, augmentation) from one seeded stream, so a fixed seed
//! reproduces a run exactly. Data-parallel stages (neighborhood search,
//! dataset generation) produce identical results under any thread count.

mod checkpoint;
mod eval;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, ModelKind, OptimizerState, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{
    ablate_density_k, ablate_noise, classify, evaluate_classifier, evaluate_clouds, evaluate_decomposition,
    noise_draw_seed, predict_objects, ClassReport, DensityGrid, EvalReport, NoiseCurve, NoiseRow, ObjectFeatures,
};
pub use train::{
    load_classifier, load_decomposer, train_classifier, train_decomposer, ClassifierOutcome, DecomposerOutcome,
};

use crate::datagen::Category;
use crate::error::{Error, Result};
use crate::heads::ClassifierConfig;
use crate::model::DecomposerConfig;
use crate::nn::AdamConfig;
use crate::pointcloud::{AugmentSpec, Rotation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_period: usize,
    pub epochs: usize,
    pub seed: u64,
    pub use_normals: bool,
    /// Neighbors per point; `None` derives it from the point density.
    pub k: Option<usize>,
    pub augment: AugmentSpec,
    /// Fraction of training objects held out for model selection.
    pub val_fraction: f64,
}

impl TrainConfig {
    /// Batch 16, learning rate 0.001 halved every 20 epochs, 30 epochs,
    /// random rotation and scaling.
    pub fn decomposer() -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 1e-3,
            lr_decay: 0.5,
            decay_period: 20,
            epochs: 30,
            seed: 0,
            use_normals: true,
            k: None,
            augment: AugmentSpec { rotation: Rotation::Vertical, scale_range: (0.8, 1.25), dropout_p: 0.0, noise_sigma: 0.0 },
            val_fraction: 0.1,
        }
    }

    /// As [`TrainConfig::decomposer`] with 60 epochs and point dropout. The
    /// backbone features are computed once, so only dropout applies.
    pub fn classifier() -> Self {
        TrainConfig {
            epochs: 60,
            augment: AugmentSpec { rotation: Rotation::None, scale_range: (1.0, 1.0), dropout_p: 0.2, noise_sigma: 0.0 },
            ..Self::decomposer()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid(format!(
                "batch size {} is below 2, which batch normalization needs",
                self.batch_size
            )));
        }
        if self.epochs == 0 || self.decay_period == 0 {
            return Err(Error::invalid("epochs and decay period must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!("bad learning rate {} or decay {}", self.lr, self.lr_decay)));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(Error::invalid(format!("validation fraction {} outside [0, 0.5)", self.val_fraction)));
        }
        if self.k == Some(0) {
            return Err(Error::invalid("k must be positive"));
        }
        self.augment.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, lr_decay: self.lr_decay, decay_period: self.decay_period, ..AdamConfig::default() }
    }

    /// Same run apart from the epoch budget, which a resumed run may extend.
    fn resumable_from(&self, earlier: &TrainConfig) -> bool {
        TrainConfig { epochs: self.epochs, ..earlier.clone() } == *self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,train_accuracy,val_accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.train_loss, self.train_accuracy, self.val_accuracy
        )
    }
}

pub fn curves_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{}\n", EpochRecord::CSV_HEADER);
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Training log events, one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Start { model: &'static str, train_objects: usize, val_objects: usize, k: usize, start_epoch: usize, epochs: usize },
    Epoch(EpochRecord),
    Best { epoch: usize, val_accuracy: f64 },
    Final { model: &'static str, best_epoch: usize, train_accuracy: f64, test_accuracy: Option<f64> },
}

impl LogEvent {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log events serialize")
    }
}

/// Configuration snapshot stored with a decomposer checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposerMeta {
    pub model: DecomposerConfig,
    pub train: TrainConfig,
    pub points_per_object: usize,
    pub epochs_done: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

/// Configuration snapshot stored with a classifier checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub model: ClassifierConfig,
    pub categories: Vec<Category>,
    /// [`Checkpoint::weights_hash`] of the frozen backbone.
    pub backbone_hash: String,
    pub train: TrainConfig,
    pub epochs_done: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
}
