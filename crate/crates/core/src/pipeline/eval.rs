//! Accuracy metrics and the density / noise ablations.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::{CompositeSpec, DataObject};
use crate::error::{Error, Result};
use crate::model::{coordinate_rows, Classifier, Decomposer};
use crate::nn::Mode;
use crate::pointcloud::{PointCloud, ShapeLabel};
use crate::tensor::{Graph, Tensor};

/// Point-level decomposition metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall: f64,
    /// Indexed by `ShapeLabel::index`; `None` for labels absent from the data.
    pub per_class: [Option<f64>; 4],
    /// `confusion[truth][prediction]`.
    pub confusion: [[usize; 4]; 4],
    /// Fraction of correctly labeled points in each object.
    pub instance: Vec<f64>,
    pub points: usize,
    pub param_count: usize,
}

impl EvalReport {
    /// Metrics from per-object predictions and ground truth.
    pub fn from_predictions(pred: &[Vec<ShapeLabel>], truth: &[&[ShapeLabel]], param_count: usize) -> Result<Self> {
        if pred.len() != truth.len() || pred.is_empty() {
            return Err(Error::invalid(format!("{} predictions for {} objects", pred.len(), truth.len())));
        }
        let mut confusion = [[0usize; 4]; 4];
        let mut instance = Vec::with_capacity(pred.len());
        for (p, t) in pred.iter().zip(truth) {
            if p.len() != t.len() || t.is_empty() {
                return Err(Error::invalid(format!("{} predictions for {} points", p.len(), t.len())));
            }
            let mut correct = 0;
            for (&a, &b) in p.iter().zip(t.iter()) {
                confusion[b.index()][a.index()] += 1;
                correct += usize::from(a == b);
            }
            instance.push(correct as f64 / t.len() as f64);
        }
        let points: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..4).map(|i| confusion[i][i]).sum();
        let per_class = std::array::from_fn(|i| {
            let support: usize = confusion[i].iter().sum();
            (support > 0).then(|| confusion[i][i] as f64 / support as f64)
        });
        Ok(EvalReport { overall: trace as f64 / points as f64, per_class, confusion, instance, points, param_count })
    }

    pub fn support(&self, label: ShapeLabel) -> usize {
        self.confusion[label.index()].iter().sum()
    }

    /// Smallest per-class accuracy over the labels present.
    pub fn min_class_accuracy(&self) -> f64 {
        self.per_class.iter().flatten().copied().fold(1.0, f64::min)
    }

    /// `metric,value` summary lines followed by the confusion matrix.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "overall_accuracy,{:.6}", self.overall);
        for l in ShapeLabel::ALL {
            match self.per_class[l.index()] {
                Some(a) => {
                    let _ = writeln!(out, "accuracy_{},{a:.6}", l.name());
                }
                None => {
                    let _ = writeln!(out, "accuracy_{},", l.name());
                }
            }
        }
        let _ = writeln!(out, "points,{}", self.points);
        let _ = writeln!(out, "objects,{}", self.instance.len());
        let _ = writeln!(out, "parameters,{}", self.param_count);
        for t in ShapeLabel::ALL {
            for p in ShapeLabel::ALL {
                let _ = writeln!(out, "confusion_{}_{},{}", t.name(), p.name(), self.confusion[t.index()][p.index()]);
            }
        }
        out
    }
}

/// Eval-mode labels for every object, one object per forward pass.
pub fn predict_objects(model: &mut Decomposer<f32>, clouds: &[&PointCloud]) -> Result<Vec<Vec<ShapeLabel>>> {
    clouds.iter().map(|c| model.predict(c)).collect()
}

pub fn evaluate_decomposition(model: &mut Decomposer<f32>, objects: &[&DataObject]) -> Result<EvalReport> {
    let clouds: Vec<&PointCloud> = objects.iter().map(|o| &o.cloud).collect();
    evaluate_clouds(model, &clouds)
}

/// [`evaluate_decomposition`] on bare labeled clouds.
pub fn evaluate_clouds(model: &mut Decomposer<f32>, clouds: &[&PointCloud]) -> Result<EvalReport> {
    let truth = clouds
        .iter()
        .map(|c| c.labels().ok_or_else(|| Error::invalid("evaluation cloud has no labels")))
        .collect::<Result<Vec<_>>>()?;
    let pred = predict_objects(model, clouds)?;
    EvalReport::from_predictions(&pred, &truth, model.param_count())
}

/// Object-level classification metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub objects: usize,
    /// Head parameters; training reports add the frozen backbone's so the
    /// figure covers the whole classification path.
    pub param_count: usize,
}

impl ClassReport {
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "accuracy,{:.6}", self.accuracy);
        let _ = writeln!(out, "objects,{}", self.objects);
        let _ = writeln!(out, "parameters,{}", self.param_count);
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, n) in row.iter().enumerate() {
                let _ = writeln!(out, "confusion_{}_{},{n}", names[t], names[p]);
            }
        }
        out
    }
}

/// Frozen encoder features and classifier coordinates of one object.
#[derive(Clone, Debug)]
pub struct ObjectFeatures {
    /// `[N, d_model]`
    pub features: Tensor<f32>,
    /// `[N, 6]`: coordinates then normals (zeros when the cloud has none).
    pub coords: Tensor<f32>,
    pub class: usize,
}

impl ObjectFeatures {
    pub fn compute(backbone: &mut Decomposer<f32>, cloud: &PointCloud) -> Result<Self> {
        let class = cloud.category().ok_or_else(|| Error::invalid("cloud has no category"))? as usize;
        let features = backbone.features(cloud)?;
        let coords = match cloud.normals() {
            Some(_) => coordinate_rows::<f32>(cloud, true)?,
            None => coordinate_rows::<f32>(cloud, false)?
                .chunks(3)
                .flat_map(|c| [c[0], c[1], c[2], 0.0, 0.0, 0.0])
                .collect(),
        };
        Ok(ObjectFeatures { features, coords: Tensor::new([cloud.len(), 6], coords)?, class })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stack objects into `[B, N, F]` features and `[B, N, width]` coordinates.
    pub fn batch(items: &[&ObjectFeatures], coord_width: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let n = items.first().ok_or_else(|| Error::invalid("empty batch"))?.len();
        if items.iter().any(|o| o.len() != n) {
            return Err(Error::invalid("objects in a batch must have the same number of points"));
        }
        let f = items[0].features.shape()[1];
        let mut feats = Vec::with_capacity(items.len() * n * f);
        let mut coords = Vec::with_capacity(items.len() * n * coord_width);
        for o in items {
            feats.extend_from_slice(o.features.data());
            for row in o.coords.data().chunks(6) {
                coords.extend_from_slice(&row[..coord_width]);
            }
        }
        Ok((Tensor::new([items.len(), n, f], feats)?, Tensor::new([items.len(), n, coord_width], coords)?))
    }
}

pub fn classify(classifier: &mut Classifier<f32>, object: &ObjectFeatures) -> Result<usize> {
    let (f, c) = ObjectFeatures::batch(&[object], classifier.cfg.coord_width)?;
    let mut g = Graph::new();
    let logits = classifier.forward(&mut g, f, c, Mode::Eval)?;
    Ok(crate::heads::argmax(g.value(logits).data()))
}

pub fn evaluate_classifier(classifier: &mut Classifier<f32>, objects: &[ObjectFeatures]) -> Result<ClassReport> {
    if objects.is_empty() {
        return Err(Error::invalid("no objects to evaluate"));
    }
    let k = classifier.cfg.n_classes;
    let mut confusion = vec![vec![0; k]; k];
    for o in objects {
        if o.class >= k {
            return Err(Error::invalid(format!("class {} outside the classifier's {k} classes", o.class)));
        }
        confusion[o.class][classify(classifier, o)?] += 1;
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    Ok(ClassReport {
        accuracy: correct as f64 / objects.len() as f64,
        confusion,
        objects: objects.len(),
        param_count: classifier.param_count(),
    })
}

/// Mean instance accuracy over `densities × ks`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityGrid {
    pub densities: Vec<usize>,
    pub ks: Vec<usize>,
    /// `accuracy[density][k]`
    pub accuracy: Vec<Vec<f64>>,
    pub seed: u64,
}

impl DensityGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("density,k,accuracy,seed\n");
        for (d, row) in self.densities.iter().zip(&self.accuracy) {
            for (k, a) in self.ks.iter().zip(row) {
                let _ = writeln!(out, "{d},{k},{a:.6},{}", self.seed);
            }
        }
        out
    }

    pub fn cell(&self, density: usize, k: usize) -> Option<f64> {
        let i = self.densities.iter().position(|&d| d == density)?;
        let j = self.ks.iter().position(|&x| x == k)?;
        Some(self.accuracy[i][j])
    }
}

/// Resample each object at every density from its primitives, rebuild
/// neighborhoods at every `k`, and average instance accuracy over objects.
///
/// A density equal to an object's own point count reuses its cloud as is, so
/// that cell matches [`evaluate_decomposition`] exactly.
pub fn ablate_density_k(
    model: &Decomposer<f32>,
    objects: &[&DataObject],
    densities: &[usize],
    ks: &[usize],
    seed: u64,
) -> Result<DensityGrid> {
    if objects.is_empty() || densities.is_empty() || ks.is_empty() {
        return Err(Error::invalid("density ablation needs objects, densities and ks"));
    }
    let mut clouds = Vec::with_capacity(densities.len());
    for (i, &d) in densities.iter().enumerate() {
        if d == 0 || ks.iter().any(|&k| k > d) {
            return Err(Error::invalid(format!("density {d} cannot hold neighborhoods of {ks:?}")));
        }
        let row = objects
            .iter()
            .map(|o| {
                if d == o.cloud.len() {
                    return Ok(o.cloud.clone());
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((o.id as u64) << 16) | i as u64);
                let cloud = CompositeSpec::new(o.category, o.primitives.clone(), d)?.sample(&mut rng)?;
                Ok(match o.cloud.category() {
                    Some(c) => cloud.with_category(c),
                    None => cloud,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        clouds.push(row);
    }
    let mut accuracy = vec![vec![0.0; ks.len()]; densities.len()];
    for (j, &k) in ks.iter().enumerate() {
        let mut m = model.with_k(k)?;
        for (i, row) in clouds.iter().enumerate() {
            let refs: Vec<&PointCloud> = row.iter().collect();
            let report = evaluate_clouds(&mut m, &refs)?;
            accuracy[i][j] = mean(&report.instance);
        }
    }
    Ok(DensityGrid { densities: densities.to_vec(), ks: ks.to_vec(), accuracy, seed })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseRow {
    pub sigma: f64,
    pub draw: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseCurve {
    pub sigmas: Vec<f64>,
    /// Mean over draws, one per sigma.
    pub mean: Vec<f64>,
    pub rows: Vec<NoiseRow>,
}

impl NoiseCurve {
    /// One row per draw, then a `mean` row per sigma.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma,draw,seed,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(out, "{:.6},{},{},{:.6}", r.sigma, r.draw, r.seed, r.accuracy);
        }
        for (s, m) in self.sigmas.iter().zip(&self.mean) {
            let _ = writeln!(out, "{s:.6},mean,,{m:.6}");
        }
        out
    }
}

/// Seed of noise draw `draw`; the same draws are reused at every sigma so the
/// curve compares like with like.
pub fn noise_draw_seed(seed: u64, draw: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(draw as u64 + 1)
}

/// Gaussian jitter of the points (normals kept) at each sigma, averaged over
/// `draws` draws and over objects.
pub fn ablate_noise(
    model: &mut Decomposer<f32>,
    objects: &[&DataObject],
    sigmas: &[f64],
    draws: usize,
    seed: u64,
) -> Result<NoiseCurve> {
    if objects.is_empty() || sigmas.is_empty() || draws == 0 {
        return Err(Error::invalid("noise ablation needs objects, sigmas and at least one draw"));
    }
    if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::invalid(format!("noise sigma {s} must be finite and non-negative")));
    }
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for &sigma in sigmas {
        let mut total = 0.0;
        for draw in 0..draws {
            let draw_seed = noise_draw_seed(seed, draw);
            let mut acc = 0.0;
            for o in objects {
                let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
                rng.set_stream(o.id as u64);
                let noisy = o.cloud.with_noise(sigma, &mut rng);
                let pred = model.predict(&noisy)?;
                let truth = o.cloud.labels().ok_or_else(|| Error::invalid("object has no labels"))?;
                acc += pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
            }
            let accuracy = acc / objects.len() as f64;
            total += accuracy;
            rows.push(NoiseRow { sigma, draw, seed: draw_seed, accuracy });
        }
        means.push(total / draws as f64);
    }
    Ok(NoiseCurve { sigmas: sigmas.to_vec(), mean: means, rows })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}
