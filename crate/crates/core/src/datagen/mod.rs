//! Synthetic labeled objects: parametric primitives composed into
//! mechanical-part-like shapes, sampled with exact labels and normals.
//!
//! Every object draws its proportions from one of eight regime bins of its
//! category's key parameter. Training objects use the even bins and test
//! objects the odd ones, so no (category, bin) pair is shared across splits.

mod composites;
mod primitives;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use composites::Category;
pub use primitives::{sample_primitive, PrimitiveSpec, Region, Similarity};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::pointcloud::{self, random_rotation, Format, PointCloud, Rotation, ShapeLabel};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const REGIME_BINS: usize = 8;
/// Attempts per object before a planar-fraction limit is declared infeasible.
pub const MAX_ATTEMPTS: usize = 100;
/// Two patches closer than this to a point are treated as equally near.
pub const TIE_TOLERANCE: f64 = 1e-9;
/// Distance under which a point counts as lying on a surface in reports.
pub const SURFACE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Whether `bin` belongs to this split's parameter regime.
    pub fn owns_bin(self, bin: usize) -> bool {
        match self {
            Split::Train => bin % 2 == 0,
            Split::Test => bin % 2 == 1,
        }
    }
}

/// Primitives with per-primitive point budgets.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeSpec {
    pub category: Category,
    pub primitives: Vec<PrimitiveSpec>,
    pub budgets: Vec<usize>,
}

impl CompositeSpec {
    /// Split `n` points over `primitives` in proportion to area (largest
    /// remainder, ties to the earlier primitive).
    pub fn new(category: Category, primitives: Vec<PrimitiveSpec>, n: usize) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::invalid("composite without primitives"));
        }
        for p in &primitives {
            p.validate()?;
        }
        let areas: Vec<f64> = primitives.iter().map(|p| p.area()).collect();
        let budgets = largest_remainder(&areas, n);
        Ok(CompositeSpec { category, primitives, budgets })
    }

    pub fn total(&self) -> usize {
        self.budgets.iter().sum()
    }

    /// Sample every primitive's budget, then label each point by the nearest
    /// patch (see [`nearest_label`]).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PointCloud> {
        let mut points = Vec::with_capacity(self.total());
        let mut normals = Vec::with_capacity(self.total());
        for (p, &count) in self.primitives.iter().zip(&self.budgets) {
            for _ in 0..count {
                let (x, n) = p.sample_point(rng);
                points.push(x);
                normals.push(n);
            }
        }
        let labels = points.iter().map(|&x| nearest_label(&self.primitives, x)).collect();
        PointCloud::new(points)?.with_normals(normals)?.with_labels(labels)
    }
}

fn largest_remainder(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let assigned: usize = out.iter().sum();
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Label of the patch nearest to `p`; patches within [`TIE_TOLERANCE`] of
/// the nearest count as tied and the lowest label id wins.
pub fn nearest_label(primitives: &[PrimitiveSpec], p: Vec3) -> ShapeLabel {
    let d: Vec<f64> = primitives.iter().map(|s| s.patch_distance(p)).collect();
    let best = d.iter().copied().fold(f64::INFINITY, f64::min);
    primitives
        .iter()
        .zip(&d)
        .filter(|(_, &di)| di <= best + TIE_TOLERANCE)
        .map(|(s, _)| s.label())
        .min_by_key(|l| l.id())
        .expect("at least one primitive")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub n_points: usize,
    /// Objects cycle through these categories in order.
    pub categories: Vec<Category>,
    pub seed: u64,
    /// Objects with a larger fraction of planar points are regenerated;
    /// `None` disables the filter.
    pub max_planar_fraction: Option<f64>,
    /// Random pose of each object. Parts are built upright along z, as
    /// catalog CAD models are.
    pub pose: Rotation,
}

impl DatasetSpec {
    /// 400 training and 100 test composites of 512 points over all six
    /// composite categories.
    pub fn reference(seed: u64) -> Self {
        DatasetSpec {
            n_train: 400,
            n_test: 100,
            n_points: 512,
            categories: Category::COMPOSITES.to_vec(),
            seed,
            max_planar_fraction: Some(0.9),
            pose: Rotation::Vertical,
        }
    }

    /// One primitive per object, 50 objects per shape, 256 points.
    pub fn toy(seed: u64) -> Self {
        DatasetSpec {
            n_train: 160,
            n_test: 40,
            n_points: 256,
            categories: Category::PURE.to_vec(),
            seed,
            max_planar_fraction: None,
            pose: Rotation::Vertical,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train + self.n_test == 0 || self.n_points == 0 {
            return Err(Error::invalid("dataset needs at least one object and one point"));
        }
        if self.categories.is_empty() {
            return Err(Error::invalid("no categories requested"));
        }
        for (i, c) in self.categories.iter().enumerate() {
            if self.categories[..i].contains(c) {
                return Err(Error::invalid(format!("category {c} listed twice")));
            }
        }
        if let Some(f) = self.max_planar_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("planar fraction limit {f} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One generated object.
#[derive(Clone, Debug, PartialEq)]
pub struct DataObject {
    pub id: usize,
    pub split: Split,
    pub category: Category,
    pub regime_bin: usize,
    /// Primitives in the same (rotated, normalized) frame as `cloud`.
    pub primitives: Vec<PrimitiveSpec>,
    /// Carries labels, normals and the category's position in the dataset's
    /// category list.
    pub cloud: PointCloud,
}

impl DataObject {
    pub fn planar_fraction(&self) -> f64 {
        planar_fraction(&self.cloud)
    }
}

pub fn planar_fraction(cloud: &PointCloud) -> f64 {
    match cloud.labels() {
        Some(ls) => ls.iter().filter(|&&l| l == ShapeLabel::Plane).count() as f64 / ls.len() as f64,
        None => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub objects: Vec<DataObject>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DataObject> {
        self.objects.iter().filter(move |o| o.split == split)
    }

    pub fn train(&self) -> Vec<&DataObject> {
        self.split(Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&DataObject> {
        self.split(Split::Test).collect()
    }

    /// Points per label over the whole dataset, indexed by `ShapeLabel::index`.
    pub fn label_totals(&self) -> [usize; 4] {
        let mut out = [0; 4];
        for o in &self.objects {
            for l in o.cloud.labels().unwrap_or(&[]) {
                out[l.index()] += 1;
            }
        }
        out
    }
}

/// Generate every object of `spec`. Each object uses its own random stream
/// derived from `(seed, object id)`, so the result does not depend on how
/// the work is scheduled across threads.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let total = spec.n_train + spec.n_test;
    let objects = (0..total)
        .into_par_iter()
        .map(|id| generate_object(spec, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec: spec.clone(), objects })
}

fn generate_object(spec: &DatasetSpec, id: usize) -> Result<DataObject> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(id as u64);
    let split = if id < spec.n_train { Split::Train } else { Split::Test };
    let class = id % spec.categories.len();
    let category = spec.categories[class];
    let bin = 2 * rng.random_range(0..REGIME_BINS / 2) + usize::from(split == Split::Test);
    for _ in 0..MAX_ATTEMPTS {
        let t = (bin as f64 + rng.random::<f64>()) / REGIME_BINS as f64;
        let composite = CompositeSpec::new(category, category.build(t, &mut rng), spec.n_points)?;
        let local = composite.sample(&mut rng)?;
        if spec.max_planar_fraction.is_some_and(|m| planar_fraction(&local) > m) {
            continue;
        }
        let rotation = match spec.pose {
            Rotation::None => geom::rot_z(0.0),
            Rotation::Vertical => geom::rot_z(rng.random_range(0.0..std::f64::consts::TAU)),
            Rotation::Full => random_rotation(&mut rng),
        };
        let sim = normalizing_transform(&local, rotation);
        let points = local.points().iter().map(|&p| sim.point(p)).collect();
        let normals = local.normals().expect("sampled with normals").iter().map(|&n| sim.direction(n)).collect();
        let cloud = PointCloud::new(points)?
            .with_normals(normals)?
            .with_labels(local.labels().expect("sampled with labels").to_vec())?
            .with_category(class as u32);
        return Ok(DataObject {
            id,
            split,
            category,
            regime_bin: bin,
            primitives: composite.primitives.iter().map(|p| p.transformed(&sim)).collect(),
            cloud,
        });
    }
    Err(Error::InfeasibleMix(format!(
        "no {category} object with at most {:.0}% planar points after {MAX_ATTEMPTS} attempts",
        100.0 * spec.max_planar_fraction.unwrap_or(1.0)
    )))
}

/// Rotate, then center on the centroid and scale into the unit ball.
fn normalizing_transform(cloud: &PointCloud, rotation: [[f64; 3]; 3]) -> Similarity {
    let rotated: Vec<Vec3> = cloud.points().iter().map(|&p| geom::mat_vec(&rotation, p)).collect();
    let c = geom::scale(rotated.iter().fold([0.0; 3], |a, &p| geom::add(a, p)), 1.0 / rotated.len() as f64);
    let radius = rotated.iter().map(|&p| geom::dist(p, c)).fold(0.0, f64::max);
    let s = if radius > 0.0 { 1.0 / radius } else { 1.0 };
    Similarity { rotation, scale: s, translation: geom::scale(c, -s) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: usize,
    pub split: Split,
    pub category: Category,
    pub regime_bin: usize,
    /// Relative to the dataset directory.
    pub file: String,
    pub primitives: Vec<PrimitiveSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub spec: DatasetSpec,
    pub objects: Vec<ObjectRecord>,
}

fn object_file(id: usize) -> String {
    format!("objects/{id:05}.ply")
}

impl Dataset {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            spec: self.spec.clone(),
            objects: self
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    id: o.id,
                    split: o.split,
                    category: o.category,
                    regime_bin: o.regime_bin,
                    file: object_file(o.id),
                    primitives: o.primitives.clone(),
                })
                .collect(),
        }
    }

    /// Write `manifest.json` and one colorized PLY per object under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("objects"))?;
        for o in &self.objects {
            pointcloud::save(&o.cloud, &dir.join(object_file(o.id)), Format::Ply, true)?;
        }
        let json = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }
}

/// Read a directory written by [`Dataset::save`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Validation(format!(
            "manifest schema version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    manifest.spec.validate()?;
    let objects = manifest
        .objects
        .into_iter()
        .map(|r| {
            let class = manifest
                .spec
                .categories
                .iter()
                .position(|&c| c == r.category)
                .ok_or_else(|| Error::Validation(format!("object {} has unlisted category {}", r.id, r.category)))?;
            let cloud = pointcloud::load(&dir.join(&r.file), Format::Ply)?.with_category(class as u32);
            if cloud.labels().is_none() {
                return Err(Error::Validation(format!("{} carries no labels", r.file)));
            }
            Ok(DataObject {
                id: r.id,
                split: r.split,
                category: r.category,
                regime_bin: r.regime_bin,
                primitives: r.primitives,
                cloud,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec: manifest.spec, objects })
}

/// Result of re-checking labeled points against the primitives they came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LabelReport {
    pub points: usize,
    /// Largest distance from a point to the nearest patch carrying its label.
    pub max_residual: f64,
    /// Largest residual of the unbounded surface equation of that patch.
    pub max_implicit_residual: f64,
    /// Points whose label differs from the nearest-patch rule.
    pub mismatched: Vec<usize>,
    /// Points within [`SURFACE_TOLERANCE`] of patches with different labels.
    pub ambiguous: usize,
}

impl LabelReport {
    pub fn is_clean(&self) -> bool {
        self.mismatched.is_empty() && self.max_residual <= SURFACE_TOLERANCE
    }

    pub fn ambiguous_fraction(&self) -> f64 {
        self.ambiguous as f64 / self.points.max(1) as f64
    }
}

/// Check every point of `cloud` against `primitives`.
pub fn verify_labels(cloud: &PointCloud, primitives: &[PrimitiveSpec]) -> Result<LabelReport> {
    let labels = cloud.labels().ok_or_else(|| Error::invalid("cloud has no labels"))?;
    if primitives.is_empty() {
        return Err(Error::invalid("no primitives to check against"));
    }
    let mut report = LabelReport { points: cloud.len(), ..Default::default() };
    for (i, (&p, &label)) in cloud.points().iter().zip(labels).enumerate() {
        let own = primitives
            .iter()
            .filter(|s| s.label() == label)
            .map(|s| (s.patch_distance(p), s))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        match own {
            Some((d, s)) => {
                report.max_residual = report.max_residual.max(d);
                report.max_implicit_residual = report.max_implicit_residual.max(s.implicit_residual(p));
            }
            None => report.max_residual = f64::INFINITY,
        }
        if nearest_label(primitives, p) != label {
            report.mismatched.push(i);
        }
        let mut near = primitives.iter().filter(|s| s.patch_distance(p) <= SURFACE_TOLERANCE).map(|s| s.label());
        if let Some(first) = near.next() {
            if near.any(|l| l != first) {
                report.ambiguous += 1;
            }
        }
    }
    Ok(report)
}
