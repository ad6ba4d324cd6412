//! Point-cloud data model, normalization, sampling and augmentation.

mod io;
mod mesh;

pub use io::{load, parse_off, parse_ply, parse_xyz, save, write_off, write_ply, write_xyz, Format};
pub use mesh::{load_mesh, sample_mesh, Mesh};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};

/// The four basic shapes a point can belong to, numbered as in the label files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum ShapeLabel {
    Plane = 1,
    Sphere = 2,
    Cylinder = 3,
    Cone = 4,
}

impl ShapeLabel {
    pub const ALL: [ShapeLabel; 4] = [
        ShapeLabel::Plane,
        ShapeLabel::Sphere,
        ShapeLabel::Cylinder,
        ShapeLabel::Cone,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(ShapeLabel::Plane),
            2 => Ok(ShapeLabel::Sphere),
            3 => Ok(ShapeLabel::Cylinder),
            4 => Ok(ShapeLabel::Cone),
            other => Err(Error::Validation(format!("unknown shape label {other}"))),
        }
    }

    /// Zero-based class index (`id − 1`).
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeLabel::Plane => "plane",
            ShapeLabel::Sphere => "sphere",
            ShapeLabel::Cylinder => "cylinder",
            ShapeLabel::Cone => "cone",
        }
    }

    /// Display color: plane black, sphere blue, cylinder green, cone magenta.
    pub fn color(self) -> [u8; 3] {
        match self {
            ShapeLabel::Plane => [0, 0, 0],
            ShapeLabel::Sphere => [0, 0, 255],
            ShapeLabel::Cylinder => [0, 255, 0],
            ShapeLabel::Cone => [255, 0, 255],
        }
    }

    pub fn from_color(rgb: [u8; 3]) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.color() == rgb)
    }
}

/// An immutable point set with optional unit normals, per-point labels and an
/// object category.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    labels: Option<Vec<ShapeLabel>>,
    category: Option<u32>,
}

const NORMAL_TOLERANCE: f64 = 1e-3;

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("a point cloud needs at least one point".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite coordinate".into()));
        }
        Ok(PointCloud {
            points,
            normals: None,
            labels: None,
            category: None,
        })
    }

    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(Error::Validation(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        if let Some((i, n)) = normals
            .iter()
            .enumerate()
            .find(|(_, n)| (geom::norm(**n) - 1.0).abs() > NORMAL_TOLERANCE)
        {
            return Err(Error::Validation(format!(
                "normal {i} has length {:.6}",
                geom::norm(*n)
            )));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<ShapeLabel>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::Validation(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_category(mut self, category: u32) -> Self {
        self.category = Some(category);
        self
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn labels(&self) -> Option<&[ShapeLabel]> {
        self.labels.as_deref()
    }

    pub fn category(&self) -> Option<u32> {
        self.category
    }

    /// Points at `indices` (repeats allowed), carrying normals and labels along.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            category: self.category,
        }
    }

    fn map_points(&self, mut f: impl FnMut(Vec3) -> Vec3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|&p| f(p)).collect(),
            ..self.clone()
        }
    }

    pub fn centroid(&self) -> Vec3 {
        let sum = self.points.iter().fold([0.0; 3], |acc, &p| geom::add(acc, p));
        geom::scale(sum, 1.0 / self.points.len() as f64)
    }

    /// Center on the centroid and scale so the farthest point has norm 1.
    ///
    /// A cloud whose points all coincide is only centered.
    pub fn normalize_unit_sphere(&self) -> PointCloud {
        let c = self.centroid();
        let centered: Vec<Vec3> = self.points.iter().map(|&p| geom::sub(p, c)).collect();
        let radius = centered.iter().map(|&p| geom::norm(p)).fold(0.0, f64::max);
        let s = if radius > 0.0 { 1.0 / radius } else { 1.0 };
        PointCloud {
            points: centered.into_iter().map(|p| geom::scale(p, s)).collect(),
            ..self.clone()
        }
    }

    /// `n` points chosen uniformly: without replacement when `n ≤ N`, with
    /// replacement otherwise.
    pub fn uniform_sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> PointCloud {
        let total = self.len();
        let picks: Vec<usize> = if n <= total {
            index::sample(rng, total, n).into_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..total)).collect()
        };
        self.select(&picks)
    }

    /// Random augmentation: rotation, isotropic scaling, point dropout, then
    /// per-coordinate Gaussian noise.
    pub fn augment<R: Rng + ?Sized>(&self, spec: &AugmentSpec, rng: &mut R) -> Result<PointCloud> {
        spec.validate()?;
        let mut out = self.clone();
        let rotation = match spec.rotation {
            Rotation::None => None,
            Rotation::Vertical => Some(geom::rot_z(rng.random_range(0.0..std::f64::consts::TAU))),
            Rotation::Full => Some(random_rotation(rng)),
        };
        if let Some(m) = rotation {
            out.points.iter_mut().for_each(|p| *p = geom::mat_vec(&m, *p));
            if let Some(ns) = out.normals.as_mut() {
                ns.iter_mut().for_each(|n| *n = geom::mat_vec(&m, *n));
            }
        }
        let (lo, hi) = spec.scale_range;
        if lo != 1.0 || hi != 1.0 {
            let s = if lo == hi { lo } else { rng.random_range(lo..hi) };
            out.points.iter_mut().for_each(|p| *p = geom::scale(*p, s));
        }
        if spec.dropout_p > 0.0 {
            let keep: Vec<usize> = (0..out.len())
                .map(|i| if rng.random::<f64>() < spec.dropout_p { 0 } else { i })
                .collect();
            out = out.select(&keep);
        }
        if spec.noise_sigma > 0.0 {
            out = out.with_noise(spec.noise_sigma, rng);
        }
        Ok(out)
    }

    /// Add independent `Normal(0, sigma)` noise to every coordinate. Labels
    /// and normals are kept.
    pub fn with_noise<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> PointCloud {
        let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
        self.map_points(|p| {
            [
                p[0] + normal.sample(rng),
                p[1] + normal.sample(rng),
                p[2] + normal.sample(rng),
            ]
        })
    }

    pub fn translated(&self, t: Vec3) -> PointCloud {
        self.map_points(|p| geom::add(p, t))
    }

    pub fn scaled(&self, s: f64) -> PointCloud {
        self.map_points(|p| geom::scale(p, s))
    }

    /// Rotate points and normals by a row-major rotation matrix.
    pub fn rotated(&self, m: &[[f64; 3]; 3]) -> PointCloud {
        let mut out = self.map_points(|p| geom::mat_vec(m, p));
        if let Some(ns) = out.normals.as_mut() {
            ns.iter_mut().for_each(|n| *n = geom::mat_vec(m, *n));
        }
        out
    }
}

/// Uniformly distributed rotation from a random unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
        b * (tau * u3).cos(),
    );
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    None,
    /// About the vertical (z) axis.
    Vertical,
    /// Uniform over SO(3).
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub rotation: Rotation,
    pub scale_range: (f64, f64),
    /// Probability that a point is replaced by the first point.
    pub dropout_p: f64,
    pub noise_sigma: f64,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec {
            rotation: Rotation::None,
            scale_range: (1.0, 1.0),
            dropout_p: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("scale range [{lo}, {hi}] is not a positive interval")));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout probability {} outside [0, 1)", self.dropout_p)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self::identity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                [
                    rng.random_range(-3.0..5.0),
                    rng.random_range(-1.0..2.0),
                    rng.random_range(0.0..4.0),
                ]
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    fn max_norm(c: &PointCloud) -> f64 {
        c.points().iter().map(|&p| geom::norm(p)).fold(0.0, f64::max)
    }

    #[test]
    fn labels_are_one_through_four() {
        let ids: Vec<u8> = ShapeLabel::ALL.iter().map(|l| l.id()).collect();
        assert_eq!(ids, [1, 2, 3, 4]);
        assert!(ShapeLabel::from_id(0).is_err());
        assert!(ShapeLabel::from_id(5).is_err());
        assert_eq!(ShapeLabel::Cone.color(), [255, 0, 255]);
        assert_eq!(ShapeLabel::from_color([0, 0, 255]), Some(ShapeLabel::Sphere));
    }

    #[test]
    fn construction_invariants() {
        assert!(PointCloud::new(vec![]).is_err());
        let c = PointCloud::new(vec![[0.0; 3]; 2]).unwrap();
        assert!(c.clone().with_labels(vec![ShapeLabel::Plane]).is_err());
        assert!(c.clone().with_normals(vec![[0.0, 0.0, 1.0], [0.0, 0.0, 1.1]]).is_err());
        assert!(c.with_normals(vec![[0.0, 0.0, 1.0], [0.0, 1.0005, 0.0]]).is_ok());
    }

    #[test]
    fn normalize_properties() {
        let c = random_cloud(300, 1);
        let n = c.normalize_unit_sphere();
        assert!((max_norm(&n) - 1.0).abs() < 1e-6);
        assert!(geom::norm(n.centroid()) < 1e-6);
        // idempotent
        let nn = n.normalize_unit_sphere();
        for (a, b) in n.points().iter().zip(nn.points()) {
            assert!(geom::dist(*a, *b) < 1e-6);
        }
        // scale and translation invariant
        let s = c.scaled(7.0).translated([1.0, -2.0, 3.0]).normalize_unit_sphere();
        for (a, b) in n.points().iter().zip(s.points()) {
            assert!(geom::dist(*a, *b) < 1e-6);
        }
    }

    #[test]
    fn sample_full_is_permutation() {
        let c = random_cloud(50, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = c.uniform_sample(50, &mut rng);
        let mut a: Vec<_> = c.points().iter().map(|p| p.map(f64::to_bits)).collect();
        let mut b: Vec<_> = s.points().iter().map(|p| p.map(f64::to_bits)).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_from_dense_cloud_draws_source_points() {
        let c = random_cloud(8096, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = c.uniform_sample(1024, &mut rng);
        assert_eq!(s.len(), 1024);
        let src: std::collections::HashSet<_> = c.points().iter().map(|p| p.map(f64::to_bits)).collect();
        assert!(s.points().iter().all(|p| src.contains(&p.map(f64::to_bits))));
        let distinct: std::collections::HashSet<_> = s.points().iter().map(|p| p.map(f64::to_bits)).collect();
        assert_eq!(distinct.len(), 1024);
        // oversampling switches to replacement
        let big = random_cloud(10, 6).uniform_sample(25, &mut rng);
        assert_eq!(big.len(), 25);
    }

    #[test]
    fn sample_preserves_label_proportions() {
        // 10% / 20% / 30% / 40% source mix; a 4000-point sample should stay
        // within 3 standard deviations of each proportion.
        let n = 20_000;
        let labels: Vec<ShapeLabel> = (0..n)
            .map(|i| match i % 10 {
                0 => ShapeLabel::Plane,
                1 | 2 => ShapeLabel::Sphere,
                3..=5 => ShapeLabel::Cylinder,
                _ => ShapeLabel::Cone,
            })
            .collect();
        let c = random_cloud(n, 7).with_labels(labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = 4000;
        let s = c.uniform_sample(m, &mut rng);
        let mut counts = [0usize; 4];
        for l in s.labels().unwrap() {
            counts[l.index()] += 1;
        }
        for (k, p) in [0.1, 0.2, 0.3, 0.4].into_iter().enumerate() {
            let sd = (m as f64 * p * (1.0 - p)).sqrt();
            assert!((counts[k] as f64 - m as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn identity_augment_is_identity() {
        let c = random_cloud(40, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        assert_eq!(c.augment(&AugmentSpec::identity(), &mut rng).unwrap(), c);
    }

    #[test]
    fn augment_validates_ranges() {
        let c = random_cloud(5, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let bad = [
            AugmentSpec { scale_range: (1.2, 0.8), ..AugmentSpec::identity() },
            AugmentSpec { scale_range: (0.0, 1.0), ..AugmentSpec::identity() },
            AugmentSpec { dropout_p: 1.0, ..AugmentSpec::identity() },
            AugmentSpec { noise_sigma: -0.1, ..AugmentSpec::identity() },
        ];
        for spec in bad {
            assert!(c.augment(&spec, &mut rng).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn rotation_preserves_distances() {
        let c = random_cloud(30, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for rotation in [Rotation::Vertical, Rotation::Full] {
            let spec = AugmentSpec { rotation, ..AugmentSpec::identity() };
            let r = c.augment(&spec, &mut rng).unwrap();
            for i in 0..c.len() {
                for j in 0..c.len() {
                    let d0 = geom::dist(c.points()[i], c.points()[j]);
                    let d1 = geom::dist(r.points()[i], r.points()[j]);
                    assert!((d0 - d1).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn noise_has_requested_spread() {
        let pts: Vec<Vec3> = (0..12_000)
            .map(|i| {
                let t = i as f64 * 0.37;
                geom::normalize([t.cos(), t.sin(), (i as f64 / 6000.0) - 1.0])
            })
            .collect();
        let c = PointCloud::new(pts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let spec = AugmentSpec { noise_sigma: 0.02, ..AugmentSpec::identity() };
        let noisy = c.augment(&spec, &mut rng).unwrap();
        for axis in 0..3 {
            let d: Vec<f64> = c
                .points()
                .iter()
                .zip(noisy.points())
                .map(|(a, b)| b[axis] - a[axis])
                .collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
            assert!((sd - 0.02).abs() < 0.002, "axis {axis}: {sd}");
        }
    }

    #[test]
    fn dropout_keeps_shape_and_duplicates_first_point() {
        let c = random_cloud(500, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = AugmentSpec { dropout_p: 0.5, ..AugmentSpec::identity() };
        let d = c.augment(&spec, &mut rng).unwrap();
        assert_eq!(d.len(), 500);
        let dup = d.points().iter().filter(|&&p| p == c.points()[0]).count();
        assert!(dup > 150 && dup < 350, "{dup}");
        for (a, b) in c.points().iter().zip(d.points()) {
            assert!(a == b || *b == c.points()[0]);
        }
    }
}
