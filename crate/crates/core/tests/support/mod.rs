//! Shared checks for the gradient, oracle, symmetry and acceptance targets.
#![allow(dead_code)]

pub mod grad;
pub mod oracle;
pub mod symmetry;

use std::fmt;

use abdnet::pointcloud::PointCloud;
use rand::seq::SliceRandom;
use rand::Rng;

/// Outcome of one check run over many random instances.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub instances: usize,
    /// Largest error observed (relative or absolute, per check).
    pub worst: f64,
    pub tol: f64,
    /// Instances needed before the check counts.
    pub min_instances: usize,
}

impl Check {
    pub fn new(name: impl Into<String>, tol: f64, min_instances: usize) -> Self {
        Check { name: name.into(), instances: 0, worst: 0.0, tol, min_instances }
    }

    pub fn record(&mut self, err: f64) {
        self.instances += 1;
        // NaN must fail, so compare the negation.
        if !(err <= self.worst) {
            self.worst = err;
        }
    }

    pub fn passed(&self) -> bool {
        self.instances >= self.min_instances && self.worst <= self.tol
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<44} {:>4} instances  worst {:.3e}  tol {:.0e}  {}",
            self.name,
            self.instances,
            self.worst,
            self.tol,
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(Check::passed)
}

pub fn uniform<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random cloud in the unit cube with unit normals.
pub fn random_cloud<R: Rng>(rng: &mut R, n: usize) -> PointCloud {
    let points = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let normals = (0..n)
        .map(|_| {
            let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
            abdnet::geom::normalize(v)
        })
        .collect();
    PointCloud::new(points).unwrap().with_normals(normals).unwrap()
}

/// Uniformly random permutation of `0..n`.
pub fn permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
