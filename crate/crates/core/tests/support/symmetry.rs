//! Permutation symmetries of the model blocks and attention normalization.

use abdnet::heads::ClassifierConfig;
use abdnet::lpe::LpeInput;
use abdnet::model::{Classifier, Decomposer, DecomposerConfig};
use abdnet::neighborhood::{build_neighborhoods, NeighborhoodIndex};
use abdnet::nn::Mode;
use abdnet::pointcloud::PointCloud;
use abdnet::{Graph, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{max_abs_diff, permutation, random_cloud, uniform, Check};

pub const EQUIVARIANCE_TOL: f64 = 1e-5;
pub const ROW_SUM_TOL: f64 = 1e-5;

/// A small decomposer with `k = 8`.
fn small_decomposer<T: Scalar>(seed: u64, use_normals: bool) -> Decomposer<T> {
    let mut cfg = DecomposerConfig::desk(use_normals);
    cfg.lpe.k = 8;
    cfg.afe.n_encoders = 2;
    Decomposer::new(cfg, seed).unwrap()
}

fn mode_of(i: usize) -> Mode {
    if i % 2 == 0 {
        Mode::Eval
    } else {
        Mode::Train
    }
}

/// `rows[perm[i]]` for each `i`, with rows of width `w`.
fn permute_rows(data: &[f64], w: usize, perm: &[usize]) -> Vec<f64> {
    perm.iter().flat_map(|&p| data[p * w..(p + 1) * w].iter().copied()).collect()
}

/// Local encoding of one cloud, `[N, c_out]`.
fn lpe_out<T: Scalar>(model: &mut Decomposer<T>, input: &LpeInput<T>, mode: Mode) -> Vec<f64> {
    let mut g = Graph::new();
    let y = model.lpe.forward(&mut g, &mut model.store, input, mode).unwrap();
    g.value(y).to_f64_vec()
}

/// Reordering each neighbor list leaves the local encoding bit-identical.
pub fn neighbor_order_check(seed: u64, instances: usize) -> Check {
    let mut check = Check::new("local encoder: neighbor order (exact)", 0.0, instances);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let normals = rng.random_bool(0.5);
        let mut model = small_decomposer::<f32>(rng.random(), normals);
        let cloud = random_cloud(&mut rng, 40);
        let nb = build_neighborhoods(&cloud, 8).unwrap();
        let shuffled: Vec<usize> = (0..cloud.len())
            .flat_map(|r| {
                let row = nb.row(r);
                permutation(&mut rng, row.len()).into_iter().map(|j| row[j]).collect::<Vec<_>>()
            })
            .collect();
        let nb2 = NeighborhoodIndex::from_indices(cloud.points(), 8, shuffled).unwrap();
        let a = lpe_out(&mut model, &LpeInput::new(&[(&cloud, &nb)], normals).unwrap(), mode_of(i));
        let b = lpe_out(&mut model, &LpeInput::new(&[(&cloud, &nb2)], normals).unwrap(), mode_of(i));
        check.record(max_abs_diff(&a, &b));
    }
    check
}

/// Permuting the points permutes the outputs of the local encoder, the
/// attention stack and the full decomposer the same way. Run in f64: in f32
/// the reordered sums round differently, by up to 2e-5 after two encoders in
/// train mode, which says nothing about the symmetry itself.
pub fn point_permutation_checks(seed: u64, instances: usize) -> Vec<Check> {
    let mut lpe = Check::new("local encoder: point permutation", EQUIVARIANCE_TOL, instances);
    let mut afe = Check::new("attention stack: point permutation", EQUIVARIANCE_TOL, instances);
    let mut full = Check::new("decomposer logits: point permutation", EQUIVARIANCE_TOL, instances);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let mode = mode_of(i);
        let normals = rng.random_bool(0.5);
        let mut model = small_decomposer::<f64>(rng.random(), normals);
        let n = rng.random_range(20..60);
        let cloud = random_cloud(&mut rng, n);
        let perm = permutation(&mut rng, n);
        let moved = cloud.select(&perm);

        let c_out = model.cfg.lpe.c_out;
        let (ia, ib) = (model.prepare(&[&cloud]).unwrap(), model.prepare(&[&moved]).unwrap());
        let a = lpe_out(&mut model, &ia, mode);
        let b = lpe_out(&mut model, &ib, mode);
        lpe.record(max_abs_diff(&permute_rows(&a, c_out, &perm), &b));

        let d = model.cfg.afe.d_model;
        let x = uniform(&mut rng, n * d, -1.0, 1.0);
        let run_afe = |model: &mut Decomposer<f64>, x: &[f64]| {
            let mut g = Graph::new();
            let xv = g.input(Tensor::from_f64([1, n, d], x).unwrap());
            let (y, _) = model.afe.forward(&mut g, &mut model.store, xv, mode, false).unwrap();
            g.value(y).to_f64_vec()
        };
        let a = run_afe(&mut model, &x);
        let b = run_afe(&mut model, &permute_rows(&x, d, &perm));
        afe.record(max_abs_diff(&permute_rows(&a, d, &perm), &b));

        let logits = |model: &mut Decomposer<f64>, c: &PointCloud| {
            let input = model.prepare(&[c]).unwrap();
            let mut g = Graph::new();
            let out = model.forward(&mut g, &input, mode, false).unwrap();
            g.value(out.logits).to_f64_vec()
        };
        let a = logits(&mut model, &cloud);
        let b = logits(&mut model, &moved);
        full.record(max_abs_diff(&permute_rows(&a, 4, &perm), &b));
    }
    vec![lpe, afe, full]
}

/// Eval-mode classifier logits do not change, bit for bit, when the points
/// (feature and coordinate rows together) are reordered.
pub fn classifier_invariance_check(seed: u64, instances: usize) -> Check {
    let mut check = Check::new("classifier logits: point permutation (exact)", 0.0, instances);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let normals = rng.random_bool(0.5);
        let cfg = ClassifierConfig::desk(6, normals, 16);
        let cw = cfg.coord_width;
        let mut clf = Classifier::<f32>::new(cfg, rng.random()).unwrap();
        let (b, n) = (rng.random_range(1..=3), rng.random_range(5..50));
        let f = uniform(&mut rng, b * n * 16, -1.0, 1.0);
        let c = uniform(&mut rng, b * n * cw, -1.0, 1.0);
        let perm = permutation(&mut rng, n);
        let per_item = |data: &[f64], w: usize| -> Vec<f64> {
            data.chunks(n * w).flat_map(|item| permute_rows(item, w, &perm)).collect()
        };
        let mut run = |f: &[f64], c: &[f64]| {
            let mut g = Graph::new();
            let y = clf
                .forward(
                    &mut g,
                    Tensor::from_f64([b, n, 16], f).unwrap(),
                    Tensor::from_f64([b, n, cw], c).unwrap(),
                    Mode::Eval,
                )
                .unwrap();
            g.value(y).to_f64_vec()
        };
        let a = run(&f, &c);
        let p = run(&per_item(&f, 16), &per_item(&c, cw));
        check.record(max_abs_diff(&a, &p));
    }
    check
}

/// Every recorded attention row is a distribution over keys.
pub fn attention_row_check(seed: u64, instances: usize) -> Check {
    let mut check = Check::new("attention rows sum to 1", ROW_SUM_TOL, instances);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let mut model = small_decomposer::<f32>(rng.random(), true);
        let n = rng.random_range(10..80);
        let cloud = random_cloud(&mut rng, n);
        let (_, records) = model.predict_with_attention(&cloud).unwrap();
        assert_eq!(records.len(), model.cfg.afe.n_encoders * model.cfg.afe.heads);
        let mut worst = 0.0f64;
        for r in &records {
            for i in 0..r.n {
                let row = r.row(i);
                assert!(row.iter().all(|&w| w >= 0.0), "negative attention weight");
                let s: f64 = row.iter().map(|&w| w as f64).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        check.record(worst);
    }
    check
}
