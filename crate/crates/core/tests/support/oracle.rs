//! Independent scalar references: brute-force kNN and plain loop nests for
//! the local encoder and multi-head attention.

use abdnet::geom::Vec3;
use abdnet::lpe::{Lpe, LpeConfig, LpeInput};
use abdnet::neighborhood::{brute_force_knn, build_neighborhoods, KdTree};
use abdnet::nn::{AttentionConfig, BatchNorm, Mode, MultiHeadAttention, ParamStore, SharedMlp};
use abdnet::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{max_abs_diff, random_cloud, uniform, Check};

pub const CLOUDS: usize = 500;
pub const LOOP_TOL: f64 = 1e-5;

/// Clouds up to 300 points; every fourth one snapped to a coarse grid so that
/// equal distances (and duplicate points) exercise the tie rule.
fn knn_cloud(rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let n = rng.random_range(1..=300);
    let snap = rng.random_range(0..4) == 0;
    (0..n)
        .map(|_| {
            let mut p: Vec3 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            if snap {
                p.iter_mut().for_each(|v| *v = (*v * 3.0).round() / 3.0);
            }
            p
        })
        .collect()
}

/// kd-tree kNN must equal brute force exactly, index order included.
pub fn knn_check(seed: u64) -> Check {
    let mut check = Check::new("kd-tree kNN == brute force", 0.0, CLOUDS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..CLOUDS {
        let pts = knn_cloud(&mut rng);
        let n = pts.len();
        let tree = KdTree::build(&pts).unwrap();
        let k = rng.random_range(1..=n.min(64));
        let mut mismatches = 0usize;
        for (i, &p) in pts.iter().enumerate() {
            if tree.knn(p, k, None).unwrap() != brute_force_knn(&pts, p, k, None).unwrap() {
                mismatches += 1;
            }
            if k < n && tree.knn(p, k, Some(i)).unwrap() != brute_force_knn(&pts, p, k, Some(i)).unwrap() {
                mismatches += 1;
            }
        }
        // Off-cloud queries too.
        for _ in 0..10 {
            let q = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            if tree.knn(q, k, None).unwrap() != brute_force_knn(&pts, q, k, None).unwrap() {
                mismatches += 1;
            }
        }
        check.record(mismatches as f64);
    }
    check
}

fn weights(store: &ParamStore<f64>, mlp: &SharedMlp) -> (Vec<f64>, Vec<f64>, usize) {
    let w = store.value(mlp.weight);
    (w.data().to_vec(), store.value(mlp.bias).data().to_vec(), w.shape()[1])
}

/// `y = W x + b` per row, with `W` stored `[out, in]`.
fn dense(store: &ParamStore<f64>, mlp: &SharedMlp, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (w, b, n_in) = weights(store, mlp);
    rows.iter()
        .map(|x| {
            assert_eq!(x.len(), n_in);
            b.iter()
                .enumerate()
                .map(|(o, &bias)| bias + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Batch norm over rows: batch statistics (biased variance) in train mode,
/// running statistics in eval mode.
fn batch_norm(store: &ParamStore<f64>, bn: &BatchNorm, rows: &[Vec<f64>], mode: Mode) -> Vec<Vec<f64>> {
    let c = bn.channels;
    let (mean, var) = match mode {
        Mode::Train => {
            let m = rows.len() as f64;
            let mean: Vec<f64> = (0..c).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m).collect();
            let var = (0..c).map(|j| rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / m).collect();
            (mean, var)
        }
        Mode::Eval => (store.buffer(bn.running_mean).data().to_vec(), store.buffer(bn.running_var).data().to_vec()),
    };
    let gamma = store.value(bn.gamma).data();
    let beta = store.value(bn.beta).data();
    rows.iter()
        .map(|r| (0..c).map(|j| gamma[j] * (r[j] - mean[j]) / (var[j] + bn.eps).sqrt() + beta[j]).collect())
        .collect()
}

fn relu(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    rows.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

/// The local encoder as nested loops over points, neighbors and channels.
pub fn lpe_loops(lpe: &Lpe, store: &ParamStore<f64>, input: &LpeInput<f64>, mode: Mode) -> Vec<f64> {
    let rows = input.batch * input.n;
    let width = input.points.shape()[1];
    let points: Vec<Vec<f64>> = input.points.data().chunks(width).map(<[f64]>::to_vec).collect();
    let lifted = dense(store, &lpe.lift.mlp, &points);
    let lifted = relu(batch_norm(store, &lpe.lift.bn, &lifted, mode));

    let mut h: Vec<Vec<f64>> = Vec::with_capacity(rows * input.k);
    for r in 0..rows {
        for j in 0..input.k {
            let flat = r * input.k + j;
            let mut row = input.geometry.data()[flat * width..(flat + 1) * width].to_vec();
            row.extend(&lifted[input.neighbors[flat]]);
            h.push(row);
        }
    }
    for layer in &lpe.layers {
        h = relu(batch_norm(store, &layer.bn, &dense(store, &layer.mlp, &h), mode));
    }
    let c_out = lpe.cfg.c_out;
    let mut out = vec![0.0; rows * c_out];
    for r in 0..rows {
        for j in 0..input.k {
            for c in 0..c_out {
                out[r * c_out + c] += h[r * input.k + j][c] / input.k as f64;
            }
        }
    }
    out
}

/// Scaled dot-product attention per head, written out element by element.
pub fn mha_loops(mha: &MultiHeadAttention, store: &ParamStore<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = mha.cfg.heads;
    let dk = d / h;
    let rows: Vec<Vec<f64>> = x.data().chunks(d).map(<[f64]>::to_vec).collect();
    let q = dense(store, &mha.query, &rows);
    let k = dense(store, &mha.key, &rows);
    let v = dense(store, &mha.value, &rows);
    let mut merged = vec![vec![0.0; d]; b * n];
    for bi in 0..b {
        for head in 0..h {
            let cols = head * dk..(head + 1) * dk;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        cols.clone().map(|c| q[bi * n + i][c] * k[bi * n + j][c]).sum::<f64>() / (dk as f64).sqrt()
                    })
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in cols.clone() {
                    merged[bi * n + i][c] = (0..n).map(|j| exps[j] / z * v[bi * n + j][c]).sum();
                }
            }
        }
    }
    dense(store, &mha.output, &merged).concat()
}

fn randomize_bn(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        if p.name.ends_with("gamma") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if p.name.ends_with("beta") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let names: Vec<String> = store.buffers().iter().map(|b| b.name.clone()).collect();
    for name in names {
        let id = store.find_buffer(&name).unwrap();
        let var = name.ends_with("running_var");
        store.buffer_mut(id).data_mut().iter_mut().for_each(|v| {
            *v = if var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.5..0.5) }
        });
    }
}

/// Graph local encoder against [`lpe_loops`], both modes, f64 and f32 graphs.
pub fn lpe_checks(seed: u64, instances: usize) -> Vec<Check> {
    let mut f64_check = Check::new("local encoder vs loop nest (f64)", LOOP_TOL, instances);
    let mut f32_check = Check::new("local encoder vs loop nest (f32)", LOOP_TOL, instances);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let mode = if i % 2 == 0 { Mode::Train } else { Mode::Eval };
        let use_normals = rng.random_bool(0.5);
        let k = rng.random_range(2..=6);
        let hidden = if rng.random_bool(0.5) { vec![rng.random_range(3..8)] } else { vec![] };
        let cfg = LpeConfig { c: rng.random_range(2..7), k, c_out: rng.random_range(2..7), hidden, use_normals };
        let mut store = ParamStore::<f64>::new();
        let lpe = Lpe::new(&mut store, "lpe", cfg, &mut rng).unwrap();
        randomize_bn(&mut store, &mut rng);
        let batch = rng.random_range(1..=2);
        let clouds: Vec<_> = (0..batch).map(|_| random_cloud(&mut rng, 9)).collect();
        let nbs: Vec<_> = clouds.iter().map(|c| build_neighborhoods(c, k).unwrap()).collect();
        let items: Vec<_> = clouds.iter().zip(&nbs).collect();
        let input = LpeInput::<f64>::new(&items, use_normals).unwrap();
        let want = lpe_loops(&lpe, &store, &input, mode);

        let mut g = Graph::new();
        let y = lpe.forward(&mut g, &mut store.clone(), &input, mode).unwrap();
        f64_check.record(max_abs_diff(&g.value(y).to_f64_vec(), &want));

        let mut store32 = store.cast::<f32>();
        let mut g = Graph::new();
        let y = lpe.forward(&mut g, &mut store32, &input.cast(), mode).unwrap();
        f32_check.record(max_abs_diff(&g.value(y).to_f64_vec(), &want));
    }
    vec![f64_check, f32_check]
}

/// Graph attention against [`mha_loops`], f64 and f32 graphs.
pub fn mha_checks(seed: u64, instances: usize) -> Vec<Check> {
    let mut f64_check = Check::new("multi-head attention vs loop nest (f64)", LOOP_TOL, instances);
    let mut f32_check = Check::new("multi-head attention vs loop nest (f32)", LOOP_TOL, instances);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let heads = rng.random_range(1..=3);
        let d = heads * rng.random_range(1..=4);
        let (b, n) = (rng.random_range(1..=2), rng.random_range(1..=7));
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", AttentionConfig::new(d, heads).unwrap(), &mut rng).unwrap();
        let x = Tensor::from_f64([b, n, d], &uniform(&mut rng, b * n * d, -1.0, 1.0)).unwrap();
        let want = mha_loops(&mha, &store, &x);

        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (y, _) = mha.forward(&mut g, &store, xv, false).unwrap();
        f64_check.record(max_abs_diff(&g.value(y).to_f64_vec(), &want));

        let store32 = store.cast::<f32>();
        let mut g = Graph::new();
        let xv = g.input(x.cast::<f32>());
        let (y, _) = mha.forward(&mut g, &store32, xv, false).unwrap();
        f32_check.record(max_abs_diff(&g.value(y).to_f64_vec(), &want));
    }
    vec![f64_check, f32_check]
}
