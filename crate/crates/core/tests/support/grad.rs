//! Central finite differences against reverse-mode gradients.
//!
//! Every check uses the scalar loss `sum(out ⊙ R)` with a fixed random `R`
//! and reports the norm-wise relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` over
//! all inputs and parameters of one instance. Ops are differenced in their
//! own precision; blocks are differenced in f64 (see [`block_error`]).

use abdnet::afe::{AfeConfig, Encoder};
use abdnet::heads::{ClassifierConfig, ClassifierHead, DecompositionHead};
use abdnet::lpe::{Lpe, LpeConfig, LpeInput};
use abdnet::neighborhood::build_neighborhoods;
use abdnet::nn::{BufferId, Mode, ParamStore};
use abdnet::pointcloud::PointCloud;
use abdnet::tensor::BnStats;
use abdnet::{Graph, Result, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{uniform, Check};

/// Step and tolerance for one precision.
pub trait Precision: Scalar {
    const NAME: &'static str;
    /// Relative step of the central difference.
    const STEP: f64;
    const TOL: f64;
}

impl Precision for f64 {
    const NAME: &'static str = "f64";
    const STEP: f64 = 1e-6;
    const TOL: f64 = 1e-3;
}

impl Precision for f32 {
    const NAME: &'static str = "f32";
    const STEP: f64 = 3e-3;
    const TOL: f64 = 1e-2;
}

pub const INSTANCES: usize = 20;

type OpFn<T> = dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>;
type BlockFn<T> = dyn Fn(&mut Graph<T>, &mut ParamStore<T>, &[Var]) -> Result<Var>;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn tensor<T: Scalar>(shape: &[usize], values: &[f64]) -> Tensor<T> {
    Tensor::from_f64(shape.to_vec(), values).unwrap()
}

fn random<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    tensor(shape, &uniform(rng, n, -1.0, 1.0))
}

/// Values whose magnitude stays in `[0.1, 1]`, away from the ReLU kink.
fn off_kink<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0.1..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    tensor(shape, &v)
}

/// Distinct values at least 0.05 apart, so no max is tied.
fn spread<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let order = super::permutation(rng, n);
    let v: Vec<f64> = order.iter().map(|&i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    tensor(shape, &v)
}

/// Loss `sum(out ⊙ r)`, with `r` drawn on first use.
fn weighted_sum<T: Scalar>(g: &mut Graph<T>, out: Var, r: &mut Option<Tensor<T>>, rng: &mut ChaCha8Rng) -> Var {
    let r = r.get_or_insert_with(|| random(rng, g.shape(out))).clone();
    let r = g.input(r);
    let prod = g.mul(out, r).unwrap();
    g.sum_all(prod)
}

/// The loss `sum(out ⊙ r)` accumulated in f64, so that rounding of the sum
/// does not swamp the difference quotient in f32.
fn probe<T: Scalar>(g: &Graph<T>, out: Var, r: &Option<Tensor<T>>) -> f64 {
    let r = r.as_ref().expect("weights drawn by the analytic pass");
    g.value(out).data().iter().zip(r.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
}

/// Perturb `x[j]` by ±h and return the central difference of `f`.
fn central<T: Precision>(x: &mut [T], j: usize, mut f: impl FnMut(&[T]) -> f64) -> f64 {
    let orig = x[j];
    let h = T::STEP * orig.as_f64().abs().max(1.0);
    let plus = T::from_f64(orig.as_f64() + h);
    let minus = T::from_f64(orig.as_f64() - h);
    x[j] = plus;
    let fp = f(x);
    x[j] = minus;
    let fm = f(x);
    x[j] = orig;
    (fp - fm) / (plus.as_f64() - minus.as_f64())
}

/// Relative gradient error of a parameter-free op with respect to all its inputs.
fn op_error<T: Precision>(build: &OpFn<T>, inputs: &[Tensor<T>], rng: &mut ChaCha8Rng) -> f64 {
    let mut r = None;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let loss = weighted_sum(&mut g, out, &mut r, rng);
    g.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match g.grad(*v) {
            Some(gr) => analytic.extend(gr.to_f64_vec()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let mut data = work[i].data().to_vec();
            let d = central::<T>(&mut data, j, |x| {
                work[i].data_mut().copy_from_slice(x);
                let mut g = Graph::new();
                let vars: Vec<Var> = work.iter().map(|t| g.input(t.clone())).collect();
                let out = build(&mut g, &vars).unwrap();
                probe(&g, out, &r)
            });
            work[i].data_mut().copy_from_slice(&data);
            numeric.push(d);
        }
    }
    relative_error(&analytic, &numeric)
}

type Instance<T> = (ParamStore<T>, Vec<Tensor<T>>, Box<BlockFn<T>>);
type Maker<T> = fn(&mut ChaCha8Rng, Mode) -> Instance<T>;

/// Relative error of the gradients of `inst` (its inputs and every
/// parameter) against central differences of `wide`: the same block in f64,
/// loaded with exactly the same values.
///
/// Differencing in f64 keeps the step far below the distance to the nearest
/// ReLU kink; an f32 step large enough to beat rounding crosses kinks inside
/// batch-normalized blocks often enough to swamp the comparison.
fn block_error<T: Precision>(inst: &mut Instance<T>, wide: &mut Instance<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let (store, inputs, build) = inst;
    let mut r = None;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, store, &vars).unwrap();
    let loss = weighted_sum(&mut g, out, &mut r, rng);
    g.backward(loss).unwrap();
    store.zero_grad();
    store.accumulate_grads(&g);
    let mut analytic = Vec::new();
    for v in &vars {
        analytic.extend(g.grad(*v).expect("input gradient").to_f64_vec());
    }
    for p in store.params() {
        match &p.grad {
            Some(gr) => analytic.extend(gr.to_f64_vec()),
            None => analytic.extend(std::iter::repeat_n(0.0, p.value.numel())),
        }
    }

    let (wstore, _, wbuild) = wide;
    assert_eq!(wstore.params().len(), store.params().len());
    for (dst, src) in wstore.params_mut().iter_mut().zip(store.params()) {
        assert_eq!(dst.name, src.name);
        dst.value = src.value.cast();
    }
    for i in 0..store.buffers().len() {
        *wstore.buffer_mut(BufferId(i)) = store.buffers()[i].value.cast();
    }
    let r: Option<Tensor<f64>> = r.map(|t| t.cast());
    let loss_at = |store: &mut ParamStore<f64>, ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = wbuild(&mut g, store, &vars).unwrap();
        probe(&g, out, &r)
    };

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let mut data = work[i].data().to_vec();
            let d = central::<f64>(&mut data, j, |x| {
                work[i].data_mut().copy_from_slice(x);
                loss_at(wstore, &work)
            });
            work[i].data_mut().copy_from_slice(&data);
            numeric.push(d);
        }
    }
    for p in 0..wstore.params().len() {
        for j in 0..wstore.params()[p].value.numel() {
            let mut data = wstore.params()[p].value.data().to_vec();
            let d = central::<f64>(&mut data, j, |x| {
                wstore.params_mut()[p].value.data_mut().copy_from_slice(x);
                loss_at(wstore, &work)
            });
            wstore.params_mut()[p].value.data_mut().copy_from_slice(&data);
            numeric.push(d);
        }
    }
    relative_error(&analytic, &numeric)
}

/// Running statistics drawn away from the defaults so eval mode is exercised.
fn randomize_buffers<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.buffers().iter().map(|b| b.name.clone()).collect();
    for name in names {
        let id = store.find_buffer(&name).unwrap();
        let var = name.ends_with("running_var");
        for v in store.buffer_mut(id).data_mut() {
            *v = T::from_f64(if var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.5..0.5) });
        }
    }
}

/// Randomize batch-norm affine parameters, which start at 1 and 0.
fn randomize_affine<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        if p.name.ends_with("gamma") || p.name.ends_with("beta") {
            for v in p.value.data_mut() {
                *v = T::from_f64(rng.random_range(-1.0..1.0) + if p.name.ends_with("gamma") { 1.0 } else { 0.0 });
            }
        }
    }
}

fn mode_of(instance: usize) -> Mode {
    if instance % 2 == 0 {
        Mode::Train
    } else {
        Mode::Eval
    }
}

fn run_op<T: Precision>(
    name: &str,
    seed: u64,
    make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<T>>, Box<OpFn<T>>),
) -> Check {
    let mut check = Check::new(format!("grad {} {name}", T::NAME), T::TOL, INSTANCES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..INSTANCES {
        let (inputs, build) = make(&mut rng);
        check.record(op_error(build.as_ref(), &inputs, &mut rng));
    }
    check
}

/// Every graph op, each over [`INSTANCES`] random instances.
pub fn op_checks<T: Precision>() -> Vec<Check> {
    let mut out = Vec::new();
    out.push(run_op::<T>("add (broadcast rhs)", 1, |rng| {
        (vec![random(rng, &[3, 4]), random(rng, &[4])], Box::new(|g, v| g.add(v[0], v[1])))
    }));
    out.push(run_op::<T>("sub (broadcast lhs)", 2, |rng| {
        (vec![random(rng, &[3, 4]), random(rng, &[2, 3, 4])], Box::new(|g, v| g.sub(v[0], v[1])))
    }));
    out.push(run_op::<T>("mul", 3, |rng| {
        (vec![random(rng, &[2, 3, 4]), random(rng, &[2, 3, 4])], Box::new(|g, v| g.mul(v[0], v[1])))
    }));
    out.push(run_op::<T>("mul (broadcast rhs)", 4, |rng| {
        (vec![random(rng, &[2, 3, 4]), random(rng, &[3, 4])], Box::new(|g, v| g.mul(v[0], v[1])))
    }));
    out.push(run_op::<T>("scale", 5, |rng| {
        let s = T::from_f64(rng.random_range(-2.0..2.0));
        (vec![random(rng, &[3, 5])], Box::new(move |g, v| Ok(g.scale(v[0], s))))
    }));
    out.push(run_op::<T>("relu", 6, |rng| (vec![off_kink(rng, &[4, 5])], Box::new(|g, v| Ok(g.relu(v[0]))))));
    out.push(run_op::<T>("sum_all", 7, |rng| (vec![random(rng, &[3, 4])], Box::new(|g, v| Ok(g.sum_all(v[0]))))));
    out.push(run_op::<T>("matmul 2-d", 8, |rng| {
        (vec![random(rng, &[3, 4]), random(rng, &[4, 5])], Box::new(|g, v| g.matmul(v[0], v[1])))
    }));
    out.push(run_op::<T>("matmul batched", 9, |rng| {
        (vec![random(rng, &[2, 3, 4]), random(rng, &[2, 4, 5])], Box::new(|g, v| g.matmul(v[0], v[1])))
    }));
    out.push(run_op::<T>("matmul shared rhs", 10, |rng| {
        (vec![random(rng, &[2, 3, 4]), random(rng, &[4, 5])], Box::new(|g, v| g.matmul(v[0], v[1])))
    }));
    out.push(run_op::<T>("matmul shared lhs", 11, |rng| {
        (vec![random(rng, &[3, 4]), random(rng, &[2, 4, 5])], Box::new(|g, v| g.matmul(v[0], v[1])))
    }));
    out.push(run_op::<T>("linear", 12, |rng| {
        (
            vec![random(rng, &[2, 3, 4]), random(rng, &[5, 4]), random(rng, &[5])],
            Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        )
    }));
    out.push(run_op::<T>("linear (no bias)", 13, |rng| {
        (vec![random(rng, &[6, 4]), random(rng, &[3, 4])], Box::new(|g, v| g.linear(v[0], v[1], None)))
    }));
    for axis in 0..3 {
        out.push(run_op::<T>(&format!("softmax axis {axis}"), 14 + axis as u64, move |rng| {
            (vec![random(rng, &[3, 4, 5])], Box::new(move |g, v| g.softmax(v[0], axis)))
        }));
    }
    out.push(run_op::<T>("attention", 17, |rng| {
        let heads = if rng.random_bool(0.5) { 1 } else { 2 };
        (
            vec![random(rng, &[2, 5, 6]), random(rng, &[2, 5, 6]), random(rng, &[2, 5, 6])],
            Box::new(move |g, v| g.attention(v[0], v[1], v[2], heads)),
        )
    }));
    for axis in 0..3 {
        out.push(run_op::<T>(&format!("mean axis {axis}"), 18 + axis as u64, move |rng| {
            (vec![random(rng, &[3, 4, 5])], Box::new(move |g, v| g.mean(v[0], axis)))
        }));
        out.push(run_op::<T>(&format!("max axis {axis}"), 21 + axis as u64, move |rng| {
            (vec![spread(rng, &[3, 4, 5])], Box::new(move |g, v| g.max(v[0], axis)))
        }));
    }
    for axis in 0..3 {
        out.push(run_op::<T>(&format!("concat axis {axis}"), 24 + axis as u64, move |rng| {
            let mut a = [2, 3, 4];
            let mut b = [2, 3, 4];
            a[axis] = 2;
            b[axis] = 3;
            (vec![random(rng, &a), random(rng, &b)], Box::new(move |g, v| g.concat(&[v[0], v[1]], axis)))
        }));
    }
    out.push(run_op::<T>("gather_rows (repeats)", 27, |rng| {
        let index: Vec<usize> = (0..8).map(|_| rng.random_range(0..6)).collect();
        (vec![random(rng, &[6, 3])], Box::new(move |g, v| g.gather_rows(v[0], &index, &[2, 4])))
    }));
    out.push(run_op::<T>("reshape", 28, |rng| {
        (vec![random(rng, &[2, 3, 4])], Box::new(|g, v| g.reshape(v[0], &[6, 4])))
    }));
    for (a0, a1) in [(0, 1), (0, 2), (1, 2)] {
        out.push(run_op::<T>(&format!("transpose {a0}<->{a1}"), 29 + (a0 + a1) as u64, move |rng| {
            (vec![random(rng, &[2, 3, 4])], Box::new(move |g, v| g.transpose(v[0], a0, a1)))
        }));
    }
    out.push(run_op::<T>("batch_norm (batch stats)", 33, |rng| {
        let eps = T::from_f64(1e-5);
        (
            vec![random(rng, &[2, 5, 3]), random(rng, &[3]), random(rng, &[3])],
            Box::new(move |g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnStats::Batch { eps })?.0)),
        )
    }));
    out.push(run_op::<T>("batch_norm (fixed stats)", 34, |rng| {
        let eps = T::from_f64(1e-5);
        let mean: Vec<T> = uniform(rng, 3, -0.5, 0.5).into_iter().map(T::from_f64).collect();
        let var: Vec<T> = uniform(rng, 3, 0.5, 2.0).into_iter().map(T::from_f64).collect();
        (
            vec![random(rng, &[4, 3]), random(rng, &[3]), random(rng, &[3])],
            Box::new(move |g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnStats::Fixed { mean: &mean, var: &var, eps })?.0)),
        )
    }));
    out.push(run_op::<T>("cross_entropy", 35, |rng| {
        let targets: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        (vec![random(rng, &[6, 4])], Box::new(move |g, v| g.cross_entropy(v[0], &targets)))
    }));
    out
}

fn run_block<T: Precision>(name: &str, seed: u64, make: Maker<T>, make_wide: Maker<f64>) -> Check {
    let mut check = Check::new(format!("grad {} {name}", T::NAME), T::TOL, INSTANCES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..INSTANCES {
        // Same draws, so the same architecture and inputs in both precisions.
        let mut wide_rng = rng.clone();
        let mut inst = make(&mut rng, mode_of(i));
        let mut wide = make_wide(&mut wide_rng, mode_of(i));
        randomize_affine(&mut inst.0, &mut rng);
        randomize_buffers(&mut inst.0, &mut rng);
        check.record(block_error(&mut inst, &mut wide, &mut rng));
    }
    check
}

/// Inputs on a 1/256 grid and axis-aligned normals: every value and every
/// offset is exact in f32, so both precisions see the same cloud.
fn grid_cloud<R: Rng>(rng: &mut R, n: usize) -> PointCloud {
    let points = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-256i32..=256) as f64 / 256.0)).collect();
    let normals = (0..n)
        .map(|_| {
            let mut v = [0.0; 3];
            v[rng.random_range(0..3)] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            v
        })
        .collect();
    PointCloud::new(points).unwrap().with_normals(normals).unwrap()
}

fn lpe_block<T: Scalar>(rng: &mut ChaCha8Rng, mode: Mode) -> Instance<T> {
    let use_normals = rng.random_bool(0.5);
    let cfg = LpeConfig { c: 4, k: 4, c_out: 5, hidden: vec![4], use_normals };
    let mut store = ParamStore::new();
    let lpe = Lpe::new(&mut store, "lpe", cfg, rng).unwrap();
    let clouds: Vec<_> = (0..2).map(|_| grid_cloud(rng, 7)).collect();
    let nbs: Vec<_> = clouds.iter().map(|c| build_neighborhoods(c, 4).unwrap()).collect();
    let items: Vec<_> = clouds.iter().zip(&nbs).collect();
    let input = LpeInput::<T>::new(&items, use_normals).unwrap();
    (store, vec![], Box::new(move |g, store, _| lpe.forward(g, store, &input, mode)))
}

fn encoder_block<T: Scalar>(rng: &mut ChaCha8Rng, mode: Mode) -> Instance<T> {
    let cfg = AfeConfig { n_encoders: 1, d_model: 6, heads: 2, d_ff: 5 };
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", &cfg, rng).unwrap();
    (
        store,
        vec![random(rng, &[2, 5, 6])],
        Box::new(move |g, store, v| Ok(enc.forward(g, store, v[0], mode, false)?.0)),
    )
}

fn decomposition_block<T: Scalar>(rng: &mut ChaCha8Rng, mode: Mode) -> Instance<T> {
    let mut store = ParamStore::new();
    let head = DecompositionHead::new(&mut store, "head", &[6, 5, 4], rng).unwrap();
    (store, vec![random(rng, &[2, 5, 6])], Box::new(move |g, store, v| head.forward(g, store, v[0], mode)))
}

fn classifier_block<T: Scalar>(rng: &mut ChaCha8Rng, mode: Mode) -> Instance<T> {
    let normals = rng.random_bool(0.5);
    let cfg = ClassifierConfig {
        feature_width: 5,
        coord_width: if normals { 6 } else { 3 },
        stage_widths: vec![6, 5],
        n_classes: 3,
    };
    let cw = cfg.coord_width;
    let mut store = ParamStore::new();
    let head = ClassifierHead::new(&mut store, "cls", cfg, rng).unwrap();
    (
        store,
        vec![random(rng, &[2, 6, 5]), random(rng, &[2, 6, cw])],
        Box::new(move |g, store, v| head.forward(g, store, v[0], v[1], mode)),
    )
}

/// The model blocks at micro scale, alternating train and eval mode.
pub fn block_checks<T: Precision>() -> Vec<Check> {
    vec![
        run_block::<T>("local encoder (micro)", 101, lpe_block::<T>, lpe_block::<f64>),
        run_block::<T>("attention encoder (one)", 102, encoder_block::<T>, encoder_block::<f64>),
        run_block::<T>("decomposition head", 103, decomposition_block::<T>, decomposition_block::<f64>),
        run_block::<T>("classifier head", 104, classifier_block::<T>, classifier_block::<f64>),
    ]
}
