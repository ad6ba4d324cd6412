use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use abdnet::afe::{attention_csv, attention_ply, top_attention};
use abdnet::datagen::{generate_dataset, load_dataset, DataObject, Dataset, DatasetSpec};
use abdnet::model::DecomposerConfig;
use abdnet::pipeline::{
    ablate_density_k, ablate_noise, curves_csv, evaluate_classifier, evaluate_decomposition, load_classifier,
    load_decomposer, train_classifier, train_decomposer, Checkpoint, EpochRecord, LogEvent, ModelKind,
    ObjectFeatures, TrainConfig,
};
use abdnet::pointcloud::{self, Format};
use anyhow::{Context, Result};

use crate::cli::{Ablate, Command, Decompose, Eval, GenData, Preset, SplitArg, TrainClassifier, TrainDecomposer, TrainOpts};
use crate::Usage;

pub struct Ctx {
    pub seed: u64,
    pub verbose: bool,
    pub started: Instant,
}

impl Ctx {
    fn log(&self, event: &LogEvent) {
        println!("{}", event.to_json());
        if self.verbose {
            eprintln!("[{:>8.1}s] {}", self.started.elapsed().as_secs_f64(), event.to_json());
        }
    }
}

pub fn run(command: &Command, ctx: &Ctx) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a, ctx),
        Command::TrainDecomposer(a) => train_dec(a, ctx),
        Command::TrainClassifier(a) => train_clf(a, ctx),
        Command::Decompose(a) => decompose(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(Ablate::DensityK(a)) => {
            let (model, objects) = ablation_inputs(&a.opts.model, &a.opts.data, a.opts.split, a.opts.max_objects)?;
            let refs: Vec<&DataObject> = objects.iter().collect();
            let grid = ablate_density_k(&model, &refs, &a.densities, &a.ks, ctx.seed)?;
            write_file(&a.opts.out, &grid.to_csv())?;
            println!("density grid {}x{} over {} objects -> {}", a.densities.len(), a.ks.len(), refs.len(), a.opts.out.display());
            Ok(())
        }
        Command::Ablate(Ablate::Noise(a)) => {
            let (mut model, objects) = ablation_inputs(&a.opts.model, &a.opts.data, a.opts.split, a.opts.max_objects)?;
            let refs: Vec<&DataObject> = objects.iter().collect();
            let curve = ablate_noise(&mut model, &refs, &a.sigmas, a.draws, ctx.seed)?;
            write_file(&a.opts.out, &curve.to_csv())?;
            for (s, m) in curve.sigmas.iter().zip(&curve.mean) {
                println!("sigma {s:.3}: mean accuracy {m:.4}");
            }
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn select(data: &Dataset, split: SplitArg) -> Vec<&DataObject> {
    match split {
        SplitArg::Train => data.train(),
        SplitArg::Test => data.test(),
        SplitArg::All => data.objects.iter().collect(),
    }
}

fn gen_data(a: &GenData, ctx: &Ctx) -> Result<()> {
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(Usage(format!("--test-fraction {} outside [0, 1)", a.test_fraction)).into());
    }
    let n_test = (a.objects as f64 * a.test_fraction).round() as usize;
    let spec = DatasetSpec {
        n_train: a.objects - n_test,
        n_test,
        n_points: a.points,
        categories: a.categories.clone(),
        seed: ctx.seed,
        max_planar_fraction: (a.max_planar_fraction < 1.0).then_some(a.max_planar_fraction),
        pose: a.pose.into(),
    };
    let data = generate_dataset(&spec)?;
    data.save(&a.out)?;
    let totals = data.label_totals();
    let all: usize = totals.iter().sum();
    println!(
        "{} train / {} test objects of {} points -> {}",
        spec.n_train,
        spec.n_test,
        spec.n_points,
        a.out.display()
    );
    for l in pointcloud::ShapeLabel::ALL {
        println!("{:>8}: {:.4} of points", l.name(), totals[l.index()] as f64 / all.max(1) as f64);
    }
    Ok(())
}

fn train_config(t: &TrainOpts, base: TrainConfig, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: t.batch_size,
        lr: t.lr,
        lr_decay: t.lr_decay,
        decay_period: t.decay_period,
        epochs,
        seed,
        use_normals: t.normals.on(),
        val_fraction: t.val_fraction,
        ..base
    }
}

fn resume_pair(t: &TrainOpts) -> Result<Option<(Checkpoint, Checkpoint)>> {
    let Some(last_path) = &t.resume else { return Ok(None) };
    let name = last_path.to_string_lossy();
    let Some(best_path) = name.strip_suffix(".last") else {
        return Err(Usage(format!("--resume expects a `.last` checkpoint, got {name}")).into());
    };
    Ok(Some((load_ckpt(last_path)?, load_ckpt(Path::new(best_path))?)))
}

fn save_outcome(t: &TrainOpts, best: &Checkpoint, last: &Checkpoint, history: &[EpochRecord]) -> Result<()> {
    if let Some(dir) = t.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    best.save(&t.out)?;
    last.save(&with_suffix(&t.out, ".last"))?;
    let curves = t.curves.clone().unwrap_or_else(|| with_suffix(&t.out, ".curves.csv"));
    write_file(&curves, &curves_csv(history))
}

fn train_dec(a: &TrainDecomposer, ctx: &Ctx) -> Result<()> {
    let t = &a.train;
    let data = load_data(&t.data)?;
    let mut cfg = TrainConfig { k: a.k, ..train_config(t, TrainConfig::decomposer(), a.epochs, ctx.seed) };
    cfg.augment.rotation = a.rotation.into();
    let model = match a.preset {
        Preset::Desk => DecomposerConfig::desk(cfg.use_normals),
        Preset::Reference => DecomposerConfig::reference(),
    };
    let resume = resume_pair(t)?;
    let out = train_decomposer(&data, model, &cfg, resume.as_ref().map(|(l, b)| (l, b)), &mut |e| ctx.log(e))?;
    save_outcome(t, &out.best, &out.last, &out.history)?;
    if let Some(r) = &out.test_report {
        write_file(&with_suffix(&t.out, ".test.csv"), &r.to_csv())?;
    }
    Ok(())
}

fn train_clf(a: &TrainClassifier, ctx: &Ctx) -> Result<()> {
    let t = &a.train;
    let data = load_data(&t.data)?;
    let backbone = load_ckpt(&a.backbone)?;
    let mut cfg = train_config(t, TrainConfig::classifier(), a.epochs, ctx.seed);
    cfg.augment.dropout_p = a.dropout;
    let resume = resume_pair(t)?;
    let out = train_classifier(
        &data,
        &backbone,
        a.stages.clone(),
        &cfg,
        resume.as_ref().map(|(l, b)| (l, b)),
        &mut |e| ctx.log(e),
    )?;
    save_outcome(t, &out.best, &out.last, &out.history)?;
    if let Some(r) = &out.test_report {
        let names: Vec<String> = data.spec.categories.iter().map(|c| c.to_string()).collect();
        write_file(&with_suffix(&t.out, ".test.csv"), &r.to_csv(&names))?;
    }
    println!("backbone hash {} (unchanged)", out.backbone_hash_after);
    Ok(())
}

fn decompose(a: &Decompose) -> Result<()> {
    let (mut model, _) = load_decomposer(&load_ckpt(&a.model)?)?;
    let format = Format::from_path(&a.input)?;
    let mut cloud = pointcloud::load(&a.input, format).with_context(|| format!("reading {}", a.input.display()))?;
    if a.normalize.on() {
        cloud = cloud.normalize_unit_sphere();
    }
    if let Some(q) = a.attention_query {
        if q >= cloud.len() {
            return Err(Usage(format!("--attention-query {q} out of range for {} points", cloud.len())).into());
        }
    }
    let truth = cloud.labels().map(<[_]>::to_vec);
    let labels = match (a.attention_query, &a.attention_out) {
        (Some(q), Some(dir)) => {
            let (labels, records) = model.predict_with_attention(&cloud)?;
            let n_enc = model.cfg.afe.n_encoders;
            let enc = a.attention_encoder.unwrap_or(n_enc - 1);
            if enc >= n_enc {
                return Err(Usage(format!("--attention-encoder {enc} out of range for {n_enc} encoders")).into());
            }
            let tops = top_attention(&records, q, enc, a.top.min(cloud.len()))?;
            fs::create_dir_all(dir)?;
            fs::write(dir.join("attention.csv"), attention_csv(enc, &tops))?;
            for (head, top) in tops.iter().enumerate() {
                fs::write(dir.join(format!("head{head}.ply")), attention_ply(&cloud, q, top))?;
            }
            let rows: usize = tops.iter().map(Vec::len).sum();
            println!("attention of point {q} (encoder {enc}): {rows} rows -> {}", dir.display());
            labels
        }
        _ => model.predict(&cloud)?,
    };
    if let Some(truth) = truth {
        let hits = labels.iter().zip(&truth).filter(|(p, t)| p == t).count();
        println!("accuracy against input labels: {:.4}", hits as f64 / truth.len() as f64);
    }
    let mut counts = [0usize; 4];
    for l in &labels {
        counts[l.index()] += 1;
    }
    let labeled = cloud.with_labels(labels)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    pointcloud::save(&labeled, &a.out, Format::from_path(&a.out)?, true)?;
    for l in pointcloud::ShapeLabel::ALL {
        println!("{:>8}: {} points", l.name(), counts[l.index()]);
    }
    Ok(())
}

fn eval(a: &Eval) -> Result<()> {
    let ckpt = load_ckpt(&a.model)?;
    let data = load_data(&a.data)?;
    let objects = select(&data, a.split);
    match ckpt.kind {
        ModelKind::Decomposer => {
            let (mut model, _) = load_decomposer(&ckpt)?;
            let report = evaluate_decomposition(&mut model, &objects)?;
            write_file(&a.out, &report.to_csv())?;
            println!("overall accuracy {:.6} over {} points", report.overall, report.points);
            for l in pointcloud::ShapeLabel::ALL {
                if let Some(acc) = report.per_class[l.index()] {
                    println!("{:>8}: {acc:.6}", l.name());
                }
            }
            println!("parameters {}", report.param_count);
        }
        ModelKind::Classifier => {
            let Some(bb_path) = &a.backbone else {
                return Err(Usage("--backbone is required to evaluate a classifier".into()).into());
            };
            let bb_ckpt = load_ckpt(bb_path)?;
            let (mut clf, meta) = load_classifier(&ckpt)?;
            if bb_ckpt.weights_hash() != meta.backbone_hash {
                return Err(Usage("the backbone does not match the one the classifier was trained on".into()).into());
            }
            if meta.categories != data.spec.categories {
                return Err(Usage("dataset categories differ from the classifier's".into()).into());
            }
            let (mut bb, _) = load_decomposer(&bb_ckpt)?;
            let feats =
                objects.iter().map(|o| ObjectFeatures::compute(&mut bb, &o.cloud)).collect::<abdnet::Result<Vec<_>>>()?;
            let mut report = evaluate_classifier(&mut clf, &feats)?;
            report.param_count += bb.param_count();
            let names: Vec<String> = meta.categories.iter().map(|c| c.to_string()).collect();
            write_file(&a.out, &report.to_csv(&names))?;
            println!("accuracy {:.6} over {} objects", report.accuracy, report.objects);
            println!("parameters {}", report.param_count);
        }
    }
    std::io::stdout().flush()?;
    Ok(())
}

fn ablation_inputs(
    model: &Path,
    data: &Path,
    split: SplitArg,
    max_objects: usize,
) -> Result<(abdnet::model::Decomposer<f32>, Vec<DataObject>)> {
    let (model, _) = load_decomposer(&load_ckpt(model)?)?;
    let data = load_data(data)?;
    let objects: Vec<DataObject> = select(&data, split).into_iter().take(max_objects).cloned().collect();
    if objects.is_empty() {
        return Err(Usage("no objects in the selected split".into()).into());
    }
    Ok((model, objects))
}
