use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, ModelKind, OptimizerState, RngState};
use super::eval::{evaluate_classifier, evaluate_decomposition, ClassReport, EvalReport, ObjectFeatures};
use super::{ClassifierMeta, DecomposerMeta, EpochRecord, LogEvent, TrainConfig};
use crate::datagen::{DataObject, Dataset, Split};
use crate::error::{Error, Result};
use crate::heads::{argmax, ClassifierConfig};
use crate::model::{Classifier, Decomposer, DecomposerConfig};
use crate::neighborhood::k_for_density;
use crate::nn::{Adam, Mode};
use crate::pointcloud::PointCloud;
use crate::tensor::{Graph, Tensor};

/// Result of [`train_decomposer`].
pub struct DecomposerOutcome {
    /// Weights of the epoch with the best validation accuracy.
    pub best: Checkpoint,
    /// Final weights with optimizer and random state, for resuming.
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Best model on every training-split object (validation included).
    pub train_report: EvalReport,
    pub test_report: Option<EvalReport>,
}

/// Result of [`train_classifier`].
pub struct ClassifierOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub test_report: Option<ClassReport>,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

/// Rebuild a decomposer from its checkpoint.
pub fn load_decomposer(ckpt: &Checkpoint) -> Result<(Decomposer<f32>, DecomposerMeta)> {
    if ckpt.kind != ModelKind::Decomposer {
        return Err(Error::Checkpoint("expected a decomposer checkpoint".into()));
    }
    let meta: DecomposerMeta = serde_json::from_str(&ckpt.meta)?;
    let mut model = Decomposer::new(meta.model.clone(), 0)?;
    ckpt.apply_to(&mut model.store)?;
    Ok((model, meta))
}

/// Rebuild a classifier head from its checkpoint.
pub fn load_classifier(ckpt: &Checkpoint) -> Result<(Classifier<f32>, ClassifierMeta)> {
    if ckpt.kind != ModelKind::Classifier {
        return Err(Error::Checkpoint("expected a classifier checkpoint".into()));
    }
    let meta: ClassifierMeta = serde_json::from_str(&ckpt.meta)?;
    let mut model = Classifier::new(meta.model.clone(), 0)?;
    ckpt.apply_to(&mut model.store)?;
    Ok((model, meta))
}

/// Hold out `fraction` of `ids` (at least one when there are two or more).
fn split_validation(ids: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut ids = ids.to_vec();
    ids.shuffle(rng);
    let n_val = if fraction > 0.0 && ids.len() >= 2 { ((fraction * ids.len() as f64).round() as usize).max(1) } else { 0 };
    let train = ids.split_off(n_val);
    (train, ids)
}

fn points_per_object(objects: &[&DataObject]) -> Result<usize> {
    let n = objects.first().ok_or_else(|| Error::invalid("dataset has no training objects"))?.cloud.len();
    if objects.iter().any(|o| o.cloud.len() != n) {
        return Err(Error::invalid("training objects must all have the same number of points"));
    }
    Ok(n)
}

fn batch_accuracy(logits: &[f32], targets: &[usize], width: usize) -> f64 {
    let hits = logits.chunks(width).zip(targets).filter(|(row, &t)| argmax(row) == t).count();
    hits as f64 / targets.len() as f64
}

struct Progress {
    history: Vec<EpochRecord>,
    best_epoch: usize,
    best_val: f64,
}

/// Train the decomposer on the training split of `data`.
///
/// `resume` continues from a `(last, best)` checkpoint pair written by an
/// earlier call with the same configuration (the epoch budget may grow); the
/// continuation matches an uninterrupted run exactly.
pub fn train_decomposer(
    data: &Dataset,
    model_cfg: DecomposerConfig,
    cfg: &TrainConfig,
    resume: Option<(&Checkpoint, &Checkpoint)>,
    log: &mut dyn FnMut(&LogEvent),
) -> Result<DecomposerOutcome> {
    cfg.validate()?;
    let all_train = data.train();
    let n_points = points_per_object(&all_train)?;
    let mut model_cfg = model_cfg;
    model_cfg.lpe.k = cfg.k.unwrap_or_else(|| k_for_density(n_points)).min(n_points);
    model_cfg.lpe.use_normals = cfg.use_normals;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<usize> = (0..all_train.len()).collect();
    let (train_ids, val_ids) = split_validation(&ids, cfg.val_fraction, &mut rng);
    if train_ids.len() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "dataset too small for one full batch: {} training objects, batch size {}",
            train_ids.len(),
            cfg.batch_size
        )));
    }
    let mut model = Decomposer::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.adam(), &model.store);
    let mut best_store = model.store.clone();
    let mut progress = Progress { history: Vec::new(), best_epoch: 0, best_val: f64::NEG_INFINITY };
    if let Some((last, best)) = resume {
        let (resumed, meta) = load_decomposer(last)?;
        if meta.model != model_cfg || !cfg.resumable_from(&meta.train) || meta.points_per_object != n_points {
            return Err(Error::Checkpoint("resume checkpoint was trained with a different configuration".into()));
        }
        let (best_model, best_meta) = load_decomposer(best)?;
        if best_meta.best_epoch != meta.best_epoch || best_meta.model != model_cfg {
            return Err(Error::Checkpoint("best checkpoint does not belong to the resumed run".into()));
        }
        model = resumed;
        best_store = best_model.store;
        adam = last
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("resume checkpoint has no optimizer state".into()))?
            .restore(cfg.adam(), &model.store)?;
        rng = last.rng.as_ref().ok_or_else(|| Error::Checkpoint("resume checkpoint has no random state".into()))?.restore();
        progress = Progress { history: meta.history, best_epoch: meta.best_epoch, best_val: meta.best_val_accuracy };
    }
    let start = progress.history.len();
    log(&LogEvent::Start {
        model: "decomposer",
        train_objects: train_ids.len(),
        val_objects: val_ids.len(),
        k: model_cfg.lpe.k,
        start_epoch: start,
        epochs: cfg.epochs,
    });
    for epoch in start..cfg.epochs {
        let lr = adam.cfg.lr_at_epoch(epoch);
        let mut order = train_ids.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut acc_sum, mut steps) = (0.0, 0.0, 0);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let clouds = chunk
                .iter()
                .map(|&i| all_train[i].cloud.augment(&cfg.augment, &mut rng))
                .collect::<Result<Vec<PointCloud>>>()?;
            let refs: Vec<&PointCloud> = clouds.iter().collect();
            let targets: Vec<usize> = clouds
                .iter()
                .flat_map(|c| c.labels().expect("training objects are labeled").iter().map(|l| l.index()))
                .collect();
            let input = model.prepare(&refs)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, &input, Mode::Train, false)?;
            let loss = g.cross_entropy(out.logits, &targets)?;
            g.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate_grads(&g);
            adam.update(&mut model.store, lr)?;
            loss_sum += g.value(loss).item() as f64;
            acc_sum += batch_accuracy(g.value(out.logits).data(), &targets, 4);
            steps += 1;
        }
        let (train_loss, train_accuracy) = (loss_sum / steps as f64, acc_sum / steps as f64);
        let val_accuracy = if val_ids.is_empty() {
            train_accuracy
        } else {
            let val: Vec<&DataObject> = val_ids.iter().map(|&i| all_train[i]).collect();
            evaluate_decomposition(&mut model, &val)?.overall
        };
        let record = EpochRecord { epoch: epoch + 1, lr, train_loss, train_accuracy, val_accuracy };
        log(&LogEvent::Epoch(record.clone()));
        progress.history.push(record);
        if val_accuracy > progress.best_val {
            progress.best_val = val_accuracy;
            progress.best_epoch = epoch + 1;
            best_store = model.store.clone();
            log(&LogEvent::Best { epoch: epoch + 1, val_accuracy });
        }
    }
    let meta = DecomposerMeta {
        model: model_cfg.clone(),
        train: cfg.clone(),
        points_per_object: n_points,
        epochs_done: cfg.epochs,
        best_epoch: progress.best_epoch,
        best_val_accuracy: progress.best_val,
        history: progress.history.clone(),
    };
    let meta_json = serde_json::to_string(&meta)?;
    let mut last = Checkpoint::from_store(ModelKind::Decomposer, meta_json.clone(), &model.store);
    last.optimizer = Some(OptimizerState::capture(&adam));
    last.rng = Some(RngState::capture(&rng));
    let best = Checkpoint::from_store(ModelKind::Decomposer, meta_json, &best_store);
    model.store = best_store;
    let train_report = evaluate_decomposition(&mut model, &all_train)?;
    let test = data.test();
    let test_report = if test.is_empty() { None } else { Some(evaluate_decomposition(&mut model, &test)?) };
    log(&LogEvent::Final {
        model: "decomposer",
        best_epoch: progress.best_epoch,
        train_accuracy: train_report.overall,
        test_accuracy: test_report.as_ref().map(|r| r.overall),
    });
    Ok(DecomposerOutcome { best, last, history: progress.history, train_report, test_report })
}

/// Replace each point's row with the first point's row with probability `p`.
fn feature_dropout(o: &ObjectFeatures, p: f64, rng: &mut ChaCha8Rng) -> Result<ObjectFeatures> {
    if p == 0.0 {
        return Ok(o.clone());
    }
    let (n, f) = (o.len(), o.features.shape()[1]);
    let (fs, cs) = (o.features.data(), o.coords.data());
    let mut feats = Vec::with_capacity(n * f);
    let mut coords = Vec::with_capacity(n * 6);
    for i in 0..n {
        let src = if rng.random::<f64>() < p { 0 } else { i };
        feats.extend_from_slice(&fs[src * f..(src + 1) * f]);
        coords.extend_from_slice(&cs[src * 6..(src + 1) * 6]);
    }
    Ok(ObjectFeatures { features: Tensor::new([n, f], feats)?, coords: Tensor::new([n, 6], coords)?, class: o.class })
}

/// Train a classifier head on frozen backbone features of every object.
///
/// Features are computed once in eval mode; the backbone weights are hashed
/// before and after and training fails if they differ. `stage_widths`
/// overrides the desk-scale stage widths.
pub fn train_classifier(
    data: &Dataset,
    backbone: &Checkpoint,
    stage_widths: Option<Vec<usize>>,
    cfg: &TrainConfig,
    resume: Option<(&Checkpoint, &Checkpoint)>,
    log: &mut dyn FnMut(&LogEvent),
) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    let hash_before = backbone.weights_hash();
    let (mut bb, _) = load_decomposer(backbone)?;
    let n_classes = data.spec.categories.len();
    let mut model_cfg = ClassifierConfig::desk(n_classes, cfg.use_normals, bb.cfg.afe.d_model);
    if let Some(w) = stage_widths {
        model_cfg.stage_widths = w;
    }
    model_cfg.validate()?;
    if cfg.use_normals && data.objects.iter().any(|o| o.cloud.normals().is_none()) {
        return Err(Error::invalid("normals requested but some objects have none"));
    }
    let features = |split: Split, bb: &mut Decomposer<f32>| -> Result<Vec<ObjectFeatures>> {
        data.split(split).map(|o| ObjectFeatures::compute(bb, &o.cloud)).collect()
    };
    let train_feats = features(Split::Train, &mut bb)?;
    let test_feats = features(Split::Test, &mut bb)?;
    let hash_after = Checkpoint::from_store(ModelKind::Decomposer, backbone.meta.clone(), &bb.store).weights_hash();
    if hash_after != hash_before {
        return Err(Error::Checkpoint("backbone weights changed while extracting features".into()));
    }
    if train_feats.iter().chain(&test_feats).any(|o| o.class >= n_classes) {
        return Err(Error::invalid("object category outside the dataset's category list"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<usize> = (0..train_feats.len()).collect();
    let (train_ids, val_ids) = split_validation(&ids, cfg.val_fraction, &mut rng);
    if train_ids.len() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "dataset too small for one full batch: {} training objects, batch size {}",
            train_ids.len(),
            cfg.batch_size
        )));
    }
    let mut model = Classifier::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.adam(), &model.store);
    let mut best_store = model.store.clone();
    let mut progress = Progress { history: Vec::new(), best_epoch: 0, best_val: f64::NEG_INFINITY };
    if let Some((last, best)) = resume {
        let (resumed, meta) = load_classifier(last)?;
        if meta.model != model_cfg || !cfg.resumable_from(&meta.train) || meta.backbone_hash != hash_before {
            return Err(Error::Checkpoint("resume checkpoint was trained with a different configuration".into()));
        }
        let (best_model, best_meta) = load_classifier(best)?;
        if best_meta.best_epoch != meta.best_epoch || best_meta.model != model_cfg {
            return Err(Error::Checkpoint("best checkpoint does not belong to the resumed run".into()));
        }
        model = resumed;
        best_store = best_model.store;
        adam = last
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("resume checkpoint has no optimizer state".into()))?
            .restore(cfg.adam(), &model.store)?;
        rng = last.rng.as_ref().ok_or_else(|| Error::Checkpoint("resume checkpoint has no random state".into()))?.restore();
        progress = Progress { history: meta.history, best_epoch: meta.best_epoch, best_val: meta.best_val_accuracy };
    }
    let start = progress.history.len();
    log(&LogEvent::Start {
        model: "classifier",
        train_objects: train_ids.len(),
        val_objects: val_ids.len(),
        k: bb.k(),
        start_epoch: start,
        epochs: cfg.epochs,
    });
    let val: Vec<ObjectFeatures> = val_ids.iter().map(|&i| train_feats[i].clone()).collect();
    for epoch in start..cfg.epochs {
        let lr = adam.cfg.lr_at_epoch(epoch);
        let mut order = train_ids.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut acc_sum, mut steps) = (0.0, 0.0, 0);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let items = chunk
                .iter()
                .map(|&i| feature_dropout(&train_feats[i], cfg.augment.dropout_p, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ObjectFeatures> = items.iter().collect();
            let (f, c) = ObjectFeatures::batch(&refs, model_cfg.coord_width)?;
            let targets: Vec<usize> = items.iter().map(|o| o.class).collect();
            let mut g = Graph::new();
            let logits = model.forward(&mut g, f, c, Mode::Train)?;
            let loss = g.cross_entropy(logits, &targets)?;
            g.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate_grads(&g);
            adam.update(&mut model.store, lr)?;
            loss_sum += g.value(loss).item() as f64;
            acc_sum += batch_accuracy(g.value(logits).data(), &targets, n_classes);
            steps += 1;
        }
        let (train_loss, train_accuracy) = (loss_sum / steps as f64, acc_sum / steps as f64);
        let val_accuracy = if val.is_empty() { train_accuracy } else { evaluate_classifier(&mut model, &val)?.accuracy };
        let record = EpochRecord { epoch: epoch + 1, lr, train_loss, train_accuracy, val_accuracy };
        log(&LogEvent::Epoch(record.clone()));
        progress.history.push(record);
        if val_accuracy > progress.best_val {
            progress.best_val = val_accuracy;
            progress.best_epoch = epoch + 1;
            best_store = model.store.clone();
            log(&LogEvent::Best { epoch: epoch + 1, val_accuracy });
        }
    }
    let meta = ClassifierMeta {
        model: model_cfg,
        categories: data.spec.categories.clone(),
        backbone_hash: hash_before.clone(),
        train: cfg.clone(),
        epochs_done: cfg.epochs,
        best_epoch: progress.best_epoch,
        best_val_accuracy: progress.best_val,
        history: progress.history.clone(),
    };
    let meta_json = serde_json::to_string(&meta)?;
    let mut last = Checkpoint::from_store(ModelKind::Classifier, meta_json.clone(), &model.store);
    last.optimizer = Some(OptimizerState::capture(&adam));
    last.rng = Some(RngState::capture(&rng));
    let best = Checkpoint::from_store(ModelKind::Classifier, meta_json, &best_store);
    model.store = best_store;
    let train_accuracy = evaluate_classifier(&mut model, &train_feats)?.accuracy;
    let test_report = if test_feats.is_empty() {
        None
    } else {
        let mut r = evaluate_classifier(&mut model, &test_feats)?;
        r.param_count += bb.param_count();
        Some(r)
    };
    log(&LogEvent::Final {
        model: "classifier",
        best_epoch: progress.best_epoch,
        train_accuracy,
        test_accuracy: test_report.as_ref().map(|r| r.accuracy),
    });
    Ok(ClassifierOutcome {
        best,
        last,
        history: progress.history,
        test_report,
        backbone_hash_before: hash_before,
        backbone_hash_after: hash_after,
    })
}
