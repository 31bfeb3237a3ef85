//! Adam, warmup + reduce-on-plateau scheduling, early stopping, pooled-CCC
//! mini-batch training and clip-level k-fold cross-validation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{CccParts, EvalReport};
use crate::model::{Model, ModelConfig, Target};
use crate::numcore::{Matrix, ParamSet, Tape};
use crate::synthdata::{mix_seed, window, LabeledClip};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub init_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub folds: usize,
    /// Train only this fold; `None` runs every fold.
    pub fold: Option<usize>,
    pub window_length: usize,
    pub window_stride: usize,
    /// Targets trained as separate models.
    pub targets: Vec<Target>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            init_lr: 1e-4,
            min_lr: 1e-8,
            warmup_epochs: 5,
            plateau_patience: 5,
            plateau_factor: 0.1,
            weight_decay: 5e-4,
            max_epochs: 100,
            early_stop_patience: 10,
            folds: 6,
            fold: None,
            window_length: 64,
            window_stride: 43,
            targets: vec![Target::Valence, Target::Arousal],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.init_lr > 0.0) || !self.init_lr.is_finite() {
            return bad(format!("train.init_lr must be positive, got {}", self.init_lr));
        }
        if !(self.min_lr >= 0.0) || self.min_lr > self.init_lr {
            return bad(format!("train.min_lr must be in [0, init_lr], got {}", self.min_lr));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("train.plateau_factor must be in (0, 1), got {}", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("train patience values must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("train.weight_decay must be non-negative".into());
        }
        if self.max_epochs == 0 {
            return bad("train.max_epochs must be at least 1".into());
        }
        if self.folds < 2 {
            return bad("train.folds must be at least 2".into());
        }
        if let Some(f) = self.fold {
            if f >= self.folds {
                return bad(format!("train.fold {f} is out of range for {} folds", self.folds));
            }
        }
        if self.targets.is_empty() {
            return bad("train.targets must not be empty".into());
        }
        crate::synthdata::window_starts(self.window_length, self.window_length, self.window_stride)?;
        Ok(())
    }
}

/// Adam with bias correction; weight decay is added to the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Matrix], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Training(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::Training(format!("gradient shape mismatch for {}", params.name(id))));
            }
            if !g.is_finite() {
                return Err(Error::Training(format!("non-finite gradient for {}", params.name(id))));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g + weight_decay * *w;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                *w -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Per-epoch linear warmup for the first `warmup_epochs`, then
/// reduce-on-plateau.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scheduler {
    pub init_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub factor: f64,
    lr: f64,
    best: f64,
    since_improvement: usize,
    pub drops: usize,
}

impl Scheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            init_lr: cfg.init_lr,
            min_lr: cfg.min_lr,
            warmup_epochs: cfg.warmup_epochs,
            patience: cfg.plateau_patience,
            factor: cfg.plateau_factor,
            lr: cfg.init_lr,
            best: f64::NEG_INFINITY,
            since_improvement: 0,
            drops: 0,
        }
    }

    /// Learning rate for batch `batch` of `batches` in `epoch`. Warmup
    /// epochs ramp linearly from `init_lr / batches` to `init_lr`.
    pub fn lr(&self, epoch: usize, batch: usize, batches: usize) -> f64 {
        if epoch < self.warmup_epochs {
            (self.init_lr * (batch + 1) as f64 / batches.max(1) as f64).max(self.min_lr)
        } else {
            self.lr
        }
    }

    /// Plateau learning rate in effect after warmup.
    pub fn current(&self) -> f64 {
        self.lr
    }

    /// Records an epoch's validation CCC and returns the post-warmup rate.
    /// After `patience` epochs without a strict improvement the rate is
    /// multiplied by `factor` (clamped at `min_lr`) and the count restarts.
    /// Drops only happen once warmup is over.
    pub fn end_epoch(&mut self, epoch: usize, val_ccc: f64) -> f64 {
        if val_ccc > self.best {
            self.best = val_ccc;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        if epoch >= self.warmup_epochs && self.since_improvement >= self.patience {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.since_improvement = 0;
            self.drops += 1;
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the end of the epoch's last batch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_ccc: f64,
}

pub const HISTORY_HEADER: [&str; 4] = ["epoch", "lr", "train_loss", "val_ccc"];
pub const PREDICTIONS_HEADER: [&str; 4] = ["clip", "frame", "pred", "truth"];

pub fn write_history_csv<W: Write>(w: W, history: &[EpochRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(HISTORY_HEADER)?;
    for h in history {
        out.write_record([h.epoch.to_string(), h.lr.to_string(), h.train_loss.to_string(), h.val_ccc.to_string()])?;
    }
    out.flush().map_err(|e| Error::Training(e.to_string()))
}

/// Predictions of one clip for one label channel, valid frames only.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPrediction {
    pub clip: String,
    pub target: Target,
    pub frames: Vec<usize>,
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
}

pub fn write_predictions_csv<W: Write>(w: W, preds: &[ClipPrediction]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(PREDICTIONS_HEADER)?;
    for p in preds {
        for i in 0..p.frames.len() {
            out.write_record([p.clip.clone(), p.frames[i].to_string(), p.pred[i].to_string(), p.truth[i].to_string()])?;
        }
    }
    out.flush().map_err(|e| Error::Training(e.to_string()))
}

/// Result of evaluating a model on a set of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Pooled CCC per label channel, in the model's output order.
    pub ccc: Vec<(Target, f64)>,
    /// Per-clip CCC of the first channel, `None` when undefined.
    pub per_clip: Vec<(String, Option<f64>)>,
    pub predictions: Vec<ClipPrediction>,
    pub frames: usize,
}

impl Evaluation {
    /// Mean pooled CCC across channels.
    pub fn score(&self) -> f64 {
        self.ccc.iter().map(|c| c.1).sum::<f64>() / self.ccc.len().max(1) as f64
    }

    pub fn get(&self, t: Target) -> Option<f64> {
        self.ccc.iter().find(|c| c.0 == t).map(|c| c.1)
    }
}

/// Evaluation-mode predictions and pooled CCC over all valid frames.
pub fn evaluate(model: &Model, params: &ParamSet, clips: &[LabeledClip]) -> Result<Evaluation> {
    if clips.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let outputs: Vec<Matrix> =
        clips.par_iter().map(|c| model.predict(params, &c.audio, &c.visual, &c.valid)).collect::<Result<_>>()?;
    let channels = model.target.channels();
    let mut predictions = Vec::new();
    let mut ccc = Vec::new();
    for (row, &t) in channels.iter().enumerate() {
        let (mut all_p, mut all_y) = (Vec::new(), Vec::new());
        for (c, out) in clips.iter().zip(&outputs) {
            let frames: Vec<usize> = (0..c.len()).filter(|&i| c.valid[i]).collect();
            let pred: Vec<f64> = frames.iter().map(|&i| out.get(row, i)).collect();
            let truth: Vec<f64> = frames.iter().map(|&i| c.labels(t)[i]).collect();
            all_p.extend_from_slice(&pred);
            all_y.extend_from_slice(&truth);
            predictions.push(ClipPrediction { clip: c.id.clone(), target: t, frames, pred, truth });
        }
        ccc.push((t, CccParts::compute(&all_p, &all_y, None)?.ccc));
    }
    let first = &predictions[..clips.len()];
    let per_clip = first
        .iter()
        .map(|p| {
            let v = CccParts::compute(&p.pred, &p.truth, None).ok().filter(|c| !c.degenerate).map(|c| c.ccc);
            (p.clip.clone(), v)
        })
        .collect();
    let frames = first.iter().map(|p| p.frames.len()).sum();
    Ok(Evaluation { ccc, per_clip, predictions, frames })
}

/// Pooled CCC loss over one mini-batch and its parameter gradients.
/// Each clip is run on its own tape; gradients are summed in clip order.
pub fn batch_gradients(
    model: &Model,
    params: &ParamSet,
    batch: &[&LabeledClip],
    dropout_seeds: Option<&[u64]>,
) -> Result<(f64, Vec<Matrix>)> {
    let runs: Vec<(Tape, crate::numcore::Bindings, crate::numcore::Var)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let out = model.forward(&mut tape, &b, &c.audio, &c.visual, &c.valid, dropout_seeds.map(|s| s[i]))?;
            Ok((tape, b, out.prediction))
        })
        .collect::<Result<_>>()?;

    let channels = model.target.channels();
    let mut seeds: Vec<Matrix> = batch.iter().map(|c| Matrix::zeros(channels.len(), c.len())).collect();
    let mut loss = 0.0;
    for (row, &t) in channels.iter().enumerate() {
        let (mut p, mut y, mut at) = (Vec::new(), Vec::new(), Vec::new());
        for (k, (c, run)) in batch.iter().zip(&runs).enumerate() {
            let out = run.0.value(run.2);
            for i in (0..c.len()).filter(|&i| c.valid[i]) {
                p.push(out.get(row, i));
                y.push(c.labels(t)[i]);
                at.push((k, i));
            }
        }
        let parts = CccParts::compute(&p, &y, None)?;
        loss += parts.loss;
        let g = parts.gradient(&p, &y, None);
        for (&(k, i), gi) in at.iter().zip(g) {
            seeds[k].set(row, i, -gi);
        }
    }

    let per_clip: Vec<Vec<Matrix>> = runs
        .into_par_iter()
        .zip(seeds)
        .map(|((tape, b, out), seed)| {
            let grads = tape.backward_with_seed(out, seed)?;
            Ok(b.gradients(&tape, &grads))
        })
        .collect::<Result<_>>()?;
    let mut total = params.zeros_like();
    for grads in &per_clip {
        for (acc, g) in total.iter_mut().zip(grads) {
            acc.add_assign(g);
        }
    }
    Ok((loss, total))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Best snapshot by validation CCC.
    pub params: ParamSet,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ccc: f64,
    pub evaluation: Evaluation,
}

/// Trains one model on windowed clips and restores the best-validation
/// snapshot.
pub fn train(
    train_set: &[LabeledClip],
    val_set: &[LabeledClip],
    model_cfg: &ModelConfig,
    target: Target,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config("training and validation splits must both be non-empty"));
    }
    let first = &train_set[0];
    let (da, dv, l) = (first.audio.rows(), first.visual.rows(), first.len());
    if let Some(c) = train_set.iter().chain(val_set).find(|c| c.audio.rows() != da || c.visual.rows() != dv || c.len() != l) {
        return Err(Error::config(format!("clip {} does not match the {da}/{dv}/{l} layout", c.id)));
    }
    let (model, mut params) = Model::init::<f64>(model_cfg, target, da, dv, l, mix_seed(cfg.seed, 0x1417))?;
    let mut adam = Adam::new(&params);
    let mut sched = Scheduler::new(cfg);
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batches = train_set.len().div_ceil(cfg.batch_size);

    for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5eed_0000 + epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = sched.current();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&LabeledClip> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> =
                chunk.iter().map(|&i| mix_seed(mix_seed(cfg.seed, epoch as u64), ((b as u64) << 32) | i as u64)).collect();
            let (loss, grads) = batch_gradients(&model, &params, &batch, Some(&seeds))?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            lr = sched.lr(epoch, b, batches);
            adam.update(&mut params, &grads, lr, cfg.weight_decay)
                .map_err(|e| Error::Training(format!("epoch {epoch}, batch {b}: {e}")))?;
            loss_sum += loss;
        }
        let val = evaluate(&model, &params, val_set)?.score();
        history.push(EpochRecord { epoch, lr, train_loss: loss_sum / batches as f64, val_ccc: val });
        if val > best.0 {
            best = (val, epoch, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        sched.end_epoch(epoch, val);
        if epoch >= cfg.warmup_epochs && since_best >= cfg.early_stop_patience {
            break;
        }
    }
    let (best_val_ccc, best_epoch, params) = best;
    let evaluation = evaluate(&model, &params, val_set)?;
    Ok(TrainOutcome { model, params, history, best_epoch, best_val_ccc, evaluation })
}

/// Clip-level fold assignment: a seeded permutation dealt round-robin.
/// Returns the clip indices of each fold.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::config(format!("cannot split {n} clips into {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xf01d)));
    let mut out = vec![Vec::new(); folds];
    for (pos, i) in order.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Windowed train/validation sets for `fold`.
pub fn fold_split(clips: &[LabeledClip], cfg: &TrainConfig, fold: usize) -> Result<(Vec<LabeledClip>, Vec<LabeledClip>)> {
    let folds = fold_assignment(clips.len(), cfg.folds, cfg.seed)?;
    let val_idx = folds.get(fold).ok_or_else(|| Error::config(format!("fold {fold} out of range")))?;
    let mut train_set = Vec::new();
    let mut val_set = Vec::new();
    for (i, c) in clips.iter().enumerate() {
        let w = window(c, cfg.window_length, cfg.window_stride)?;
        if val_idx.binary_search(&i).is_ok() {
            val_set.extend(w);
        } else {
            train_set.extend(w);
        }
    }
    Ok((train_set, val_set))
}

/// Outcome of one fold: one trained model per configured target.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub outcomes: Vec<TrainOutcome>,
    pub report: EvalReport,
}

fn fold_report(fold: usize, model_cfg: &ModelConfig, outcomes: &[TrainOutcome]) -> EvalReport {
    let find = |t: Target| outcomes.iter().find_map(|o| o.evaluation.get(t));
    let first = &outcomes[0].evaluation;
    EvalReport {
        fold,
        mode: model_cfg.mode,
        iterations: model_cfg.iterations,
        temperature: model_cfg.temperature,
        ccc_valence: find(Target::Valence),
        ccc_arousal: find(Target::Arousal),
        frames: first.frames,
        per_clip: first.per_clip.clone(),
    }
}

/// Trains every configured target on one fold.
pub fn train_fold(clips: &[LabeledClip], model_cfg: &ModelConfig, cfg: &TrainConfig, fold: usize) -> Result<FoldResult> {
    let (train_set, val_set) = fold_split(clips, cfg, fold)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config(format!("fold {fold} has an empty split")));
    }
    let outcomes = cfg.targets.iter().map(|&t| train(&train_set, &val_set, model_cfg, t, cfg)).collect::<Result<Vec<_>>>()?;
    let report = fold_report(fold, model_cfg, &outcomes);
    Ok(FoldResult { fold, outcomes, report })
}

/// Runs every fold (or only `cfg.fold`) and returns the results with the
/// index of the best fold by mean validation CCC.
pub fn cross_validate(clips: &[LabeledClip], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(Vec<FoldResult>, usize)> {
    cfg.validate()?;
    if cfg.folds > clips.len() {
        return Err(Error::config(format!("{} folds requested but only {} clips", cfg.folds, clips.len())));
    }
    let folds: Vec<usize> = match cfg.fold {
        Some(f) => vec![f],
        None => (0..cfg.folds).collect(),
    };
    let results = folds.into_iter().map(|f| train_fold(clips, model_cfg, cfg, f)).collect::<Result<Vec<_>>>()?;
    let best = results
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.report.score().total_cmp(&b.1.report.score()).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("at least one fold");
    Ok((results, best))
}
