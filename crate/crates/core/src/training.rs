//! Three-stage training: joint pre-training, classifier fine-tuning with the
//! autoencoder frozen, then joint fine-tuning at a smaller learning rate.

use serde::{Deserialize, Serialize};

use crate::data::{SplitTag, TaskDataset};
use crate::error::{Error, Result};
use crate::model::{groups, LatentMode, LossWeights, MiracleModel};
use crate::nn::Adam;
use crate::numerics::{streams, Rng};

/// How the per-task loss weights γ are chosen each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaPolicy {
    Fixed(Vec<f64>),
    Uniform,
    /// Piecewise weights driven by validation accuracy, continuous at the
    /// threshold.
    Pwinval,
    /// The piecewise policy with the increasing upper branch
    /// `w_cap·(1 + acc)/(1 − s)`.
    PwinvalVerbatim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PwinvalParams {
    /// Accuracy threshold per task; a single value applies to every task.
    pub threshold: Vec<f64>,
    pub w_cap: f64,
}

impl Default for PwinvalParams {
    fn default() -> Self {
        Self {
            threshold: vec![0.9],
            w_cap: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauParams {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauParams {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 10,
            min_lr: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    /// Epochs of stage 1, 2 and 3.
    pub epochs: [usize; 3],
    /// Stage-1 learning rate.
    pub lr: f64,
    /// Learning rate stages 2 and 3 start from.
    pub fine_tune_lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_policy: GammaPolicy,
    pub pwinval: PwinvalParams,
    pub plateau: PlateauParams,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            epochs: [400, 40, 40],
            lr: 1e-3,
            fine_tune_lr: 1e-4,
            batch_size: 32,
            alpha: 1.0,
            beta: 0.01,
            gamma_policy: GammaPolicy::Pwinval,
            pwinval: PwinvalParams::default(),
            plateau: PlateauParams::default(),
            seed: 1,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self, n_tasks: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("train: {msg}")));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.fine_tune_lr > 0.0 && self.fine_tune_lr <= self.lr) {
            return bad(format!(
                "fine_tune_lr must lie in (0, lr], got {}",
                self.fine_tune_lr
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        match &self.gamma_policy {
            GammaPolicy::Fixed(g) => {
                if g.len() != n_tasks || g.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return bad(format!("fixed gamma needs {n_tasks} non-negative values"));
                }
            }
            GammaPolicy::Uniform => {}
            GammaPolicy::Pwinval | GammaPolicy::PwinvalVerbatim => {
                self.thresholds(n_tasks)?;
                if !(self.pwinval.w_cap.is_finite() && self.pwinval.w_cap > 1.0) {
                    return bad(format!("w_cap must exceed 1, got {}", self.pwinval.w_cap));
                }
            }
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) {
            return bad(format!("plateau factor must lie in (0, 1), got {}", p.factor));
        }
        if !(p.min_lr > 0.0 && p.min_lr <= self.fine_tune_lr) {
            return bad(format!(
                "plateau min_lr must lie in (0, fine_tune_lr], got {}",
                p.min_lr
            ));
        }
        Ok(())
    }

    fn thresholds(&self, n_tasks: usize) -> Result<Vec<f64>> {
        let s = &self.pwinval.threshold;
        let s = match s.len() {
            1 => vec![s[0]; n_tasks],
            n if n == n_tasks => s.clone(),
            n => {
                return Err(Error::Config(format!(
                    "train: pwinval needs 1 or {n_tasks} thresholds, got {n}"
                )))
            }
        };
        if let Some(v) = s.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Config(format!(
                "train: pwinval threshold {v} outside (0, 1)"
            )));
        }
        Ok(s)
    }

    /// γ for the next epoch given the latest validation accuracies.
    pub fn gamma(&self, val_acc: &[f64]) -> Result<Vec<f64>> {
        let t = val_acc.len();
        match &self.gamma_policy {
            GammaPolicy::Fixed(g) => Ok(g.clone()),
            GammaPolicy::Uniform => Ok(vec![1.0; t]),
            GammaPolicy::Pwinval => pwinval_weights(val_acc, &self.thresholds(t)?, self.pwinval.w_cap),
            GammaPolicy::PwinvalVerbatim => {
                pwinval_verbatim_weights(val_acc, &self.thresholds(t)?, self.pwinval.w_cap)
            }
        }
    }
}

fn check_pwinval(val_acc: &[f64], s: &[f64]) -> Result<()> {
    if val_acc.len() != s.len() {
        return Err(Error::Invalid(format!(
            "{} accuracies for {} thresholds",
            val_acc.len(),
            s.len()
        )));
    }
    if let Some(v) = s.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::Domain(format!("threshold {v} outside (0, 1)")));
    }
    if let Some(a) = val_acc.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Domain(format!("accuracy {a} outside [0, 1]")));
    }
    Ok(())
}

/// Task weights that grow linearly from 1 to `w_cap` while a task's
/// validation accuracy is below its threshold `s`, then fall linearly to 0
/// at accuracy 1.
pub fn pwinval_weights(val_acc: &[f64], s: &[f64], w_cap: f64) -> Result<Vec<f64>> {
    check_pwinval(val_acc, s)?;
    Ok(val_acc
        .iter()
        .zip(s)
        .map(|(&a, &s)| {
            if a <= s {
                (w_cap - 1.0) / s * a + 1.0
            } else {
                (w_cap * (1.0 - a) / (1.0 - s)).max(0.0)
            }
        })
        .collect())
}

/// Same lower branch as [`pwinval_weights`]; above the threshold the weight
/// is `w_cap·(1 + acc)/(1 − s)`, which jumps at `s` and keeps growing.
pub fn pwinval_verbatim_weights(val_acc: &[f64], s: &[f64], w_cap: f64) -> Result<Vec<f64>> {
    check_pwinval(val_acc, s)?;
    Ok(val_acc
        .iter()
        .zip(s)
        .map(|(&a, &s)| {
            if a <= s {
                (w_cap - 1.0) / s * a + 1.0
            } else {
                w_cap / (1.0 - s) * a + w_cap / (1.0 - s)
            }
        })
        .collect())
}

/// Reduce-on-plateau bookkeeping for a maximised metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub best_metric: Option<f64>,
    pub epochs_since_improvement: usize,
    pub current_lr: f64,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        Self {
            best_metric: None,
            epochs_since_improvement: 0,
            current_lr: lr,
        }
    }
}

pub fn plateau_step(state: &PlateauState, metric: f64, params: &PlateauParams) -> PlateauState {
    let mut next = state.clone();
    let improved = match state.best_metric {
        None => true,
        Some(best) => metric > best + 1e-12,
    };
    if improved {
        next.best_metric = Some(metric);
        next.epochs_since_improvement = 0;
        return next;
    }
    next.epochs_since_improvement += 1;
    if next.epochs_since_improvement > params.patience {
        next.current_lr = (next.current_lr * params.factor).max(params.min_lr);
        next.epochs_since_improvement = 0;
    }
    next
}

/// Mean losses of one task's batches within an epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub batches: usize,
    pub total: f64,
    pub recon_mse: f64,
    pub kl: f64,
    pub bce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub stage: u8,
    /// 1-based within the stage.
    pub epoch: usize,
    pub lr: f64,
    pub gamma: Vec<f64>,
    pub train: Vec<TaskLoss>,
    /// Mean of the total loss over every batch of the epoch.
    pub mean_train_loss: f64,
    pub val_accuracy: Vec<f64>,
    pub mean_val_accuracy: f64,
}

/// Round-robin batch order: task 0's first batch, task 1's first batch, …,
/// then everyone's second batch, skipping tasks that have run out. Entries
/// are `(task, start, end)` offsets into each task's shuffled training list.
pub fn batch_schedule(sizes: &[usize], batch_size: usize) -> Vec<(usize, usize, usize)> {
    let rounds = sizes.iter().map(|n| n.div_ceil(batch_size)).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..rounds {
        for (t, &n) in sizes.iter().enumerate() {
            let start = r * batch_size;
            if start < n {
                out.push((t, start, (start + batch_size).min(n)));
            }
        }
    }
    out
}

/// Per-epoch settings handed to [`run_epoch`].
pub struct EpochContext<'a> {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub optimizer: &'a mut Adam,
    /// Shuffling and latent noise are drawn from substreams of this.
    pub rng: Rng,
}

/// One pass over every task's training split with one Adam step per batch.
///
/// In stage 2 only the classifier of the batch's task is updated and the
/// caller is expected to zero the reconstruction and KL weights.
pub fn run_epoch(model: &mut MiracleModel, datasets: &[TaskDataset], ctx: &mut EpochContext<'_>) -> Result<EpochReport> {
    let mut order = Vec::with_capacity(datasets.len());
    let mut noise = Vec::with_capacity(datasets.len());
    for (t, ds) in datasets.iter().enumerate() {
        let mut idx = ds.indices(SplitTag::Train);
        if idx.is_empty() {
            return Err(Error::Invalid(format!("task {} has no training samples", ds.task_id())));
        }
        ctx.rng.substream(&[t as u64, 0]).shuffle(&mut idx);
        order.push(idx);
        noise.push(ctx.rng.substream(&[t as u64, 1]));
    }
    let sizes: Vec<usize> = order.iter().map(Vec::len).collect();
    let mut train = vec![TaskLoss::default(); datasets.len()];
    let mut sum_total = 0.0;
    let mut n_batches = 0usize;
    for (t, start, end) in batch_schedule(&sizes, ctx.batch_size) {
        let (x, y) = datasets[t].batch(&order[t][start..end]);
        let (lb, mut grads) = model.composite_loss(&x, &y, t, &ctx.weights, LatentMode::Sample(&mut noise[t]))?;
        if ctx.stage == 2 {
            let prefix = groups::classifier_prefix(t);
            grads.retain(|name| name.starts_with(&prefix));
        }
        ctx.optimizer.step(model, &grads, ctx.lr)?;
        let tl = &mut train[t];
        tl.batches += 1;
        tl.total += lb.total;
        tl.recon_mse += lb.recon_mse;
        tl.kl += lb.kl;
        tl.bce += lb.bce[t];
        sum_total += lb.total;
        n_batches += 1;
    }
    for tl in &mut train {
        let n = tl.batches as f64;
        tl.total /= n;
        tl.recon_mse /= n;
        tl.kl /= n;
        tl.bce /= n;
    }
    let val = evaluate(model, datasets, SplitTag::Val, 0.5)?;
    Ok(EpochReport {
        stage: ctx.stage,
        epoch: ctx.epoch,
        lr: ctx.lr,
        gamma: ctx.weights.gamma.clone(),
        train,
        mean_train_loss: sum_total / n_batches as f64,
        val_accuracy: val.per_task,
        mean_val_accuracy: val.mean,
    })
}

fn check_datasets(model: &MiracleModel, datasets: &[TaskDataset]) -> Result<()> {
    let d = model.dims();
    if datasets.len() != d.n_tasks {
        return Err(Error::Invalid(format!(
            "model has {} task heads but {} datasets were given",
            d.n_tasks,
            datasets.len()
        )));
    }
    if let Some(ds) = datasets.iter().find(|ds| ds.site_ids().len() != d.n_sites) {
        return Err(Error::Invalid(format!(
            "task {} has {} sites, the model expects {}",
            ds.task_id(),
            ds.site_ids().len(),
            d.n_sites
        )));
    }
    Ok(())
}

/// Runs all three stages, calling `on_epoch` after every epoch.
///
/// Stage 1 trains everything at `lr`. Stage 2 freezes the autoencoder and
/// trains each classifier on its own weighted BCE. Stage 3 trains everything
/// again. Stages 2 and 3 each start at `fine_tune_lr` with a fresh optimizer
/// and plateau scheduler driven by mean validation accuracy. γ is recomputed
/// before every epoch from the latest validation accuracies.
pub fn train_three_stage(
    model: &mut MiracleModel,
    datasets: &[TaskDataset],
    plan: &TrainPlan,
    on_epoch: &mut dyn FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    check_datasets(model, datasets)?;
    plan.validate(datasets.len())?;
    let root = Rng::new(plan.seed).substream(&[streams::TRAIN]);
    let mut reports = Vec::new();
    let mut val_acc = if plan.epochs.iter().any(|&e| e > 0) {
        evaluate(model, datasets, SplitTag::Val, 0.5)?.per_task
    } else {
        Vec::new()
    };
    for stage in 1..=3u8 {
        let epochs = plan.epochs[stage as usize - 1];
        let mut optimizer = Adam::default();
        let mut plateau = PlateauState::new(if stage == 1 { plan.lr } else { plan.fine_tune_lr });
        for epoch in 1..=epochs {
            let gamma = plan.gamma(&val_acc)?;
            let (alpha, beta) = if stage == 2 { (0.0, 0.0) } else { (plan.alpha, plan.beta) };
            let mut ctx = EpochContext {
                stage,
                epoch,
                lr: plateau.current_lr,
                batch_size: plan.batch_size,
                weights: LossWeights { alpha, beta, gamma },
                optimizer: &mut optimizer,
                rng: root.substream(&[stage as u64, epoch as u64]),
            };
            let report = run_epoch(model, datasets, &mut ctx)?;
            if stage > 1 {
                plateau = plateau_step(&plateau, report.mean_val_accuracy, &plan.plateau);
            }
            val_acc.clone_from(&report.val_accuracy);
            on_epoch(&report);
            reports.push(report);
        }
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_task: Vec<f64>,
    /// Unweighted mean over tasks.
    pub mean: f64,
}

/// Fraction of `labels` matched by `probs ≥ threshold`.
pub fn accuracy(probs: &[f64], labels: &[f64], threshold: f64) -> f64 {
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= threshold) == (y == 1.0))
        .count();
    correct as f64 / probs.len().max(1) as f64
}

/// Accuracy per task on `split`, predicting 1 iff the class-1 probability
/// from the posterior mean is at least `threshold`.
pub fn evaluate(model: &MiracleModel, datasets: &[TaskDataset], split: SplitTag, threshold: f64) -> Result<Evaluation> {
    let mut per_task = Vec::with_capacity(datasets.len());
    for (t, ds) in datasets.iter().enumerate() {
        let idx = ds.indices(split);
        if idx.is_empty() {
            return Err(Error::Invalid(format!(
                "task {} has no {} samples",
                ds.task_id(),
                split.name()
            )));
        }
        let (x, y) = ds.batch(&idx);
        let p = model.predict(&x, t)?;
        per_task.push(accuracy(p.data(), y.data(), threshold));
    }
    let mean = per_task.iter().sum::<f64>() / per_task.len().max(1) as f64;
    Ok(Evaluation { per_task, mean })
}
