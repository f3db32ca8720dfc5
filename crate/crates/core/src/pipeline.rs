//! The compression pipeline: baseline training, prune-retrain cycles,
//! snapshot ensembling, and distillation into the final compact model.
//!
//! A run is sequential by construction (each cycle starts from the last),
//! and with a fixed seed every stage is bit-reproducible: shuffling,
//! augmentation, and initialization all draw from named streams.

use crate::data::{augment_batch, shuffled_indices, DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::loss::{
    cross_entropy, ensemble_average_probs, kd_loss_mean_kl, kd_loss_single, LabelBatch, ProbBatch,
};
use crate::model::{LayerKind, ModelSnapshot, SnapshotMeta};
use crate::optim::{
    one_cycle_lr, one_cycle_pair, step_schedule_lr, AdaptiveMoment, OneCycleConfig, SgdMomentum,
};
use crate::prune::{apply_filter_prune, global_magnitude_prune, make_depth_ramped_plan};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 256;

// ─── configuration ───

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrainSchedule {
    FixedSmallLr,
    OneCycle,
}

impl RetrainSchedule {
    pub fn name(self) -> &'static str {
        match self {
            RetrainSchedule::FixedSmallLr => "fixed_small_lr",
            RetrainSchedule::OneCycle => "one_cycle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrunerKind {
    L1Filter,
    GlobalMagnitude,
}

impl PrunerKind {
    pub fn name(self) -> &'static str {
        match self {
            PrunerKind::L1Filter => "l1_filter",
            PrunerKind::GlobalMagnitude => "global_magnitude",
        }
    }
}

/// One-cycle learning-rate range (initial, max, min).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrRange {
    pub initial: f64,
    pub max: f64,
    pub min: f64,
}

impl LrRange {
    fn schedule(&self, total_steps: usize) -> Result<OneCycleConfig> {
        OneCycleConfig::with_default_warmup(total_steps, self.initial, self.max, self.min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 10,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            augment: false,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Param(format!("base lr must be positive, got {}", self.base_lr)));
        }
        check_common(self.momentum, self.weight_decay, self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleConfig {
    pub num_cycles: usize,
    pub retrain_epochs: usize,
    pub schedule: RetrainSchedule,
    pub pruner: PrunerKind,
    /// l1_filter plan: shallowest prunable layer's fraction and the
    /// per-depth increment.
    pub base_fraction: f64,
    pub ramp: f64,
    /// global_magnitude: fraction of alive conv weights killed per cycle.
    pub magnitude_fraction: f64,
    pub fixed_lr: f64,
    pub cycle_lr: LrRange,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: bool,
}

impl Default for CycleConfig {
    fn default() -> Self {
        CycleConfig {
            num_cycles: 5,
            retrain_epochs: 4,
            schedule: RetrainSchedule::OneCycle,
            pruner: PrunerKind::L1Filter,
            base_fraction: 0.12,
            ramp: 0.04,
            magnitude_fraction: 0.2,
            fixed_lr: 1e-3,
            cycle_lr: LrRange { initial: 0.01, max: 0.1, min: 1e-4 },
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            augment: false,
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.retrain_epochs == 0 {
            return Err(Error::Param("retrain_epochs must be at least 1".into()));
        }
        if !(self.fixed_lr > 0.0) || !self.fixed_lr.is_finite() {
            return Err(Error::Param(format!(
                "fixed retrain lr must be positive, got {}",
                self.fixed_lr
            )));
        }
        check_common(self.momentum, self.weight_decay, self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillObjective {
    MeanKl,
    AvgProbKl,
}

impl DistillObjective {
    pub fn name(self) -> &'static str {
        match self {
            DistillObjective::MeanKl => "mean_kl",
            DistillObjective::AvgProbKl => "avg_prob_kl",
        }
    }
}

/// Which snapshots teach the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherSet {
    /// Every registry member, the unpruned baseline included.
    EnsembleWithBaseline,
    /// The pruned snapshots only.
    SnapshotsOnly,
    /// The baseline alone; the single-teacher ablation.
    BaselineOnly,
}

impl TeacherSet {
    pub fn name(self) -> &'static str {
        match self {
            TeacherSet::EnsembleWithBaseline => "ensemble_with_baseline",
            TeacherSet::SnapshotsOnly => "snapshots_only",
            TeacherSet::BaselineOnly => "baseline_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub tau: f64,
    pub objective: DistillObjective,
    pub teachers: TeacherSet,
    pub epochs: usize,
    pub lr: LrRange,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: bool,
    /// Start from the final snapshot's weights; `false` redraws them for
    /// the train-from-scratch ablation.
    pub warm_start: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 5.0,
            objective: DistillObjective::MeanKl,
            teachers: TeacherSet::EnsembleWithBaseline,
            epochs: 10,
            lr: LrRange { initial: 1e-4, max: 1e-3, min: 1e-6 },
            weight_decay: 0.0,
            batch_size: 128,
            augment: false,
            warm_start: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Param(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.epochs == 0 {
            return Err(Error::Param("distillation needs at least one epoch".into()));
        }
        check_common(0.0, self.weight_decay, self.batch_size)
    }
}

fn check_common(momentum: f64, weight_decay: f64, batch_size: usize) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Param(format!("momentum must be in [0,1), got {momentum}")));
    }
    if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
        return Err(Error::Param(format!("weight decay must be nonnegative, got {weight_decay}")));
    }
    if batch_size == 0 {
        return Err(Error::Param("batch size must be positive".into()));
    }
    Ok(())
}

// ─── registry and ensemble ───

/// The snapshot trail of one pruning run: index 0 is the baseline, every
/// later entry one completed prune-retrain cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRegistry {
    snapshots: Vec<ModelSnapshot>,
}

impl SnapshotRegistry {
    pub fn new(baseline: ModelSnapshot) -> Self {
        SnapshotRegistry { snapshots: vec![baseline] }
    }

    /// Appends a cycle snapshot, holding the monotone-params invariant.
    pub fn push(&mut self, snapshot: ModelSnapshot) -> Result<()> {
        let last = self.final_snapshot().meta.param_count;
        if snapshot.meta.param_count > last {
            return Err(Error::Run(format!(
                "cycle {} grew the parameter count: {} after {last}",
                self.snapshots.len(),
                snapshot.meta.param_count
            )));
        }
        self.snapshots.push(snapshot);
        Ok(())
    }

    pub fn from_snapshots(snapshots: Vec<ModelSnapshot>) -> Result<Self> {
        let mut iter = snapshots.into_iter();
        let baseline = iter
            .next()
            .ok_or_else(|| Error::Param("a registry needs at least a baseline".into()))?;
        let mut reg = SnapshotRegistry::new(baseline);
        for s in iter {
            reg.push(s)?;
        }
        Ok(reg)
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn baseline(&self) -> &ModelSnapshot {
        &self.snapshots[0]
    }

    pub fn final_snapshot(&self) -> &ModelSnapshot {
        self.snapshots.last().expect("a registry always holds its baseline")
    }

    pub fn members(&self) -> &[ModelSnapshot] {
        &self.snapshots
    }
}

/// K models averaged in fixed order at temperature `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEnsemble {
    pub members: Vec<ModelSnapshot>,
    pub tau: f64,
}

impl SnapshotEnsemble {
    pub fn new(members: Vec<ModelSnapshot>, tau: f64) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Param("an ensemble needs at least one member".into()));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Param(format!("temperature must be positive, got {tau}")));
        }
        let classes = num_classes(&members[0])?;
        for (k, m) in members.iter().enumerate().skip(1) {
            let c = num_classes(m)?;
            if c != classes {
                return Err(Error::Param(format!(
                    "ensemble member {k} has {c} classes, member 0 has {classes}"
                )));
            }
        }
        Ok(SnapshotEnsemble { members, tau })
    }

    pub fn from_registry(
        registry: &SnapshotRegistry,
        teachers: TeacherSet,
        tau: f64,
    ) -> Result<Self> {
        let members: Vec<ModelSnapshot> = match teachers {
            TeacherSet::EnsembleWithBaseline => registry.members().to_vec(),
            TeacherSet::SnapshotsOnly => {
                if registry.len() < 2 {
                    return Err(Error::Param(
                        "snapshots-only ensemble wants at least one pruning cycle".into(),
                    ));
                }
                registry.members()[1..].to_vec()
            }
            TeacherSet::BaselineOnly => vec![registry.baseline().clone()],
        };
        SnapshotEnsemble::new(members, tau)
    }
}

/// Class count read off the final dense layer.
pub fn num_classes(model: &ModelSnapshot) -> Result<usize> {
    match model.graph.last().map(|l| &l.kind) {
        Some(LayerKind::Dense { outputs, .. }) => Ok(*outputs),
        _ => Err(Error::Shape("model does not end in a dense classifier".into())),
    }
}

// ─── prediction and evaluation ───

fn forward_logits(model: &ModelSnapshot, inputs: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let rows = inputs.shape[0];
    let mut tape = Tape::new();
    let x = tape.leaf(inputs.clone());
    let fwd = model.forward(&mut tape, x, false)?;
    let shape = tape.shape(fwd.logits);
    let classes = shape[1];
    Ok((rows, classes, tape.data(fwd.logits).to_vec()))
}

/// Eval-mode class probabilities of one model at temperature `tau`.
pub fn model_probs(model: &ModelSnapshot, inputs: &Tensor, tau: f64) -> Result<ProbBatch> {
    let (rows, classes, logits) = forward_logits(model, inputs)?;
    ProbBatch::from_logits(rows, classes, &logits, tau)
}

/// Mean of the members' softened probabilities, computed in member order.
pub fn ensemble_predict(ens: &SnapshotEnsemble, inputs: &Tensor, tau: f64) -> Result<ProbBatch> {
    let per_member: Vec<ProbBatch> =
        ens.members.iter().map(|m| model_probs(m, inputs, tau)).collect::<Result<_>>()?;
    ensemble_average_probs(&per_member)
}

/// Top-1 accuracy of a probability batch; argmax ties go to the lowest
/// class index.
pub fn accuracy(probs: &ProbBatch, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Param("cannot evaluate on an empty set".into()));
    }
    if probs.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows against {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        if label >= probs.classes() {
            return Err(Error::Param(format!(
                "label {label} outside the {}-class output",
                probs.classes()
            )));
        }
        let row = probs.row(r);
        let mut best = 0usize;
        for (m, &p) in row.iter().enumerate().skip(1) {
            if p > row[best] {
                best = m;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

fn eval_chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_BATCH).map(move |start| (start..(start + EVAL_BATCH).min(n)).collect())
}

/// Probabilities of a whole split, batched in fixed order.
pub fn split_probs(model: &ModelSnapshot, split: &DataSplit, tau: f64) -> Result<ProbBatch> {
    if split.is_empty() {
        return Err(Error::Param("cannot evaluate on an empty set".into()));
    }
    let mut logits = Vec::with_capacity(split.len());
    let mut classes = 0usize;
    for chunk in eval_chunks(split.len()) {
        let (x, _) = split.batch(&chunk)?;
        let (_, m, chunk_logits) = forward_logits(model, &x)?;
        classes = m;
        logits.extend_from_slice(&chunk_logits);
    }
    ProbBatch::from_logits(split.len(), classes, &logits, tau)
}

/// Top-1 accuracy of one model on a split, at temperature 1.
pub fn evaluate_model(model: &ModelSnapshot, split: &DataSplit) -> Result<f64> {
    let probs = split_probs(model, split, 1.0)?;
    accuracy(&probs, &split.labels)
}

/// Top-1 accuracy of an ensemble on a split, at temperature 1.
pub fn evaluate_ensemble(ens: &SnapshotEnsemble, split: &DataSplit) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Param("cannot evaluate on an empty set".into()));
    }
    let per_member: Vec<ProbBatch> =
        ens.members.iter().map(|m| split_probs(m, split, 1.0)).collect::<Result<_>>()?;
    let mean = ensemble_average_probs(&per_member)?;
    accuracy(&mean, &split.labels)
}

// ─── teacher cache ───

/// Softened teacher probabilities for every training sample, computed once
/// in eval mode before distillation starts.
pub struct TeacherCache {
    classes: usize,
    rows: usize,
    members: Vec<Vec<f64>>,
}

impl TeacherCache {
    pub fn build(members: &[ModelSnapshot], split: &DataSplit, tau: f64) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Param("distillation needs at least one teacher".into()));
        }
        let classes = num_classes(&members[0])?;
        let mut cached = Vec::with_capacity(members.len());
        for m in members {
            let probs = split_probs(m, split, tau)?;
            if probs.classes() != classes {
                return Err(Error::Param(format!(
                    "teacher outputs disagree: {} classes against {classes}",
                    probs.classes()
                )));
            }
            cached.push(probs.data().to_vec());
        }
        Ok(TeacherCache { classes, rows: split.len(), members: cached })
    }

    /// One ProbBatch per teacher, rows gathered by sample index.
    pub fn gather(&self, indices: &[usize]) -> Result<Vec<ProbBatch>> {
        let mut out = Vec::with_capacity(self.members.len());
        for cached in &self.members {
            let mut data = Vec::with_capacity(indices.len() * self.classes);
            for &i in indices {
                if i >= self.rows {
                    return Err(Error::Param(format!(
                        "sample {i} outside the cached {} rows",
                        self.rows
                    )));
                }
                data.extend_from_slice(&cached[i * self.classes..(i + 1) * self.classes]);
            }
            out.push(ProbBatch::new(indices.len(), self.classes, data)?);
        }
        Ok(out)
    }
}

// ─── training loops ───

enum Optimizer {
    Sgd(SgdMomentum),
    Adaptive(AdaptiveMoment),
}

impl Optimizer {
    fn step(
        &mut self,
        name: &str,
        lr: f64,
        momentum: f64,
        param: &mut [f64],
        grad: &[f64],
        mask: &[u8],
    ) -> Result<()> {
        match self {
            Optimizer::Sgd(s) => s.step(name, lr, momentum, param, grad, Some(mask)),
            Optimizer::Adaptive(a) => a.step(name, lr, param, grad, Some(mask)),
        }
    }
}

struct Phase<'a> {
    stage: String,
    seed: u64,
    batch_size: usize,
    augment: bool,
    data: &'a DataSplit,
}

impl<'a> Phase<'a> {
    fn new(
        stage: impl Into<String>,
        seed: u64,
        batch_size: usize,
        augment: bool,
        data: &'a DataSplit,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Param("cannot train on an empty split".into()));
        }
        if batch_size == 0 {
            return Err(Error::Param("batch size must be positive".into()));
        }
        Ok(Phase { stage: stage.into(), seed, batch_size, augment, data })
    }

    fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.batch_size)
    }
}

/// Builds a batch's loss node from the forward logits, the batch's row
/// indices into the phase's split, and its labels.
type LossFn<'a> = dyn FnMut(&mut Tape, TensorId, &[usize], &LabelBatch) -> Result<TensorId> + 'a;

fn train_phase(
    model: &mut ModelSnapshot,
    phase: &Phase,
    epochs: usize,
    opt: &mut Optimizer,
    schedule: &mut dyn FnMut(usize, usize) -> Result<(f64, f64)>,
    loss: &mut LossFn<'_>,
) -> Result<Vec<f64>> {
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut step = 0usize;
    for epoch in 0..epochs {
        let order = shuffled_indices(phase.data.len(), phase.seed, &phase.stage, epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(phase.batch_size) {
            let (mut x, labels) = phase.data.batch(chunk)?;
            if phase.augment && x.shape.len() == 4 {
                augment_batch(&mut x, phase.seed, epoch, chunk)?;
            }
            let mut tape = Tape::new();
            let input = tape.leaf(x);
            let fwd = model.forward(&mut tape, input, true)?;
            let loss_id = loss(&mut tape, fwd.logits, chunk, &labels)?;
            let value = tape.data(loss_id)[0];
            if !value.is_finite() {
                return Err(Error::Run(format!(
                    "loss diverged to {value} in {} at epoch {epoch}, step {step}",
                    phase.stage
                )));
            }
            tape.backward(loss_id)?;
            model.apply_bn_updates(&tape, &fwd.binding)?;
            let (lr, momentum) = schedule(epoch, step)?;
            model.visit_grads(&tape, &fwd.binding, |name, p, g, m| {
                opt.step(name, lr, momentum, p, g, m)
            })?;
            step += 1;
            total += value;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(epoch_losses)
}

/// A trained snapshot plus its per-epoch mean training losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub snapshot: ModelSnapshot,
    pub epoch_losses: Vec<f64>,
}

/// Trains the baseline with SGD under the step-decay schedule, evaluates,
/// and stamps the snapshot as cycle 0.
pub fn train_baseline(
    model: &ModelSnapshot,
    data: &Dataset,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut snapshot = model.clone();
    let epoch_losses = if cfg.epochs > 0 {
        let phase = Phase::new("baseline", seed, cfg.batch_size, cfg.augment, &data.train)?;
        let mut opt = Optimizer::Sgd(SgdMomentum::new(cfg.weight_decay));
        let total = cfg.epochs;
        train_phase(
            &mut snapshot,
            &phase,
            total,
            &mut opt,
            &mut |epoch, _| Ok((step_schedule_lr(cfg.base_lr, epoch, total)?, cfg.momentum)),
            &mut |tape, logits, _, labels| cross_entropy(tape, logits, labels),
        )?
    } else {
        Vec::new()
    };
    let acc = evaluate_model(&snapshot, &data.test)?;
    snapshot.meta = SnapshotMeta {
        cycle_index: 0,
        schedule_name: "step".into(),
        eval_accuracy: Some(acc),
        param_count: 0,
        mac_count: 0,
        seed,
    };
    snapshot.recount()?;
    Ok(TrainOutcome { snapshot, epoch_losses })
}

/// A completed pruning run: the registry plus each cycle's loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningRun {
    pub registry: SnapshotRegistry,
    pub cycle_losses: Vec<Vec<f64>>,
}

/// Alternates pruning and retraining for `num_cycles` rounds, snapshotting
/// after every cycle.
pub fn run_iterative_pruning(
    baseline: &ModelSnapshot,
    cfg: &CycleConfig,
    data: &Dataset,
    seed: u64,
) -> Result<PruningRun> {
    cfg.validate()?;
    let mut registry = SnapshotRegistry::new(baseline.clone());
    let mut cycle_losses = Vec::with_capacity(cfg.num_cycles);
    for k in 1..=cfg.num_cycles {
        let current = registry.final_snapshot();
        let mut pruned = match cfg.pruner {
            PrunerKind::L1Filter => {
                let plan = make_depth_ramped_plan(current, cfg.base_fraction, cfg.ramp)?;
                apply_filter_prune(current, &plan)?
            }
            PrunerKind::GlobalMagnitude => global_magnitude_prune(current, cfg.magnitude_fraction)?,
        };
        let phase =
            Phase::new(format!("cycle-{k}"), seed, cfg.batch_size, cfg.augment, &data.train)?;
        let mut opt = Optimizer::Sgd(SgdMomentum::new(cfg.weight_decay));
        let losses = match cfg.schedule {
            RetrainSchedule::FixedSmallLr => train_phase(
                &mut pruned,
                &phase,
                cfg.retrain_epochs,
                &mut opt,
                &mut |_, _| Ok((cfg.fixed_lr, cfg.momentum)),
                &mut |tape, logits, _, labels| cross_entropy(tape, logits, labels),
            )?,
            RetrainSchedule::OneCycle => {
                let total = cfg.retrain_epochs * phase.batches_per_epoch();
                let schedule = cfg.cycle_lr.schedule(total)?;
                train_phase(
                    &mut pruned,
                    &phase,
                    cfg.retrain_epochs,
                    &mut opt,
                    &mut |_, step| one_cycle_pair(&schedule, step),
                    &mut |tape, logits, _, labels| cross_entropy(tape, logits, labels),
                )?
            }
        };
        let acc = evaluate_model(&pruned, &data.test)?;
        pruned.meta = SnapshotMeta {
            cycle_index: k as u32,
            schedule_name: cfg.schedule.name().into(),
            eval_accuracy: Some(acc),
            param_count: 0,
            mac_count: 0,
            seed,
        };
        pruned.recount()?;
        registry.push(pruned)?;
        cycle_losses.push(losses);
    }
    Ok(PruningRun { registry, cycle_losses })
}

/// A distilled student plus its per-epoch mean distillation losses.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillRun {
    pub student: ModelSnapshot,
    pub epoch_losses: Vec<f64>,
}

/// Distills the registry's ensemble into the final snapshot's architecture
/// with the adaptive-moment optimizer under a one-cycle schedule. Teacher
/// probabilities are cached per sample up front; masks never change.
pub fn distill_student(
    registry: &SnapshotRegistry,
    cfg: &DistillConfig,
    data: &Dataset,
    seed: u64,
) -> Result<DistillRun> {
    cfg.validate()?;
    let teachers = SnapshotEnsemble::from_registry(registry, cfg.teachers, cfg.tau)?;
    let cache = TeacherCache::build(&teachers.members, &data.train, cfg.tau)?;

    let final_snapshot = registry.final_snapshot();
    let mut student = if cfg.warm_start {
        final_snapshot.clone()
    } else {
        crate::model::reinit_params(final_snapshot, seed)?
    };
    let masks_before = student.masks.clone();

    let phase = Phase::new("distill", seed, cfg.batch_size, cfg.augment, &data.train)?;
    let total = cfg.epochs * phase.batches_per_epoch();
    let schedule = cfg.lr.schedule(total)?;
    let mut opt = Optimizer::Adaptive(AdaptiveMoment::new(cfg.weight_decay));
    let tau = cfg.tau;
    let objective = cfg.objective;
    let epoch_losses = train_phase(
        &mut student,
        &phase,
        cfg.epochs,
        &mut opt,
        &mut |_, step| Ok((one_cycle_lr(&schedule, step)?, 0.0)),
        &mut |tape, logits, chunk, _| {
            let teacher_batches = cache.gather(chunk)?;
            match objective {
                DistillObjective::MeanKl => kd_loss_mean_kl(tape, logits, &teacher_batches, tau),
                DistillObjective::AvgProbKl => {
                    let mean = ensemble_average_probs(&teacher_batches)?;
                    kd_loss_single(tape, logits, &mean, tau)
                }
            }
        },
    )?;

    if student.masks != masks_before {
        return Err(Error::Run("distillation altered a prune mask".into()));
    }
    let acc = evaluate_model(&student, &data.test)?;
    student.meta = SnapshotMeta {
        cycle_index: final_snapshot.meta.cycle_index,
        schedule_name: "distill".into(),
        eval_accuracy: Some(acc),
        param_count: 0,
        mac_count: 0,
        seed,
    };
    student.recount()?;
    Ok(DistillRun { student, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, split_per_class};
    use crate::model::{build_mlp, reinit_params, ParamKey, ParamRole};

    fn blob_dataset(classes: usize, spread: f64, seed: u64) -> Dataset {
        let all = make_blobs(classes, 4, 60, spread, seed).unwrap();
        let (train, test) = split_per_class(&all, 45).unwrap();
        Dataset { train, test, channel_stats: Vec::new() }
    }

    fn quick_baseline(epochs: usize) -> BaselineConfig {
        BaselineConfig { epochs, base_lr: 0.05, batch_size: 32, ..BaselineConfig::default() }
    }

    #[test]
    fn baseline_learns_separable_blobs() {
        let data = blob_dataset(2, 0.4, 11);
        let model = build_mlp(&[4, 16, 2], 3).unwrap();
        let out = train_baseline(&model, &data, &quick_baseline(20), 5).unwrap();
        let acc = out.snapshot.meta.eval_accuracy.unwrap();
        assert!(acc > 0.95, "accuracy {acc}");
        assert_eq!(out.epoch_losses.len(), 20);
        assert!(out.epoch_losses[19] < out.epoch_losses[0]);
        assert_eq!(out.snapshot.meta.cycle_index, 0);
        assert_eq!(out.snapshot.meta.schedule_name, "step");
    }

    #[test]
    fn zero_epoch_baseline_keeps_initialization() {
        let data = blob_dataset(4, 0.3, 2);
        let model = build_mlp(&[4, 8, 4], 9).unwrap();
        let out = train_baseline(&model, &data, &quick_baseline(0), 5).unwrap();
        assert_eq!(out.snapshot.params, model.params);
        assert!(out.epoch_losses.is_empty());
        let acc = out.snapshot.meta.eval_accuracy.unwrap();
        // untrained: somewhere in the vicinity of chance, far from solved
        assert!(acc < 0.8, "accuracy {acc}");
    }

    #[test]
    fn same_seed_same_run_bitwise() {
        let data = blob_dataset(3, 0.5, 4);
        let model = build_mlp(&[4, 12, 3], 1).unwrap();
        let a = train_baseline(&model, &data, &quick_baseline(6), 17).unwrap();
        let b = train_baseline(&model, &data, &quick_baseline(6), 17).unwrap();
        assert_eq!(a.snapshot, b.snapshot);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        let c = train_baseline(&model, &data, &quick_baseline(6), 18).unwrap();
        assert_ne!(c.snapshot.params, a.snapshot.params);
    }

    #[test]
    fn diverging_run_reports_epoch_and_step() {
        let data = blob_dataset(2, 0.4, 11);
        let model = build_mlp(&[4, 16, 2], 3).unwrap();
        let cfg = BaselineConfig { epochs: 8, base_lr: 1e100, ..quick_baseline(8) };
        let err = train_baseline(&model, &data, &cfg, 5).unwrap_err();
        assert!(matches!(err, Error::Run(_) | Error::Numeric(_)), "unexpected error kind: {err}");
    }

    fn quick_cycles(num_cycles: usize, schedule: RetrainSchedule) -> CycleConfig {
        CycleConfig {
            num_cycles,
            retrain_epochs: 3,
            schedule,
            base_fraction: 0.2,
            ramp: 0.0,
            batch_size: 32,
            ..CycleConfig::default()
        }
    }

    #[test]
    fn zero_cycles_returns_baseline_alone() {
        let data = blob_dataset(2, 0.4, 11);
        let model = build_mlp(&[4, 16, 2], 3).unwrap();
        let baseline = train_baseline(&model, &data, &quick_baseline(5), 5).unwrap().snapshot;
        let run =
            run_iterative_pruning(&baseline, &quick_cycles(0, RetrainSchedule::OneCycle), &data, 5)
                .unwrap();
        assert_eq!(run.registry.len(), 1);
        assert_eq!(run.registry.baseline(), &baseline);
        assert!(run.cycle_losses.is_empty());
    }

    #[test]
    fn registry_grows_one_snapshot_per_cycle_with_shrinking_params() {
        let data = blob_dataset(3, 0.4, 8);
        let model = build_mlp(&[4, 20, 3], 3).unwrap();
        let baseline = train_baseline(&model, &data, &quick_baseline(5), 5).unwrap().snapshot;
        let run =
            run_iterative_pruning(&baseline, &quick_cycles(4, RetrainSchedule::OneCycle), &data, 5)
                .unwrap();
        assert_eq!(run.registry.len(), 5);
        assert_eq!(run.cycle_losses.len(), 4);
        let counts: Vec<u64> = run.registry.members().iter().map(|s| s.meta.param_count).collect();
        for w in counts.windows(2) {
            assert!(w[1] < w[0], "param counts not strictly decreasing: {counts:?}");
        }
        for (k, s) in run.registry.members().iter().enumerate() {
            assert_eq!(s.meta.cycle_index as usize, k);
            assert!(s.meta.eval_accuracy.is_some());
        }
        assert_eq!(run.registry.members()[2].meta.schedule_name, "one_cycle");
    }

    #[test]
    fn fixed_schedule_records_its_name() {
        let data = blob_dataset(2, 0.4, 11);
        let model = build_mlp(&[4, 10, 2], 3).unwrap();
        let baseline = train_baseline(&model, &data, &quick_baseline(4), 5).unwrap().snapshot;
        let run = run_iterative_pruning(
            &baseline,
            &quick_cycles(1, RetrainSchedule::FixedSmallLr),
            &data,
            5,
        )
        .unwrap();
        assert_eq!(run.registry.final_snapshot().meta.schedule_name, "fixed_small_lr");
    }

    #[test]
    fn single_member_ensemble_predicts_like_the_model() {
        let data = blob_dataset(3, 0.5, 4);
        let model = build_mlp(&[4, 12, 3], 1).unwrap();
        let trained = train_baseline(&model, &data, &quick_baseline(5), 2).unwrap().snapshot;
        let (x, _) = data.test.batch(&[0, 1, 2, 3, 4]).unwrap();
        let single = model_probs(&trained, &x, 2.0).unwrap();
        let ens = SnapshotEnsemble::new(vec![trained.clone()], 2.0).unwrap();
        let averaged = ensemble_predict(&ens, &x, 2.0).unwrap();
        assert_eq!(single.data(), averaged.data());

        let pair = SnapshotEnsemble::new(vec![trained.clone(), trained], 2.0).unwrap();
        let averaged = ensemble_predict(&pair, &x, 2.0).unwrap();
        assert_eq!(single.data(), averaged.data());
    }

    #[test]
    fn two_member_ensemble_matches_hand_average() {
        let data = blob_dataset(3, 0.5, 4);
        let a = train_baseline(&build_mlp(&[4, 12, 3], 1).unwrap(), &data, &quick_baseline(4), 2)
            .unwrap()
            .snapshot;
        let b = train_baseline(&build_mlp(&[4, 12, 3], 2).unwrap(), &data, &quick_baseline(4), 3)
            .unwrap()
            .snapshot;
        let (x, _) = data.test.batch(&[0, 3, 7]).unwrap();
        let pa = model_probs(&a, &x, 1.5).unwrap();
        let pb = model_probs(&b, &x, 1.5).unwrap();
        let ens = SnapshotEnsemble::new(vec![a, b], 1.5).unwrap();
        let averaged = ensemble_predict(&ens, &x, 1.5).unwrap();
        for (avg, (ya, yb)) in averaged.data().iter().zip(pa.data().iter().zip(pb.data())) {
            assert!((avg - (ya + yb) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let a = build_mlp(&[4, 8, 3], 1).unwrap();
        let b = build_mlp(&[4, 8, 4], 1).unwrap();
        let err = SnapshotEnsemble::new(vec![a, b], 1.0).unwrap_err();
        assert!(matches!(err, Error::Param(_)), "{err}");
    }

    #[test]
    fn accuracy_hand_tally_and_tie_break() {
        // 4 samples, 3 classes; row 2 ties between classes 0 and 2
        let probs = ProbBatch::new(
            4,
            3,
            vec![
                0.7, 0.2, 0.1, // -> 0
                0.1, 0.1, 0.8, // -> 2
                0.4, 0.2, 0.4, // tie -> 0
                0.2, 0.5, 0.3, // -> 1
            ],
        )
        .unwrap();
        let acc = accuracy(&probs, &[0, 2, 0, 0]).unwrap();
        assert_eq!(acc, 0.75);
        let acc = accuracy(&probs, &[0, 2, 2, 1]).unwrap();
        assert_eq!(acc, 0.75, "tie must resolve to the lowest class index");
    }

    #[test]
    fn evaluating_an_empty_split_fails() {
        let model = build_mlp(&[4, 8, 3], 1).unwrap();
        let empty = DataSplit::new(vec![4], Vec::new(), Vec::new(), 3).unwrap();
        assert!(matches!(evaluate_model(&model, &empty), Err(Error::Param(_))));
    }

    #[test]
    fn teacher_cache_slices_match_direct_prediction() {
        let data = blob_dataset(3, 0.5, 4);
        let trained =
            train_baseline(&build_mlp(&[4, 12, 3], 1).unwrap(), &data, &quick_baseline(4), 2)
                .unwrap()
                .snapshot;
        let cache = TeacherCache::build(std::slice::from_ref(&trained), &data.train, 5.0).unwrap();
        let indices = [3usize, 17, 40];
        let gathered = cache.gather(&indices).unwrap();
        let (x, _) = data.train.batch(&indices).unwrap();
        let direct = model_probs(&trained, &x, 5.0).unwrap();
        assert_eq!(gathered.len(), 1);
        assert_eq!(gathered[0].data(), direct.data());
    }

    fn quick_distill(epochs: usize) -> DistillConfig {
        DistillConfig { epochs, batch_size: 32, ..DistillConfig::default() }
    }

    #[test]
    fn distilling_a_converged_student_from_itself_is_a_fixed_point() {
        let data = blob_dataset(2, 0.3, 6);
        let trained =
            train_baseline(&build_mlp(&[4, 16, 2], 3).unwrap(), &data, &quick_baseline(15), 5)
                .unwrap()
                .snapshot;
        let start_acc = trained.meta.eval_accuracy.unwrap();
        let registry = SnapshotRegistry::new(trained);
        let run = distill_student(&registry, &quick_distill(3), &data, 5).unwrap();
        assert!(run.epoch_losses[0] < 1e-9, "loss {}", run.epoch_losses[0]);
        let end_acc = run.student.meta.eval_accuracy.unwrap();
        assert!((end_acc - start_acc).abs() <= 0.005, "{start_acc} -> {end_acc}");
    }

    #[test]
    fn distillation_never_touches_masks() {
        let data = blob_dataset(3, 0.4, 8);
        let baseline =
            train_baseline(&build_mlp(&[4, 20, 3], 3).unwrap(), &data, &quick_baseline(6), 5)
                .unwrap()
                .snapshot;
        let run =
            run_iterative_pruning(&baseline, &quick_cycles(2, RetrainSchedule::OneCycle), &data, 5)
                .unwrap();
        let masks_before = run.registry.final_snapshot().masks.clone();
        let key = ParamKey::new(0, ParamRole::Weight);
        assert!(masks_before[&key].alive_count() < masks_before[&key].len());
        let distilled = distill_student(&run.registry, &quick_distill(3), &data, 5).unwrap();
        assert_eq!(distilled.student.masks, masks_before);
        assert_eq!(
            distilled.student.meta.param_count,
            run.registry.final_snapshot().meta.param_count
        );
    }

    #[test]
    fn full_pipeline_is_bit_reproducible() {
        let data = blob_dataset(2, 0.4, 3);
        let model = build_mlp(&[4, 14, 2], 6).unwrap();
        let mut students = Vec::new();
        for _ in 0..2 {
            let baseline = train_baseline(&model, &data, &quick_baseline(5), 9).unwrap().snapshot;
            let run = run_iterative_pruning(
                &baseline,
                &quick_cycles(2, RetrainSchedule::OneCycle),
                &data,
                9,
            )
            .unwrap();
            let distilled = distill_student(&run.registry, &quick_distill(2), &data, 9).unwrap();
            students.push(distilled);
        }
        assert_eq!(students[0].student, students[1].student);
        assert_eq!(students[0].epoch_losses, students[1].epoch_losses);
    }

    #[test]
    fn mean_kl_and_avg_prob_agree_for_a_single_teacher() {
        let data = blob_dataset(2, 0.4, 3);
        let trained =
            train_baseline(&build_mlp(&[4, 10, 2], 6).unwrap(), &data, &quick_baseline(5), 9)
                .unwrap()
                .snapshot;
        let registry = SnapshotRegistry::new(trained);
        let a = distill_student(
            &registry,
            &DistillConfig { teachers: TeacherSet::BaselineOnly, ..quick_distill(2) },
            &data,
            9,
        )
        .unwrap();
        let b = distill_student(
            &registry,
            &DistillConfig {
                teachers: TeacherSet::BaselineOnly,
                objective: DistillObjective::AvgProbKl,
                ..quick_distill(2)
            },
            &data,
            9,
        )
        .unwrap();
        assert_eq!(a.student.params, b.student.params);
    }

    #[test]
    fn cold_start_redraws_the_student() {
        let data = blob_dataset(2, 0.4, 3);
        let trained =
            train_baseline(&build_mlp(&[4, 10, 2], 6).unwrap(), &data, &quick_baseline(5), 9)
                .unwrap()
                .snapshot;
        let registry = SnapshotRegistry::new(trained.clone());
        let cold = distill_student(
            &registry,
            &DistillConfig { warm_start: false, epochs: 1, ..quick_distill(1) },
            &data,
            9,
        )
        .unwrap();
        let warm = distill_student(&registry, &quick_distill(1), &data, 9).unwrap();
        assert_ne!(cold.student.params, warm.student.params);
    }

    #[test]
    fn reinit_matches_a_fresh_build() {
        let built = build_mlp(&[5, 9, 4], 21).unwrap();
        let other = build_mlp(&[5, 9, 4], 3).unwrap();
        let redrawn = reinit_params(&other, 21).unwrap();
        assert_eq!(redrawn.params, built.params);
        assert_eq!(redrawn.buffers, built.buffers);
    }

    #[test]
    fn registry_rejects_growth() {
        let small = build_mlp(&[4, 6, 2], 1).unwrap();
        let big = build_mlp(&[4, 30, 2], 1).unwrap();
        let mut reg = SnapshotRegistry::new(small);
        let err = reg.push(big).unwrap_err();
        assert!(matches!(err, Error::Run(_)), "{err}");
    }

    #[test]
    fn snapshots_only_teachers_exclude_the_baseline() {
        let data = blob_dataset(3, 0.4, 8);
        let baseline =
            train_baseline(&build_mlp(&[4, 20, 3], 3).unwrap(), &data, &quick_baseline(5), 5)
                .unwrap()
                .snapshot;
        let run =
            run_iterative_pruning(&baseline, &quick_cycles(2, RetrainSchedule::OneCycle), &data, 5)
                .unwrap();
        let ens =
            SnapshotEnsemble::from_registry(&run.registry, TeacherSet::SnapshotsOnly, 2.0).unwrap();
        assert_eq!(ens.members.len(), 2);
        assert_eq!(ens.members[0], run.registry.members()[1]);
        let bare = SnapshotRegistry::new(baseline);
        assert!(SnapshotEnsemble::from_registry(&bare, TeacherSet::SnapshotsOnly, 2.0).is_err());
    }
}
