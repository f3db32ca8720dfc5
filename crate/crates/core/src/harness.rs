//! Experiment driver: configuration, dataset and model construction,
//! seeded multi-arm runs, and report generation.
//!
//! One experiment runs every seed through the same sequence: train a
//! baseline, retrain it through pruning cycles under the fixed-small-LR
//! and one-cycle schedules, evaluate the snapshot ensemble, and distill.
//! Each seed writes its own metrics file; records carry no wall-clock
//! data, so a rerun reproduces them byte for byte.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    load_digit_dataset, load_idx_dataset, make_blobs, split_per_class, standardize_channels,
    Dataset, DigitCorpusSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{
    cycle_stage, read_metrics_lines, render_summary, LineWriter, MetricsLine, MetricsRecord,
    SummaryRow, TimingRecord,
};
use crate::model::{build_desknet, build_mlp, DeskNetSpec, ModelSnapshot};
use crate::pipeline::{
    distill_student, evaluate_ensemble, evaluate_model, run_iterative_pruning, train_baseline,
    BaselineConfig, CycleConfig, DistillConfig, DistillObjective, LrRange, PrunerKind, PruningRun,
    RetrainSchedule, SnapshotEnsemble, SnapshotRegistry, TeacherSet,
};
use crate::snapshot_io::{load_snapshot, save_snapshot};

pub const SCHEMA_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "DESKLAB_OUT";

// ─── configuration document ───

fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub cycles: CyclesSection,
    #[serde(default)]
    pub distill: DistillSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// The generated digit corpus, written as IDX files and read back.
    SynthDigits {
        #[serde(default)]
        augment: bool,
        #[serde(default = "d_data_seed")]
        data_seed: u64,
        #[serde(default = "d_side")]
        side: usize,
        #[serde(default = "d_train_total")]
        train_total: usize,
        #[serde(default = "d_test_total")]
        test_total: usize,
        #[serde(default = "d_train_take")]
        train_take: usize,
        #[serde(default = "d_test_take")]
        test_take: usize,
        #[serde(default = "d_noise_sigma")]
        noise_sigma: f64,
        /// Directory holding the corpus files; generated on first use.
        #[serde(default = "d_corpus_dir")]
        corpus_dir: PathBuf,
    },
    /// Externally supplied IDX image/label pairs.
    Idx {
        #[serde(default)]
        augment: bool,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Gaussian blobs for fast vector-model runs.
    Blobs {
        #[serde(default)]
        augment: bool,
        classes: usize,
        dim: usize,
        samples_per_class: usize,
        spread: f64,
        #[serde(default = "d_data_seed")]
        data_seed: u64,
        train_per_class: usize,
    },
}

fn d_data_seed() -> u64 {
    42
}
fn d_side() -> usize {
    16
}
fn d_train_total() -> usize {
    8000
}
fn d_test_total() -> usize {
    2000
}
fn d_train_take() -> usize {
    5000
}
fn d_test_take() -> usize {
    1000
}
fn d_noise_sigma() -> f64 {
    0.2
}
fn d_corpus_dir() -> PathBuf {
    PathBuf::from("data")
}

impl DatasetConfig {
    pub fn augment(&self) -> bool {
        match self {
            DatasetConfig::SynthDigits { augment, .. }
            | DatasetConfig::Idx { augment, .. }
            | DatasetConfig::Blobs { augment, .. } => *augment,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::Idx { train_images, train_labels, test_images, test_labels, .. } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    if !p.is_file() {
                        return Err(Error::Param(format!(
                            "dataset file {} does not exist",
                            p.display()
                        )));
                    }
                }
                Ok(())
            }
            DatasetConfig::Blobs { classes, dim, samples_per_class, train_per_class, .. } => {
                if *classes == 0 || *dim == 0 || *samples_per_class == 0 {
                    return Err(Error::Param("blob extents must be positive".into()));
                }
                if *train_per_class == 0 || train_per_class >= samples_per_class {
                    return Err(Error::Param(format!(
                        "train_per_class {train_per_class} must split {samples_per_class} per class"
                    )));
                }
                Ok(())
            }
            DatasetConfig::SynthDigits { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Desknet {
        #[serde(default = "d_widths")]
        widths: [usize; 3],
        #[serde(default = "d_blocks")]
        blocks_per_stage: usize,
    },
    Mlp {
        hidden: Vec<usize>,
    },
}

fn d_widths() -> [usize; 3] {
    [8, 16, 32]
}
fn d_blocks() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let d = BaselineConfig::default();
        BaselineSection {
            epochs: d.epochs,
            base_lr: d.base_lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CyclesSection {
    pub num_cycles: usize,
    pub retrain_epochs: usize,
    pub pruner: String,
    pub base_fraction: f64,
    pub ramp: f64,
    pub magnitude_fraction: f64,
    pub fixed_lr: f64,
    pub one_cycle_lr: [f64; 3],
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for CyclesSection {
    fn default() -> Self {
        let d = CycleConfig::default();
        CyclesSection {
            num_cycles: d.num_cycles,
            retrain_epochs: d.retrain_epochs,
            pruner: d.pruner.name().into(),
            base_fraction: d.base_fraction,
            ramp: d.ramp,
            magnitude_fraction: d.magnitude_fraction,
            fixed_lr: d.fixed_lr,
            one_cycle_lr: [d.cycle_lr.initial, d.cycle_lr.max, d.cycle_lr.min],
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub tau: f64,
    pub objective: String,
    pub epochs: usize,
    pub lr: [f64; 3],
    pub weight_decay: f64,
    pub batch_size: usize,
    pub include_baseline: bool,
    pub warm_start: bool,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            tau: d.tau,
            objective: d.objective.name().into(),
            epochs: d.epochs,
            lr: [d.lr.initial, d.lr.max, d.lr.min],
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            include_baseline: true,
            warm_start: d.warm_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    #[serde(default = "default_arms")]
    pub arms: Vec<String>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

pub const ARM_NAMES: [&str; 4] = ["fixed_lr", "one_cycle", "ensemble_distill", "single_distill"];

fn default_arms() -> Vec<String> {
    ARM_NAMES.iter().map(|s| s.to_string()).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Param(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        ExperimentConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Param(format!(
                "config schema_version {} is not the supported {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Param(format!(
                "experiment name {:?} is not a file stem",
                self.name
            )));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Param("run.seeds must not be empty".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.run.seeds {
            if !seen.insert(*s) {
                return Err(Error::Param(format!("seed {s} appears twice")));
            }
        }
        for arm in &self.run.arms {
            if !ARM_NAMES.contains(&arm.as_str()) {
                return Err(Error::Param(format!("unknown arm {arm:?}")));
            }
        }
        let has = |a: &str| self.run.arms.iter().any(|x| x == a);
        if (has("ensemble_distill") || has("single_distill")) && !has("one_cycle") {
            return Err(Error::Param(
                "the distillation arms build on the one_cycle registry; add one_cycle".into(),
            ));
        }
        self.dataset.validate()?;
        self.pruner_kind()?;
        self.objective_kind()?;
        self.baseline_config().validate()?;
        self.cycle_config(RetrainSchedule::OneCycle)?.validate()?;
        self.distill_config(TeacherSet::EnsembleWithBaseline)?.validate()?;
        Ok(())
    }

    fn pruner_kind(&self) -> Result<PrunerKind> {
        match self.cycles.pruner.as_str() {
            "l1_filter" => Ok(PrunerKind::L1Filter),
            "global_magnitude" => Ok(PrunerKind::GlobalMagnitude),
            other => Err(Error::Param(format!("unknown pruner {other:?}"))),
        }
    }

    fn objective_kind(&self) -> Result<DistillObjective> {
        match self.distill.objective.as_str() {
            "mean_kl" => Ok(DistillObjective::MeanKl),
            "avg_prob_kl" => Ok(DistillObjective::AvgProbKl),
            other => Err(Error::Param(format!("unknown distillation objective {other:?}"))),
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            epochs: self.baseline.epochs,
            base_lr: self.baseline.base_lr,
            momentum: self.baseline.momentum,
            weight_decay: self.baseline.weight_decay,
            batch_size: self.baseline.batch_size,
            augment: self.dataset.augment(),
        }
    }

    pub fn cycle_config(&self, schedule: RetrainSchedule) -> Result<CycleConfig> {
        let c = &self.cycles;
        Ok(CycleConfig {
            num_cycles: c.num_cycles,
            retrain_epochs: c.retrain_epochs,
            schedule,
            pruner: self.pruner_kind()?,
            base_fraction: c.base_fraction,
            ramp: c.ramp,
            magnitude_fraction: c.magnitude_fraction,
            fixed_lr: c.fixed_lr,
            cycle_lr: LrRange {
                initial: c.one_cycle_lr[0],
                max: c.one_cycle_lr[1],
                min: c.one_cycle_lr[2],
            },
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            batch_size: c.batch_size,
            augment: self.dataset.augment(),
        })
    }

    pub fn distill_config(&self, teachers: TeacherSet) -> Result<DistillConfig> {
        let d = &self.distill;
        Ok(DistillConfig {
            tau: d.tau,
            objective: self.objective_kind()?,
            teachers,
            epochs: d.epochs,
            lr: LrRange { initial: d.lr[0], max: d.lr[1], min: d.lr[2] },
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            augment: self.dataset.augment(),
            warm_start: d.warm_start,
        })
    }

    /// Teacher set of the main distillation arm.
    pub fn ensemble_teachers(&self) -> TeacherSet {
        if self.distill.include_baseline {
            TeacherSet::EnsembleWithBaseline
        } else {
            TeacherSet::SnapshotsOnly
        }
    }

    /// Output directory, resolved as: explicit override, then the config's
    /// own entry, then `$DESKLAB_OUT/<name>`, then `runs/<name>`.
    pub fn resolve_output_dir(&self, cli_override: Option<&Path>) -> PathBuf {
        if let Some(dir) = cli_override {
            return dir.to_path_buf();
        }
        if let Some(dir) = &self.run.output_dir {
            return dir.clone();
        }
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                return PathBuf::from(root).join(&self.name);
            }
        }
        PathBuf::from("runs").join(&self.name)
    }
}

// ─── dataset and model construction ───

pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    match cfg {
        DatasetConfig::SynthDigits {
            data_seed,
            side,
            train_total,
            test_total,
            train_take,
            test_take,
            noise_sigma,
            corpus_dir,
            ..
        } => {
            let spec = DigitCorpusSpec {
                data_seed: *data_seed,
                side: *side,
                train_total: *train_total,
                test_total: *test_total,
                train_take: *train_take,
                test_take: *test_take,
                noise_sigma: *noise_sigma,
                ..DigitCorpusSpec::default()
            };
            load_digit_dataset(corpus_dir, &spec)
        }
        DatasetConfig::Idx { train_images, train_labels, test_images, test_labels, .. } => {
            let mut train = load_idx_dataset(train_images, train_labels)?;
            let mut test = load_idx_dataset(test_images, test_labels)?;
            let channel_stats = standardize_channels(&mut train, &mut test)?;
            Ok(Dataset { train, test, channel_stats })
        }
        DatasetConfig::Blobs {
            classes,
            dim,
            samples_per_class,
            spread,
            data_seed,
            train_per_class,
            ..
        } => {
            let all = make_blobs(*classes, *dim, *samples_per_class, *spread, *data_seed)?;
            let (train, test) = split_per_class(&all, *train_per_class)?;
            Ok(Dataset { train, test, channel_stats: Vec::new() })
        }
    }
}

pub fn build_model(cfg: &ModelConfig, data: &Dataset, seed: u64) -> Result<ModelSnapshot> {
    let shape = &data.train.sample_shape;
    match cfg {
        ModelConfig::Desknet { widths, blocks_per_stage } => {
            if shape.len() != 3 {
                return Err(Error::Param(format!(
                    "desknet wants [C,H,W] image data, got sample shape {shape:?}"
                )));
            }
            build_desknet(
                &DeskNetSpec {
                    in_channels: shape[0],
                    height: shape[1],
                    width: shape[2],
                    widths: *widths,
                    blocks_per_stage: *blocks_per_stage,
                    num_classes: data.train.num_classes,
                },
                seed,
            )
        }
        ModelConfig::Mlp { hidden } => {
            if shape.len() != 1 {
                return Err(Error::Param(format!(
                    "an mlp wants flat vector data, got sample shape {shape:?}"
                )));
            }
            let mut dims = vec![shape[0]];
            dims.extend_from_slice(hidden);
            dims.push(data.train.num_classes);
            build_mlp(&dims, seed)
        }
    }
}

// ─── run layout ───

pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn config_copy(&self) -> PathBuf {
        self.root.join("config.resolved.toml")
    }

    pub fn metrics(&self, seed: u64) -> PathBuf {
        self.root.join(format!("metrics-seed{seed}.jsonl"))
    }

    pub fn timings(&self, seed: u64) -> PathBuf {
        self.root.join(format!("timings-seed{seed}.jsonl"))
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.tsv")
    }

    pub fn snapshot_dir(&self, seed: u64) -> PathBuf {
        self.root.join("snapshots").join(format!("seed{seed}"))
    }

    pub fn baseline_snapshot(&self, seed: u64) -> PathBuf {
        self.snapshot_dir(seed).join("baseline.desksnap")
    }

    pub fn cycle_snapshot(&self, seed: u64, arm: &str, k: usize) -> PathBuf {
        self.snapshot_dir(seed).join(arm).join(format!("cycle-{k}.desksnap"))
    }

    pub fn student_snapshot(&self, seed: u64, arm: &str) -> PathBuf {
        self.snapshot_dir(seed).join(format!("{arm}.desksnap"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn save_to(path: &Path, snapshot: &ModelSnapshot) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_snapshot(snapshot, path)
}

// ─── experiment driver ───

/// What actually happened across one `run_experiment` call.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub completed: usize,
    pub failures: Vec<StageFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageFailure {
    pub seed: u64,
    pub arm: String,
    pub stage: String,
    pub error: String,
}

impl ExperimentOutcome {
    pub fn all_completed(&self) -> bool {
        self.failures.is_empty()
    }
}

struct SeedRun<'a> {
    cfg: &'a ExperimentConfig,
    paths: &'a RunPaths,
    data: &'a Dataset,
    seed: u64,
    run_id: String,
    metrics: LineWriter,
    timings: LineWriter,
    failures: Vec<StageFailure>,
    completed: usize,
}

impl<'a> SeedRun<'a> {
    fn record(
        &mut self,
        arm: &str,
        stage: &str,
        snapshot: &ModelSnapshot,
        train_loss: Vec<f64>,
    ) -> Result<()> {
        let record = MetricsRecord {
            run: self.run_id.clone(),
            seed: self.seed,
            arm: arm.into(),
            stage: stage.into(),
            param_count: snapshot.meta.param_count,
            mac_count: snapshot.meta.mac_count,
            train_loss,
            eval_accuracy: snapshot.meta.eval_accuracy.unwrap_or(0.0),
        };
        record.validate()?;
        self.metrics.write(&MetricsLine::Metrics(record))?;
        self.completed += 1;
        Ok(())
    }

    fn record_failure(&mut self, arm: &str, stage: &str, error: &Error) -> Result<()> {
        let failure = StageFailure {
            seed: self.seed,
            arm: arm.into(),
            stage: stage.into(),
            error: error.to_string(),
        };
        self.metrics.write(&MetricsLine::Failure {
            run: self.run_id.clone(),
            seed: failure.seed,
            arm: failure.arm.clone(),
            stage: failure.stage.clone(),
            error: failure.error.clone(),
        })?;
        self.failures.push(failure);
        Ok(())
    }

    fn time_stage<T>(
        &mut self,
        arm: &str,
        stage: &str,
        f: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        let start = Instant::now();
        let out = f(self);
        let wall_seconds = start.elapsed().as_secs_f64();
        self.timings.write(&TimingRecord {
            run: self.run_id.clone(),
            seed: self.seed,
            arm: arm.into(),
            stage: stage.into(),
            wall_seconds,
        })?;
        out
    }

    fn arm_enabled(&self, arm: &str) -> bool {
        self.cfg.run.arms.iter().any(|a| a == arm)
    }

    /// Runs every stage for this seed. IO errors abort; stage failures are
    /// recorded and the remaining arms continue where they can.
    fn run(&mut self) -> Result<()> {
        let model = match build_model(&self.cfg.model, self.data, self.seed) {
            Ok(m) => m,
            Err(e) => return self.record_failure("baseline", "baseline", &e),
        };

        let baseline = match self.time_stage("baseline", "baseline", |s| {
            train_baseline(&model, s.data, &s.cfg.baseline_config(), s.seed)
        }) {
            Ok(out) => {
                save_to(&self.paths.baseline_snapshot(self.seed), &out.snapshot)?;
                self.record("baseline", "baseline", &out.snapshot, out.epoch_losses)?;
                out.snapshot
            }
            Err(e) => return self.record_failure("baseline", "baseline", &e),
        };

        let mut one_cycle_registry: Option<SnapshotRegistry> = None;
        for (arm, schedule) in
            [("fixed_lr", RetrainSchedule::FixedSmallLr), ("one_cycle", RetrainSchedule::OneCycle)]
        {
            if !self.arm_enabled(arm) && !(arm == "one_cycle" && self.needs_registry()) {
                continue;
            }
            let cycle_cfg = self.cfg.cycle_config(schedule)?;
            match self.time_stage(arm, "cycles", |s| {
                run_iterative_pruning(&baseline, &cycle_cfg, s.data, s.seed)
            }) {
                Ok(PruningRun { registry, cycle_losses }) => {
                    if self.arm_enabled(arm) {
                        for (k, losses) in cycle_losses.into_iter().enumerate() {
                            let snapshot = &registry.members()[k + 1];
                            save_to(&self.paths.cycle_snapshot(self.seed, arm, k + 1), snapshot)?;
                            self.record(arm, &cycle_stage(k + 1), snapshot, losses)?;
                        }
                    }
                    if arm == "one_cycle" {
                        one_cycle_registry = Some(registry);
                    }
                }
                Err(e) => {
                    self.record_failure(arm, &cycle_stage(1), &e)?;
                }
            }
        }

        let Some(registry) = one_cycle_registry else {
            for arm in ["ensemble_distill", "single_distill"] {
                if self.arm_enabled(arm) {
                    let e = Error::Run("the one_cycle cycles did not complete".into());
                    self.record_failure(arm, "distill", &e)?;
                }
            }
            return Ok(());
        };

        if self.arm_enabled("ensemble_distill") {
            let teachers = self.cfg.ensemble_teachers();
            match self.time_stage("ensemble_distill", "ensemble", |s| {
                let ens = SnapshotEnsemble::from_registry(&registry, teachers, s.cfg.distill.tau)?;
                let acc = evaluate_ensemble(&ens, &s.data.test)?;
                Ok((ens, acc))
            }) {
                Ok((ens, acc)) => {
                    let mut combined = registry.final_snapshot().clone();
                    combined.meta.eval_accuracy = Some(acc);
                    combined.meta.param_count =
                        ens.members.iter().map(|m| m.meta.param_count).sum();
                    combined.meta.mac_count = ens.members.iter().map(|m| m.meta.mac_count).sum();
                    self.record("ensemble_distill", "ensemble", &combined, Vec::new())?;
                }
                Err(e) => self.record_failure("ensemble_distill", "ensemble", &e)?,
            }

            let dcfg = self.cfg.distill_config(self.cfg.ensemble_teachers())?;
            match self.time_stage("ensemble_distill", "distill", |s| {
                distill_student(&registry, &dcfg, s.data, s.seed)
            }) {
                Ok(run) => {
                    save_to(
                        &self.paths.student_snapshot(self.seed, "ensemble_distill"),
                        &run.student,
                    )?;
                    self.record("ensemble_distill", "distill", &run.student, run.epoch_losses)?;
                }
                Err(e) => self.record_failure("ensemble_distill", "distill", &e)?,
            }
        }

        if self.arm_enabled("single_distill") {
            let dcfg = self.cfg.distill_config(TeacherSet::BaselineOnly)?;
            match self.time_stage("single_distill", "distill", |s| {
                distill_student(&registry, &dcfg, s.data, s.seed)
            }) {
                Ok(run) => {
                    save_to(
                        &self.paths.student_snapshot(self.seed, "single_distill"),
                        &run.student,
                    )?;
                    self.record("single_distill", "distill", &run.student, run.epoch_losses)?;
                }
                Err(e) => self.record_failure("single_distill", "distill", &e)?,
            }
        }
        Ok(())
    }

    fn needs_registry(&self) -> bool {
        self.arm_enabled("ensemble_distill") || self.arm_enabled("single_distill")
    }
}

/// Runs the full experiment: every seed, every configured arm, metrics and
/// snapshots on disk, plus the summary table. Stage failures are recorded
/// and later seeds still run; only IO trouble aborts.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let paths = RunPaths::new(out_dir);
    std::fs::create_dir_all(&paths.root)?;
    let rendered = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Run(format!("cannot render the config copy: {e}")))?;
    std::fs::write(paths.config_copy(), rendered)?;

    let data = build_dataset(&cfg.dataset)?;
    let mut completed = 0usize;
    let mut failures = Vec::new();
    for &seed in &cfg.run.seeds {
        let mut seed_run = SeedRun {
            cfg,
            paths: &paths,
            data: &data,
            seed,
            run_id: format!("{}-seed{}", cfg.name, seed),
            metrics: LineWriter::create(paths.metrics(seed))?,
            timings: LineWriter::create(paths.timings(seed))?,
            failures: Vec::new(),
            completed: 0,
        };
        seed_run.run()?;
        completed += seed_run.completed;
        failures.extend(seed_run.failures);
    }

    let records = collect_records(cfg, &paths)?;
    std::fs::write(
        paths.summary(),
        render_summary(&crate::metrics::compute_summary(&records, cfg.cycles.num_cycles)),
    )?;
    Ok(ExperimentOutcome { completed, failures })
}

fn collect_records(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    for &seed in &cfg.run.seeds {
        let path = paths.metrics(seed);
        if !path.is_file() {
            continue;
        }
        for line in read_metrics_lines(&path)? {
            if let MetricsLine::Metrics(r) = line {
                records.push(r);
            }
        }
    }
    Ok(records)
}

// ─── report ───

/// Everything `report` writes, plus what it found missing.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub missing: Vec<String>,
}

fn expected_stages(cfg: &ExperimentConfig) -> Vec<(u64, String, String)> {
    let mut expected = Vec::new();
    for &seed in &cfg.run.seeds {
        expected.push((seed, "baseline".to_string(), "baseline".to_string()));
        for arm in ["fixed_lr", "one_cycle"] {
            if cfg.run.arms.iter().any(|a| a == arm) {
                for k in 1..=cfg.cycles.num_cycles {
                    expected.push((seed, arm.to_string(), cycle_stage(k)));
                }
            }
        }
        if cfg.run.arms.iter().any(|a| a == "ensemble_distill") {
            expected.push((seed, "ensemble_distill".into(), "ensemble".into()));
            expected.push((seed, "ensemble_distill".into(), "distill".into()));
        }
        if cfg.run.arms.iter().any(|a| a == "single_distill") {
            expected.push((seed, "single_distill".into(), "distill".into()));
        }
    }
    expected
}

/// Reads a finished run directory and writes the report files: accuracy
/// and size series per cycle, plus the summary table. Missing stages are
/// returned in the error.
pub fn report(out_dir: &Path) -> Result<Report> {
    let paths = RunPaths::new(out_dir);
    let cfg = ExperimentConfig::load(paths.config_copy()).map_err(|e| {
        Error::Run(format!("no readable config copy under {}: {e}", out_dir.display()))
    })?;
    let records = collect_records(&cfg, &paths)?;

    let have: BTreeSet<(u64, String, String)> =
        records.iter().map(|r| (r.seed, r.arm.clone(), r.stage.clone())).collect();
    let missing: Vec<String> = expected_stages(&cfg)
        .into_iter()
        .filter(|k| !have.contains(k))
        .map(|(seed, arm, stage)| format!("seed {seed}: {arm}/{stage}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Run(format!(
            "incomplete run, {} stage(s) absent: {}",
            missing.len(),
            missing.join(", ")
        )));
    }

    let report_dir = paths.report_dir();
    std::fs::create_dir_all(&report_dir)?;

    let arm_cycle = |arm: &str, stage: &str| -> Vec<&MetricsRecord> {
        records.iter().filter(|r| r.arm == arm && r.stage == stage).collect()
    };

    // accuracy per cycle per retraining arm; cycle 0 is the shared baseline
    let mut acc = String::from("arm\tcycle\taccuracy_mean\taccuracy_std\tn\n");
    let mut size = String::from("cycle\tparam_count\tmac_count\tpct_macs_down\n");
    let baseline_recs = arm_cycle("baseline", "baseline");
    let mac0 = baseline_recs.iter().map(|r| r.mac_count as f64).sum::<f64>()
        / baseline_recs.len().max(1) as f64;
    for arm in ["fixed_lr", "one_cycle"] {
        if !cfg.run.arms.iter().any(|a| a == arm) {
            continue;
        }
        for k in 0..=cfg.cycles.num_cycles {
            let recs = if k == 0 { baseline_recs.clone() } else { arm_cycle(arm, &cycle_stage(k)) };
            let accs: Vec<f64> = recs.iter().map(|r| r.eval_accuracy).collect();
            let (mean, std) = crate::metrics::mean_std(&accs);
            acc.push_str(&format!("{arm}\t{k}\t{mean:.4}\t{std:.4}\t{}\n", recs.len()));
        }
    }
    let size_arm =
        if cfg.run.arms.iter().any(|a| a == "one_cycle") { "one_cycle" } else { "fixed_lr" };
    for k in 0..=cfg.cycles.num_cycles {
        let recs =
            if k == 0 { baseline_recs.clone() } else { arm_cycle(size_arm, &cycle_stage(k)) };
        if recs.is_empty() {
            continue;
        }
        let params = recs.iter().map(|r| r.param_count as f64).sum::<f64>() / recs.len() as f64;
        let macs = recs.iter().map(|r| r.mac_count as f64).sum::<f64>() / recs.len() as f64;
        let pct = if mac0 > 0.0 { 100.0 * (1.0 - macs / mac0) } else { 0.0 };
        size.push_str(&format!("{k}\t{params:.0}\t{macs:.0}\t{pct:.2}\n"));
    }
    std::fs::write(report_dir.join("accuracy_vs_cycle.tsv"), acc)?;
    std::fs::write(report_dir.join("params_vs_cycle.tsv"), size)?;

    let summary = crate::metrics::compute_summary(&records, cfg.cycles.num_cycles);
    std::fs::write(report_dir.join("summary.tsv"), render_summary(&summary))?;
    Ok(Report { summary, missing: Vec::new() })
}

// ─── single-stage entry points (the CLI's workhorses) ───

/// Arm label of a retraining schedule: the schedule's own name is stamped
/// into snapshot metadata, the arm label names records and directories.
pub fn arm_for(schedule: RetrainSchedule) -> &'static str {
    match schedule {
        RetrainSchedule::FixedSmallLr => "fixed_lr",
        RetrainSchedule::OneCycle => "one_cycle",
    }
}

/// Trains and saves the baseline for one seed; returns its accuracy.
pub fn stage_train(cfg: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<f64> {
    let paths = RunPaths::new(out_dir);
    let data = build_dataset(&cfg.dataset)?;
    let model = build_model(&cfg.model, &data, seed)?;
    let out = train_baseline(&model, &data, &cfg.baseline_config(), seed)?;
    save_to(&paths.baseline_snapshot(seed), &out.snapshot)?;
    Ok(out.snapshot.meta.eval_accuracy.unwrap_or(0.0))
}

/// Runs the pruning cycles for one seed from the saved baseline; returns
/// (final accuracy, final param count).
pub fn stage_prune(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed: u64,
    schedule: RetrainSchedule,
) -> Result<(f64, u64)> {
    let paths = RunPaths::new(out_dir);
    let baseline_path = paths.baseline_snapshot(seed);
    if !baseline_path.is_file() {
        return Err(Error::Run(format!(
            "no baseline snapshot at {}; run `train` first",
            baseline_path.display()
        )));
    }
    let baseline = load_snapshot(&baseline_path)?;
    let data = build_dataset(&cfg.dataset)?;
    let arm = arm_for(schedule);
    let run = run_iterative_pruning(&baseline, &cfg.cycle_config(schedule)?, &data, seed)?;
    for (k, snapshot) in run.registry.members().iter().enumerate().skip(1) {
        save_to(&paths.cycle_snapshot(seed, arm, k), snapshot)?;
    }
    let last = run.registry.final_snapshot();
    Ok((last.meta.eval_accuracy.unwrap_or(0.0), last.meta.param_count))
}

/// Distills from the saved one-cycle registry for one seed; returns the
/// student's accuracy.
pub fn stage_distill(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed: u64,
    teachers: TeacherSet,
) -> Result<f64> {
    let paths = RunPaths::new(out_dir);
    let mut snapshots = vec![load_snapshot(paths.baseline_snapshot(seed)).map_err(|e| {
        Error::Run(format!("cannot load the baseline snapshot: {e}; run `train` first"))
    })?];
    for k in 1..=cfg.cycles.num_cycles {
        let path = paths.cycle_snapshot(seed, "one_cycle", k);
        if !path.is_file() {
            return Err(Error::Run(format!(
                "no snapshot at {}; run `prune` first",
                path.display()
            )));
        }
        snapshots.push(load_snapshot(&path)?);
    }
    let registry = SnapshotRegistry::from_snapshots(snapshots)?;
    let data = build_dataset(&cfg.dataset)?;
    let dcfg = cfg.distill_config(teachers)?;
    let run = distill_student(&registry, &dcfg, &data, seed)?;
    let arm = match teachers {
        TeacherSet::BaselineOnly => "single_distill",
        _ => "ensemble_distill",
    };
    save_to(&paths.student_snapshot(seed, arm), &run.student)?;
    Ok(run.student.meta.eval_accuracy.unwrap_or(0.0))
}

/// Evaluates a saved snapshot on the configured test split.
pub fn stage_evaluate(cfg: &ExperimentConfig, snapshot_path: &Path) -> Result<f64> {
    let snapshot = load_snapshot(snapshot_path)?;
    let data = build_dataset(&cfg.dataset)?;
    evaluate_model(&snapshot, &data.test)
}
