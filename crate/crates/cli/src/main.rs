//! Command-line front end. `run` drives a whole experiment; the stage
//! commands (`train`, `prune`, `distill`, `evaluate`) operate on one seed
//! at a time and share the run directory layout, so a full run can also be
//! assembled piecemeal or resumed by hand.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use desklab::harness::{
    arm_for, report, run_experiment, stage_distill, stage_evaluate, stage_prune, stage_train,
    ExperimentConfig, RunPaths,
};
use desklab::pipeline::{RetrainSchedule, TeacherSet};

#[derive(Parser)]
#[command(name = "desklab", version, about = "desk-scale pruning and distillation runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config and $DESKLAB_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SeedArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Seed to run this stage for.
    #[arg(long)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Fixed,
    OneCycle,
}

#[derive(Clone, Copy, ValueEnum)]
enum TeachersArg {
    Ensemble,
    Single,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed and arm of an experiment, then write the summary.
    Run {
        #[command(flatten)]
        common: ConfigArgs,
        /// Replace the config's seed list, e.g. --seeds 1,2,3.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Run only these arms, e.g. --arms one_cycle,ensemble_distill.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
    },
    /// Train and save the baseline for one seed.
    Train(SeedArgs),
    /// Run the pruning cycles for one seed from its saved baseline.
    Prune {
        #[command(flatten)]
        seed_args: SeedArgs,
        /// Retraining schedule for the cycles.
        #[arg(long, value_enum, default_value = "one-cycle")]
        schedule: ScheduleArg,
    },
    /// Distill a student for one seed from its saved snapshots.
    Distill {
        #[command(flatten)]
        seed_args: SeedArgs,
        /// Teacher set: the snapshot ensemble or the baseline alone.
        #[arg(long, value_enum, default_value = "ensemble")]
        teachers: TeachersArg,
    },
    /// Evaluate a saved snapshot on the configured test split.
    Evaluate {
        #[command(flatten)]
        common: ConfigArgs,
        /// Snapshot file to evaluate.
        #[arg(long)]
        snapshot: PathBuf,
    },
    /// Check a finished run directory and write its report tables.
    Report {
        /// Run directory (defaults to the one the config resolves to).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config used to locate the run directory when --out is absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load(common: &ConfigArgs) -> desklab::Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = cfg.resolve_output_dir(common.out.as_deref());
    Ok((cfg, out))
}

fn run(cli: Cli) -> desklab::Result<bool> {
    match cli.command {
        Command::Run { common, seeds, arms } => {
            let (mut cfg, out) = load(&common)?;
            if !seeds.is_empty() {
                cfg.run.seeds = seeds;
            }
            if !arms.is_empty() {
                cfg.run.arms = arms;
            }
            cfg.validate()?;
            println!("running {} -> {}", cfg.name, out.display());
            let outcome = run_experiment(&cfg, &out)?;
            let paths = RunPaths::new(&out);
            if let Ok(summary) = std::fs::read_to_string(paths.summary()) {
                print!("{summary}");
            }
            for f in &outcome.failures {
                eprintln!("FAILED seed {} {}/{}: {}", f.seed, f.arm, f.stage, f.error);
            }
            println!("{} stage(s) completed, {} failed", outcome.completed, outcome.failures.len());
            Ok(outcome.all_completed())
        }
        Command::Train(args) => {
            let (cfg, out) = load(&args.common)?;
            let acc = stage_train(&cfg, &out, args.seed)?;
            println!("baseline seed {} accuracy {:.4}", args.seed, acc);
            Ok(true)
        }
        Command::Prune { seed_args, schedule } => {
            let (cfg, out) = load(&seed_args.common)?;
            let schedule = match schedule {
                ScheduleArg::Fixed => RetrainSchedule::FixedSmallLr,
                ScheduleArg::OneCycle => RetrainSchedule::OneCycle,
            };
            let (acc, params) = stage_prune(&cfg, &out, seed_args.seed, schedule)?;
            println!(
                "{} seed {} final accuracy {:.4}, {} parameters",
                arm_for(schedule),
                seed_args.seed,
                acc,
                params
            );
            Ok(true)
        }
        Command::Distill { seed_args, teachers } => {
            let (cfg, out) = load(&seed_args.common)?;
            let teachers = match teachers {
                TeachersArg::Ensemble => cfg.ensemble_teachers(),
                TeachersArg::Single => TeacherSet::BaselineOnly,
            };
            let acc = stage_distill(&cfg, &out, seed_args.seed, teachers)?;
            println!("student seed {} accuracy {:.4}", seed_args.seed, acc);
            Ok(true)
        }
        Command::Evaluate { common, snapshot } => {
            let (cfg, _) = load(&common)?;
            let acc = stage_evaluate(&cfg, &snapshot)?;
            println!("{} accuracy {:.4}", snapshot.display(), acc);
            Ok(true)
        }
        Command::Report { out, config } => {
            let out = match (out, config) {
                (Some(dir), _) => dir,
                (None, Some(path)) => {
                    let cfg = ExperimentConfig::load(&path)?;
                    cfg.resolve_output_dir(None)
                }
                (None, None) => {
                    return Err(desklab::Error::Param(
                        "report needs --out or --config to locate the run".into(),
                    ))
                }
            };
            let rep = report(&out)?;
            println!("report written to {}", RunPaths::new(&out).report_dir().display());
            for row in &rep.summary {
                println!(
                    "{}: accuracy {:.4} +/- {:.4} (n={})",
                    row.method, row.accuracy_mean, row.accuracy_std, row.n
                );
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
