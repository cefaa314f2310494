//! Command-line entry point.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use super::config::{ExperimentConfig, Split, TrainMode};
use super::dataset::simulate_ground_truth;
use super::gradcheck::run_gradcheck;
use super::io;
use super::pipeline::{
    estimate_jacobian, evaluate_split, generate_split, load_split, train, write_evaluation, write_split,
    write_training, TrainedModel,
};
use crate::error::{Error, Result};
use crate::grid::{FaultScenario, HybridLayout};

/// Gradient checks pass at or below this relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "neudye", version, about = "Neural dynamic equivalents of external grid regions")]
pub struct Cli {
    /// Experiment config JSON, or `builtin:<name>`.
    #[arg(long, global = true, default_value = "builtin:wscc9")]
    pub config: String,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Holdout,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Holdout => Split::Holdout,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    Open,
    Pi,
    Pg,
    Dnn,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Open => TrainMode::Open,
            ModeArg::Pi => TrainMode::Pi,
            ModeArg::Pg => TrainMode::Pg,
            ModeArg::Dnn => TrainMode::Dnn,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scenario (ground truth, or closed loop with --model).
    Simulate {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Simulate the undisturbed system instead.
        #[arg(long)]
        no_fault: bool,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Generate ground-truth datasets for every split.
    GenData,
    /// Train a surrogate.
    Train {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Estimate the internal Jacobian from the training data.
    EstimateJacobian,
    /// Evaluate a trained surrogate in closed loop.
    Evaluate {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Compare adjoint gradients with finite differences.
    Gradcheck,
}

fn load_config(spec: &str, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match spec.strip_prefix("builtin:") {
        Some(name) => ExperimentConfig::builtin(name)?,
        None => ExperimentConfig::from_file(spec)?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn simulate(cfg: &ExperimentConfig, out: &Path, split: Split, index: usize, no_fault: bool, model: Option<&Path>) -> Result<PathBuf> {
    let net = cfg.network()?;
    let grid = cfg.grid.time_grid()?;
    let scenario = if no_fault {
        FaultScenario::no_fault(0, cfg.load_scale[0])
    } else {
        let list = super::scenarios::generate_scenarios(cfg, split)?;
        *list
            .get(index)
            .ok_or_else(|| Error::Config(format!("{} split has no scenario {index}", split.name())))?
    };
    let t: Vec<f64> = (0..grid.len()).map(|i| grid.t(i)).collect();
    match model {
        None => {
            let (_, traj) = simulate_ground_truth(&net, &scenario, &grid, &cfg.integrator)?;
            let names: Vec<String> = net
                .machines
                .iter()
                .flat_map(|m| [format!("delta_{}", m.bus), format!("domega_{}", m.bus)])
                .collect();
            let path = out.join(format!("trajectory_{}.csv", scenario.id));
            io::write_columns_csv(&path, &names, &t, |i| traj.state(i).to_vec())?;
            Ok(path)
        }
        Some(p) => {
            let features = cfg.feature_spec(&net);
            let (data, _) = super::dataset::build_dataset(
                &net,
                &features,
                &[scenario],
                &grid,
                &cfg.integrator,
                cfg.execution,
            )?;
            let systems = super::dataset::internal_systems(&net, &features, &data)?;
            let d = &data.scenarios[0];
            let ep = crate::neudye::Episode {
                data: d,
                insys: &systems[0],
            };
            let m = TrainedModel::from_file(p)?;
            let traj = m.surrogate().simulate(&ep, &cfg.integrator)?;
            let layout = HybridLayout::new(&net, &features)?;
            let mut names = layout.names_in();
            names.extend(layout.names_ex(&net));
            let path = out.join(format!("closed_loop_{}.csv", scenario.id));
            io::write_columns_csv(&path, &names, &t, |i| traj.traj.state(i).to_vec())?;
            Ok(path)
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.config, cli.seed)?;
    let out = &cli.out;
    std::fs::create_dir_all(out)?;
    match &cli.command {
        Command::Simulate {
            split,
            index,
            no_fault,
            model,
        } => {
            let path = simulate(&cfg, out, (*split).into(), *index, *no_fault, model.as_deref())?;
            println!("{}", json!({"trajectory": path}));
        }
        Command::GenData => {
            for (split, _) in cfg.splits() {
                let sd = generate_split(&cfg, split)?;
                write_split(&cfg, out, split, &sd)?;
                println!(
                    "{}",
                    json!({"split": split.name(), "scenarios": sd.data.scenarios.len(), "dropped": sd.dropped.len()})
                );
            }
        }
        Command::Train { mode } => {
            let mode = mode.map(TrainMode::from).unwrap_or(cfg.mode);
            let sd = load_split(&cfg, out, Split::Train)?;
            let result = train(&cfg, &sd, mode)?;
            write_training(out, &cfg, &sd, &result)?;
            let last = result.history.last().map(|r| r.loss);
            println!(
                "{}",
                json!({"mode": mode, "epochs": result.history.len(), "final_loss": last, "one_step_error": result.one_step_error})
            );
        }
        Command::EstimateJacobian => {
            let sd = load_split(&cfg, out, Split::Train)?;
            let est = estimate_jacobian(&cfg, &sd)?;
            io::write_json(&out.join("jacobian.json"), &est)?;
            println!("{}", json!({"samples": est.samples, "condition_numbers": est.condition_numbers}));
        }
        Command::Evaluate { split, model } => {
            let path = model.clone().unwrap_or_else(|| out.join("model.json"));
            let m = TrainedModel::from_file(&path)
                .map_err(|e| Error::Config(format!("cannot load model {}: {e}", path.display())))?;
            let sd = load_split(&cfg, out, (*split).into())?;
            let (report, series) = evaluate_split(&cfg, &m, &sd);
            write_evaluation(out, &report, &series)?;
            println!(
                "{}",
                json!({"completed": report.completed, "diverged": report.diverged, "median_mean_error": report.mean_error.map(|b| b.median)})
            );
        }
        Command::Gradcheck => {
            let report = run_gradcheck(&cfg)?;
            io::write_json(&out.join("gradcheck.json"), &report)?;
            println!("max relative error: {:.3e}", report.max_relative_error);
            if !(report.max_relative_error <= GRADCHECK_TOL) {
                return Err(Error::TrainingFailure(format!(
                    "gradient check failed: max relative error {:.3e}",
                    report.max_relative_error
                )));
            }
        }
    }
    Ok(())
}

/// Exit status for an error: 2 for numerical failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

/// Parses `args`, runs the command and returns the process exit status.
/// Failures print a one-line JSON diagnostic to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim(), "exit": 1}));
            return 1;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string(), "exit": code}));
            code
        }
    }
}
