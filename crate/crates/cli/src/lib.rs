//! `iccr` command line: data generation, training, evaluation and analysis
//! runs, each writing into its own run directory with a manifest.

pub mod commands;
pub mod config;
pub mod run_dir;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{load_config, parse_assignment};
use crate::run_dir::RunDir;

/// Exit code for bad flags and invalid configuration.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "iccr", version, about = "In-context counterfactual regression experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.learning_rate=3e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Seed for data, initialization and evaluation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent of the run directory [env: ICCR_RUNS_DIR, default: runs].
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataTask {
    Counterfactual,
    Continuation,
    Sde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainTask {
    Regression,
    Sde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Zero,
    Ols,
    Oracle,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a prompt dataset.
    GenData {
        #[arg(long, value_enum, default_value = "counterfactual")]
        task: DataTask,
        #[arg(long, default_value_t = 6400)]
        count: usize,
    },
    /// Train a model, writing checkpoints and loss traces.
    Train {
        #[arg(long, value_enum, default_value = "regression")]
        task: TrainTask,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Error curve of a checkpoint or a baseline over prompt lengths.
    Eval {
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long, value_enum, default_value = "regression")]
        task: TrainTask,
        /// `a..b` (inclusive) or a comma list.
        #[arg(long)]
        lengths: Option<String>,
        /// Sequences per length.
        #[arg(long)]
        seqs: Option<usize>,
    },
    /// Linear probes of the latent from each layer.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Attention mass from the anchor token onto the anchored example.
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Simulate SDE pairs and check their identities.
    SdeSim {
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Train over pool sizes and latent laws, then evaluate each.
    Diversity,
    /// Map each experiment to the command that produces it.
    Report,
    /// Gradient and oracle checks.
    Selftest {
        /// Instances per noise kind.
        #[arg(long, default_value_t = 10_000)]
        instances: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Probe { .. } => "probe",
            Command::Attn { .. } => "attn",
            Command::SdeSim { .. } => "sde-sim",
            Command::Diversity => "diversity",
            Command::Report => "report",
            Command::Selftest { .. } => "selftest",
        }
    }

    /// Flags that override config keys, in the order they apply.
    fn overrides(&self) -> Vec<(String, toml::Value)> {
        let mut out: Vec<(String, toml::Value)> = Vec::new();
        match self {
            Command::GenData { task, .. } => match task {
                DataTask::Counterfactual => out.push(("data.task".into(), "counterfactual".into())),
                DataTask::Continuation => out.push(("data.task".into(), "continuation".into())),
                DataTask::Sde => {}
            },
            Command::Train { steps, lr, batch, .. } => {
                if let Some(s) = steps {
                    out.push(("train.steps".into(), toml::Value::Integer(*s as i64)));
                }
                if let Some(l) = lr {
                    out.push(("train.learning_rate".into(), toml::Value::Float(*l)));
                }
                if let Some(b) = batch {
                    out.push(("train.batch".into(), toml::Value::Integer(*b as i64)));
                }
            }
            Command::Eval { lengths, seqs, .. } => {
                if let Some(l) = lengths {
                    out.push(("eval.lengths".into(), l.clone().into()));
                }
                if let Some(s) = seqs {
                    out.push(("eval.seqs".into(), toml::Value::Integer(*s as i64)));
                }
            }
            _ => {}
        }
        out
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();

    let mut overrides = Vec::new();
    let mut bad_set = None;
    for s in &cli.global.set {
        match parse_assignment(s) {
            Ok(kv) => overrides.push(kv),
            Err(e) => bad_set = Some(e),
        }
    }
    if let Some(seed) = cli.global.seed {
        for key in ["seed", "data.seed", "train.seed", "sde.seed"] {
            overrides.push((key.into(), toml::Value::Integer(seed as i64)));
        }
    }
    overrides.extend(cli.command.overrides());

    let resolved = match bad_set {
        Some(e) => Err(e),
        None => load_config(cli.global.config.as_deref(), &overrides),
    };
    let resolved = match resolved {
        Ok(r) => r,
        Err(e) => {
            // Still leave a manifest behind for the failed invocation.
            if let Ok(dir) = RunDir::create(
                cli.global.run_dir.as_deref(),
                cli.command.name(),
                argv,
                serde_json::Value::Null,
                Vec::new(),
                cli.global.seed.unwrap_or(0),
            ) {
                let _ = dir.finish(&Err(anyhow::anyhow!("{:#}", e)));
            }
            eprintln!("error: {:#}", e);
            return EXIT_USAGE;
        }
    };

    let config_json = serde_json::to_value(&resolved.config).unwrap_or(serde_json::Value::Null);
    let mut dir = match RunDir::create(
        cli.global.run_dir.as_deref(),
        cli.command.name(),
        argv,
        config_json,
        resolved.overrides.clone(),
        resolved.config.seed,
    ) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {:#}", e);
            return EXIT_FAILURE;
        }
    };
    let outcome = commands::dispatch(&cli.command, &resolved, &mut dir);
    let code = match &outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {:#}", e);
            EXIT_FAILURE
        }
    };
    match dir.finish(&outcome) {
        Ok(path) => {
            if code == 0 {
                println!("{}", path.display());
            }
            code
        }
        Err(e) => {
            eprintln!("error: {:#}", e);
            EXIT_FAILURE
        }
    }
}
