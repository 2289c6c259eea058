//! Command-line front end. `run` parses arguments and executes a verb; the
//! binary only prints its outcome.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::data::Split;
use crate::error::Error;
use crate::experiment;

#[derive(Debug, Parser)]
#[command(name = "wvae", version, about = "Multi-view clustering of wireless fingerprints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed for data generation and training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Config override, `key.path=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Perturbation-to-noise ratio in dB.
        #[arg(long)]
        pnr_db: Option<f64>,
    },
    /// Train the configured regime and keep the selected model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Accuracy versus PNR.
    SweepPnr {
        #[command(flatten)]
        common: Common,
    },
    /// Cluster-count detection from the loss curve.
    DetectK {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// K-means on cascaded features.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Accuracy versus the traffic reliability weight.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::SweepPnr { common }
            | Command::DetectK { common, .. }
            | Command::Baseline { common, .. }
            | Command::SweepAlpha { common, .. } => common,
        }
    }
}

/// A failed invocation, reported on one line.
#[derive(Debug)]
pub struct Failure {
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

impl Failure {
    pub fn line(&self) -> String {
        format!("error kind={} msg={}", self.kind, self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string().replace('\n', " "),
            exit_code: 1,
        }
    }
}

/// Successful outcome of `run`.
pub enum Outcome {
    Done(String),
    /// Help or version text.
    Info(String),
}

pub fn run<I, T>(args: I) -> Result<Outcome, Failure>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    Ok(Outcome::Info(e.to_string()))
                }
                _ => Err(Failure {
                    kind: "usage".into(),
                    message: e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string(),
                    exit_code: 2,
                }),
            };
        }
    };
    let threads = cli.command.common().threads;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Failure::from(Error::InvalidArgument(e.to_string())))?;
    pool.install(|| execute(&cli.command)).map(Outcome::Done).map_err(Failure::from)
}

fn effective_config(common: &Common) -> crate::Result<ExperimentConfig> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(s) = common.seed {
        cfg.dataset.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

/// Executes a parsed verb and returns a short `key=value` report.
pub fn execute(command: &Command) -> crate::Result<String> {
    let common = command.common();
    let mut cfg = effective_config(common)?;
    let out = common.out.as_path();
    let mut report = String::new();
    match command {
        Command::Gen { pnr_db, .. } => {
            if let Some(db) = pnr_db {
                cfg.dataset = experiment::dataset_at_pnr(&cfg.dataset, *db)?;
            }
            let d = experiment::generate(&cfg, out)?;
            let _ = writeln!(
                report,
                "dataset={} train={} test={} classes={} pnr_db={}",
                show(out),
                d.train.len(),
                d.test.len(),
                d.train.classes,
                d.record.pnr_db
            );
        }
        Command::Train { data, .. } => {
            let s = experiment::train(&cfg, data.as_deref(), out)?;
            let _ = writeln!(
                report,
                "regime={} trials={} selected={} metric={} final_loss={} model={}",
                s.regime,
                s.trials,
                s.selected,
                s.metric,
                s.final_loss,
                show(&out.join("model"))
            );
        }
        Command::Eval { data, checkpoint, split, .. } => {
            let ev = experiment::eval(checkpoint, data, (*split).into(), out)?;
            let _ = writeln!(
                report,
                "matched_accuracy={} direct_accuracy={} entropy={} loss={}",
                ev.matched_accuracy, ev.direct_accuracy, ev.entropy, ev.loss
            );
        }
        Command::SweepPnr { .. } => {
            let rows = experiment::sweep_pnr(&cfg, out)?;
            for r in rows {
                let _ = writeln!(report, "pnr_db={} regime={} accuracy={}", r.pnr_db, r.regime, r.accuracy);
            }
        }
        Command::DetectK { data, .. } => {
            let res = experiment::detect_k(&cfg, data.as_deref(), out)?;
            match res.detected_k {
                Some(k) => {
                    let _ = writeln!(report, "detected_k={k}");
                }
                None => {
                    let _ = writeln!(report, "detected_k=none (no sharp transition)");
                }
            }
        }
        Command::Baseline { data, k, .. } => {
            let row = experiment::baseline(&cfg, data.as_deref(), *k, out)?;
            let _ = writeln!(report, "kmeans_accuracy={} inertia={}", row.accuracy, row.loss);
        }
        Command::SweepAlpha { data, .. } => {
            let (rows, best) = experiment::sweep_alpha(&cfg, data.as_deref(), out)?;
            for r in &rows {
                let _ = writeln!(report, "alpha_traffic={} accuracy={}", r.alpha, r.accuracy);
            }
            let _ = writeln!(report, "best_alpha_traffic={}", rows[best].alpha);
        }
    }
    Ok(report)
}
