//! `coranet` command-line tool: dataset generation, training, evaluation,
//! mask overlays and sweeps.
//!
//! Failures print a single line `error[<kind>]: <message>` on stderr and
//! exit with status 1 (2 for usage errors).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coranet::data::{self, Ratio};
use coranet::experiment::{self, AlphaSetting, ExperimentConfig, SweepKind, SAMPLES_FILE};
use coranet::model::HeadInit;
use coranet::trainer::Variant;
use coranet::Error;

const THREADS_VAR: &str = "CORANET_THREADS";

#[derive(Parser)]
#[command(name = "coranet", version, about = "Semi-supervised segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); defaults to the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    ratio: Option<Ratio>,
    /// Cost ratio of the auxiliary heads; `1*` selects distinct head initializations.
    #[arg(long)]
    alpha: Option<AlphaSetting>,
    /// Dataset directory with `train/` and `test/`.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::desk(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.train.variant = v;
        }
        if let Some(r) = self.ratio {
            cfg.split.ratio = r;
        }
        if let Some(a) = self.alpha {
            cfg.train.alpha = a.alpha;
            if a.alpha == 1.0 {
                cfg.train.head_init = if a.star { HeadInit::Independent } else { HeadInit::Shared };
            }
        }
        if let Some(d) = &self.data {
            cfg.data_dir = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into the dataset directory.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output directory (overrides the dataset directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Also export every image and mask as PNG.
        #[arg(long)]
        png: bool,
    },
    /// Pretrain and jointly train one variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Continue from a snapshot written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a sample file (the test split by default).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample container to score; defaults to `<data>/test/samples.crd`.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation, ratio or alpha sweep.
    Sweep {
        /// ablation, ratio or alpha.
        kind: SweepKind,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Uncertain-region overlays on the unlabeled pool for a series of snapshots.
    Masks {
        #[command(flatten)]
        common: Common,
        /// A snapshot file or a directory of snapshots.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn default_out(cfg: &ExperimentConfig, leaf: &str) -> PathBuf {
    cfg.output_dir.join(leaf)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen { common, out, force, png } => {
            let cfg = common.load()?;
            let dir = out.unwrap_or_else(|| cfg.data_dir.clone());
            let m = experiment::cmd_gen(&cfg, &dir, force, png)?;
            println!("wrote {} train and {} test samples to {}", m.train_count, m.test_count, dir.display());
        }
        Command::Train { common, out, force, resume } => {
            let cfg = common.load()?;
            let leaf = format!("{}_seed{}", cfg.train.variant.name().replace('+', "_"), cfg.train.seed);
            let out = out.unwrap_or_else(|| default_out(&cfg, &leaf));
            let done = experiment::cmd_train(&cfg, &out, force, resume.as_deref())?;
            for s in &done.history {
                println!("{}", s.csv_row());
            }
            print_dsc(&done.report, &out);
        }
        Command::Eval { common, checkpoint, samples, out } => {
            let cfg = common.load()?;
            let path = samples.unwrap_or_else(|| cfg.data_dir.join("test").join(SAMPLES_FILE));
            let report = experiment::cmd_eval(&checkpoint, &data::load(&path)?, &out)?;
            print_dsc(&report, &out);
        }
        Command::Sweep { kind, common, out, force } => {
            let cfg = common.load()?;
            let out = out.unwrap_or_else(|| default_out(&cfg, "sweep"));
            let results = experiment::cmd_sweep(&cfg, kind, &out, force)?;
            print!("{}", experiment::table_csv(&results));
            let failed = results.iter().filter(|r| r.outcome.is_err()).count();
            if failed > 0 {
                eprintln!("{failed} of {} runs failed; see {}", results.len(), out.join("runs.csv").display());
            }
        }
        Command::Masks { common, checkpoint, out } => {
            let cfg = common.load()?;
            let split = experiment::load_split(&cfg)?;
            for d in experiment::cmd_masks(&cfg, &checkpoint, &split, &out)? {
                println!("{}", d.display());
            }
        }
    }
    Ok(())
}

fn print_dsc(report: &coranet::metrics::MetricReport, out: &Path) {
    match report.mean_dsc() {
        Some(d) => println!("mean DSC {d:.4} over {} images ({})", report.rows.len(), out.display()),
        None => println!("mean DSC undefined ({})", out.display()),
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or_default();
            eprintln!("error[usage]: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
