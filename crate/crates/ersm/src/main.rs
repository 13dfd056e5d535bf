use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ersm::commands::{self, parse_grid};
use ersm::{CliError, Result, RunConfig};

/// Energy-regularized spatial masking on synthetic planted-object data.
///
/// Settings are resolved in three layers: built-in defaults, then the file
/// given with --config (`key = value` lines), then command-line flags.
#[derive(Debug, Parser)]
#[command(name = "ersm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Shared {
    /// Configuration file of `key = value` lines
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for data, initialization, split and shuffling [default: 0]
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Override any configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct ModelFlags {
    /// Model variant: baseline, unary or full [default: full]
    #[arg(long)]
    variant: Option<String>,
    /// Unary energy weight [default: 0.001]
    #[arg(long)]
    lambda_unary: Option<f64>,
    /// Pairwise energy weight [default: 0.001]
    #[arg(long)]
    lambda_pair: Option<f64>,
    /// Training epochs [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Parameter groups to keep fixed: none or a list of backbone, mask, head [default: none]
    #[arg(long)]
    freeze: Option<String>,
    /// Copy backbone and head from this checkpoint before training
    #[arg(long, value_name = "PATH")]
    init: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset into <out>/dataset.ersd
    Generate {
        #[command(flatten)]
        shared: Shared,
        /// Number of samples [default: 4000]
        #[arg(long)]
        samples: Option<usize>,
        /// Side of the planted square object in pixels [default: 10]
        #[arg(long)]
        object_size: Option<usize>,
    },
    /// Train one model; writes metrics.csv, final.ersm and best.ersm
    Train {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        model: ModelFlags,
        /// Dataset file
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Suppress per-epoch progress on stderr
        #[arg(long)]
        quiet: bool,
    },
    /// Train one model per (lambda_unary, lambda_pair) cell; writes grid.csv
    Ablate {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        model: ModelFlags,
        /// Dataset file
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Comma-separated unary weights
        #[arg(long, value_name = "LIST", default_value = "0,1e-4,1e-3,1e-2")]
        unary_grid: String,
        /// Comma-separated pairwise weights
        #[arg(long, value_name = "LIST", default_value = "0,1e-4,1e-3,1e-2")]
        pair_grid: String,
    },
    /// Deletion curves, sparsity and alignment for a checkpoint
    Eval {
        #[command(flatten)]
        shared: Shared,
        /// Parameter file to evaluate
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset file
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Model variant the checkpoint was trained as [default: full]
        #[arg(long)]
        variant: Option<String>,
        /// Also write upsampled keep-probability maps as PGM files here
        #[arg(long, value_name = "DIR")]
        masks_out: Option<PathBuf>,
        /// Fraction of tokens kept for the alignment score [default: 0.3]
        #[arg(long)]
        keep_fraction: Option<f64>,
    },
}

fn resolve(shared: &Shared, overrides: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &shared.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    for kv in &shared.set {
        let (k, v) =
            kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_overrides(m: &ModelFlags) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("variant", m.variant.clone()),
        ("lambda_unary", m.lambda_unary.map(|v| v.to_string())),
        ("lambda_pair", m.lambda_pair.map(|v| v.to_string())),
        ("epochs", m.epochs.map(|v| v.to_string())),
        ("freeze", m.freeze.clone()),
    ]
}

fn print_epoch(m: &ersm_core::training::EpochMetrics) {
    eprintln!(
        "epoch {:>3}  lce {:.4}  lreg {:.3e}  train {:.4}  test {:.4}  E[m] {:.4}",
        m.epoch, m.lce, m.lreg, m.train_acc, m.test_acc, m.mean_mask
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { shared, samples, object_size } => {
            let cfg = resolve(
                &shared,
                &[("samples", samples.map(|v| v.to_string())), ("object_size", object_size.map(|v| v.to_string()))],
            )?;
            let s = commands::cmd_generate(&cfg, &shared.out)?;
            println!(
                "wrote {}: n={} K={} shape={}x{}x{} seed={}",
                s.path.display(),
                s.samples,
                s.classes,
                s.shape[0],
                s.shape[1],
                s.shape[2],
                s.seed
            );
        }
        Command::Train { shared, model, data, quiet } => {
            let cfg = resolve(&shared, &model_overrides(&model))?;
            let s = commands::cmd_train(&cfg, &data, &shared.out, model.init.as_deref(), |m| {
                if !quiet {
                    print_epoch(m)
                }
            })?;
            println!(
                "peak_test_acc={:.4} best_epoch={} final_mean_mask={:.4}",
                s.peak_test_acc, s.best_epoch, s.final_mean_mask
            );
        }
        Command::Ablate { shared, model, data, unary_grid, pair_grid } => {
            let cfg = resolve(&shared, &model_overrides(&model))?;
            let (u, p) = (parse_grid(&unary_grid)?, parse_grid(&pair_grid)?);
            let report = commands::cmd_ablate(&cfg, &data, &shared.out, &u, &p, model.init.as_deref())?;
            for c in &report.cells {
                match &c.outcome {
                    Ok(o) => println!(
                        "lambda_unary={} lambda_pair={} peak_test_acc={:.4} mean_mask={:.4}",
                        c.lambda_unary, c.lambda_pair, o.peak_test_acc, o.mean_mask
                    ),
                    Err(e) => println!("lambda_unary={} lambda_pair={} failed: {e}", c.lambda_unary, c.lambda_pair),
                }
            }
            match report.best.map(|i| &report.cells[i]) {
                Some(c) => {
                    let o = c.outcome.as_ref().expect("best cell succeeded");
                    eprintln!(
                        "best: lambda_unary={} lambda_pair={} peak_test_acc={:.4} mean_mask={:.4}",
                        c.lambda_unary, c.lambda_pair, o.peak_test_acc, o.mean_mask
                    );
                }
                None => eprintln!("best: no cell finished"),
            }
        }
        Command::Eval { shared, checkpoint, data, variant, masks_out, keep_fraction } => {
            let cfg =
                resolve(&shared, &[("variant", variant), ("keep_fraction", keep_fraction.map(|v| v.to_string()))])?;
            let s = commands::cmd_eval(&cfg, &checkpoint, &data, &shared.out, masks_out.as_deref())?;
            println!(
                "accuracy={:.4} energy_minus_random={:.4} mean_mask={:.4} alignment={:.4} alignment_random={:.4} masks={}",
                s.accuracy, s.gap, s.mean_mask, s.alignment, s.alignment_random, s.masks_written
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
