use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jumpgrad::estimators::EstimatorKind;
use jumpgrad::harness::{run_experiment, Experiment, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "jumpgrad", version, about = "Gradient estimators for controlled jump diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config and/or flags.
    Run(Box<RunArgs>),
    /// Run derivative checks and oracles; exits with 2 on failure.
    Validate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long, alias = "master-seed")]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "JUMPGRAD_WORKERS")]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, alias = "output-dir")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// cir, relu, lq_bench, timing, validate or train_demo.
    #[arg(long)]
    experiment: Option<String>,
    #[command(flatten)]
    common: CommonArgs,
    /// Zoo model probed by the validate experiment.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    timing_batch: Option<usize>,
    #[arg(long)]
    timing_batches: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Hidden widths of the LQ policy, e.g. 20,20,20.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Target parameter counts for lq_bench and timing.
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long)]
    fd_h: Option<f64>,
    /// Comma-separated subset of gg, pd, fd.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long)]
    randomize_reward_integral: Option<bool>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

fn apply_common(cfg: &mut ExperimentConfig, c: CommonArgs) {
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(o) = c.out {
        cfg.output_dir = o;
    }
}

fn parse_kind(s: &str) -> Result<EstimatorKind, HarnessError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "gg" => Ok(EstimatorKind::GG),
        "pd" => Ok(EstimatorKind::PD),
        "fd" => Ok(EstimatorKind::FD),
        other => Err(HarnessError::Config(format!("unknown estimator {other:?}"))),
    }
}

fn build_config(args: RunArgs) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(e) = &args.experiment {
        cfg.experiment = Experiment::parse(e)?;
    }
    apply_common(&mut cfg, args.common);
    cfg.model = args.model.or(cfg.model);
    cfg.n_samples = args.n_samples.or(cfg.n_samples);
    cfg.n_steps = args.n_steps.or(cfg.n_steps);
    cfg.theta = args.theta.or(cfg.theta);
    cfg.x0 = args.x0.or(cfg.x0);
    cfg.horizon = args.horizon.or(cfg.horizon);
    cfg.widths = args.widths.or(cfg.widths);
    cfg.n_grid = args.n_grid.or(cfg.n_grid);
    if let Some(h) = args.fd_h {
        cfg.fd_h = h;
    }
    if let Some(list) = args.estimators {
        cfg.estimators = Some(list.iter().map(|s| parse_kind(s)).collect::<Result<_, _>>()?);
    }
    cfg.randomize_reward_integral = args.randomize_reward_integral.or(cfg.randomize_reward_integral);
    if let Some(s) = args.init_seed {
        cfg.init_seed = s;
    }
    if let Some(b) = args.timing_batch {
        cfg.timing_batch = b;
    }
    if let Some(b) = args.timing_batches {
        cfg.timing_batches = b;
    }
    if let Some(n) = args.train_steps {
        cfg.train_steps = n;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = match cli.command {
        Command::Run(args) => build_config(*args),
        Command::Validate(common) => {
            let mut cfg = ExperimentConfig {
                experiment: Experiment::Validate,
                ..ExperimentConfig::default()
            };
            apply_common(&mut cfg, common);
            Ok(cfg)
        }
    };
    let outcome = cfg.and_then(|c| run_experiment(&c));
    match outcome {
        Ok(out) => {
            for line in &out.summary {
                println!("{line}");
            }
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            if out.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
