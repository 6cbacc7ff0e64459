//! Configuration-driven experiment runner.
//!
//! Every experiment writes CSV artifacts (plus a JSON mirror) into
//! `output_dir`. Each CSV starts with one provenance comment line
//! `# config-hash=<sha256 prefix> seed=<seed> version=<crate version>`
//! followed by a header row. Apart from `timing.csv`, outputs contain no
//! wall-clock data and are byte-identical for a fixed config and seed,
//! whatever the worker count.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimators::{
    self, agreement, fd_estimate, gg_estimate, gg_sample, pd_estimate, pd_sample, sample_z_h, se_comparison_from,
    value_estimate, EstimatorError, EstimatorKind, GgOptions,
};
use crate::model::{validate_model, ModelSpec};
use crate::nn::NnError;
use crate::rng::{PathNoise, PathRole};
use crate::sim::{simulate_augmented_with, SimConfig, SimError};
use crate::stats;
use crate::zoo::{self, CirSpec, LqSpec, ReluDriftSpec, ZooError, ZooModel, ZooOverrides};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    #[default]
    Cir,
    Relu,
    LqBench,
    Timing,
    Validate,
    TrainDemo,
}

impl Experiment {
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| HarnessError::Config(format!("unknown experiment {s:?}")))
    }
}

/// Experiment configuration. Unset options take per-experiment defaults
/// (see [`ExperimentConfig::resolved`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Zoo model name (lq, cir, relu, gbm, gbm_vol, jump_test); restricts the
    /// derivative probes of `validate` to that model.
    pub model: Option<String>,
    /// Parameter values swept by `cir` and `relu`.
    pub theta: Option<Vec<f64>>,
    pub x0: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    /// Explicit hidden widths of the LQ policy; overrides `n_grid`.
    pub widths: Option<Vec<usize>>,
    /// Target parameter counts for `lq_bench` and `timing`, realized by three
    /// equal hidden layers.
    pub n_grid: Option<Vec<usize>>,
    pub n_samples: Option<usize>,
    pub n_steps: Option<usize>,
    pub master_seed: u64,
    pub fd_h: f64,
    pub estimators: Option<Vec<EstimatorKind>>,
    pub randomize_reward_integral: Option<bool>,
    pub output_dir: PathBuf,
    /// Worker threads; 0 picks the number of cores.
    pub workers: usize,
    pub init_seed: u64,
    pub timing_batch: usize,
    pub timing_batches: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Cir,
            model: None,
            theta: None,
            x0: None,
            horizon: None,
            widths: None,
            n_grid: None,
            n_samples: None,
            n_steps: None,
            master_seed: 1,
            fd_h: 0.05,
            estimators: None,
            randomize_reward_integral: None,
            output_dir: PathBuf::from("out"),
            workers: 0,
            init_seed: 0,
            timing_batch: 2,
            timing_batches: 5,
            train_steps: 10,
            learning_rate: 0.05,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Copy with every per-experiment default filled in.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let e = c.experiment;
        c.theta.get_or_insert_with(|| match e {
            Experiment::Cir => vec![4.0, 2.0, 0.55, 0.45, 0.2],
            Experiment::Relu => vec![2.0, 1.0, 0.5],
            _ => Vec::new(),
        });
        c.n_samples.get_or_insert(match e {
            Experiment::Cir | Experiment::Relu => 100_000,
            Experiment::LqBench => 400,
            Experiment::TrainDemo => 64,
            Experiment::Timing | Experiment::Validate => 2,
        });
        c.n_grid.get_or_insert_with(|| match e {
            Experiment::Timing => vec![100, 10_000, 100_000],
            _ => vec![102, 1002],
        });
        c.estimators.get_or_insert_with(|| match e {
            Experiment::Cir | Experiment::Relu => vec![EstimatorKind::GG, EstimatorKind::FD],
            _ => vec![EstimatorKind::GG, EstimatorKind::PD],
        });
        c.randomize_reward_integral
            .get_or_insert(matches!(e, Experiment::LqBench | Experiment::Timing | Experiment::TrainDemo));
        c
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if let Some(n) = self.n_samples {
            if n < 2 {
                return Err(HarnessError::Config(format!("n_samples must be >= 2, got {n}")));
            }
        }
        if self.n_steps == Some(0) {
            return Err(HarnessError::Config("n_steps must be >= 1".into()));
        }
        if !(self.fd_h > 0.0) {
            return Err(HarnessError::Config(format!("fd_h must be positive, got {}", self.fd_h)));
        }
        if self.timing_batch == 0 || self.timing_batches == 0 {
            return Err(HarnessError::Config("timing_batch and timing_batches must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the resolved config, excluding the output location and the
    /// worker count, which do not affect results.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.output_dir = PathBuf::new();
        c.workers = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn wants(&self, kind: EstimatorKind) -> bool {
        self.estimators.as_ref().is_some_and(|v| v.contains(&kind))
    }
}

/// Per-sample runtime of one estimator at one parameter count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRecord {
    pub estimator_kind: EstimatorKind,
    pub n_param: usize,
    pub width: usize,
    pub seconds_per_sample: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    /// False only when a validation check failed.
    pub passed: bool,
    /// Human-readable lines for the terminal.
    pub summary: Vec<String>,
    pub timings: Vec<TimingRecord>,
}

/// Output directory plus the provenance line stamped on each CSV.
struct Artifacts {
    dir: PathBuf,
    provenance: String,
    files: Vec<PathBuf>,
}

impl Artifacts {
    fn new(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        fs::create_dir_all(&cfg.output_dir).map_err(|source| HarnessError::Io {
            path: cfg.output_dir.clone(),
            source,
        })?;
        Ok(Self {
            dir: cfg.output_dir.clone(),
            provenance: format!("# config-hash={} seed={} version={VERSION}", cfg.hash(), cfg.master_seed),
            files: Vec::new(),
        })
    }

    fn io_err(&self, path: &Path) -> impl Fn(io::Error) -> HarnessError {
        let path = path.to_path_buf();
        move |source| HarnessError::Io {
            path: path.clone(),
            source,
        }
    }

    /// Opens a CSV and writes the provenance and header lines.
    fn csv(&mut self, name: &str, header: &str) -> Result<CsvFile, HarnessError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(self.io_err(&path))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{}", self.provenance).map_err(self.io_err(&path))?;
        writeln!(w, "{header}").map_err(self.io_err(&path))?;
        self.files.push(path.clone());
        Ok(CsvFile { path, w })
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), HarnessError> {
        let path = self.dir.join(name);
        let text = serde_json::to_string_pretty(value).expect("plain data serializes");
        fs::write(&path, text + "\n").map_err(self.io_err(&path))?;
        self.files.push(path);
        Ok(())
    }

    /// Writes a body produced by `f` after the provenance line.
    fn csv_with<F>(&mut self, name: &str, f: F) -> Result<(), HarnessError>
    where
        F: FnOnce(&mut Vec<u8>) -> io::Result<()>,
    {
        let path = self.dir.join(name);
        let mut buf = Vec::new();
        writeln!(buf, "{}", self.provenance).expect("vec write");
        f(&mut buf).expect("vec write");
        fs::write(&path, buf).map_err(self.io_err(&path))?;
        self.files.push(path);
        Ok(())
    }
}

struct CsvFile {
    path: PathBuf,
    w: BufWriter<File>,
}

impl CsvFile {
    /// Writes one row and flushes, so completed rows survive an interrupt.
    fn row(&mut self, line: &str) -> Result<(), HarnessError> {
        let res = writeln!(self.w, "{line}").and_then(|_| self.w.flush());
        res.map_err(|source| HarnessError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

/// Runs one experiment on a pool of `cfg.workers` threads.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if cfg.workers > 0 {
        builder = builder.num_threads(cfg.workers);
    }
    let pool = builder
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        let mut art = Artifacts::new(&cfg)?;
        let mut out = RunOutcome {
            passed: true,
            ..RunOutcome::default()
        };
        match cfg.experiment {
            Experiment::Cir | Experiment::Relu => run_scalar_table(&cfg, &mut art, &mut out)?,
            Experiment::LqBench => run_lq_bench(&cfg, &mut art, &mut out)?,
            Experiment::Timing => run_timing(&cfg, &mut art, &mut out)?,
            Experiment::Validate => run_validate(&cfg, &mut art, &mut out)?,
            Experiment::TrainDemo => run_train_demo(&cfg, &mut art, &mut out)?,
        }
        out.files = art.files;
        Ok(out)
    })
}

fn scalar_model(cfg: &ExperimentConfig, theta: f64) -> Result<(ZooModel, Option<String>), HarnessError> {
    let x0 = match &cfg.x0 {
        None => None,
        Some(v) if v.len() == 1 => Some(v[0]),
        Some(v) => return Err(HarnessError::Config(format!("x0 must have one entry, got {}", v.len()))),
    };
    Ok(match cfg.experiment {
        Experiment::Cir => {
            let def = CirSpec::default();
            let spec = CirSpec {
                theta,
                x0: x0.unwrap_or(def.x0),
                horizon: cfg.horizon.unwrap_or(def.horizon),
            };
            (zoo::build_cir(&spec)?, spec.feller_warning())
        }
        _ => {
            let def = ReluDriftSpec::default();
            let spec = ReluDriftSpec {
                theta,
                x0: x0.unwrap_or(def.x0),
                horizon: cfg.horizon.unwrap_or(def.horizon),
                ..def
            };
            (zoo::build_relu(&spec)?, None)
        }
    })
}

#[derive(Serialize)]
struct TableRow {
    theta: f64,
    estimator: EstimatorKind,
    mean: f64,
    se: f64,
    ci95: f64,
    n_samples: usize,
    n_steps: usize,
    fd_h: Option<f64>,
    warning: Option<String>,
}

fn run_scalar_table(cfg: &ExperimentConfig, art: &mut Artifacts, out: &mut RunOutcome) -> Result<(), HarnessError> {
    let name = if cfg.experiment == Experiment::Cir { "cir" } else { "relu" };
    let n = cfg.n_samples.expect("resolved");
    let mut csv = art.csv(
        &format!("{name}_table.csv"),
        "theta,estimator,mean,se,ci95,n_samples,n_steps,fd_h,warning",
    )?;
    let mut rows = Vec::new();
    let opts = GgOptions {
        randomize_reward_integral: cfg.randomize_reward_integral.expect("resolved"),
        ..GgOptions::default()
    };
    for &theta in cfg.theta.as_deref().unwrap_or_default() {
        let (zm, warning) = scalar_model(cfg, theta)?;
        if let Some(w) = &warning {
            eprintln!("warning: {w}");
        }
        let sim = zm.sim_config(cfg.n_steps, cfg.master_seed);
        let mut push = |kind: EstimatorKind, est: &estimators::GradientEstimate, fd_h: Option<f64>| {
            let row = TableRow {
                theta,
                estimator: kind,
                mean: est.mean[0],
                se: est.se[0],
                ci95: est.ci95_halfwidth[0],
                n_samples: est.n_samples,
                n_steps: sim.n_steps,
                fd_h,
                warning: warning.clone(),
            };
            out.summary.push(format!(
                "{name} theta={theta} {}: {:.4} +- {:.4} ({:.1}s)",
                kind.label(),
                row.mean,
                row.ci95,
                est.wall_seconds
            ));
            let line = format!(
                "{},{},{},{},{},{},{},{},{}",
                row.theta,
                kind.label(),
                row.mean,
                row.se,
                row.ci95,
                row.n_samples,
                row.n_steps,
                fd_h.map(|h| h.to_string()).unwrap_or_default(),
                row.warning.as_deref().map(|_| "feller").unwrap_or_default()
            );
            rows.push(row);
            line
        };
        if cfg.wants(EstimatorKind::GG) {
            let (est, _) = gg_estimate(&zm.spec, &zm.x0, &sim, &opts, n)?;
            let line = push(EstimatorKind::GG, &est, None);
            csv.row(&line)?;
        }
        if cfg.wants(EstimatorKind::PD) {
            let (est, _) = pd_estimate(&zm.spec, &zm.x0, &sim, false, n)?;
            let line = push(EstimatorKind::PD, &est, None);
            csv.row(&line)?;
        }
        if cfg.wants(EstimatorKind::FD) {
            let est = fd_estimate(&zm.spec, &zm.x0, cfg.fd_h, &sim, n)?;
            let line = push(EstimatorKind::FD, &est, Some(cfg.fd_h));
            csv.row(&line)?;
        }
    }
    art.json(&format!("{name}_table.json"), &rows)
}

/// Hidden width `w` of three equal layers whose parameter count
/// `2 w^2 + 10 w + 2` is closest to `n`.
pub fn width_for_params(n: usize) -> usize {
    let count = |w: usize| 2 * w * w + 10 * w + 2;
    let guess = ((-10.0 + (100.0 + 8.0 * n as f64).sqrt()) / 4.0).max(1.0) as usize;
    [guess.saturating_sub(1).max(1), guess, guess + 1]
        .into_iter()
        .min_by_key(|&w| count(w).abs_diff(n))
        .expect("non-empty")
}

fn lq_networks(cfg: &ExperimentConfig) -> Vec<Vec<usize>> {
    match &cfg.widths {
        Some(w) => vec![w.clone()],
        None => cfg
            .n_grid
            .as_deref()
            .unwrap_or_default()
            .iter()
            .map(|&n| vec![width_for_params(n); 3])
            .collect(),
    }
}

fn lq_model(cfg: &ExperimentConfig, widths: &[usize]) -> Result<ZooModel, HarnessError> {
    let mut spec = LqSpec::point_mass(widths.to_vec(), cfg.init_seed)?;
    if let Some(x0) = &cfg.x0 {
        spec.x0 = x0.clone();
    }
    if let Some(h) = cfg.horizon {
        spec.horizon = h;
    }
    Ok(zoo::build_lq(&spec)?)
}

fn join_widths(w: &[usize]) -> String {
    w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x")
}

#[derive(Serialize)]
struct LqBenchRow {
    n_param: usize,
    widths: Vec<usize>,
    avg_se_gg: f64,
    avg_se_pd: f64,
    avg_ratio: f64,
    missing: usize,
    agree_fraction: f64,
    fd_agree_fraction: Option<f64>,
}

fn run_lq_bench(cfg: &ExperimentConfig, art: &mut Artifacts, out: &mut RunOutcome) -> Result<(), HarnessError> {
    let n_samples = cfg.n_samples.expect("resolved");
    let randomize = cfg.randomize_reward_integral.expect("resolved");
    let opts = GgOptions {
        randomize_reward_integral: randomize,
        ..GgOptions::default()
    };
    let mut table = art.csv(
        "lq_se_table.csv",
        "n_param,widths,avg_se_gg,avg_se_pd,avg_ratio,missing,agree_fraction,fd_agree_fraction",
    )?;
    let mut rows = Vec::new();
    for widths in lq_networks(cfg) {
        let zm = lq_model(cfg, &widths)?;
        let sim = zm.sim_config(cfg.n_steps, cfg.master_seed);
        let n_param = zm.spec.dims.param;
        let (gg, _) = gg_estimate(&zm.spec, &zm.x0, &sim, &opts, n_samples)?;
        let (pd, _) = pd_estimate(&zm.spec, &zm.x0, &sim, randomize, n_samples)?;
        let report = se_comparison_from(&gg, &pd)?;
        let agree = agreement(&gg, &pd, 3.0)?;
        let fd_agree = if cfg.wants(EstimatorKind::FD) {
            let fd = fd_estimate(&zm.spec, &zm.x0, cfg.fd_h, &sim, n_samples)?;
            Some(agreement(&gg, &fd, 3.0)?.fraction)
        } else {
            None
        };
        art.csv_with(&format!("lq_estimates_n{n_param}.csv"), |w| {
            writeln!(w, "coord,mean_gg,se_gg,mean_pd,se_pd,within_3se")?;
            for k in 0..n_param {
                writeln!(
                    w,
                    "{k},{},{},{},{},{}",
                    gg.mean[k], gg.se[k], pd.mean[k], pd.se[k], agree.within[k] as u8
                )?;
            }
            Ok(())
        })?;
        art.csv_with(&format!("lq_se_coords_n{n_param}.csv"), |w| report.write_csv(w))?;
        art.csv_with(&format!("lq_se_hist_n{n_param}.csv"), |w| report.write_histogram_csv(w))?;
        let row = LqBenchRow {
            n_param,
            widths: widths.clone(),
            avg_se_gg: report.avg_se_gg,
            avg_se_pd: report.avg_se_pd,
            avg_ratio: report.avg_ratio,
            missing: report.missing.len(),
            agree_fraction: agree.fraction,
            fd_agree_fraction: fd_agree,
        };
        table.row(&format!(
            "{},{},{},{},{},{},{},{}",
            n_param,
            join_widths(&widths),
            row.avg_se_gg,
            row.avg_se_pd,
            row.avg_ratio,
            row.missing,
            row.agree_fraction,
            fd_agree.map(|f| f.to_string()).unwrap_or_default()
        ))?;
        out.summary.push(format!(
            "lq n={n_param}: avg SE gg {:.3e} pd {:.3e}, ratio {:.3}, agreement {:.3} ({:.1}s + {:.1}s)",
            row.avg_se_gg, row.avg_se_pd, row.avg_ratio, row.agree_fraction, gg.wall_seconds, pd.wall_seconds
        ));
        rows.push(row);
    }
    art.json("lq_bench.json", &rows)
}

/// Median over `batches` timed batches (after one warm-up batch) of the
/// per-sample wall time, samples drawn sequentially.
pub fn time_per_sample(
    kind: EstimatorKind,
    model: &ModelSpec,
    x0: &[f64],
    sim: &SimConfig,
    randomize: bool,
    batch: usize,
    batches: usize,
) -> Result<f64, HarnessError> {
    let opts = GgOptions {
        randomize_reward_integral: randomize,
        ..GgOptions::default()
    };
    let mut rep = 0u64;
    let mut run_batch = || -> Result<f64, HarnessError> {
        let start = Instant::now();
        for _ in 0..batch {
            match kind {
                EstimatorKind::GG => {
                    gg_sample(model, x0, sim, &opts, rep)?;
                }
                EstimatorKind::PD => {
                    pd_sample(model, x0, sim, randomize, rep)?;
                }
                EstimatorKind::FD => {
                    estimators::fd_sample(model, x0, 0.05, sim, rep)?;
                }
            }
            rep += 1;
        }
        Ok(start.elapsed().as_secs_f64() / batch as f64)
    };
    run_batch()?;
    let times = (0..batches).map(|_| run_batch()).collect::<Result<Vec<_>, _>>()?;
    Ok(stats::median(&times).max(f64::MIN_POSITIVE))
}

fn run_timing(cfg: &ExperimentConfig, art: &mut Artifacts, out: &mut RunOutcome) -> Result<(), HarnessError> {
    let randomize = cfg.randomize_reward_integral.expect("resolved");
    let mut csv = art.csv("timing.csv", "estimator,n_param,width,seconds_per_sample,batch_size")?;
    for widths in lq_networks(cfg) {
        let zm = lq_model(cfg, &widths)?;
        let sim = zm.sim_config(cfg.n_steps, cfg.master_seed);
        for kind in cfg.estimators.clone().unwrap_or_default() {
            let secs = time_per_sample(kind, &zm.spec, &zm.x0, &sim, randomize, cfg.timing_batch, cfg.timing_batches)?;
            let rec = TimingRecord {
                estimator_kind: kind,
                n_param: zm.spec.dims.param,
                width: widths[0],
                seconds_per_sample: secs,
                batch_size: cfg.timing_batch,
            };
            csv.row(&format!(
                "{},{},{},{},{}",
                kind.label(),
                rec.n_param,
                rec.width,
                rec.seconds_per_sample,
                rec.batch_size
            ))?;
            out.summary.push(format!("timing {} n={}: {:.3e} s/sample", kind.label(), rec.n_param, secs));
            out.timings.push(rec);
        }
    }
    let timings = out.timings.clone();
    art.json("timing.json", &timings)
}

/// One line of the validation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow {
    pub suite: String,
    pub check: String,
    pub passed: bool,
    pub value: f64,
    pub reference: f64,
    pub tolerance: f64,
}

fn oracle_row(check: &str, value: f64, reference: f64, tolerance: f64) -> SuiteRow {
    SuiteRow {
        suite: "oracle".into(),
        check: check.into(),
        passed: (value - reference).abs() <= tolerance,
        value,
        reference,
        tolerance,
    }
}

/// Derivative probes on every zoo model plus fast statistical and exact
/// oracles. Deterministic for a fixed seed.
///
/// `models` selects the models whose derivatives are probed; `None` probes
/// every zoo model at its defaults.
pub fn validation_suite(seed: u64, models: Option<Vec<ZooModel>>) -> Result<Vec<SuiteRow>, HarnessError> {
    let mut rows = Vec::new();
    let zoo_models = match models {
        Some(m) => m,
        None => zoo::MODEL_NAMES
            .iter()
            .map(|name| zoo::by_name(name, &ZooOverrides::default()))
            .collect::<Result<_, _>>()?,
    };
    for zm in &zoo_models {
        let report = validate_model(&zm.spec, 16, seed);
        for c in &report.checks {
            rows.push(SuiteRow {
                suite: format!("derivatives:{}", zm.spec.name),
                check: c.name.clone(),
                passed: c.passed,
                value: c.max_rel,
                reference: 0.0,
                tolerance: report.tolerance,
            });
        }
    }

    let n = 4000;
    let gbm = zoo::build_gbm(0.05, 0.2, 1.0, 1.0)?;
    let sim = gbm.sim_config(None, seed);
    let exact = zoo::gbm_gradient(0.05, 1.0, 1.0);
    let (gg, _) = gg_estimate(&gbm.spec, &gbm.x0, &sim, &GgOptions::default(), n)?;
    rows.push(oracle_row("gbm gg closed form (3 se)", gg.mean[0], exact, 3.0 * gg.se[0]));
    let (pd, _) = pd_estimate(&gbm.spec, &gbm.x0, &sim, false, n)?;
    rows.push(oracle_row("gbm pd closed form (3 se)", pd.mean[0], exact, 3.0 * pd.se[0]));

    let gv = zoo::build_gbm_vol(0.5, 1.0, 1.0)?;
    let sim = gv.sim_config(None, seed);
    let (gg, draws) = gg_estimate(&gv.spec, &gv.x0, &sim, &GgOptions::default(), n)?;
    rows.push(oracle_row(
        "gbm_vol gg closed form (3 se)",
        gg.mean[0],
        zoo::gbm_vol_gradient(0.5, 1.0, 1.0),
        3.0 * gg.se[0],
    ));
    rows.push(oracle_row("gbm_vol gg state scalars d+d^2+d^2(d+1)/2", draws[0].state_scalars as f64, 3.0, 0.0));

    let jt = zoo::build_jump_test()?;
    let sim = jt.sim_config(None, seed);
    let (gg, _) = gg_estimate(&jt.spec, &jt.x0, &sim, &GgOptions::default(), n)?;
    rows.push(oracle_row(
        "jump_test gg closed form (3 se + euler)",
        gg.mean[0],
        zoo::jump_test_gradient(1.0, 0.5, 1.0),
        3.0 * gg.se[0] + 0.01,
    ));

    let mut noise = PathNoise::new(seed, 0, PathRole::Custom(1));
    let zh = sample_z_h(&jt.spec, jt.spec.horizon, &[0.7], &sim, &mut noise, true)?;
    rows.push(oracle_row("z at horizon equals terminal gradient", zh.z[0], 1.4, 0.0));
    rows.push(oracle_row("h at horizon equals terminal hessian", zh.h.as_ref().map_or(f64::NAN, |h| h[0]), 2.0, 0.0));

    let lq = zoo::build_lq(&LqSpec::point_mass_width(5, 0)?)?;
    let sim = lq.sim_config(Some(40), seed);
    let d = lq.spec.dims.state;
    let gs = gg_sample(&lq.spec, &lq.x0, &sim, &GgOptions::default(), 0)?;
    rows.push(oracle_row("lq gg state scalars d+d^2", gs.state_scalars as f64, (d + d * d) as f64, 0.0));
    rows.push(oracle_row("lq gg never requests H", gs.h_requested as u8 as f64, 0.0, 0.0));
    let ps = pd_sample(&lq.spec, &lq.x0, &sim, true, 0)?;
    rows.push(oracle_row(
        "lq pd state scalars d+dn",
        ps.state_scalars as f64,
        (d + d * lq.spec.dims.param) as f64,
        0.0,
    ));

    let mut noise = PathNoise::new(seed, 0, PathRole::Custom(2));
    let path = simulate_augmented_with(&lq.spec, &lq.x0, 0.0, lq.spec.horizon, &sim, &mut noise, true)?;
    let st = path.first();
    let identity_err = (0..d)
        .flat_map(|i| (0..d).map(move |a| (i, a)))
        .map(|(i, a)| (st.grad_x[i * d + a] - if i == a { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    rows.push(oracle_row("grad X at zero elapsed time is identity", identity_err, 0.0, 0.0));
    let hess_max = st.hess_x.as_ref().map_or(f64::NAN, |h| h.iter().fold(0.0, |m, v| m.max(v.abs())));
    rows.push(oracle_row("H[X] at zero elapsed time is zero", hess_max, 0.0, 0.0));
    Ok(rows)
}

fn run_validate(cfg: &ExperimentConfig, art: &mut Artifacts, out: &mut RunOutcome) -> Result<(), HarnessError> {
    let models = match &cfg.model {
        None => None,
        Some(name) => {
            let overrides = ZooOverrides {
                theta: cfg.theta.as_ref().and_then(|t| t.first().copied()),
                x0: cfg.x0.clone(),
                horizon: cfg.horizon,
                widths: cfg.widths.clone(),
                init_seed: Some(cfg.init_seed),
            };
            Some(vec![zoo::by_name(name, &overrides)?])
        }
    };
    let rows = validation_suite(cfg.master_seed, models)?;
    art.csv_with("validate_report.csv", |w| {
        writeln!(w, "suite,check,passed,value,reference,tolerance")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.suite, r.check, r.passed as u8, r.value, r.reference, r.tolerance
            )?;
        }
        Ok(())
    })?;
    art.json("validate_report.json", &rows)?;
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed).collect();
    out.passed = failed.is_empty();
    out.summary.push(format!("validate: {} checks, {} failed", rows.len(), failed.len()));
    for r in failed {
        out.summary.push(format!("  FAILED {} / {}: {} vs {}", r.suite, r.check, r.value, r.reference));
    }
    Ok(())
}

fn run_train_demo(cfg: &ExperimentConfig, art: &mut Artifacts, out: &mut RunOutcome) -> Result<(), HarnessError> {
    let widths = cfg.widths.clone().unwrap_or(vec![5; 3]);
    let mut zm = lq_model(cfg, &widths)?;
    let n = cfg.n_samples.expect("resolved");
    let opts = GgOptions {
        randomize_reward_integral: cfg.randomize_reward_integral.expect("resolved"),
        ..GgOptions::default()
    };
    let mut csv = art.csv("train_demo.csv", "step,loss,loss_se,grad_norm")?;
    for step in 0..=cfg.train_steps {
        let seed = cfg.master_seed.wrapping_add((step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let sim = zm.sim_config(cfg.n_steps, seed);
        let (loss, loss_se) = value_estimate(&zm.spec, &zm.x0, &sim, n)?;
        let (grad, _) = gg_estimate(&zm.spec, &zm.x0, &sim, &opts, n)?;
        let norm = grad.mean.iter().map(|g| g * g).sum::<f64>().sqrt();
        csv.row(&format!("{step},{loss},{loss_se},{norm}"))?;
        out.summary.push(format!("step {step}: loss {loss:.5} +- {loss_se:.5}, |grad| {norm:.4}"));
        if step < cfg.train_steps {
            let theta: Vec<f64> = zm
                .spec
                .theta
                .iter()
                .zip(&grad.mean)
                .map(|(t, g)| t - cfg.learning_rate * g)
                .collect();
            zm.spec = zm.spec.at_theta(theta).map_err(ZooError::from)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_hit_parameter_grid() {
        assert_eq!(width_for_params(102), 5);
        assert_eq!(width_for_params(1002), 20);
        assert_eq!(width_for_params(100), 5);
        assert_eq!(width_for_params(10_000), 68);
        assert_eq!(width_for_params(100_000), 221);
    }

    #[test]
    fn parse_errors_report_position() {
        let err = ExperimentConfig::from_json("{\n  \"experiment\": \"cir\",\n  \"bogus\": 1\n}").unwrap_err();
        match err {
            HarnessError::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("bogus"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_roundtrip_and_hash() {
        let cfg = ExperimentConfig {
            experiment: Experiment::LqBench,
            ..Default::default()
        };
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let mut other = cfg.clone();
        other.workers = 3;
        other.output_dir = PathBuf::from("elsewhere");
        assert_eq!(cfg.hash(), other.hash());
        other.master_seed += 1;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn experiment_names() {
        assert_eq!(Experiment::parse("lq-bench").unwrap(), Experiment::LqBench);
        assert_eq!(Experiment::parse("train_demo").unwrap(), Experiment::TrainDemo);
        assert!(Experiment::parse("nope").is_err());
    }

    #[test]
    fn rejects_too_few_samples() {
        let cfg = ExperimentConfig {
            n_samples: Some(1),
            ..Default::default()
        };
        assert!(matches!(run_experiment(&cfg), Err(HarnessError::Config(_))));
    }
}
