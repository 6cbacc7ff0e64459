//! Gradient estimators for `v(theta) = E[int_0^T rho(t, X) dt + g(X(T))]`.
//!
//! * Generator gradient (GG): `D = T grad_theta L V(tau, X(tau)) + int grad_theta rho dt
//!   + grad_theta g(X(T))`, with `tau ~ U[0, T]` and the value-function
//!   derivatives replaced by the pathwise functionals `Z` and `H`.
//! * Pathwise (PD): differentiates the reward along `(X, d_theta X)`.
//! * Finite difference (FD): central difference of two value estimates under
//!   common random numbers.
//!
//! Replications are independent given `(master_seed, replication)` and run in
//! parallel on the ambient rayon pool; results are collected in replication
//! order, so estimates do not depend on the number of workers.

use std::io::{self, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{dtheta_a_from_vol, Dims, JumpEval, JumpNeeds, Marks, ModelError, ModelSpec, Needs, PointEval, TerminalEval, TerminalNeeds};
use crate::rng::{PathNoise, PathRole, Purpose, RngStream, StreamKey};
use crate::sim::{check_interval, tri_index, Flow, FlowState, SimConfig, SimError, Stepper};
use crate::stats::{self, column_mean_se, Histogram};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite gradient in replication {replication} (tau={tau:?}, stream {key:?})")]
    NonFinite {
        replication: u64,
        tau: Option<f64>,
        key: StreamKey,
    },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    #[serde(rename = "gg")]
    GG,
    #[serde(rename = "pd")]
    PD,
    #[serde(rename = "fd")]
    FD,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::GG => "gg",
            EstimatorKind::PD => "pd",
            EstimatorKind::FD => "fd",
        }
    }
}

/// One gradient sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleDraw {
    pub kind: EstimatorKind,
    pub gradient: Vec<f64>,
    pub tau: Option<f64>,
    pub replication_index: u64,
    /// Scalars carried by the derivative system that produced the sample.
    pub state_scalars: usize,
    /// Whether the second variation `H` was simulated.
    pub h_requested: bool,
}

/// Realization of `Z(t, x)` and, when requested, `H(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZhValue {
    pub z: Vec<f64>,
    /// `d x d`, symmetric.
    pub h: Option<Vec<f64>>,
    pub state_scalars: usize,
}

/// How the jump-measure integral in the generator gradient is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpIntegral {
    /// Sum over the atoms of a discrete mark distribution.
    ExactAtoms,
    /// One mark drawn from `nu / lambda`, weighted by `lambda`.
    RandomMark,
}

/// Noise used for the `Z` evaluations at post-jump states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpCoupling {
    /// Fresh streams per post-jump state.
    Independent,
    /// The same streams as the `Z` path started at `X(tau)`.
    Coupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GgOptions {
    /// Replace `int_0^T grad_theta rho dt` by `T grad_theta rho(tau, X(tau))`
    /// at the estimator's own `tau`.
    pub randomize_reward_integral: bool,
    /// `None` picks atom sums for discrete marks and a random mark otherwise.
    /// An explicit choice on a model without jumps is an error.
    pub jump_integral: Option<JumpIntegral>,
    pub jump_coupling: JumpCoupling,
}

impl Default for GgOptions {
    fn default() -> Self {
        Self {
            randomize_reward_integral: false,
            jump_integral: None,
            jump_coupling: JumpCoupling::Independent,
        }
    }
}

fn draw_tau(cfg: &SimConfig, replication: u64, horizon: f64) -> f64 {
    let mut s = RngStream::for_purpose(cfg.master_seed, replication, Purpose::Tau);
    horizon * s.uniform()
}

fn finite_or(
    gradient: &[f64],
    replication: u64,
    tau: Option<f64>,
    cfg: &SimConfig,
) -> Result<(), EstimatorError> {
    if gradient.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EstimatorError::NonFinite {
            replication,
            tau,
            key: StreamKey::new(cfg.master_seed, replication, Purpose::Tau.tag()),
        })
    }
}

// ---------------------------------------------------------------------------
// Value function

/// One draw of `int_0^T rho dt + g(X(T))` on the Euler grid (left-point rule).
pub fn value_sample(model: &ModelSpec, x0: &[f64], cfg: &SimConfig, replication: u64) -> Result<f64, EstimatorError> {
    let grid = check_interval(model, x0, 0.0, model.horizon, cfg)?;
    let mut noise = PathNoise::new(cfg.master_seed, replication, PathRole::Base);
    let mut state = FlowState::initial(model.dims, Flow::Base, 0.0, x0);
    let mut stepper = Stepper::new(model, cfg, Flow::Base, Needs::RATE);
    let mut integral = 0.0;
    stepper.walk(&grid, &mut state, &mut noise, |ctx| {
        integral += ctx.h * ctx.eval.rate;
        Ok(())
    })?;
    let mut te = TerminalEval::new(model.dims, TerminalNeeds::VALUE);
    model.eval_terminal(&state.x, &mut te)?;
    Ok(integral + te.value)
}

/// Monte Carlo value estimate `(mean, se)` over replications `0..n_samples`.
pub fn value_estimate(
    model: &ModelSpec,
    x0: &[f64],
    cfg: &SimConfig,
    n_samples: usize,
) -> Result<(f64, f64), EstimatorError> {
    if n_samples < 2 {
        return Err(EstimatorError::TooFewSamples(n_samples));
    }
    let values = (0..n_samples as u64)
        .into_par_iter()
        .map(|r| value_sample(model, x0, cfg, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(stats::mean_se(&values).expect("n >= 2"))
}

// ---------------------------------------------------------------------------
// Z and H

/// Simulates the first (and optionally second) variation from `(t, x)` to
/// the horizon and accumulates
/// `Z^T = int grad rho^T grad X dr + grad g^T grad X(T)` and
/// `H = int [grad X^T H[rho] grad X + <grad rho, H[X]>] dr
///      + grad X(T)^T H[g] grad X(T) + <grad g, H[X](T)>`.
pub fn sample_z_h(
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    cfg: &SimConfig,
    noise: &mut PathNoise,
    need_h: bool,
) -> Result<ZhValue, EstimatorError> {
    let d = model.dims.state;
    let grid = check_interval(model, x, t, model.horizon, cfg)?;
    let flow = Flow::Augmented { hess: need_h };
    let extra = if need_h {
        Needs::RATE_GRAD | Needs::RATE_HESS
    } else {
        Needs::RATE_GRAD
    };
    let mut state = FlowState::initial(model.dims, flow, t, x);
    let mut stepper = Stepper::new(model, cfg, flow, extra);
    let mut z = vec![0.0; d];
    let mut h = if need_h { vec![0.0; d * d] } else { Vec::new() };
    let tl = d * (d + 1) / 2;

    // adds  scale * [G^T M G + <v, H[X]>]  to the upper triangle of h
    let accumulate_h = |h: &mut [f64], st: &FlowState, hess: &[f64], v: &[f64], scale: f64| {
        let g = &st.grad_x;
        for a in 0..d {
            for b in a..d {
                let mut s = 0.0;
                for i in 0..d {
                    let gia = g[i * d + a];
                    if gia != 0.0 {
                        for j in 0..d {
                            s += gia * hess[i * d + j] * g[j * d + b];
                        }
                    }
                    s += v[i] * st.hess_x[i * tl + tri_index(d, a, b)];
                }
                h[a * d + b] += scale * s;
            }
        }
    };

    stepper.walk(&grid, &mut state, noise, |ctx| {
        let g = &ctx.state.grad_x;
        let rg = &ctx.eval.rate_grad;
        for a in 0..d {
            let mut s = 0.0;
            for i in 0..d {
                s += rg[i] * g[i * d + a];
            }
            z[a] += ctx.h * s;
        }
        if need_h {
            accumulate_h(&mut h, ctx.state, &ctx.eval.rate_hess, rg, ctx.h);
        }
        Ok(())
    })?;

    let needs = if need_h {
        TerminalNeeds::GRAD | TerminalNeeds::HESS
    } else {
        TerminalNeeds::GRAD
    };
    let mut te = TerminalEval::new(model.dims, needs);
    model.eval_terminal(&state.x, &mut te)?;
    let g = &state.grad_x;
    for a in 0..d {
        let mut s = 0.0;
        for i in 0..d {
            s += te.grad[i] * g[i * d + a];
        }
        z[a] += s;
    }
    let h = if need_h {
        accumulate_h(&mut h, &state, &te.hess, &te.grad, 1.0);
        for a in 0..d {
            for b in 0..a {
                h[a * d + b] = h[b * d + a];
            }
        }
        Some(h)
    } else {
        None
    };
    Ok(ZhValue {
        z,
        h,
        state_scalars: state.scalar_count(),
    })
}

// ---------------------------------------------------------------------------
// Generator gradient

/// One generator-gradient sample for replication `replication`.
pub fn gg_sample(
    model: &ModelSpec,
    x0: &[f64],
    cfg: &SimConfig,
    opts: &GgOptions,
    replication: u64,
) -> Result<SampleDraw, EstimatorError> {
    let Dims { state: d, noise: p, param: n } = model.dims;
    let horizon = model.horizon;
    let seed = cfg.master_seed;
    let jump = model.active_jump();
    let jump_mode = match (opts.jump_integral, jump) {
        (Some(_), None) => {
            return Err(EstimatorError::Config("jump integral requested but the model has no jumps".into()))
        }
        (Some(JumpIntegral::ExactAtoms), Some(j)) if !matches!(j.marks, Marks::Discrete(_)) => {
            return Err(EstimatorError::Config("exact atom sums need discrete marks".into()))
        }
        (Some(m), Some(_)) => Some(m),
        (None, Some(j)) => Some(match j.marks {
            Marks::Discrete(_) => JumpIntegral::ExactAtoms,
            Marks::Continuous(_) => JumpIntegral::RandomMark,
        }),
        (None, None) => None,
    };

    let tau = draw_tau(cfg, replication, horizon);
    let need_h = model.sigma_theta_dependent;
    let full_integral = !opts.randomize_reward_integral;
    let mut reward = vec![0.0; n];

    // base path: [0, tau], continued to T when the rest is needed
    let mut noise = PathNoise::new(seed, replication, PathRole::Base);
    let mut state = FlowState::initial(model.dims, Flow::Base, 0.0, x0);
    let extra = if full_integral { Needs::RATE_DTHETA } else { Needs::empty() };
    let mut stepper = Stepper::new(model, cfg, Flow::Base, extra);
    let mut integrate = |ctx: &crate::sim::StepCtx| {
        if full_integral {
            for (r, v) in reward.iter_mut().zip(&ctx.eval.rate_dtheta) {
                *r += ctx.h * v;
            }
        }
        Ok(())
    };
    let first = check_interval(model, x0, 0.0, tau, cfg)?;
    stepper.walk(&first, &mut state, &mut noise, &mut integrate)?;
    let x_tau = state.x.clone();
    if full_integral || model.terminal_theta_dependent {
        let rest = check_interval(model, x0, tau, horizon, cfg)?;
        stepper.walk(&rest, &mut state, &mut noise, &mut integrate)?;
        if model.terminal_theta_dependent {
            let mut te = TerminalEval::new(model.dims, TerminalNeeds::DTHETA);
            model.eval_terminal(&state.x, &mut te)?;
            for (r, v) in reward.iter_mut().zip(&te.dtheta) {
                *r += v;
            }
        }
    }

    // coefficients at (tau, X(tau))
    let mut needs = Needs::DRIFT_DTHETA;
    if need_h {
        needs |= Needs::VOL | Needs::VOL_DTHETA;
    }
    if !full_integral {
        needs |= Needs::RATE_DTHETA;
    }
    let mut pe = PointEval::new(model.dims, needs);
    model.eval_point(tau, &x_tau, &mut pe)?;
    if !full_integral {
        for (r, v) in reward.iter_mut().zip(&pe.rate_dtheta) {
            *r += horizon * v;
        }
    }

    let mut zh_noise = PathNoise::new(seed, replication, PathRole::Derivative);
    let zh = sample_z_h(model, tau, &x_tau, cfg, &mut zh_noise, need_h)?;
    let mut gen = vec![0.0; n];
    for k in 0..n {
        let mut s = 0.0;
        for i in 0..d {
            s += pe.drift_dtheta[k * d + i] * zh.z[i];
        }
        gen[k] = s;
    }
    if let Some(h) = &zh.h {
        let da = dtheta_a_from_vol(&pe.vol, &pe.vol_dtheta, d, p, n);
        for k in 0..n {
            let block = &da[k * d * d..(k + 1) * d * d];
            gen[k] += block.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    if let (Some(mode), Some(jump)) = (jump_mode, jump) {
        let mut je = JumpEval::new(model.dims, JumpNeeds::VALUE | JumpNeeds::DTHETA);
        let compensated = jump.compensated;
        let mut add_mark = |z_mark: &[f64], weight: f64, role: PathRole| -> Result<(), EstimatorError> {
            model.eval_jump(tau, &x_tau, z_mark, &mut je)?;
            let shifted: Vec<f64> = x_tau.iter().zip(&je.value).map(|(a, b)| a + b).collect();
            let mut sn = match opts.jump_coupling {
                JumpCoupling::Independent => PathNoise::new(seed, replication, role),
                JumpCoupling::Coupled => PathNoise::new(seed, replication, PathRole::Derivative),
            };
            let zs = sample_z_h(model, tau, &shifted, cfg, &mut sn, false)?;
            for k in 0..n {
                let mut s = 0.0;
                for i in 0..d {
                    let diff = if compensated { zs.z[i] - zh.z[i] } else { zs.z[i] };
                    s += je.dtheta[k * d + i] * diff;
                }
                gen[k] += weight * s;
            }
            Ok(())
        };
        match (mode, &jump.marks) {
            (JumpIntegral::ExactAtoms, Marks::Discrete(atoms)) => {
                for (j, atom) in atoms.iter().enumerate() {
                    add_mark(&atom.z, atom.weight, PathRole::Shifted(j as u32))?;
                }
            }
            (_, marks) => {
                let mut ms = RngStream::for_purpose(seed, replication, Purpose::JumpMark);
                let mut z_mark = vec![0.0; p];
                match marks {
                    Marks::Discrete(atoms) => {
                        let total: f64 = atoms.iter().map(|a| a.weight).sum();
                        let u = ms.uniform() * total;
                        let mut acc = 0.0;
                        let mut pick = atoms.len() - 1;
                        for (j, a) in atoms.iter().enumerate() {
                            acc += a.weight;
                            if u < acc {
                                pick = j;
                                break;
                            }
                        }
                        z_mark.clone_from(&atoms[pick].z);
                    }
                    Marks::Continuous(sampler) => sampler.sample(&mut ms, &mut z_mark),
                }
                add_mark(&z_mark, jump.rate, PathRole::Shifted(0))?;
            }
        }
    }

    let gradient: Vec<f64> = gen.iter().zip(&reward).map(|(g, r)| horizon * g + r).collect();
    finite_or(&gradient, replication, Some(tau), cfg)?;
    Ok(SampleDraw {
        kind: EstimatorKind::GG,
        gradient,
        tau: Some(tau),
        replication_index: replication,
        state_scalars: zh.state_scalars,
        h_requested: zh.h.is_some(),
    })
}

// ---------------------------------------------------------------------------
// Pathwise

/// One pathwise-derivative sample. With `randomize_time` the reward-rate
/// integral is replaced by `T` times its integrand at a uniform time.
pub fn pd_sample(
    model: &ModelSpec,
    x0: &[f64],
    cfg: &SimConfig,
    randomize_time: bool,
    replication: u64,
) -> Result<SampleDraw, EstimatorError> {
    let Dims { state: d, param: n, .. } = model.dims;
    let horizon = model.horizon;
    let mut noise = PathNoise::new(cfg.master_seed, replication, PathRole::Base);
    let mut state = FlowState::initial(model.dims, Flow::Pathwise, 0.0, x0);
    let mut gradient = vec![0.0; n];

    // grad_theta rho + (d_theta X) grad rho, scaled
    let add_rate = |gradient: &mut [f64], st: &FlowState, pe: &PointEval, scale: f64| {
        for k in 0..n {
            let row = &st.dtheta_x[k * d..(k + 1) * d];
            let s: f64 = row.iter().zip(&pe.rate_grad).map(|(a, b)| a * b).sum();
            gradient[k] += scale * (pe.rate_dtheta[k] + s);
        }
    };

    let tau = if randomize_time {
        let tau = draw_tau(cfg, replication, horizon);
        let mut stepper = Stepper::new(model, cfg, Flow::Pathwise, Needs::empty());
        let first = check_interval(model, x0, 0.0, tau, cfg)?;
        stepper.walk(&first, &mut state, &mut noise, |_| Ok(()))?;
        let mut pe = PointEval::new(model.dims, Needs::RATE_GRAD | Needs::RATE_DTHETA);
        model.eval_point(tau, &state.x, &mut pe)?;
        add_rate(&mut gradient, &state, &pe, horizon);
        let rest = check_interval(model, x0, tau, horizon, cfg)?;
        stepper.walk(&rest, &mut state, &mut noise, |_| Ok(()))?;
        Some(tau)
    } else {
        let mut stepper = Stepper::new(model, cfg, Flow::Pathwise, Needs::RATE_GRAD | Needs::RATE_DTHETA);
        let grid = check_interval(model, x0, 0.0, horizon, cfg)?;
        stepper.walk(&grid, &mut state, &mut noise, |ctx| {
            add_rate(&mut gradient, ctx.state, ctx.eval, ctx.h);
            Ok(())
        })?;
        None
    };

    let mut te = TerminalEval::new(model.dims, TerminalNeeds::GRAD | TerminalNeeds::DTHETA);
    model.eval_terminal(&state.x, &mut te)?;
    for k in 0..n {
        let row = &state.dtheta_x[k * d..(k + 1) * d];
        let s: f64 = row.iter().zip(&te.grad).map(|(a, b)| a * b).sum();
        gradient[k] += te.dtheta[k] + s;
    }
    finite_or(&gradient, replication, tau, cfg)?;
    Ok(SampleDraw {
        kind: EstimatorKind::PD,
        gradient,
        tau,
        replication_index: replication,
        state_scalars: state.scalar_count(),
        h_requested: false,
    })
}

// ---------------------------------------------------------------------------
// Finite differences

/// Per-replication central differences `[v(theta + h/2 e_k) - v(theta - h/2 e_k)] / h`
/// with both values on the same noise.
pub fn fd_sample(model: &ModelSpec, x0: &[f64], step: f64, cfg: &SimConfig, replication: u64) -> Result<SampleDraw, EstimatorError> {
    let n = model.dims.param;
    let mut gradient = vec![0.0; n];
    for (k, g) in gradient.iter_mut().enumerate() {
        let mut plus = model.theta.clone();
        let mut minus = model.theta.clone();
        plus[k] += 0.5 * step;
        minus[k] -= 0.5 * step;
        let vp = value_sample(&model.at_theta(plus)?, x0, cfg, replication)?;
        let vm = value_sample(&model.at_theta(minus)?, x0, cfg, replication)?;
        *g = (vp - vm) / step;
    }
    finite_or(&gradient, replication, None, cfg)?;
    Ok(SampleDraw {
        kind: EstimatorKind::FD,
        gradient,
        tau: None,
        replication_index: replication,
        state_scalars: model.dims.state,
        h_requested: false,
    })
}

/// Common-random-number central difference estimate. The result carries an
/// `O(step^2)` bias.
pub fn fd_estimate(
    model: &ModelSpec,
    x0: &[f64],
    step: f64,
    cfg: &SimConfig,
    n_samples: usize,
) -> Result<GradientEstimate, EstimatorError> {
    if !(step > 0.0) {
        return Err(EstimatorError::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let (est, _) = run_samples(n_samples, |r| fd_sample(model, x0, step, cfg, r))?;
    Ok(est)
}

// ---------------------------------------------------------------------------
// Aggregation

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientEstimate {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub ci95_halfwidth: Vec<f64>,
    pub n_samples: usize,
    pub wall_seconds: f64,
    pub estimator_kind: EstimatorKind,
}

impl GradientEstimate {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "coord,mean,se,ci95")?;
        for k in 0..self.mean.len() {
            writeln!(w, "{k},{:e},{:e},{:e}", self.mean[k], self.se[k], self.ci95_halfwidth[k])?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Per-coordinate mean and `sd / sqrt(N)`, reduced in replication order.
pub fn mc_aggregate(samples: &[SampleDraw]) -> Result<GradientEstimate, EstimatorError> {
    if samples.len() < 2 {
        return Err(EstimatorError::TooFewSamples(samples.len()));
    }
    let kind = samples[0].kind;
    let dim = samples[0].gradient.len();
    if samples.iter().any(|s| s.kind != kind || s.gradient.len() != dim) {
        return Err(EstimatorError::Dimension("samples differ in kind or length".into()));
    }
    let mut order: Vec<&SampleDraw> = samples.iter().collect();
    order.sort_by_key(|s| s.replication_index);
    let rows: Vec<&[f64]> = order.iter().map(|s| s.gradient.as_slice()).collect();
    let (mean, se) = column_mean_se(&rows).expect("n >= 2");
    Ok(GradientEstimate {
        ci95_halfwidth: se.iter().map(|s| 1.96 * s).collect(),
        mean,
        se,
        n_samples: samples.len(),
        wall_seconds: 0.0,
        estimator_kind: kind,
    })
}

/// Draws replications `0..n_samples` in parallel and aggregates them.
pub fn run_samples<F>(n_samples: usize, draw: F) -> Result<(GradientEstimate, Vec<SampleDraw>), EstimatorError>
where
    F: Fn(u64) -> Result<SampleDraw, EstimatorError> + Sync,
{
    if n_samples < 2 {
        return Err(EstimatorError::TooFewSamples(n_samples));
    }
    let start = Instant::now();
    let draws = (0..n_samples as u64)
        .into_par_iter()
        .map(&draw)
        .collect::<Result<Vec<_>, _>>()?;
    let mut est = mc_aggregate(&draws)?;
    est.wall_seconds = start.elapsed().as_secs_f64();
    Ok((est, draws))
}

pub fn gg_estimate(
    model: &ModelSpec,
    x0: &[f64],
    cfg: &SimConfig,
    opts: &GgOptions,
    n_samples: usize,
) -> Result<(GradientEstimate, Vec<SampleDraw>), EstimatorError> {
    run_samples(n_samples, |r| gg_sample(model, x0, cfg, opts, r))
}

pub fn pd_estimate(
    model: &ModelSpec,
    x0: &[f64],
    cfg: &SimConfig,
    randomize_time: bool,
    n_samples: usize,
) -> Result<(GradientEstimate, Vec<SampleDraw>), EstimatorError> {
    run_samples(n_samples, |r| pd_sample(model, x0, cfg, randomize_time, r))
}

// ---------------------------------------------------------------------------
// Comparison

pub const SE_HISTOGRAM_BINS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub se_gg: Vec<f64>,
    pub se_pd: Vec<f64>,
    /// `None` where the PD standard error is zero.
    pub ratio: Vec<Option<f64>>,
    pub missing: Vec<usize>,
    pub avg_se_gg: f64,
    pub avg_se_pd: f64,
    /// Mean of the available per-coordinate ratios.
    pub avg_ratio: f64,
    pub bin_edges: Vec<f64>,
    pub count_gg: Vec<usize>,
    pub count_pd: Vec<usize>,
}

impl ComparisonReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "coord,se_gg,se_pd,ratio")?;
        for k in 0..self.se_gg.len() {
            let ratio = self.ratio[k].map(|r| format!("{r:e}")).unwrap_or_else(|| "NA".into());
            writeln!(w, "{k},{:e},{:e},{ratio}", self.se_gg[k], self.se_pd[k])?;
        }
        Ok(())
    }

    pub fn write_histogram_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "bin_lo,bin_hi,count_gg,count_pd")?;
        for b in 0..self.count_gg.len() {
            writeln!(
                w,
                "{:e},{:e},{},{}",
                self.bin_edges[b],
                self.bin_edges[b + 1],
                self.count_gg[b],
                self.count_pd[b]
            )?;
        }
        Ok(())
    }
}

/// Per-coordinate standard errors of two estimators and their ratios, with
/// shared histogram bins on `[0, max se]`.
pub fn se_comparison(gg: &[SampleDraw], pd: &[SampleDraw]) -> Result<ComparisonReport, EstimatorError> {
    let a = mc_aggregate(gg)?;
    let b = mc_aggregate(pd)?;
    se_comparison_from(&a, &b)
}

pub fn se_comparison_from(gg: &GradientEstimate, pd: &GradientEstimate) -> Result<ComparisonReport, EstimatorError> {
    if gg.se.len() != pd.se.len() {
        return Err(EstimatorError::Dimension(format!(
            "GG has {} coordinates, PD has {}",
            gg.se.len(),
            pd.se.len()
        )));
    }
    let n = gg.se.len();
    let mut ratio = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for k in 0..n {
        if pd.se[k] > 0.0 {
            ratio.push(Some(gg.se[k] / pd.se[k]));
        } else {
            ratio.push(None);
            missing.push(k);
        }
    }
    let present: Vec<f64> = ratio.iter().flatten().copied().collect();
    let avg_ratio = if present.is_empty() {
        f64::NAN
    } else {
        stats::pairwise_sum(&present) / present.len() as f64
    };
    let hi = gg.se.iter().chain(&pd.se).fold(0.0f64, |m, &v| m.max(v));
    let Histogram { edges, counts: count_gg } = stats::histogram(&gg.se, 0.0, hi, SE_HISTOGRAM_BINS);
    let count_pd = stats::histogram(&pd.se, 0.0, hi, SE_HISTOGRAM_BINS).counts;
    Ok(ComparisonReport {
        avg_se_gg: stats::pairwise_sum(&gg.se) / n as f64,
        avg_se_pd: stats::pairwise_sum(&pd.se) / n as f64,
        se_gg: gg.se.clone(),
        se_pd: pd.se.clone(),
        ratio,
        missing,
        avg_ratio,
        bin_edges: edges,
        count_gg,
        count_pd,
    })
}

/// Coordinates where two estimates agree within `k` combined standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Agreement {
    pub within: Vec<bool>,
    pub fraction: f64,
}

pub fn agreement(a: &GradientEstimate, b: &GradientEstimate, k: f64) -> Result<Agreement, EstimatorError> {
    if a.mean.len() != b.mean.len() {
        return Err(EstimatorError::Dimension("estimates differ in length".into()));
    }
    let within: Vec<bool> = (0..a.mean.len())
        .map(|i| {
            let tol = k * (a.se[i] * a.se[i] + b.se[i] * b.se[i]).sqrt();
            (a.mean[i] - b.mean[i]).abs() <= tol
        })
        .collect();
    let fraction = within.iter().filter(|&&w| w).count() as f64 / within.len().max(1) as f64;
    Ok(Agreement { within, fraction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelEval, TerminalEval};
    use std::sync::Arc;

    fn draw(kind: EstimatorKind, rep: u64, g: Vec<f64>) -> SampleDraw {
        SampleDraw {
            kind,
            gradient: g,
            tau: None,
            replication_index: rep,
            state_scalars: 0,
            h_requested: false,
        }
    }

    #[test]
    fn aggregate_two_points() {
        let e = mc_aggregate(&[draw(EstimatorKind::GG, 0, vec![0.0]), draw(EstimatorKind::GG, 1, vec![2.0])]).unwrap();
        assert_eq!(e.mean, vec![1.0]);
        assert_eq!(e.se, vec![1.0]);
        assert_eq!(e.ci95_halfwidth, vec![1.96]);
    }

    #[test]
    fn aggregate_identical_has_zero_se() {
        let s: Vec<_> = (0..5).map(|r| draw(EstimatorKind::PD, r, vec![3.0, -1.0])).collect();
        let e = mc_aggregate(&s).unwrap();
        assert_eq!(e.se, vec![0.0, 0.0]);
    }

    #[test]
    fn aggregate_needs_two() {
        assert!(matches!(
            mc_aggregate(&[draw(EstimatorKind::GG, 0, vec![1.0])]),
            Err(EstimatorError::TooFewSamples(1))
        ));
    }

    #[test]
    fn aggregate_is_order_independent() {
        let s: Vec<_> = (0..50).map(|r| draw(EstimatorKind::GG, r, vec![(r as f64).sin()])).collect();
        let mut rev = s.clone();
        rev.reverse();
        assert_eq!(mc_aggregate(&s).unwrap(), mc_aggregate(&rev).unwrap());
    }

    #[test]
    fn aggregate_normal_se() {
        let mut rng = RngStream::new(StreamKey::new(3, 0, 0));
        let s: Vec<_> = (0..10_000).map(|r| draw(EstimatorKind::GG, r, vec![rng.normal(), rng.normal()])).collect();
        let e = mc_aggregate(&s).unwrap();
        for se in e.se {
            assert!((0.0085..=0.0115).contains(&se), "{se}");
        }
    }

    #[test]
    fn comparison_identical_and_missing() {
        let s: Vec<_> = (0..20)
            .map(|r| draw(EstimatorKind::GG, r, vec![r as f64, (r * r) as f64]))
            .collect();
        let rep = se_comparison(&s, &s).unwrap();
        assert_eq!(rep.ratio, vec![Some(1.0), Some(1.0)]);
        assert_eq!(rep.avg_ratio, 1.0);
        let pd: Vec<_> = (0..20).map(|r| draw(EstimatorKind::PD, r, vec![r as f64, 5.0])).collect();
        let rep = se_comparison(&s, &pd).unwrap();
        assert_eq!(rep.missing, vec![1]);
        assert_eq!(rep.ratio[1], None);
        assert_eq!(rep.count_gg.iter().sum::<usize>(), 2);
        let mut csv = Vec::new();
        rep.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().contains("1,"));
    }

    /// Deterministic model `dX = theta t^2 dt`, terminal reward `x`.
    struct TimePoly;
    impl ModelEval for TimePoly {
        fn eval(&self, t: f64, _x: &[f64], theta: &[f64], out: &mut PointEval) {
            if out.needs.contains(Needs::DRIFT) {
                out.drift[0] = theta[0] * t * t;
            }
            if out.needs.contains(Needs::DRIFT_DTHETA) {
                out.drift_dtheta[0] = t * t;
            }
        }
        fn eval_terminal(&self, x: &[f64], _theta: &[f64], out: &mut TerminalEval) {
            if out.needs.contains(TerminalNeeds::VALUE) {
                out.value = x[0];
            }
            if out.needs.contains(TerminalNeeds::GRAD) {
                out.grad[0] = 1.0;
            }
        }
    }

    #[test]
    fn randomized_time_matches_integral() {
        let horizon = 2.0;
        let m = ModelSpec::new("poly", Dims::new(1, 1, 1), horizon, vec![1.0], Arc::new(TimePoly))
            .unwrap()
            .with_sigma_theta_dependent(false)
            .with_terminal_theta_dependent(false);
        let cfg = SimConfig::new(50, 5);
        let (est, draws) = gg_estimate(&m, &[0.0], &cfg, &GgOptions::default(), 4000).unwrap();
        for s in &draws {
            let tau = s.tau.unwrap();
            assert!((s.gradient[0] - horizon * tau * tau).abs() < 1e-12);
        }
        let exact: f64 = 8.0 / 3.0;
        assert!((est.mean[0] - exact).abs() <= 3.0 * est.se[0], "{} vs {exact}", est.mean[0]);
    }

    #[test]
    fn theta_free_model_gives_zero() {
        struct Free;
        impl ModelEval for Free {
            fn eval(&self, _t: f64, x: &[f64], _theta: &[f64], out: &mut PointEval) {
                if out.needs.contains(Needs::DRIFT) {
                    out.drift[0] = -x[0];
                }
                if out.needs.contains(Needs::DRIFT_DX) {
                    out.drift_dx[0] = -1.0;
                }
                if out.needs.contains(Needs::VOL) {
                    out.vol[0] = 0.5;
                }
                if out.needs.contains(Needs::RATE) {
                    out.rate = x[0];
                }
                if out.needs.contains(Needs::RATE_GRAD) {
                    out.rate_grad[0] = 1.0;
                }
            }
            fn eval_terminal(&self, _x: &[f64], _theta: &[f64], _out: &mut TerminalEval) {}
        }
        let m = ModelSpec::new("free", Dims::new(1, 1, 2), 1.0, vec![0.3, 0.4], Arc::new(Free)).unwrap();
        let cfg = SimConfig::new(20, 1);
        for r in 0..5 {
            assert_eq!(gg_sample(&m, &[1.0], &cfg, &GgOptions::default(), r).unwrap().gradient, vec![0.0, 0.0]);
            assert_eq!(pd_sample(&m, &[1.0], &cfg, false, r).unwrap().gradient, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn jump_request_without_jumps_is_config_error() {
        let m = ModelSpec::new("poly", Dims::new(1, 1, 1), 1.0, vec![1.0], Arc::new(TimePoly)).unwrap();
        let opts = GgOptions {
            jump_integral: Some(JumpIntegral::RandomMark),
            ..GgOptions::default()
        };
        assert!(matches!(
            gg_sample(&m, &[0.0], &SimConfig::new(10, 0), &opts, 0),
            Err(EstimatorError::Config(_))
        ));
    }

    #[test]
    fn value_estimate_trivial() {
        struct One;
        impl ModelEval for One {
            fn eval(&self, _t: f64, _x: &[f64], _theta: &[f64], out: &mut PointEval) {
                if out.needs.contains(Needs::RATE) {
                    out.rate = 1.0;
                }
            }
            fn eval_terminal(&self, _x: &[f64], _theta: &[f64], _out: &mut TerminalEval) {}
        }
        let m = ModelSpec::new("one", Dims::new(1, 1, 1), 2.0, vec![0.0], Arc::new(One)).unwrap();
        let (mean, se) = value_estimate(&m, &[0.0], &SimConfig::new(40, 0), 10).unwrap();
        assert!((mean - 2.0).abs() < 1e-12);
        assert!(se < 1e-12);
        assert!(value_estimate(&m, &[0.0], &SimConfig::new(40, 0), 1).is_err());
    }

    #[test]
    fn fd_is_exact_on_affine_values() {
        struct RateTheta;
        impl ModelEval for RateTheta {
            fn eval(&self, _t: f64, _x: &[f64], theta: &[f64], out: &mut PointEval) {
                if out.needs.contains(Needs::RATE) {
                    out.rate = theta[0];
                }
            }
            fn eval_terminal(&self, _x: &[f64], _theta: &[f64], _out: &mut TerminalEval) {}
        }
        let m = ModelSpec::new("rate", Dims::new(1, 1, 1), 1.0, vec![0.7], Arc::new(RateTheta)).unwrap();
        for step in [0.5, 0.05, 0.001] {
            let e = fd_estimate(&m, &[0.0], step, &SimConfig::new(16, 0), 4).unwrap();
            assert!((e.mean[0] - 1.0).abs() < 1e-9);
        }
        assert!(fd_estimate(&m, &[0.0], 0.0, &SimConfig::new(16, 0), 4).is_err());
    }
}
