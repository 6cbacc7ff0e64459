//! Model interface: coefficients, rewards, their derivatives, and the
//! finite-activity jump measure.
//!
//! All tensors are flat row-major `Vec<f64>`s. With `d` the state dimension,
//! `p` the Brownian dimension and `n` the parameter dimension:
//!
//! | field           | shape        | entry                     |
//! |-----------------|--------------|---------------------------|
//! | `drift`         | `d`          | `mu_i`                    |
//! | `drift_dx`      | `d x d`      | `[i][l] = d_l mu_i`       |
//! | `drift_dxx`     | `d x d x d`  | `[i][l][m] = d_m d_l mu_i`|
//! | `drift_dtheta`  | `n x d`      | `[k][i] = d_theta_k mu_i` |
//! | `vol`           | `d x p`      | `sigma_ij`                |
//! | `vol_dx`        | `d x p x d`  | `[i][j][l]`               |
//! | `vol_dxx`       | `d x p x d x d` | `[i][j][l][m]`         |
//! | `vol_dtheta`    | `n x d x p`  | `[k][i][j]`               |
//!
//! Jump coefficients follow the drift layout; rewards use `d`, `d x d`, `n`.

use std::fmt;
use std::sync::Arc;

use bitflags::bitflags;
use serde::Serialize;
use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("non-finite {what} at t={t}, x={x:?}")]
    NonFinite { what: &'static str, t: f64, x: Vec<f64> },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Dims {
    pub state: usize,
    pub noise: usize,
    pub param: usize,
}

impl Dims {
    pub fn new(state: usize, noise: usize, param: usize) -> Self {
        Self { state, noise, param }
    }
}

bitflags! {
    /// Quantities requested from [`ModelEval::eval`].
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct Needs: u32 {
        const DRIFT        = 1 << 0;
        const DRIFT_DX     = 1 << 1;
        const DRIFT_DXX    = 1 << 2;
        const DRIFT_DTHETA = 1 << 3;
        const VOL          = 1 << 4;
        const VOL_DX       = 1 << 5;
        const VOL_DXX      = 1 << 6;
        const VOL_DTHETA   = 1 << 7;
        const RATE         = 1 << 8;
        const RATE_GRAD    = 1 << 9;
        const RATE_HESS    = 1 << 10;
        const RATE_DTHETA  = 1 << 11;
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct JumpNeeds: u8 {
        const VALUE  = 1 << 0;
        const DX     = 1 << 1;
        const DXX    = 1 << 2;
        const DTHETA = 1 << 3;
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct TerminalNeeds: u8 {
        const VALUE  = 1 << 0;
        const GRAD   = 1 << 1;
        const HESS   = 1 << 2;
        const DTHETA = 1 << 3;
    }
}

fn buf(on: bool, len: usize) -> Vec<f64> {
    if on {
        vec![0.0; len]
    } else {
        Vec::new()
    }
}

/// Coefficient and reward-rate evaluation at one `(t, x, theta)`.
///
/// Only buffers named in `needs` are allocated; they are zeroed before each
/// call to the evaluator, so sparse evaluators may write only nonzeros.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub needs: Needs,
    pub dims: Dims,
    pub drift: Vec<f64>,
    pub drift_dx: Vec<f64>,
    pub drift_dxx: Vec<f64>,
    pub drift_dtheta: Vec<f64>,
    pub vol: Vec<f64>,
    pub vol_dx: Vec<f64>,
    pub vol_dxx: Vec<f64>,
    pub vol_dtheta: Vec<f64>,
    pub rate: f64,
    pub rate_grad: Vec<f64>,
    pub rate_hess: Vec<f64>,
    pub rate_dtheta: Vec<f64>,
}

impl PointEval {
    pub fn new(dims: Dims, needs: Needs) -> Self {
        let (d, p, n) = (dims.state, dims.noise, dims.param);
        Self {
            needs,
            dims,
            drift: buf(needs.contains(Needs::DRIFT), d),
            drift_dx: buf(needs.contains(Needs::DRIFT_DX), d * d),
            drift_dxx: buf(needs.contains(Needs::DRIFT_DXX), d * d * d),
            drift_dtheta: buf(needs.contains(Needs::DRIFT_DTHETA), n * d),
            vol: buf(needs.contains(Needs::VOL), d * p),
            vol_dx: buf(needs.contains(Needs::VOL_DX), d * p * d),
            vol_dxx: buf(needs.contains(Needs::VOL_DXX), d * p * d * d),
            vol_dtheta: buf(needs.contains(Needs::VOL_DTHETA), n * d * p),
            rate: 0.0,
            rate_grad: buf(needs.contains(Needs::RATE_GRAD), d),
            rate_hess: buf(needs.contains(Needs::RATE_HESS), d * d),
            rate_dtheta: buf(needs.contains(Needs::RATE_DTHETA), n),
        }
    }

    pub fn reset(&mut self) {
        for b in [
            &mut self.drift,
            &mut self.drift_dx,
            &mut self.drift_dxx,
            &mut self.drift_dtheta,
            &mut self.vol,
            &mut self.vol_dx,
            &mut self.vol_dxx,
            &mut self.vol_dtheta,
            &mut self.rate_grad,
            &mut self.rate_hess,
            &mut self.rate_dtheta,
        ] {
            b.fill(0.0);
        }
        self.rate = 0.0;
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        let named: [(&'static str, &[f64]); 11] = [
            ("drift", &self.drift),
            ("drift_dx", &self.drift_dx),
            ("drift_dxx", &self.drift_dxx),
            ("drift_dtheta", &self.drift_dtheta),
            ("vol", &self.vol),
            ("vol_dx", &self.vol_dx),
            ("vol_dxx", &self.vol_dxx),
            ("vol_dtheta", &self.vol_dtheta),
            ("rate_grad", &self.rate_grad),
            ("rate_hess", &self.rate_hess),
            ("rate_dtheta", &self.rate_dtheta),
        ];
        if !self.rate.is_finite() {
            return Some("rate");
        }
        named
            .into_iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(name, _)| name)
    }
}

/// Jump coefficient `chi(t, x, z)` and derivatives for one mark.
#[derive(Debug, Clone)]
pub struct JumpEval {
    pub needs: JumpNeeds,
    pub dims: Dims,
    pub value: Vec<f64>,
    pub dx: Vec<f64>,
    pub dxx: Vec<f64>,
    pub dtheta: Vec<f64>,
}

impl JumpEval {
    pub fn new(dims: Dims, needs: JumpNeeds) -> Self {
        let (d, n) = (dims.state, dims.param);
        Self {
            needs,
            dims,
            value: buf(needs.contains(JumpNeeds::VALUE), d),
            dx: buf(needs.contains(JumpNeeds::DX), d * d),
            dxx: buf(needs.contains(JumpNeeds::DXX), d * d * d),
            dtheta: buf(needs.contains(JumpNeeds::DTHETA), n * d),
        }
    }

    pub fn reset(&mut self) {
        self.value.fill(0.0);
        self.dx.fill(0.0);
        self.dxx.fill(0.0);
        self.dtheta.fill(0.0);
    }

    fn all_finite(&self) -> bool {
        [&self.value, &self.dx, &self.dxx, &self.dtheta]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Terminal reward `g(x, theta)` and derivatives.
#[derive(Debug, Clone)]
pub struct TerminalEval {
    pub needs: TerminalNeeds,
    pub dims: Dims,
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
    pub dtheta: Vec<f64>,
}

impl TerminalEval {
    pub fn new(dims: Dims, needs: TerminalNeeds) -> Self {
        let (d, n) = (dims.state, dims.param);
        Self {
            needs,
            dims,
            value: 0.0,
            grad: buf(needs.contains(TerminalNeeds::GRAD), d),
            hess: buf(needs.contains(TerminalNeeds::HESS), d * d),
            dtheta: buf(needs.contains(TerminalNeeds::DTHETA), n),
        }
    }

    pub fn reset(&mut self) {
        self.value = 0.0;
        self.grad.fill(0.0);
        self.hess.fill(0.0);
        self.dtheta.fill(0.0);
    }

    fn all_finite(&self) -> bool {
        self.value.is_finite()
            && [&self.grad, &self.hess, &self.dtheta]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// User-supplied model evaluators.
///
/// Implementations must be pure functions of their arguments so one model can
/// be shared across concurrent replications.
pub trait ModelEval: Send + Sync {
    /// Fills the buffers requested by `out.needs`. Buffers arrive zeroed.
    fn eval(&self, t: f64, x: &[f64], theta: &[f64], out: &mut PointEval);

    /// Jump coefficient at mark `z`. The default is a model without jumps.
    fn eval_jump(&self, _t: f64, _x: &[f64], _z: &[f64], _theta: &[f64], _out: &mut JumpEval) {}

    fn eval_terminal(&self, x: &[f64], theta: &[f64], out: &mut TerminalEval);

    /// Derivatives this model actually provides. Anything outside this set is
    /// treated as unavailable and skipped by [`validate_model`].
    fn supported(&self) -> Needs {
        Needs::all()
    }

    /// Draws a state at which the model is well defined, for derivative probes.
    fn probe_state(&self, rng: &mut RngStream, x: &mut [f64]) {
        for xi in x.iter_mut() {
            *xi = rng.normal();
        }
    }
}

/// Draws marks from the normalized jump measure `nu / lambda`.
pub trait MarkSampler: Send + Sync {
    fn sample(&self, rng: &mut RngStream, z: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkAtom {
    pub z: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone)]
pub enum Marks {
    Discrete(Vec<MarkAtom>),
    Continuous(Arc<dyn MarkSampler>),
}

impl fmt::Debug for Marks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Marks::Discrete(atoms) => f.debug_tuple("Discrete").field(atoms).finish(),
            Marks::Continuous(_) => f.write_str("Continuous(..)"),
        }
    }
}

/// Finite-activity jump measure `nu = rate * (mark distribution)`.
#[derive(Debug, Clone)]
pub struct JumpSpec {
    pub rate: f64,
    pub marks: Marks,
    pub compensated: bool,
}

impl JumpSpec {
    /// Atom weights give the rate.
    pub fn discrete(atoms: Vec<MarkAtom>, compensated: bool) -> Result<Self, ModelError> {
        let rate = atoms.iter().map(|a| a.weight).sum();
        let spec = Self {
            rate,
            marks: Marks::Discrete(atoms),
            compensated,
        };
        spec.check(None)?;
        Ok(spec)
    }

    pub fn continuous(rate: f64, sampler: Arc<dyn MarkSampler>, compensated: bool) -> Result<Self, ModelError> {
        let spec = Self {
            rate,
            marks: Marks::Continuous(sampler),
            compensated,
        };
        spec.check(None)?;
        Ok(spec)
    }

    pub fn check(&self, noise_dim: Option<usize>) -> Result<(), ModelError> {
        if !(self.rate.is_finite() && self.rate >= 0.0) {
            return Err(ModelError::Invalid(format!("jump rate {} must be finite and >= 0", self.rate)));
        }
        if let Marks::Discrete(atoms) = &self.marks {
            let mut total = 0.0;
            for a in atoms {
                if !(a.weight > 0.0 && a.weight.is_finite()) {
                    return Err(ModelError::Invalid(format!("mark weight {} must be > 0", a.weight)));
                }
                if let Some(p) = noise_dim {
                    if a.z.len() != p {
                        return Err(ModelError::Dimension(format!(
                            "mark of length {} for noise dimension {p}",
                            a.z.len()
                        )));
                    }
                }
                total += a.weight;
            }
            if (total - self.rate).abs() > 1e-12 * self.rate.max(f64::MIN_POSITIVE) {
                return Err(ModelError::Invalid(format!(
                    "mark weights sum to {total}, rate is {}",
                    self.rate
                )));
            }
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0
    }
}

/// A parameterized jump-diffusion model together with its evaluation point.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub dims: Dims,
    pub horizon: f64,
    pub theta: Vec<f64>,
    /// Whether `sigma` depends on `theta`. When false the generator-gradient
    /// estimator skips the second variation entirely.
    pub sigma_theta_dependent: bool,
    /// Whether `g` depends on `theta`. When false, estimators that randomize
    /// the reward-rate integral can stop the base path at the sampled time.
    pub terminal_theta_dependent: bool,
    pub jump: Option<JumpSpec>,
    pub eval: Arc<dyn ModelEval>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("horizon", &self.horizon)
            .field("theta_len", &self.theta.len())
            .field("sigma_theta_dependent", &self.sigma_theta_dependent)
            .field("terminal_theta_dependent", &self.terminal_theta_dependent)
            .field("jump", &self.jump)
            .finish()
    }
}

impl ModelSpec {
    /// Defaults to the conservative settings: `sigma` and `g` both treated
    /// as `theta`-dependent, no jumps.
    pub fn new(
        name: impl Into<String>,
        dims: Dims,
        horizon: f64,
        theta: Vec<f64>,
        eval: Arc<dyn ModelEval>,
    ) -> Result<Self, ModelError> {
        let spec = Self {
            name: name.into(),
            dims,
            horizon,
            theta,
            sigma_theta_dependent: true,
            terminal_theta_dependent: true,
            jump: None,
            eval,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn with_sigma_theta_dependent(mut self, yes: bool) -> Self {
        self.sigma_theta_dependent = yes;
        self
    }

    pub fn with_terminal_theta_dependent(mut self, yes: bool) -> Self {
        self.terminal_theta_dependent = yes;
        self
    }

    pub fn with_jump(mut self, jump: JumpSpec) -> Result<Self, ModelError> {
        jump.check(Some(self.dims.noise))?;
        self.jump = Some(jump);
        Ok(self)
    }

    /// Same model evaluated at a different parameter.
    pub fn at_theta(&self, theta: Vec<f64>) -> Result<Self, ModelError> {
        if theta.len() != self.dims.param {
            return Err(ModelError::Dimension(format!(
                "theta has length {}, model expects {}",
                theta.len(),
                self.dims.param
            )));
        }
        let mut m = self.clone();
        m.theta = theta;
        Ok(m)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let Dims { state, noise, param } = self.dims;
        if state == 0 || noise == 0 || param == 0 {
            return Err(ModelError::Invalid(format!("dimensions must be >= 1, got {:?}", self.dims)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(ModelError::Invalid(format!("horizon {} must be > 0", self.horizon)));
        }
        if self.theta.len() != param {
            return Err(ModelError::Dimension(format!(
                "theta has length {}, dim_param is {param}",
                self.theta.len()
            )));
        }
        if let Some(j) = &self.jump {
            j.check(Some(noise))?;
        }
        Ok(())
    }

    pub fn active_jump(&self) -> Option<&JumpSpec> {
        self.jump.as_ref().filter(|j| j.is_active())
    }

    /// Evaluates at the model's own `theta`, rejecting non-finite output.
    pub fn eval_point(&self, t: f64, x: &[f64], out: &mut PointEval) -> Result<(), ModelError> {
        self.eval_point_at(t, x, &self.theta, out)
    }

    pub fn eval_point_at(&self, t: f64, x: &[f64], theta: &[f64], out: &mut PointEval) -> Result<(), ModelError> {
        out.reset();
        self.eval.eval(t, x, theta, out);
        match out.first_non_finite() {
            None => Ok(()),
            Some(what) => Err(ModelError::NonFinite { what, t, x: x.to_vec() }),
        }
    }

    pub fn eval_jump(&self, t: f64, x: &[f64], z: &[f64], out: &mut JumpEval) -> Result<(), ModelError> {
        self.eval_jump_at(t, x, z, &self.theta, out)
    }

    pub fn eval_jump_at(
        &self,
        t: f64,
        x: &[f64],
        z: &[f64],
        theta: &[f64],
        out: &mut JumpEval,
    ) -> Result<(), ModelError> {
        out.reset();
        self.eval.eval_jump(t, x, z, theta, out);
        if out.all_finite() {
            Ok(())
        } else {
            Err(ModelError::NonFinite { what: "jump", t, x: x.to_vec() })
        }
    }

    pub fn eval_terminal(&self, x: &[f64], out: &mut TerminalEval) -> Result<(), ModelError> {
        self.eval_terminal_at(x, &self.theta, out)
    }

    pub fn eval_terminal_at(&self, x: &[f64], theta: &[f64], out: &mut TerminalEval) -> Result<(), ModelError> {
        out.reset();
        self.eval.eval_terminal(x, theta, out);
        if out.all_finite() {
            Ok(())
        } else {
            Err(ModelError::NonFinite {
                what: "terminal reward",
                t: self.horizon,
                x: x.to_vec(),
            })
        }
    }

    /// `int chi(t, x, z) nu(dz)` as an exact atom sum. `None` for continuous
    /// marks or without jumps.
    pub fn compensator_exact(&self, t: f64, x: &[f64]) -> Result<Option<Vec<f64>>, ModelError> {
        let Some(jump) = &self.jump else { return Ok(None) };
        let Marks::Discrete(atoms) = &jump.marks else { return Ok(None) };
        let mut je = JumpEval::new(self.dims, JumpNeeds::VALUE);
        let mut acc = vec![0.0; self.dims.state];
        for a in atoms {
            self.eval_jump(t, x, &a.z, &mut je)?;
            for (s, v) in acc.iter_mut().zip(&je.value) {
                *s += a.weight * v;
            }
        }
        Ok(Some(acc))
    }
}

/// Diffusion matrix `a = 1/2 sigma sigma^T` from a `d x p` volatility.
pub fn a_from_vol(vol: &[f64], d: usize, p: usize) -> Vec<f64> {
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let mut s = 0.0;
            for k in 0..p {
                s += vol[i * p + k] * vol[j * p + k];
            }
            a[i * d + j] = 0.5 * s;
            a[j * d + i] = 0.5 * s;
        }
    }
    a
}

/// `d_theta_k a_ij` (`n x d x d`) from `sigma` and `d_theta sigma`.
pub fn dtheta_a_from_vol(vol: &[f64], vol_dtheta: &[f64], d: usize, p: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d * d];
    for k in 0..n {
        let ds = &vol_dtheta[k * d * p..(k + 1) * d * p];
        let block = &mut out[k * d * d..(k + 1) * d * d];
        for i in 0..d {
            for j in i..d {
                let mut s = 0.0;
                for q in 0..p {
                    s += ds[i * p + q] * vol[j * p + q] + vol[i * p + q] * ds[j * p + q];
                }
                block[i * d + j] = 0.5 * s;
                block[j * d + i] = 0.5 * s;
            }
        }
    }
    out
}

/// `a(t, x)` at parameter `theta`.
pub fn a_matrix(model: &ModelSpec, t: f64, x: &[f64], theta: &[f64]) -> Result<Vec<f64>, ModelError> {
    let mut pe = PointEval::new(model.dims, Needs::VOL);
    model.eval_point_at(t, x, theta, &mut pe)?;
    Ok(a_from_vol(&pe.vol, model.dims.state, model.dims.noise))
}

/// `d_theta a(t, x)`; identically zero for `theta`-independent volatility.
pub fn dtheta_a(model: &ModelSpec, t: f64, x: &[f64], theta: &[f64]) -> Result<Vec<f64>, ModelError> {
    let Dims { state: d, noise: p, param: n } = model.dims;
    if !model.sigma_theta_dependent {
        return Ok(vec![0.0; n * d * d]);
    }
    let mut pe = PointEval::new(model.dims, Needs::VOL | Needs::VOL_DTHETA);
    model.eval_point_at(t, x, theta, &mut pe)?;
    Ok(dtheta_a_from_vol(&pe.vol, &pe.vol_dtheta, d, p, n))
}

// ---------------------------------------------------------------------------
// Derivative validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ProbePoint {
    pub t: f64,
    pub x: Vec<f64>,
    /// Euclidean distance of the probed theta from the model's theta.
    pub theta_shift: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeCheck {
    pub name: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub passed: bool,
    pub worst: Option<ProbePoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub model: String,
    pub probes: usize,
    pub tolerance: f64,
    pub checks: Vec<DerivativeCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &DerivativeCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&DerivativeCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone)]
pub struct ValidationOptions {
    pub probe_count: usize,
    pub seed: u64,
    /// Relative finite-difference step.
    pub step: f64,
    /// Mixed tolerance: `|analytic - fd| <= tol * max(1, |fd|)`.
    pub tolerance: f64,
    /// Cap on the number of theta coordinates probed per point.
    pub max_theta_coords: usize,
    /// Spread of the random theta perturbation around `model.theta`.
    pub theta_spread: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            probe_count: 8,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-5,
            max_theta_coords: 32,
            theta_spread: 0.05,
        }
    }
}

struct Tally {
    name: String,
    max_abs: f64,
    max_rel: f64,
    passed: bool,
    worst: Option<ProbePoint>,
    tol: f64,
}

impl Tally {
    fn new(name: &str, tol: f64) -> Self {
        Self {
            name: name.to_string(),
            max_abs: 0.0,
            max_rel: 0.0,
            passed: true,
            worst: None,
            tol,
        }
    }

    fn record(&mut self, analytic: f64, fd: f64, probe: &ProbePoint) {
        let abs = (analytic - fd).abs();
        let rel = abs / fd.abs().max(1.0);
        let bad = !(analytic.is_finite() && fd.is_finite()) || rel > self.tol;
        if abs > self.max_abs || bad && self.passed {
            self.worst = Some(probe.clone());
        }
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
        if bad {
            self.passed = false;
        }
    }

    fn finish(self) -> DerivativeCheck {
        DerivativeCheck {
            name: self.name,
            max_abs: self.max_abs,
            max_rel: self.max_rel,
            passed: self.passed,
            worst: self.worst,
        }
    }
}

/// Checks analytic derivatives against central finite differences at random
/// probe points. Failures are reported, never raised.
pub fn validate_model(spec: &ModelSpec, probe_count: usize, rng_seed: u64) -> ValidationReport {
    validate_model_with(
        spec,
        &ValidationOptions {
            probe_count,
            seed: rng_seed,
            ..Default::default()
        },
    )
}

pub fn validate_model_with(spec: &ModelSpec, opts: &ValidationOptions) -> ValidationReport {
    use crate::rng::{Purpose, PathRole, NoiseKind};
    let Dims { state: d, noise: p, param: n } = spec.dims;
    let sup = spec.eval.supported();
    let mut rng = RngStream::for_purpose(
        opts.seed,
        0,
        Purpose::Path { role: PathRole::Custom(0xfeed), kind: NoiseKind::Brownian },
    );

    let names = [
        "drift dx", "drift dxx", "drift dtheta", "vol dx", "vol dxx", "vol dtheta", "vol theta-independence",
        "rate grad", "rate hess", "rate dtheta", "terminal grad", "terminal hess", "terminal dtheta",
        "terminal theta-independence", "jump dx", "jump dxx", "jump dtheta", "finite output",
    ];
    let mut tallies: Vec<Tally> = names.iter().map(|nm| Tally::new(nm, opts.tolerance)).collect();
    let idx = |name: &str| names.iter().position(|x| *x == name).unwrap();
    let mut used = vec![false; names.len()];

    let theta_coords: Vec<usize> = if n <= opts.max_theta_coords {
        (0..n).collect()
    } else {
        let mut v: Vec<usize> = (0..opts.max_theta_coords).map(|_| rng.index(n)).collect();
        v.sort_unstable();
        v.dedup();
        v
    };

    let all = Needs::all() & sup;
    let mut pe = PointEval::new(spec.dims, all);
    let mut pp = PointEval::new(spec.dims, all);
    let mut pm = PointEval::new(spec.dims, all);
    let tneeds = TerminalNeeds::all();
    let mut te = TerminalEval::new(spec.dims, tneeds);
    let mut tp = TerminalEval::new(spec.dims, tneeds);
    let mut tm = TerminalEval::new(spec.dims, tneeds);
    let jneeds = JumpNeeds::all();
    let mut je = JumpEval::new(spec.dims, jneeds);
    let mut jp = JumpEval::new(spec.dims, jneeds);
    let mut jm = JumpEval::new(spec.dims, jneeds);

    let mut x = vec![0.0; d];
    for _ in 0..opts.probe_count {
        let t = rng.uniform() * spec.horizon;
        spec.eval.probe_state(&mut rng, &mut x);
        let theta: Vec<f64> = spec.theta.iter().map(|v| v + opts.theta_spread * rng.normal()).collect();
        let shift = theta.iter().zip(&spec.theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let probe = ProbePoint { t, x: x.clone(), theta_shift: shift };

        let fin = idx("finite output");
        used[fin] = true;
        if spec.eval_point_at(t, &x, &theta, &mut pe).is_err() || spec.eval_terminal_at(&x, &theta, &mut te).is_err() {
            tallies[fin].record(f64::NAN, 0.0, &probe);
            continue;
        }

        // space derivatives of point quantities
        for l in 0..d {
            let h = opts.step * x[l].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[l] += h;
            xm[l] -= h;
            let ok = spec.eval_point_at(t, &xp, &theta, &mut pp).is_ok() && spec.eval_point_at(t, &xm, &theta, &mut pm).is_ok();
            let okt = spec.eval_terminal_at(&xp, &theta, &mut tp).is_ok() && spec.eval_terminal_at(&xm, &theta, &mut tm).is_ok();
            if !(ok && okt) {
                tallies[fin].record(f64::NAN, 0.0, &probe);
                continue;
            }
            let fd = |a: f64, b: f64| (a - b) / (2.0 * h);
            if sup.contains(Needs::DRIFT | Needs::DRIFT_DX) {
                used[idx("drift dx")] = true;
                for i in 0..d {
                    tallies[idx("drift dx")].record(pe.drift_dx[i * d + l], fd(pp.drift[i], pm.drift[i]), &probe);
                }
            }
            if sup.contains(Needs::DRIFT_DX | Needs::DRIFT_DXX) {
                used[idx("drift dxx")] = true;
                for i in 0..d {
                    for a in 0..d {
                        tallies[idx("drift dxx")].record(
                            pe.drift_dxx[(i * d + a) * d + l],
                            fd(pp.drift_dx[i * d + a], pm.drift_dx[i * d + a]),
                            &probe,
                        );
                    }
                }
            }
            if sup.contains(Needs::VOL | Needs::VOL_DX) {
                used[idx("vol dx")] = true;
                for ij in 0..d * p {
                    tallies[idx("vol dx")].record(pe.vol_dx[ij * d + l], fd(pp.vol[ij], pm.vol[ij]), &probe);
                }
            }
            if sup.contains(Needs::VOL_DX | Needs::VOL_DXX) {
                used[idx("vol dxx")] = true;
                for ija in 0..d * p * d {
                    tallies[idx("vol dxx")].record(pe.vol_dxx[ija * d + l], fd(pp.vol_dx[ija], pm.vol_dx[ija]), &probe);
                }
            }
            if sup.contains(Needs::RATE | Needs::RATE_GRAD) {
                used[idx("rate grad")] = true;
                tallies[idx("rate grad")].record(pe.rate_grad[l], fd(pp.rate, pm.rate), &probe);
            }
            if sup.contains(Needs::RATE_GRAD | Needs::RATE_HESS) {
                used[idx("rate hess")] = true;
                for a in 0..d {
                    tallies[idx("rate hess")].record(pe.rate_hess[a * d + l], fd(pp.rate_grad[a], pm.rate_grad[a]), &probe);
                }
            }
            used[idx("terminal grad")] = true;
            used[idx("terminal hess")] = true;
            tallies[idx("terminal grad")].record(te.grad[l], fd(tp.value, tm.value), &probe);
            for a in 0..d {
                tallies[idx("terminal hess")].record(te.hess[a * d + l], fd(tp.grad[a], tm.grad[a]), &probe);
            }
        }

        // theta derivatives
        for &k in &theta_coords {
            let h = opts.step * theta[k].abs().max(1.0);
            let mut thp = theta.clone();
            let mut thm = theta.clone();
            thp[k] += h;
            thm[k] -= h;
            if spec.eval_point_at(t, &x, &thp, &mut pp).is_err()
                || spec.eval_point_at(t, &x, &thm, &mut pm).is_err()
                || spec.eval_terminal_at(&x, &thp, &mut tp).is_err()
                || spec.eval_terminal_at(&x, &thm, &mut tm).is_err()
            {
                tallies[fin].record(f64::NAN, 0.0, &probe);
                continue;
            }
            let fd = |a: f64, b: f64| (a - b) / (2.0 * h);
            if sup.contains(Needs::DRIFT | Needs::DRIFT_DTHETA) {
                used[idx("drift dtheta")] = true;
                for i in 0..d {
                    tallies[idx("drift dtheta")].record(pe.drift_dtheta[k * d + i], fd(pp.drift[i], pm.drift[i]), &probe);
                }
            }
            if sup.contains(Needs::VOL | Needs::VOL_DTHETA) {
                used[idx("vol dtheta")] = true;
                for ij in 0..d * p {
                    tallies[idx("vol dtheta")].record(pe.vol_dtheta[k * d * p + ij], fd(pp.vol[ij], pm.vol[ij]), &probe);
                }
            }
            if !spec.sigma_theta_dependent && sup.contains(Needs::VOL) {
                used[idx("vol theta-independence")] = true;
                for ij in 0..d * p {
                    let claimed = if pe.vol_dtheta.is_empty() { 0.0 } else { pe.vol_dtheta[k * d * p + ij] };
                    tallies[idx("vol theta-independence")].record(claimed.abs(), 0.0, &probe);
                    tallies[idx("vol theta-independence")].record(0.0, fd(pp.vol[ij], pm.vol[ij]), &probe);
                }
            }
            if sup.contains(Needs::RATE | Needs::RATE_DTHETA) {
                used[idx("rate dtheta")] = true;
                tallies[idx("rate dtheta")].record(pe.rate_dtheta[k], fd(pp.rate, pm.rate), &probe);
            }
            used[idx("terminal dtheta")] = true;
            tallies[idx("terminal dtheta")].record(te.dtheta[k], fd(tp.value, tm.value), &probe);
            if !spec.terminal_theta_dependent {
                used[idx("terminal theta-independence")] = true;
                tallies[idx("terminal theta-independence")].record(te.dtheta[k].abs(), 0.0, &probe);
            }
        }

        // jump coefficient derivatives
        if let Some(jump) = &spec.jump {
            let mut marks: Vec<Vec<f64>> = Vec::new();
            match &jump.marks {
                Marks::Discrete(atoms) => marks.extend(atoms.iter().map(|a| a.z.clone())),
                Marks::Continuous(s) => {
                    let mut z = vec![0.0; p];
                    s.sample(&mut rng, &mut z);
                    marks.push(z);
                }
            }
            for z in &marks {
                if spec.eval_jump_at(t, &x, z, &theta, &mut je).is_err() {
                    tallies[fin].record(f64::NAN, 0.0, &probe);
                    continue;
                }
                for l in 0..d {
                    let h = opts.step * x[l].abs().max(1.0);
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[l] += h;
                    xm[l] -= h;
                    if spec.eval_jump_at(t, &xp, z, &theta, &mut jp).is_err()
                        || spec.eval_jump_at(t, &xm, z, &theta, &mut jm).is_err()
                    {
                        tallies[fin].record(f64::NAN, 0.0, &probe);
                        continue;
                    }
                    used[idx("jump dx")] = true;
                    used[idx("jump dxx")] = true;
                    for i in 0..d {
                        tallies[idx("jump dx")].record(je.dx[i * d + l], (jp.value[i] - jm.value[i]) / (2.0 * h), &probe);
                        for a in 0..d {
                            tallies[idx("jump dxx")].record(
                                je.dxx[(i * d + a) * d + l],
                                (jp.dx[i * d + a] - jm.dx[i * d + a]) / (2.0 * h),
                                &probe,
                            );
                        }
                    }
                }
                for &k in &theta_coords {
                    let h = opts.step * theta[k].abs().max(1.0);
                    let mut thp = theta.clone();
                    let mut thm = theta.clone();
                    thp[k] += h;
                    thm[k] -= h;
                    if spec.eval_jump_at(t, &x, z, &thp, &mut jp).is_err()
                        || spec.eval_jump_at(t, &x, z, &thm, &mut jm).is_err()
                    {
                        tallies[fin].record(f64::NAN, 0.0, &probe);
                        continue;
                    }
                    used[idx("jump dtheta")] = true;
                    for i in 0..d {
                        tallies[idx("jump dtheta")].record(je.dtheta[k * d + i], (jp.value[i] - jm.value[i]) / (2.0 * h), &probe);
                    }
                }
            }
        }
    }

    let checks = tallies
        .into_iter()
        .zip(used)
        .filter_map(|(t, u)| u.then(|| t.finish()))
        .collect();
    ValidationReport {
        model: spec.name.clone(),
        probes: opts.probe_count,
        tolerance: opts.tolerance,
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `d = p = n = 1`, `sigma = theta`, no drift.
    struct SigmaTheta;

    impl ModelEval for SigmaTheta {
        fn eval(&self, _t: f64, _x: &[f64], theta: &[f64], out: &mut PointEval) {
            if out.needs.contains(Needs::VOL) {
                out.vol[0] = theta[0];
            }
            if out.needs.contains(Needs::VOL_DTHETA) {
                out.vol_dtheta[0] = 1.0;
            }
        }
        fn eval_terminal(&self, _x: &[f64], _theta: &[f64], _out: &mut TerminalEval) {}
    }

    /// `d = p = 2`, `sigma = S0 + theta_0 S1 + theta_1 S2`.
    struct AffineVol {
        s: [[f64; 4]; 3],
    }

    impl ModelEval for AffineVol {
        fn eval(&self, _t: f64, _x: &[f64], theta: &[f64], out: &mut PointEval) {
            if out.needs.contains(Needs::VOL) {
                for q in 0..4 {
                    out.vol[q] = self.s[0][q] + theta[0] * self.s[1][q] + theta[1] * self.s[2][q];
                }
            }
            if out.needs.contains(Needs::VOL_DTHETA) {
                for k in 0..2 {
                    for q in 0..4 {
                        out.vol_dtheta[k * 4 + q] = self.s[k + 1][q];
                    }
                }
            }
        }
        fn eval_terminal(&self, _x: &[f64], _theta: &[f64], _out: &mut TerminalEval) {}
    }

    struct ConstVol(Vec<f64>);

    impl ModelEval for ConstVol {
        fn eval(&self, _t: f64, _x: &[f64], _theta: &[f64], out: &mut PointEval) {
            if out.needs.contains(Needs::VOL) {
                out.vol.copy_from_slice(&self.0);
            }
        }
        fn eval_terminal(&self, _x: &[f64], _theta: &[f64], _out: &mut TerminalEval) {}
    }

    fn spec(eval: Arc<dyn ModelEval>, d: usize, p: usize, n: usize, theta: Vec<f64>) -> ModelSpec {
        ModelSpec::new("t", Dims::new(d, p, n), 1.0, theta, eval).unwrap()
    }

    #[test]
    fn a_identity_vol() {
        let m = spec(Arc::new(ConstVol(vec![1.0, 0.0, 0.0, 1.0])), 2, 2, 1, vec![0.0]);
        let a = a_matrix(&m, 0.0, &[0.3, 0.4], &[0.0]).unwrap();
        assert_eq!(a, vec![0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn a_zero_vol() {
        let m = spec(Arc::new(ConstVol(vec![0.0; 4])), 2, 2, 1, vec![0.0]);
        assert_eq!(a_matrix(&m, 0.0, &[1.0, 1.0], &[0.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn a_cir_value() {
        // sigma = sqrt(0.25)
        let m = spec(Arc::new(ConstVol(vec![0.25f64.sqrt()])), 1, 1, 1, vec![0.0]);
        assert_eq!(a_matrix(&m, 0.0, &[0.25], &[0.0]).unwrap(), vec![0.125]);
    }

    #[test]
    fn dtheta_a_sigma_equals_theta() {
        let m = spec(Arc::new(SigmaTheta), 1, 1, 1, vec![2.0]);
        assert_eq!(dtheta_a(&m, 0.0, &[0.0], &[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn dtheta_a_zero_when_independent() {
        let m = spec(Arc::new(SigmaTheta), 1, 1, 1, vec![2.0]).with_sigma_theta_dependent(false);
        assert_eq!(dtheta_a(&m, 0.0, &[0.0], &[2.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn dtheta_a_matches_fd_affine_vol() {
        let mut rng = RngStream::new(crate::rng::StreamKey::new(3, 0, 0));
        for _ in 0..20 {
            let mut s = [[0.0; 4]; 3];
            for row in s.iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.normal();
                }
            }
            let theta = vec![rng.normal(), rng.normal()];
            let m = spec(Arc::new(AffineVol { s }), 2, 2, 2, theta.clone());
            let an = dtheta_a(&m, 0.0, &[0.0, 0.0], &theta).unwrap();
            let h = 1e-5;
            for k in 0..2 {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[k] += h;
                tm[k] -= h;
                let ap = a_matrix(&m, 0.0, &[0.0, 0.0], &tp).unwrap();
                let am = a_matrix(&m, 0.0, &[0.0, 0.0], &tm).unwrap();
                for q in 0..4 {
                    let fd = (ap[q] - am[q]) / (2.0 * h);
                    assert!((an[k * 4 + q] - fd).abs() < 1e-6, "k={k} q={q}");
                }
                // symmetric in (i, j)
                assert_eq!(an[k * 4 + 1], an[k * 4 + 2]);
            }
        }
    }

    #[test]
    fn non_finite_vol_is_an_error() {
        let m = spec(Arc::new(ConstVol(vec![f64::NAN])), 1, 1, 1, vec![0.0]);
        let err = a_matrix(&m, 0.5, &[1.0], &[0.0]).unwrap_err();
        match err {
            ModelError::NonFinite { what, t, x } => {
                assert_eq!(what, "vol");
                assert_eq!(t, 0.5);
                assert_eq!(x, vec![1.0]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn discrete_marks_weight_rules() {
        let atoms = vec![MarkAtom { z: vec![1.0], weight: 0.5 }, MarkAtom { z: vec![-1.0], weight: 0.25 }];
        let j = JumpSpec::discrete(atoms, true).unwrap();
        assert_eq!(j.rate, 0.75);
        let bad = JumpSpec {
            rate: 1.0,
            marks: Marks::Discrete(vec![MarkAtom { z: vec![1.0], weight: 0.5 }]),
            compensated: true,
        };
        assert!(bad.check(None).is_err());
        assert!(JumpSpec::discrete(vec![MarkAtom { z: vec![1.0], weight: 0.0 }], true).is_err());
    }

    #[test]
    fn spec_invariants() {
        let e: Arc<dyn ModelEval> = Arc::new(ConstVol(vec![0.0]));
        assert!(ModelSpec::new("x", Dims::new(0, 1, 1), 1.0, vec![0.0], e.clone()).is_err());
        assert!(ModelSpec::new("x", Dims::new(1, 1, 1), 0.0, vec![0.0], e.clone()).is_err());
        assert!(ModelSpec::new("x", Dims::new(1, 1, 2), 1.0, vec![0.0], e).is_err());
    }
}
