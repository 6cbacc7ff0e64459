//! Ready-made models: the neural linear-quadratic control problem, CIR,
//! the ReLU-drift diffusion, and two validation models with closed forms.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Dims, JumpEval, JumpNeeds, JumpSpec, MarkAtom, ModelError, ModelEval, ModelSpec, Needs, PointEval, TerminalEval,
    TerminalNeeds,
};
use crate::nn::{self, Activation, FlatParams, MlpSpec, NnError};
use crate::rng::RngStream;
use crate::sim::{Clamp, SimConfig};

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("invalid model configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// A model together with its starting point and simulation defaults.
#[derive(Debug, Clone)]
pub struct ZooModel {
    pub spec: ModelSpec,
    pub x0: Vec<f64>,
    pub clamp: Option<Clamp>,
    pub default_steps: usize,
}

impl ZooModel {
    pub fn sim_config(&self, n_steps: Option<usize>, master_seed: u64) -> SimConfig {
        let mut cfg = SimConfig::new(n_steps.unwrap_or(self.default_steps), master_seed);
        cfg.clamp = self.clamp;
        cfg
    }
}

fn abs_clamp(x: &mut [f64]) {
    for v in x {
        *v = v.abs();
    }
}

// ---------------------------------------------------------------- CIR

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CirSpec {
    pub theta: f64,
    pub x0: f64,
    pub horizon: f64,
}

impl Default for CirSpec {
    fn default() -> Self {
        Self {
            theta: 4.0,
            x0: 0.1,
            horizon: 2.0,
        }
    }
}

impl CirSpec {
    /// Below one half the process reaches zero and the estimator variance
    /// grows sharply.
    pub fn feller_warning(&self) -> Option<String> {
        (self.theta < 0.5).then(|| {
            format!(
                "theta = {} < 1/2: paths can reach zero; expect inflated variance",
                self.theta
            )
        })
    }
}

/// `dX = (theta - X) dt + sqrt(X) dB`, reward rate `x`.
struct Cir;

impl ModelEval for Cir {
    fn eval(&self, _t: f64, x: &[f64], theta: &[f64], out: &mut PointEval) {
        let x = x[0];
        let pos = x > 0.0;
        let root = if pos { x.sqrt() } else { 0.0 };
        let n = out.needs;
        if n.contains(Needs::DRIFT) {
            out.drift[0] = theta[0] - x;
        }
        if n.contains(Needs::DRIFT_DX) {
            out.drift_dx[0] = -1.0;
        }
        if n.contains(Needs::DRIFT_DTHETA) {
            out.drift_dtheta[0] = 1.0;
        }
        if n.contains(Needs::VOL) {
            out.vol[0] = root;
        }
        // the right derivative at 0 is infinite; paths at 0 are frozen in the flow
        if pos && n.contains(Needs::VOL_DX) {
            out.vol_dx[0] = 0.5 / root;
        }
        if pos && n.contains(Needs::VOL_DXX) {
            out.vol_dxx[0] = -0.25 / (x * root);
        }
        if n.contains(Needs::RATE) {
            out.rate = x;
        }
        if n.contains(Needs::RATE_GRAD) {
            out.rate_grad[0] = 1.0;
        }
    }

    fn eval_terminal(&self, _x: &[f64], _theta: &[f64], _out: &mut TerminalEval) {}

    fn probe_state(&self, rng: &mut RngStream, x: &mut [f64]) {
        x[0] = 0.2 + rng.uniform() * 3.0;
    }
}

pub fn build_cir(spec: &CirSpec) -> Result<ZooModel, ZooError> {
    if !(spec.theta > 0.0) || !(spec.x0 > 0.0) || !(spec.horizon > 0.0) {
        return Err(ZooError::Invalid(format!("CIR needs theta, x0, T > 0, got {spec:?}")));
    }
    let model = ModelSpec::new("cir", Dims::new(1, 1, 1), spec.horizon, vec![spec.theta], Arc::new(Cir))?
        .with_sigma_theta_dependent(false)
        .with_terminal_theta_dependent(false);
    Ok(ZooModel {
        spec: model,
        x0: vec![spec.x0],
        clamp: Some(abs_clamp),
        default_steps: (spec.horizon / 0.005).round() as usize,
    })
}

// ---------------------------------------------------------------- ReLU drift

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReluDriftSpec {
    pub theta: f64,
    pub x0: f64,
    pub horizon: f64,
    /// Constant added to the drift (1 in the standard model).
    pub offset: f64,
    /// Volatility (1 in the standard model).
    pub vol: f64,
}

impl Default for ReluDriftSpec {
    fn default() -> Self {
        Self {
            theta: 1.0,
            x0: -0.1,
            horizon: 2.0,
            offset: 1.0,
            vol: 1.0,
        }
    }
}

/// `dX = (relu(theta X) + offset) dt + vol dB`, reward rate `x`. The kink
/// derivative is taken as 0.
struct ReluDrift {
    offset: f64,
    vol: f64,
}

impl ModelEval for ReluDrift {
    fn eval(&self, _t: f64, x: &[f64], theta: &[f64], out: &mut PointEval) {
        let (x, th) = (x[0], theta[0]);
        let active = th * x > 0.0;
        let n = out.needs;
        if n.contains(Needs::DRIFT) {
            out.drift[0] = (th * x).max(0.0) + self.offset;
        }
        if active && n.contains(Needs::DRIFT_DX) {
            out.drift_dx[0] = th;
        }
        if active && n.contains(Needs::DRIFT_DTHETA) {
            out.drift_dtheta[0] = x;
        }
        if n.contains(Needs::VOL) {
            out.vol[0] = self.vol;
        }
        if n.contains(Needs::RATE) {
            out.rate = x;
        }
        if n.contains(Needs::RATE_GRAD) {
            out.rate_grad[0] = 1.0;
        }
    }

    fn eval_terminal(&self, _x: &[f64], _theta: &[f64], _out: &mut TerminalEval) {}

    fn probe_state(&self, rng: &mut RngStream, x: &mut [f64]) {
        // keep probes away from the kink
        let mag = 0.1 + rng.uniform() * 2.0;
        x[0] = if rng.uniform() < 0.5 { -mag } else { mag };
    }
}

pub fn build_relu(spec: &ReluDriftSpec) -> Result<ZooModel, ZooError> {
    if !(spec.theta > 0.0) || !(spec.horizon > 0.0) {
        return Err(ZooError::Invalid(format!("ReLU drift needs theta, T > 0, got {spec:?}")));
    }
    let eval = ReluDrift {
        offset: spec.offset,
        vol: spec.vol,
    };
    let model = ModelSpec::new("relu", Dims::new(1, 1, 1), spec.horizon, vec![spec.theta], Arc::new(eval))?
        .with_sigma_theta_dependent(false)
        .with_terminal_theta_dependent(false);
    Ok(ZooModel {
        spec: model,
        x0: vec![spec.x0],
        clamp: None,
        // the kink makes the Euler bias at T/400 visible for large theta
        default_steps: (spec.horizon / 0.001).round() as usize,
    })
}

// ---------------------------------------------------------------- GBM

/// `dX = theta X dt + vol X dB`, terminal reward `x`.
struct Gbm {
    vol: f64,
}

impl ModelEval for Gbm {
    fn eval(&self, _t: f64, x: &[f64], theta: &[f64], out: &mut PointEval) {
        let n = out.needs;
        if n.contains(Needs::DRIFT) {
            out.drift[0] = theta[0] * x[0];
        }
        if n.contains(Needs::DRIFT_DX) {
            out.drift_dx[0] = theta[0];
        }
        if n.contains(Needs::DRIFT_DTHETA) {
            out.drift_dtheta[0] = x[0];
        }
        if n.contains(Needs::VOL) {
            out.vol[0] = self.vol * x[0];
        }
        if n.contains(Needs::VOL_DX) {
            out.vol_dx[0] = self.vol;
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

pub fn build_gbm(theta: f64, vol: f64, x0: f64, horizon: f64) -> Result<ZooModel, ZooError> {
    if !(horizon > 0.0) || !vol.is_finite() || !theta.is_finite() {
        return Err(ZooError::Invalid("GBM needs finite theta, vol and T > 0".into()));
    }
    let model = ModelSpec::new("gbm", Dims::new(1, 1, 1), horizon, vec![theta], Arc::new(Gbm { vol }))?
        .with_sigma_theta_dependent(false)
        .with_terminal_theta_dependent(false);
    Ok(ZooModel {
        spec: model,
        x0: vec![x0],
        clamp: None,
        default_steps: 400,
    })
}

/// `d/dtheta E[X(T)] = x0 T exp(theta T)`.
pub fn gbm_gradient(theta: f64, x0: f64, horizon: f64) -> f64 {
    x0 * horizon * (theta * horizon).exp()
}

/// `dX = -X dt + theta X dB`, terminal reward `x^2`. The volatility depends
/// on `theta`, so the generator gradient needs the second variation.
struct GbmVol;

impl ModelEval for GbmVol {
    fn eval(&self, _t: f64, x: &[f64], theta: &[f64], out: &mut PointEval) {
        let n = out.needs;
        if n.contains(Needs::DRIFT) {
            out.drift[0] = -x[0];
        }
        if n.contains(Needs::DRIFT_DX) {
            out.drift_dx[0] = -1.0;
        }
        if n.contains(Needs::VOL) {
            out.vol[0] = theta[0] * x[0];
        }
        if n.contains(Needs::VOL_DX) {
            out.vol_dx[0] = theta[0];
        }
        if n.contains(Needs::VOL_DTHETA) {
            out.vol_dtheta[0] = x[0];
        }
    }

    fn eval_terminal(&self, x: &[f64], _theta: &[f64], out: &mut TerminalEval) {
        if out.needs.contains(TerminalNeeds::VALUE) {
            out.value = x[0] * x[0];
        }
        if out.needs.contains(TerminalNeeds::GRAD) {
            out.grad[0] = 2.0 * x[0];
        }
        if out.needs.contains(TerminalNeeds::HESS) {
            out.hess[0] = 2.0;
        }
    }
}

pub fn build_gbm_vol(theta: f64, x0: f64, horizon: f64) -> Result<ZooModel, ZooError> {
    if !(horizon > 0.0) || !theta.is_finite() {
        return Err(ZooError::Invalid("needs finite theta and T > 0".into()));
    }
    let model = ModelSpec::new("gbm_vol", Dims::new(1, 1, 1), horizon, vec![theta], Arc::new(GbmVol))?
        .with_terminal_theta_dependent(false);
    Ok(ZooModel {
        spec: model,
        x0: vec![x0],
        clamp: None,
        default_steps: 400,
    })
}

/// `d/dtheta E[X(T)^2] = 2 theta T x0^2 exp((theta^2 - 2) T)`.
pub fn gbm_vol_gradient(theta: f64, x0: f64, horizon: f64) -> f64 {
    2.0 * theta * horizon * x0 * x0 * ((theta * theta - 2.0) * horizon).exp()
}

// ---------------------------------------------------------------- jump test

/// `dX = (theta - X) dt + 0.3 dB + jumps 0.2 theta z` with `z = +-1` at rate
/// 1/2 each, compensated; reward rate `x`, terminal `x^2`.
struct JumpTest;

const JUMP_TEST_VOL: f64 = 0.3;
const JUMP_TEST_SCALE: f64 = 0.2;

impl ModelEval for JumpTest {
    fn eval(&self, _t: f64, x: &[f64], theta: &[f64], out: &mut PointEval) {
        let n = out.needs;
        if n.contains(Needs::DRIFT) {
            out.drift[0] = theta[0] - x[0];
        }
        if n.contains(Needs::DRIFT_DX) {
            out.drift_dx[0] = -1.0;
        }
        if n.contains(Needs::DRIFT_DTHETA) {
            out.drift_dtheta[0] = 1.0;
        }
        if n.contains(Needs::VOL) {
            out.vol[0] = JUMP_TEST_VOL;
        }
        if n.contains(Needs::RATE) {
            out.rate = x[0];
        }
        if n.contains(Needs::RATE_GRAD) {
            out.rate_grad[0] = 1.0;
        }
    }

    fn eval_jump(&self, _t: f64, _x: &[f64], z: &[f64], theta: &[f64], out: &mut JumpEval) {
        if out.needs.contains(JumpNeeds::VALUE) {
            out.value[0] = JUMP_TEST_SCALE * theta[0] * z[0];
        }
        if out.needs.contains(JumpNeeds::DTHETA) {
            out.dtheta[0] = JUMP_TEST_SCALE * z[0];
        }
    }

    fn eval_terminal(&self, x: &[f64], _theta: &[f64], out: &mut TerminalEval) {
        if out.needs.contains(TerminalNeeds::VALUE) {
            out.value = x[0] * x[0];
        }
        if out.needs.contains(TerminalNeeds::GRAD) {
            out.grad[0] = 2.0 * x[0];
        }
        if out.needs.contains(TerminalNeeds::HESS) {
            out.hess[0] = 2.0;
        }
    }
}

pub fn build_jump_test() -> Result<ZooModel, ZooError> {
    build_jump_test_at(1.0, 0.5, 1.0)
}

pub fn build_jump_test_at(theta: f64, x0: f64, horizon: f64) -> Result<ZooModel, ZooError> {
    let atoms = vec![
        MarkAtom {
            z: vec![-1.0],
            weight: 0.5,
        },
        MarkAtom {
            z: vec![1.0],
            weight: 0.5,
        },
    ];
    let model = ModelSpec::new("jump_test", Dims::new(1, 1, 1), horizon, vec![theta], Arc::new(JumpTest))?
        .with_sigma_theta_dependent(false)
        .with_terminal_theta_dependent(false)
        .with_jump(JumpSpec::discrete(atoms, true)?)?;
    Ok(ZooModel {
        spec: model,
        x0: vec![x0],
        clamp: None,
        default_steps: 400,
    })
}

/// Continuous-time gradient of the jump-test value:
/// `int_0^T (1 - e^-s) ds + 2 m(T) (1 - e^-T) + 0.04 theta (1 - e^-2T)`,
/// with `m(T) = theta + (x0 - theta) e^-T`.
pub fn jump_test_gradient(theta: f64, x0: f64, horizon: f64) -> f64 {
    let e1 = (-horizon).exp();
    let mean_t = theta + (x0 - theta) * e1;
    let jump_var_rate = JUMP_TEST_SCALE * JUMP_TEST_SCALE;
    (horizon - (1.0 - e1)) + 2.0 * mean_t * (1.0 - e1) + jump_var_rate * theta * (1.0 - (-2.0 * horizon).exp())
}

// ---------------------------------------------------------------- LQ

/// Linear dynamics with a neural feedback control and quadratic costs.
/// Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub noise_dim: usize,
    /// `d x d`.
    pub a: Vec<f64>,
    /// `d x m`.
    pub b: Vec<f64>,
    /// `d x p`.
    pub c: Vec<f64>,
    pub q: Vec<f64>,
    pub q_terminal: Vec<f64>,
    /// `m x m`.
    pub r: Vec<f64>,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub policy: MlpSpec,
    pub params: FlatParams,
}

impl LqSpec {
    /// Point mass on the plane: positions and velocities, force control,
    /// noise on the velocities, `Q = Q_T = I`, `R = 0.1 I`, `T = 1`,
    /// `x0 = (1, 1, 0, 0)`, policy over `(t, x)` with the given hidden widths.
    pub fn point_mass(hidden_widths: Vec<usize>, init_seed: u64) -> Result<Self, ZooError> {
        let (d, m, p) = (4, 2, 2);
        let mut a = vec![0.0; d * d];
        a[2] = 1.0; // x0' = v0
        a[d + 3] = 1.0; // x1' = v1
        let mut b = vec![0.0; d * m];
        b[2 * m] = 1.0;
        b[3 * m + 1] = 1.0;
        let mut c = vec![0.0; d * p];
        c[2 * p] = 0.1;
        c[3 * p + 1] = 0.1;
        let eye = |k: usize, s: f64| {
            let mut v = vec![0.0; k * k];
            for i in 0..k {
                v[i * k + i] = s;
            }
            v
        };
        let policy = MlpSpec::new(1 + d, hidden_widths, m, Activation::Tanh, init_seed)?;
        let params = policy.init();
        Ok(Self {
            state_dim: d,
            control_dim: m,
            noise_dim: p,
            a,
            b,
            c,
            q: eye(d, 1.0),
            q_terminal: eye(d, 1.0),
            r: eye(m, 0.1),
            x0: vec![1.0, 1.0, 0.0, 0.0],
            horizon: 1.0,
            policy,
            params,
        })
    }

    /// Three equal hidden layers of width `w` give `2 w^2 + 10 w + 2`
    /// parameters on the point-mass problem.
    pub fn point_mass_width(width: usize, init_seed: u64) -> Result<Self, ZooError> {
        Self::point_mass(vec![width; 3], init_seed)
    }

    pub fn check(&self) -> Result<(), ZooError> {
        let (d, m, p) = (self.state_dim, self.control_dim, self.noise_dim);
        let shapes = [
            ("A", self.a.len(), d * d),
            ("B", self.b.len(), d * m),
            ("C", self.c.len(), d * p),
            ("Q", self.q.len(), d * d),
            ("Q_T", self.q_terminal.len(), d * d),
            ("R", self.r.len(), m * m),
            ("x0", self.x0.len(), d),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(ZooError::Invalid(format!("{name} has {got} entries, expected {want}")));
            }
        }
        if self.policy.input_dim != d + 1 || self.policy.output_dim != m {
            return Err(ZooError::Invalid(format!(
                "policy maps {} -> {}, expected {} -> {}",
                self.policy.input_dim,
                self.policy.output_dim,
                d + 1,
                m
            )));
        }
        if self.params.theta.len() != self.policy.param_count() {
            return Err(ZooError::Invalid("policy parameter length mismatch".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(ZooError::Invalid("horizon must be positive".into()));
        }
        Ok(())
    }
}

struct Lq {
    d: usize,
    m: usize,
    p: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    q_sym: Vec<f64>,
    q_terminal: Vec<f64>,
    q_terminal_sym: Vec<f64>,
    r: Vec<f64>,
    r_sym: Vec<f64>,
    policy: MlpSpec,
}

fn symmetrized(m: &[f64], k: usize) -> Vec<f64> {
    let mut s = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            s[i * k + j] = m[i * k + j] + m[j * k + i];
        }
    }
    s
}

fn quad(m: &[f64], x: &[f64]) -> f64 {
    let k = x.len();
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            s += x[i] * m[i * k + j] * x[j];
        }
    }
    s
}

impl Lq {
    /// `drift_dxx = B H[u]` and `rate_hess = (Q + Q^T) + J^T (R + R^T) J + sum_o ((R + R^T) u)_o H[u_o]`.
    fn curvature(&self, t: f64, x: &[f64], theta: &[f64], out: &mut PointEval) {
        let (d, m) = (self.d, self.m);
        let dd = d * d;
        let net = nn::evaluate(&self.policy, theta, t, x, true, false).expect("policy dimensions");
        let hu = nn::hess_x(&self.policy, theta, t, x).expect("policy dimensions");
        if out.needs.contains(Needs::DRIFT_DXX) {
            for i in 0..d {
                for o in 0..m {
                    let bio = self.b[i * m + o];
                    if bio == 0.0 {
                        continue;
                    }
                    for (dst, h) in out.drift_dxx[i * dd..(i + 1) * dd].iter_mut().zip(&hu[o * dd..(o + 1) * dd]) {
                        *dst += bio * h;
                    }
                }
            }
        }
        if out.needs.contains(Needs::RATE_HESS) {
            let u = &net.output;
            let jac = &net.jac.expect("requested").x;
            let ru: Vec<f64> = (0..m).map(|o| (0..m).map(|q| self.r_sym[o * m + q] * u[q]).sum()).collect();
            for a in 0..d {
                for b in 0..d {
                    let mut s = self.q_sym[a * d + b];
                    for o in 0..m {
                        for q in 0..m {
                            s += jac[o * d + a] * self.r_sym[o * m + q] * jac[q * d + b];
                        }
                        s += ru[o] * hu[o * dd + a * d + b];
                    }
                    out.rate_hess[a * d + b] = s;
                }
            }
        }
    }
}

impl ModelEval for Lq {
    fn eval(&self, t: f64, x: &[f64], theta: &[f64], out: &mut PointEval) {
        let (d, m, p) = (self.d, self.m, self.p);
        let n = out.needs;
        let want_jac = n.intersects(Needs::DRIFT_DX | Needs::RATE_GRAD);
        let want_grad = n.intersects(Needs::DRIFT_DTHETA | Needs::RATE_DTHETA);
        let want_u = want_jac || want_grad || n.intersects(Needs::DRIFT | Needs::RATE);
        if want_u {
            // dimensions are checked when the model is built
            let net = nn::evaluate(&self.policy, theta, t, x, want_jac, want_grad).expect("policy dimensions");
            let u = &net.output;
            if n.contains(Needs::DRIFT) {
                for i in 0..d {
                    let mut s = 0.0;
                    for l in 0..d {
                        s += self.a[i * d + l] * x[l];
                    }
                    for o in 0..m {
                        s += self.b[i * m + o] * u[o];
                    }
                    out.drift[i] = s;
                }
            }
            // (R + R^T) u
            let ru: Vec<f64> = (0..m).map(|o| (0..m).map(|q| self.r_sym[o * m + q] * u[q]).sum()).collect();
            if n.contains(Needs::RATE) {
                out.rate = quad(&self.q_sym, x) * 0.5 + quad(&self.r, u);
            }
            if let Some(jac) = &net.jac {
                if n.contains(Needs::DRIFT_DX) {
                    for i in 0..d {
                        for l in 0..d {
                            let mut s = self.a[i * d + l];
                            for o in 0..m {
                                s += self.b[i * m + o] * jac.x[o * d + l];
                            }
                            out.drift_dx[i * d + l] = s;
                        }
                    }
                }
                if n.contains(Needs::RATE_GRAD) {
                    for l in 0..d {
                        let mut s = 0.0;
                        for i in 0..d {
                            s += self.q_sym[l * d + i] * x[i];
                        }
                        for o in 0..m {
                            s += ru[o] * jac.x[o * d + l];
                        }
                        out.rate_grad[l] = s;
                    }
                }
            }
            if let Some(g) = &net.grad_theta {
                let np = theta.len();
                if n.contains(Needs::DRIFT_DTHETA) {
                    for i in 0..d {
                        for o in 0..m {
                            let bio = self.b[i * m + o];
                            if bio == 0.0 {
                                continue;
                            }
                            let row = &g[o * np..(o + 1) * np];
                            for (k, gk) in row.iter().enumerate() {
                                out.drift_dtheta[k * d + i] += bio * gk;
                            }
                        }
                    }
                }
                if n.contains(Needs::RATE_DTHETA) {
                    for o in 0..m {
                        let row = &g[o * np..(o + 1) * np];
                        for (k, gk) in row.iter().enumerate() {
                            out.rate_dtheta[k] += ru[o] * gk;
                        }
                    }
                }
            }
        }
        if n.intersects(Needs::DRIFT_DXX | Needs::RATE_HESS) {
            self.curvature(t, x, theta, out);
        }
        if n.contains(Needs::VOL) {
            out.vol.copy_from_slice(&self.c[..d * p]);
        }
    }

    fn eval_terminal(&self, x: &[f64], _theta: &[f64], out: &mut TerminalEval) {
        let d = self.d;
        if out.needs.contains(TerminalNeeds::VALUE) {
            out.value = quad(&self.q_terminal, x);
        }
        if out.needs.contains(TerminalNeeds::GRAD) {
            for l in 0..d {
                out.grad[l] = (0..d).map(|i| self.q_terminal_sym[l * d + i] * x[i]).sum();
            }
        }
        if out.needs.contains(TerminalNeeds::HESS) {
            out.hess.copy_from_slice(&self.q_terminal_sym);
        }
    }

    fn supported(&self) -> Needs {
        Needs::all()
    }
}

pub fn build_lq(spec: &LqSpec) -> Result<ZooModel, ZooError> {
    spec.check()?;
    let (d, m, p) = (spec.state_dim, spec.control_dim, spec.noise_dim);
    let eval = Lq {
        d,
        m,
        p,
        a: spec.a.clone(),
        b: spec.b.clone(),
        c: spec.c.clone(),
        q_sym: symmetrized(&spec.q, d),
        q_terminal: spec.q_terminal.clone(),
        q_terminal_sym: symmetrized(&spec.q_terminal, d),
        r: spec.r.clone(),
        r_sym: symmetrized(&spec.r, m),
        policy: spec.policy.clone(),
    };
    let n = spec.policy.param_count();
    let model = ModelSpec::new("lq", Dims::new(d, p, n), spec.horizon, spec.params.theta.clone(), Arc::new(eval))?
        .with_sigma_theta_dependent(false)
        .with_terminal_theta_dependent(false);
    Ok(ZooModel {
        spec: model,
        x0: spec.x0.clone(),
        clamp: None,
        default_steps: 400,
    })
}

// ---------------------------------------------------------------- lookup

/// Overrides accepted by [`by_name`]; unset fields keep each model's default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZooOverrides {
    pub theta: Option<f64>,
    pub x0: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    pub widths: Option<Vec<usize>>,
    pub init_seed: Option<u64>,
}

pub const MODEL_NAMES: [&str; 6] = ["lq", "cir", "relu", "gbm", "gbm_vol", "jump_test"];

fn scalar_x0(o: &ZooOverrides, default: f64) -> Result<f64, ZooError> {
    match &o.x0 {
        None => Ok(default),
        Some(v) if v.len() == 1 => Ok(v[0]),
        Some(v) => Err(ZooError::Invalid(format!("scalar model needs one x0 entry, got {}", v.len()))),
    }
}

pub fn by_name(name: &str, o: &ZooOverrides) -> Result<ZooModel, ZooError> {
    match name {
        "cir" => {
            let def = CirSpec::default();
            build_cir(&CirSpec {
                theta: o.theta.unwrap_or(def.theta),
                x0: scalar_x0(o, def.x0)?,
                horizon: o.horizon.unwrap_or(def.horizon),
            })
        }
        "relu" => {
            let def = ReluDriftSpec::default();
            build_relu(&ReluDriftSpec {
                theta: o.theta.unwrap_or(def.theta),
                x0: scalar_x0(o, def.x0)?,
                horizon: o.horizon.unwrap_or(def.horizon),
                ..def
            })
        }
        "gbm" => build_gbm(
            o.theta.unwrap_or(0.05),
            0.2,
            scalar_x0(o, 1.0)?,
            o.horizon.unwrap_or(1.0),
        ),
        "gbm_vol" => build_gbm_vol(o.theta.unwrap_or(0.5), scalar_x0(o, 1.0)?, o.horizon.unwrap_or(1.0)),
        "jump_test" => build_jump_test_at(o.theta.unwrap_or(1.0), scalar_x0(o, 0.5)?, o.horizon.unwrap_or(1.0)),
        "lq" => {
            let mut spec = LqSpec::point_mass(o.widths.clone().unwrap_or(vec![5; 3]), o.init_seed.unwrap_or(0))?;
            if let Some(x0) = &o.x0 {
                spec.x0 = x0.clone();
            }
            if let Some(h) = o.horizon {
                spec.horizon = h;
            }
            if o.theta.is_some() {
                return Err(ZooError::Invalid("lq takes its parameters from the policy network".into()));
            }
            build_lq(&spec)
        }
        other => Err(ZooError::Invalid(format!(
            "unknown model {other:?}; expected one of {}",
            MODEL_NAMES.join(", ")
        ))),
    }
}
