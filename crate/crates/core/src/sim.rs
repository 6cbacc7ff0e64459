//! Fixed-grid Euler–Maruyama simulation of the base SDE together with its
//! first/second variation flows or its parameter sensitivities.
//!
//! Every derivative process is the exact derivative of the discrete Euler map
//! (all coefficients evaluated at the left state of the step, jumps applied
//! with the pre-jump state), so finite differences of simulated paths under
//! common random numbers reproduce them up to floating point error.

use std::io::{self, Write};

use thiserror::Error;

use crate::model::{Dims, JumpEval, JumpNeeds, Marks, ModelError, ModelSpec, Needs, PointEval};
use crate::rng::PathNoise;

/// Projection applied to the state after every step (e.g. reflection at 0).
pub type Clamp = fn(&mut [f64]);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("non-finite state at step {step} (t={t})")]
    NonFinite { step: usize, t: f64 },
    #[error("model {model} does not provide {missing:?}")]
    Unsupported { model: String, missing: Needs },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Number of steps covering `[0, horizon]`. Shorter intervals use
    /// `ceil(len / (horizon / n_steps))` equal steps.
    pub n_steps: usize,
    pub master_seed: u64,
    pub clamp: Option<Clamp>,
    pub record_path: bool,
}

impl SimConfig {
    pub fn new(n_steps: usize, master_seed: u64) -> Self {
        Self {
            n_steps,
            master_seed,
            clamp: None,
            record_path: false,
        }
    }

    pub fn with_clamp(mut self, clamp: Clamp) -> Self {
        self.clamp = Some(clamp);
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_path = true;
        self
    }
}

/// Uniform grid on `[t0, t1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
    pub h: f64,
}

impl Grid {
    pub fn new(horizon: f64, n_steps: usize, t0: f64, t1: f64) -> Self {
        let len = t1 - t0;
        if len <= 0.0 {
            return Self { t0, t1: t0, steps: 0, h: 0.0 };
        }
        let nominal = horizon / n_steps as f64;
        let steps = ((len / nominal) - 1e-9).ceil().max(1.0) as usize;
        Self {
            t0,
            t1,
            steps,
            h: len / steps as f64,
        }
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.t1
        } else {
            self.t0 + i as f64 * self.h
        }
    }
}

/// Which derivative processes ride along with the base state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Base,
    Augmented { hess: bool },
    Pathwise,
}

/// Index of `(a, b)`, `a <= b`, in a packed upper triangle of side `d`.
#[inline]
pub fn tri_index(d: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    a * d - a * a.saturating_sub(1) / 2 + (b - a)
}

#[inline]
fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Working state of any flow. Unused components are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub x: Vec<f64>,
    /// `[i][a] = d_a X_i`.
    pub grad_x: Vec<f64>,
    /// `[i][tri(a, b)] = d_b d_a X_i`, `a <= b`.
    pub hess_x: Vec<f64>,
    /// `[k][i] = d_theta_k X_i`.
    pub dtheta_x: Vec<f64>,
}

impl FlowState {
    pub fn initial(dims: Dims, flow: Flow, t: f64, x0: &[f64]) -> Self {
        let d = dims.state;
        let (grad_x, hess_x, dtheta_x) = match flow {
            Flow::Base => (Vec::new(), Vec::new(), Vec::new()),
            Flow::Augmented { hess } => {
                let mut g = vec![0.0; d * d];
                for i in 0..d {
                    g[i * d + i] = 1.0;
                }
                (g, if hess { vec![0.0; d * tri_len(d)] } else { Vec::new() }, Vec::new())
            }
            Flow::Pathwise => (Vec::new(), Vec::new(), vec![0.0; dims.param * d]),
        };
        Self {
            t,
            x: x0.to_vec(),
            grad_x,
            hess_x,
            dtheta_x,
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.x.len() + self.grad_x.len() + self.hess_x.len() + self.dtheta_x.len()
    }

    fn all_finite(&self) -> bool {
        [&self.x, &self.grad_x, &self.hess_x, &self.dtheta_x]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Base state plus first and (optionally) second variation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub t: f64,
    pub x: Vec<f64>,
    pub grad_x: Vec<f64>,
    pub hess_x: Option<Vec<f64>>,
}

impl AugmentedState {
    fn from_flow(s: &FlowState) -> Self {
        Self {
            t: s.t,
            x: s.x.clone(),
            grad_x: s.grad_x.clone(),
            hess_x: (!s.hess_x.is_empty()).then(|| s.hess_x.clone()),
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// `d + d^2`, plus `d * d(d+1)/2` when the second variation is carried.
    pub fn scalar_count(&self) -> usize {
        self.x.len() + self.grad_x.len() + self.hess_x.as_ref().map_or(0, Vec::len)
    }

    pub fn hess_entry(&self, i: usize, a: usize, b: usize) -> f64 {
        let d = self.dim();
        self.hess_x.as_ref().map_or(0.0, |h| h[i * tri_len(d) + tri_index(d, a, b)])
    }

    /// Full `d x d x d` tensor `[i][a][b]`.
    pub fn hess_full(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d * d * d];
        for i in 0..d {
            for a in 0..d {
                for b in 0..d {
                    out[(i * d + a) * d + b] = self.hess_entry(i, a, b);
                }
            }
        }
        out
    }
}

/// Base state plus `d_theta X`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwiseState {
    pub t: f64,
    pub x: Vec<f64>,
    pub dtheta_x: Vec<f64>,
}

impl PathwiseState {
    /// `d + d n`.
    pub fn scalar_count(&self) -> usize {
        self.x.len() + self.dtheta_x.len()
    }
}

/// Simulated states at every grid point when recording, otherwise only the
/// first and last.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPath<S> {
    pub points: Vec<S>,
}

impl<S> SimPath<S> {
    pub fn last(&self) -> &S {
        self.points.last().expect("path has at least one point")
    }

    pub fn first(&self) -> &S {
        &self.points[0]
    }
}

/// Per-step view handed to visitors, taken at the left end of the step.
pub struct StepCtx<'a> {
    pub index: usize,
    pub t: f64,
    pub h: f64,
    pub state: &'a FlowState,
    pub eval: &'a PointEval,
}

struct JumpAcc<'a> {
    dx: &'a mut [f64],
    m1: &'a mut [f64],
    m2: &'a mut [f64],
    th_jump: &'a mut [f64],
    with_m1: bool,
}

/// Reusable buffers for stepping one flow.
pub struct Stepper<'m> {
    model: &'m ModelSpec,
    clamp: Option<Clamp>,
    flow: Flow,
    needs: Needs,
    pe: PointEval,
    je: JumpEval,
    db: Vec<f64>,
    dx: Vec<f64>,
    m1: Vec<f64>,
    m2: Vec<f64>,
    th_jump: Vec<f64>,
    mark: Vec<f64>,
    next: FlowState,
    row: Vec<f64>,
}

impl<'m> Stepper<'m> {
    pub fn new(model: &'m ModelSpec, cfg: &SimConfig, flow: Flow, extra: Needs) -> Self {
        let Dims { state: d, noise: p, param: n } = model.dims;
        let mut needs = Needs::DRIFT | Needs::VOL | extra;
        let mut jneeds = JumpNeeds::VALUE;
        match flow {
            Flow::Base => {}
            Flow::Augmented { hess } => {
                needs |= Needs::DRIFT_DX | Needs::VOL_DX;
                jneeds |= JumpNeeds::DX;
                if hess {
                    needs |= Needs::DRIFT_DXX | Needs::VOL_DXX;
                    jneeds |= JumpNeeds::DXX;
                }
            }
            Flow::Pathwise => {
                needs |= Needs::DRIFT_DX | Needs::VOL_DX | Needs::DRIFT_DTHETA;
                if model.sigma_theta_dependent {
                    needs |= Needs::VOL_DTHETA;
                }
                jneeds |= JumpNeeds::DX | JumpNeeds::DTHETA;
            }
        }
        let jumps = model.active_jump().is_some();
        Self {
            model,
            clamp: cfg.clamp,
            flow,
            needs,
            pe: PointEval::new(model.dims, needs),
            je: JumpEval::new(model.dims, jneeds),
            db: vec![0.0; p],
            dx: vec![0.0; d],
            m1: vec![0.0; d * d],
            m2: if matches!(flow, Flow::Augmented { hess: true }) { vec![0.0; d * d * d] } else { Vec::new() },
            th_jump: if jumps && flow == Flow::Pathwise { vec![0.0; n * d] } else { Vec::new() },
            mark: vec![0.0; p],
            next: FlowState::initial(model.dims, if flow == Flow::Pathwise { Flow::Base } else { flow }, 0.0, &vec![0.0; d]),
            row: vec![0.0; d],
        }
    }

    pub fn needs(&self) -> Needs {
        self.needs
    }

    /// Walks `grid` from `state`, calling `visit` at the left end of every
    /// step before the state is advanced. Noise streams are consumed in
    /// order, so consecutive calls continue one path.
    pub fn walk<F>(&mut self, grid: &Grid, state: &mut FlowState, noise: &mut PathNoise, mut visit: F) -> Result<(), SimError>
    where
        F: FnMut(&StepCtx) -> Result<(), SimError>,
    {
        let missing = self.needs - self.model.eval.supported();
        if !missing.is_empty() {
            return Err(SimError::Unsupported {
                model: self.model.name.clone(),
                missing,
            });
        }
        for i in 0..grid.steps {
            let t = grid.time(i);
            state.t = t;
            self.model.eval_point(t, &state.x, &mut self.pe)?;
            visit(&StepCtx {
                index: i,
                t,
                h: grid.h,
                state,
                eval: &self.pe,
            })?;
            self.advance(t, grid.h, state, noise)?;
            state.t = grid.time(i + 1);
            if !state.x.iter().all(|v| v.is_finite()) {
                return Err(SimError::NonFinite { step: i, t: state.t });
            }
        }
        state.t = grid.t1;
        if !state.all_finite() {
            return Err(SimError::NonFinite { step: grid.steps, t: grid.t1 });
        }
        Ok(())
    }

    /// Accumulates one jump event (or compensator term, with negative
    /// `weight`) evaluated at the current left state.
    fn add_jump(acc: JumpAcc<'_>, je: &JumpEval, weight: f64) {
        for (v, j) in acc.dx.iter_mut().zip(&je.value) {
            *v += weight * j;
        }
        if acc.with_m1 {
            for (m, v) in acc.m1.iter_mut().zip(&je.dx) {
                *m += weight * v;
            }
        }
        for (m, v) in acc.m2.iter_mut().zip(&je.dxx) {
            *m += weight * v;
        }
        for (m, v) in acc.th_jump.iter_mut().zip(&je.dtheta) {
            *m += weight * v;
        }
    }

    fn advance(&mut self, t: f64, h: f64, state: &mut FlowState, noise: &mut PathNoise) -> Result<(), SimError> {
        let model = self.model;
        let Dims { state: d, noise: p, param: n } = model.dims;
        let sqrt_h = h.sqrt();
        for k in 0..p {
            self.db[k] = sqrt_h * noise.brownian.normal();
        }
        let pe = &self.pe;

        for i in 0..d {
            let mut s = pe.drift[i] * h;
            for k in 0..p {
                s += pe.vol[i * p + k] * self.db[k];
            }
            self.dx[i] = s;
        }
        if self.flow != Flow::Base {
            for i in 0..d {
                for l in 0..d {
                    let mut s = pe.drift_dx[i * d + l] * h;
                    for k in 0..p {
                        s += pe.vol_dx[(i * p + k) * d + l] * self.db[k];
                    }
                    self.m1[i * d + l] = s;
                }
            }
        }
        if !self.m2.is_empty() {
            for i in 0..d {
                for l in 0..d {
                    for m in 0..d {
                        let mut s = pe.drift_dxx[(i * d + l) * d + m] * h;
                        for k in 0..p {
                            s += pe.vol_dxx[((i * p + k) * d + l) * d + m] * self.db[k];
                        }
                        self.m2[(i * d + l) * d + m] = s;
                    }
                }
            }
        }
        self.th_jump.fill(0.0);

        let mut jumped = false;
        if let Some(jump) = model.active_jump() {
            let x = &state.x;
            match &jump.marks {
                Marks::Discrete(atoms) => {
                    for atom in atoms {
                        let count = noise.jumps.poisson(atom.weight * h) as f64;
                        let comp = if jump.compensated { atom.weight * h } else { 0.0 };
                        let w = count - comp;
                        if w != 0.0 {
                            model.eval_jump(t, x, &atom.z, &mut self.je)?;
                            Self::add_jump(JumpAcc { dx: &mut self.dx, m1: &mut self.m1, m2: &mut self.m2, th_jump: &mut self.th_jump, with_m1: self.flow != Flow::Base }, &self.je, w);
                            jumped = true;
                        }
                    }
                }
                Marks::Continuous(sampler) => {
                    let count = noise.jumps.poisson(jump.rate * h);
                    for _ in 0..count {
                        sampler.sample(&mut noise.marks, &mut self.mark);
                        model.eval_jump(t, x, &self.mark, &mut self.je)?;
                        Self::add_jump(JumpAcc { dx: &mut self.dx, m1: &mut self.m1, m2: &mut self.m2, th_jump: &mut self.th_jump, with_m1: self.flow != Flow::Base }, &self.je, 1.0);
                        jumped = true;
                    }
                    if jump.compensated {
                        sampler.sample(&mut noise.compensator, &mut self.mark);
                        model.eval_jump(t, x, &self.mark, &mut self.je)?;
                        Self::add_jump(JumpAcc { dx: &mut self.dx, m1: &mut self.m1, m2: &mut self.m2, th_jump: &mut self.th_jump, with_m1: self.flow != Flow::Base }, &self.je, -jump.rate * h);
                        jumped = true;
                    }
                }
            }
        }

        let next = &mut self.next;
        next.x.clear();
        next.x.extend(state.x.iter().zip(&self.dx).map(|(a, b)| a + b));

        match self.flow {
            Flow::Base => {}
            Flow::Augmented { hess } => {
                let g = &state.grad_x;
                next.grad_x.resize(d * d, 0.0);
                for i in 0..d {
                    for a in 0..d {
                        let mut s = g[i * d + a];
                        for l in 0..d {
                            s += self.m1[i * d + l] * g[l * d + a];
                        }
                        next.grad_x[i * d + a] = s;
                    }
                }
                if hess {
                    let tl = tri_len(d);
                    let hx = &state.hess_x;
                    next.hess_x.resize(d * tl, 0.0);
                    for i in 0..d {
                        for a in 0..d {
                            for b in a..d {
                                let q = tri_index(d, a, b);
                                let mut s = hx[i * tl + q];
                                for l in 0..d {
                                    s += self.m1[i * d + l] * hx[l * tl + q];
                                    let ga = g[l * d + a];
                                    if ga != 0.0 {
                                        for m in 0..d {
                                            s += self.m2[(i * d + l) * d + m] * ga * g[m * d + b];
                                        }
                                    }
                                }
                                next.hess_x[i * tl + q] = s;
                            }
                        }
                    }
                }
            }
            Flow::Pathwise => {
                // rows of d_theta X are independent; update in place
                let sig_theta = model.sigma_theta_dependent;
                let row = &mut self.row;
                for k in 0..n {
                    let pk = &mut state.dtheta_x[k * d..(k + 1) * d];
                    for i in 0..d {
                        let mut s = 0.0;
                        for l in 0..d {
                            s += self.m1[i * d + l] * pk[l];
                        }
                        s += h * pe.drift_dtheta[k * d + i];
                        if sig_theta {
                            for j in 0..p {
                                s += pe.vol_dtheta[(k * d + i) * p + j] * self.db[j];
                            }
                        }
                        row[i] = s;
                    }
                    if jumped {
                        for i in 0..d {
                            row[i] += self.th_jump[k * d + i];
                        }
                    }
                    for i in 0..d {
                        pk[i] += row[i];
                    }
                }
            }
        }

        std::mem::swap(&mut state.x, &mut next.x);
        if let Some(clamp) = self.clamp {
            clamp(&mut state.x);
        }
        if let Flow::Augmented { hess } = self.flow {
            std::mem::swap(&mut state.grad_x, &mut next.grad_x);
            if hess {
                std::mem::swap(&mut state.hess_x, &mut next.hess_x);
            }
        }
        Ok(())
    }
}

pub fn check_interval(model: &ModelSpec, x0: &[f64], t0: f64, t1: f64, cfg: &SimConfig) -> Result<Grid, SimError> {
    if x0.len() != model.dims.state {
        return Err(SimError::Precondition(format!(
            "initial state has length {}, model state dimension is {}",
            x0.len(),
            model.dims.state
        )));
    }
    if cfg.n_steps == 0 {
        return Err(SimError::Precondition("n_steps must be >= 1".into()));
    }
    if !(t0 <= t1) || t0 < 0.0 {
        return Err(SimError::Precondition(format!("need 0 <= t0 <= t1, got t0={t0}, t1={t1}")));
    }
    if t1 > model.horizon * (1.0 + 1e-12) {
        return Err(SimError::Precondition(format!("t1={t1} exceeds horizon {}", model.horizon)));
    }
    Ok(Grid::new(model.horizon, cfg.n_steps, t0, t1.min(model.horizon)))
}

fn run_flow(
    model: &ModelSpec,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SimConfig,
    noise: &mut PathNoise,
    flow: Flow,
) -> Result<Vec<FlowState>, SimError> {
    let grid = check_interval(model, x0, t0, t1, cfg)?;
    let mut state = FlowState::initial(model.dims, flow, t0, x0);
    let mut points = vec![state.clone()];
    let mut stepper = Stepper::new(model, cfg, flow, Needs::empty());
    if cfg.record_path {
        for i in 0..grid.steps {
            let g = Grid { t0: grid.time(i), t1: grid.time(i + 1), steps: 1, h: grid.h };
            stepper.walk(&g, &mut state, noise, |_| Ok(()))?;
            points.push(state.clone());
        }
    } else {
        stepper.walk(&grid, &mut state, noise, |_| Ok(()))?;
        if grid.steps > 0 {
            points.push(state);
        }
    }
    Ok(points)
}

/// Euler–Maruyama path of the base process on `[t0, t1]`.
pub fn simulate_base(
    model: &ModelSpec,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SimConfig,
    noise: &mut PathNoise,
) -> Result<SimPath<(f64, Vec<f64>)>, SimError> {
    let pts = run_flow(model, x0, t0, t1, cfg, noise, Flow::Base)?;
    Ok(SimPath {
        points: pts.into_iter().map(|s| (s.t, s.x)).collect(),
    })
}

/// Base process with its first variation, and the second variation when
/// `sigma` depends on `theta`.
pub fn simulate_augmented(
    model: &ModelSpec,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SimConfig,
    noise: &mut PathNoise,
) -> Result<SimPath<AugmentedState>, SimError> {
    simulate_augmented_with(model, x0, t0, t1, cfg, noise, model.sigma_theta_dependent)
}

pub fn simulate_augmented_with(
    model: &ModelSpec,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SimConfig,
    noise: &mut PathNoise,
    hess: bool,
) -> Result<SimPath<AugmentedState>, SimError> {
    let pts = run_flow(model, x0, t0, t1, cfg, noise, Flow::Augmented { hess })?;
    Ok(SimPath {
        points: pts.iter().map(AugmentedState::from_flow).collect(),
    })
}

/// Base process with its parameter sensitivity `d_theta X`.
pub fn simulate_pathwise(
    model: &ModelSpec,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SimConfig,
    noise: &mut PathNoise,
) -> Result<SimPath<PathwiseState>, SimError> {
    let pts = run_flow(model, x0, t0, t1, cfg, noise, Flow::Pathwise)?;
    Ok(SimPath {
        points: pts
            .into_iter()
            .map(|s| PathwiseState { t: s.t, x: s.x, dtheta_x: s.dtheta_x })
            .collect(),
    })
}

/// Writes `step,t,x_0..x_{d-1}`.
pub fn write_path_csv<W: Write>(path: &SimPath<(f64, Vec<f64>)>, mut w: W) -> io::Result<()> {
    let d = path.first().1.len();
    let mut header = String::from("step,t");
    for i in 0..d {
        header.push_str(&format!(",x_{i}"));
    }
    writeln!(w, "{header}")?;
    for (step, (t, x)) in path.points.iter().enumerate() {
        write!(w, "{step},{t}")?;
        for v in x {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
