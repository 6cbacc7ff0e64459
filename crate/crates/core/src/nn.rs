//! A small fully connected network `u(t, x)` with exact parameter gradients
//! and input Jacobians.
//!
//! Parameters are stored flat, layer by layer; each layer holds its weight
//! matrix (`fan_out x fan_in`, row-major) followed by its bias. Hidden layers
//! apply the activation, the output layer is affine.

use std::io::{self, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{RngStream, StreamKey};

const PARAM_MAGIC: [u8; 8] = *b"JGPARAM1";
const INIT_PURPOSE: u64 = 0x4e4e_494e_4954; // "NNINIT"

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    /// Affine hidden layers; used in tests.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and the output `a`.
    /// ReLU takes the right-continuous value 1 at the kink.
    #[inline]
    fn slope(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    /// Second derivative given the pre-activation `z` and the output `a`.
    #[inline]
    fn curvature(self, _z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Relu | Activation::Identity => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `1 + d`: time is prepended to the state.
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

/// Offsets of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        output_dim: usize,
        activation: Activation,
        init_seed: u64,
    ) -> Result<Self, NnError> {
        let spec = Self {
            input_dim,
            hidden_widths,
            output_dim,
            activation,
            init_seed,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(NnError::Spec("input and output dimensions must be positive".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(NnError::Spec(format!("hidden widths must be positive, got {:?}", self.hidden_widths)));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.input_dim - 1
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut sizes = Vec::with_capacity(self.hidden_widths.len() + 2);
        sizes.push(self.input_dim);
        sizes.extend_from_slice(&self.hidden_widths);
        sizes.push(self.output_dim);
        let mut offset = 0;
        sizes
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += shape.param_count();
                shape
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerShape::param_count).sum()
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and biases from a
    /// stream keyed by `init_seed`.
    pub fn init(&self) -> FlatParams {
        let mut rng = RngStream::new(StreamKey::new(self.init_seed, 0, INIT_PURPOSE));
        let mut theta = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for _ in 0..layer.param_count() {
                theta.push(rng.rng_mut().random_range(-bound..bound));
            }
        }
        FlatParams { theta }
    }

    fn check_args(&self, theta: &[f64], x: &[f64]) -> Result<(), NnError> {
        let n = self.param_count();
        if theta.len() != n {
            return Err(NnError::Dimension {
                what: "theta",
                got: theta.len(),
                expected: n,
            });
        }
        if x.len() != self.state_dim() {
            return Err(NnError::Dimension {
                what: "x",
                got: x.len(),
                expected: self.state_dim(),
            });
        }
        Ok(())
    }
}

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    pub theta: Vec<f64>,
}

/// One layer's parameters in matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `fan_out x fan_in`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FlatParams {
    pub fn unflatten(&self, spec: &MlpSpec) -> Result<Vec<LayerParams>, NnError> {
        if self.theta.len() != spec.param_count() {
            return Err(NnError::Dimension {
                what: "theta",
                got: self.theta.len(),
                expected: spec.param_count(),
            });
        }
        Ok(spec
            .layers()
            .iter()
            .map(|l| LayerParams {
                weights: self.theta[l.weight_offset..l.bias_offset].to_vec(),
                bias: self.theta[l.bias_offset..l.bias_offset + l.fan_out].to_vec(),
            })
            .collect())
    }

    pub fn flatten(layers: &[LayerParams]) -> Self {
        let mut theta = Vec::new();
        for l in layers {
            theta.extend_from_slice(&l.weights);
            theta.extend_from_slice(&l.bias);
        }
        Self { theta }
    }

    /// 16-byte header (magic, little-endian `u64` count) then the values as
    /// little-endian `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        w.write_all(&PARAM_MAGIC)?;
        w.write_all(&(self.theta.len() as u64).to_le_bytes())?;
        for v in &self.theta {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if header[..8] != PARAM_MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let n = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes")) as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * n {
            return Err(NnError::Format(format!("expected {} values, found {} bytes", n, bytes.len())));
        }
        let theta = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { theta })
    }

    /// `index,layer,kind,row,col,value` with `kind` in {weight, bias}.
    pub fn write_csv<W: Write>(&self, spec: &MlpSpec, mut w: W) -> Result<(), NnError> {
        writeln!(w, "index,layer,kind,row,col,value")?;
        for (li, l) in spec.layers().iter().enumerate() {
            for r in 0..l.fan_out {
                for c in 0..l.fan_in {
                    let idx = l.weight_offset + r * l.fan_in + c;
                    writeln!(w, "{idx},{li},weight,{r},{c},{:e}", self.theta[idx])?;
                }
            }
            for r in 0..l.fan_out {
                let idx = l.bias_offset + r;
                writeln!(w, "{idx},{li},bias,{r},,{:e}", self.theta[idx])?;
            }
        }
        Ok(())
    }
}

/// Activations of one forward pass, kept for the derivative sweeps.
struct Trace {
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

fn run_forward(spec: &MlpSpec, layers: &[LayerShape], theta: &[f64], t: f64, x: &[f64]) -> Trace {
    let mut input = Vec::with_capacity(spec.input_dim);
    input.push(t);
    input.extend_from_slice(x);
    let mut acts = vec![input];
    let mut pre = Vec::with_capacity(layers.len());
    let last = layers.len() - 1;
    for (li, l) in layers.iter().enumerate() {
        let a = &acts[li];
        let w = &theta[l.weight_offset..l.bias_offset];
        let b = &theta[l.bias_offset..l.bias_offset + l.fan_out];
        let z: Vec<f64> = (0..l.fan_out)
            .map(|r| {
                let row = &w[r * l.fan_in..(r + 1) * l.fan_in];
                b[r] + row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>()
            })
            .collect();
        let out = if li == last {
            z.clone()
        } else {
            z.iter().map(|&v| spec.activation.apply(v)).collect()
        };
        pre.push(z);
        acts.push(out);
    }
    Trace { acts, pre }
}

/// Network output `u(t, x)`.
pub fn forward(spec: &MlpSpec, theta: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>, NnError> {
    spec.check_args(theta, x)?;
    let layers = spec.layers();
    let mut tr = run_forward(spec, &layers, theta, t, x);
    Ok(tr.acts.pop().expect("at least one layer"))
}

/// Input Jacobian split into the state block and the time column.
#[derive(Debug, Clone, PartialEq)]
pub struct InputJacobian {
    /// `m x d`, row-major.
    pub x: Vec<f64>,
    /// `m`.
    pub t: Vec<f64>,
}

/// Everything one policy evaluation may need, sharing a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NetEval {
    pub output: Vec<f64>,
    pub jac: Option<InputJacobian>,
    /// `m x n`, row-major.
    pub grad_theta: Option<Vec<f64>>,
}

pub fn evaluate(
    spec: &MlpSpec,
    theta: &[f64],
    t: f64,
    x: &[f64],
    want_jac: bool,
    want_grad: bool,
) -> Result<NetEval, NnError> {
    spec.check_args(theta, x)?;
    let layers = spec.layers();
    let tr = run_forward(spec, &layers, theta, t, x);
    let jac = want_jac.then(|| input_jacobian(spec, &layers, theta, &tr));
    let grad_theta = want_grad.then(|| param_gradient(spec, &layers, theta, &tr));
    Ok(NetEval {
        output: tr.acts.last().expect("at least one layer").clone(),
        jac,
        grad_theta,
    })
}

/// Forward-mode sweep carrying the `width x input_dim` tangent.
fn input_jacobian(spec: &MlpSpec, layers: &[LayerShape], theta: &[f64], tr: &Trace) -> InputJacobian {
    let k = spec.input_dim;
    let mut tan = vec![0.0; k * k];
    for i in 0..k {
        tan[i * k + i] = 1.0;
    }
    let last = layers.len() - 1;
    for (li, l) in layers.iter().enumerate() {
        let w = &theta[l.weight_offset..l.bias_offset];
        let mut next = vec![0.0; l.fan_out * k];
        for r in 0..l.fan_out {
            let out = &mut next[r * k..(r + 1) * k];
            for c in 0..l.fan_in {
                let wrc = w[r * l.fan_in + c];
                if wrc == 0.0 {
                    continue;
                }
                for (o, tv) in out.iter_mut().zip(&tan[c * k..(c + 1) * k]) {
                    *o += wrc * tv;
                }
            }
            if li != last {
                let s = spec.activation.slope(tr.pre[li][r], tr.acts[li + 1][r]);
                for o in out.iter_mut() {
                    *o *= s;
                }
            }
        }
        tan = next;
    }
    let m = spec.output_dim;
    let d = k - 1;
    let mut jx = vec![0.0; m * d];
    let mut jt = vec![0.0; m];
    for o in 0..m {
        jt[o] = tan[o * k];
        jx[o * d..(o + 1) * d].copy_from_slice(&tan[o * k + 1..(o + 1) * k]);
    }
    InputJacobian { x: jx, t: jt }
}

/// Second-order forward sweep over the state inputs. Returns the state
/// Jacobian (`m x d`) and Hessian (`m x d x d`).
fn state_hessian(spec: &MlpSpec, layers: &[LayerShape], theta: &[f64], tr: &Trace) -> (Vec<f64>, Vec<f64>) {
    let d = spec.input_dim - 1;
    let dd = d * d;
    // Tangents and second tangents of the current activations; the time
    // input has no state derivative.
    let mut tan = vec![0.0; spec.input_dim * d];
    for a in 0..d {
        tan[(a + 1) * d + a] = 1.0;
    }
    let mut sec = vec![0.0; spec.input_dim * dd];
    let last = layers.len() - 1;
    for (li, l) in layers.iter().enumerate() {
        let w = &theta[l.weight_offset..l.bias_offset];
        let mut nt = vec![0.0; l.fan_out * d];
        let mut ns = vec![0.0; l.fan_out * dd];
        for r in 0..l.fan_out {
            let (ot, os) = (&mut nt[r * d..(r + 1) * d], &mut ns[r * dd..(r + 1) * dd]);
            for c in 0..l.fan_in {
                let wrc = w[r * l.fan_in + c];
                if wrc == 0.0 {
                    continue;
                }
                for (o, v) in ot.iter_mut().zip(&tan[c * d..(c + 1) * d]) {
                    *o += wrc * v;
                }
                for (o, v) in os.iter_mut().zip(&sec[c * dd..(c + 1) * dd]) {
                    *o += wrc * v;
                }
            }
            if li != last {
                let (z, act) = (tr.pre[li][r], tr.acts[li + 1][r]);
                let s1 = spec.activation.slope(z, act);
                let s2 = spec.activation.curvature(z, act);
                for a in 0..d {
                    for b in 0..d {
                        os[a * d + b] = s1 * os[a * d + b] + s2 * ot[a] * ot[b];
                    }
                }
                for o in ot.iter_mut() {
                    *o *= s1;
                }
            }
        }
        tan = nt;
        sec = ns;
    }
    (tan, sec)
}

/// State Hessian of every output, `m x d x d` row-major.
pub fn hess_x(spec: &MlpSpec, theta: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>, NnError> {
    spec.check_args(theta, x)?;
    let layers = spec.layers();
    let tr = run_forward(spec, &layers, theta, t, x);
    Ok(state_hessian(spec, &layers, theta, &tr).1)
}

/// Reverse sweep, one per output.
fn param_gradient(spec: &MlpSpec, layers: &[LayerShape], theta: &[f64], tr: &Trace) -> Vec<f64> {
    let m = spec.output_dim;
    let n = spec.param_count();
    let mut grad = vec![0.0; m * n];
    for o in 0..m {
        let g = &mut grad[o * n..(o + 1) * n];
        let mut delta = vec![0.0; m];
        delta[o] = 1.0;
        for li in (0..layers.len()).rev() {
            let l = &layers[li];
            let a = &tr.acts[li];
            for r in 0..l.fan_out {
                let dr = delta[r];
                if dr == 0.0 {
                    continue;
                }
                let row = &mut g[l.weight_offset + r * l.fan_in..l.weight_offset + (r + 1) * l.fan_in];
                for (gi, ai) in row.iter_mut().zip(a) {
                    *gi = dr * ai;
                }
                g[l.bias_offset + r] = dr;
            }
            if li == 0 {
                break;
            }
            let w = &theta[l.weight_offset..l.bias_offset];
            let mut prev = vec![0.0; l.fan_in];
            for r in 0..l.fan_out {
                let dr = delta[r];
                if dr == 0.0 {
                    continue;
                }
                for (p, wv) in prev.iter_mut().zip(&w[r * l.fan_in..(r + 1) * l.fan_in]) {
                    *p += dr * wv;
                }
            }
            for (c, p) in prev.iter_mut().enumerate() {
                *p *= spec.activation.slope(tr.pre[li - 1][c], tr.acts[li][c]);
            }
            delta = prev;
        }
    }
    grad
}

/// Parameter gradient of every output, `m x n` row-major.
pub fn grad_theta(spec: &MlpSpec, theta: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>, NnError> {
    Ok(evaluate(spec, theta, t, x, false, true)?.grad_theta.expect("requested"))
}

/// Input Jacobian; the state block is `m x d`.
pub fn jac_x(spec: &MlpSpec, theta: &[f64], t: f64, x: &[f64]) -> Result<InputJacobian, NnError> {
    Ok(evaluate(spec, theta, t, x, true, false)?.jac.expect("requested"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_hessian_matches_jacobian_differences() {
        let spec = MlpSpec::new(4, vec![6, 5], 2, Activation::Tanh, 3).unwrap();
        let theta = spec.init().theta;
        let (t, x) = (0.2, [0.3, -0.7, 1.1]);
        let h = hess_x(&spec, &theta, t, &x).unwrap();
        let step = 1e-5;
        for b in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[b] += step;
            xm[b] -= step;
            let (jp, jm) = (jac_x(&spec, &theta, t, &xp).unwrap(), jac_x(&spec, &theta, t, &xm).unwrap());
            for o in 0..2 {
                for a in 0..3 {
                    let fd = (jp.x[o * 3 + a] - jm.x[o * 3 + a]) / (2.0 * step);
                    let got = h[(o * 3 + a) * 3 + b];
                    assert!((got - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{o},{a},{b}: {got} vs {fd}");
                }
            }
        }
    }
    use crate::rng::{RngStream, StreamKey};

    fn spec(act: Activation) -> MlpSpec {
        MlpSpec::new(3, vec![4, 5], 2, act, 9).unwrap()
    }

    /// Straightforward evaluator over unflattened layers.
    fn reference(spec: &MlpSpec, params: &FlatParams, t: f64, x: &[f64]) -> Vec<f64> {
        let layers = params.unflatten(spec).unwrap();
        let mut a: Vec<f64> = std::iter::once(t).chain(x.iter().copied()).collect();
        for (li, l) in layers.iter().enumerate() {
            let fan_in = a.len();
            let mut z = l.bias.clone();
            for (r, zr) in z.iter_mut().enumerate() {
                for c in 0..fan_in {
                    *zr += l.weights[r * fan_in + c] * a[c];
                }
            }
            if li + 1 < layers.len() {
                for v in z.iter_mut() {
                    *v = match spec.activation {
                        Activation::Tanh => v.tanh(),
                        Activation::Relu => v.max(0.0),
                        Activation::Identity => *v,
                    };
                }
            }
            a = z;
        }
        a
    }

    #[test]
    fn param_count_formula() {
        let s = spec(Activation::Tanh);
        assert_eq!(s.param_count(), (3 + 1) * 4 + (4 + 1) * 5 + (5 + 1) * 2);
        assert_eq!(s.init().theta.len(), s.param_count());
        // equal-width three-hidden-layer policy over (t, x) with x in R^4
        for (w, n) in [(5, 102), (20, 1002), (50, 5502), (100, 21002)] {
            let s = MlpSpec::new(5, vec![w; 3], 2, Activation::Tanh, 0).unwrap();
            assert_eq!(s.param_count(), n);
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let s = spec(Activation::Tanh);
        let theta = vec![0.0; s.param_count()];
        assert_eq!(forward(&s, &theta, 0.3, &[1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_identity_layer() {
        let s = MlpSpec::new(3, vec![], 2, Activation::Identity, 0).unwrap();
        let theta = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(forward(&s, &theta, 0.5, &[2.0, 3.0]).unwrap(), vec![0.5, 2.0]);
    }

    #[test]
    fn matches_reference_evaluator() {
        for act in [Activation::Tanh, Activation::Relu] {
            let s = spec(act);
            let p = s.init();
            let mut rng = RngStream::new(StreamKey::new(1, 2, 3));
            for _ in 0..100 {
                let t = rng.uniform();
                let x = [rng.normal(), rng.normal()];
                let a = forward(&s, &p.theta, t, &x).unwrap();
                let b = reference(&s, &p, t, &x);
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_network_gradient_is_output_bias() {
        let s = spec(Activation::Tanh);
        let n = s.param_count();
        let g = grad_theta(&s, &vec![0.0; n], 0.1, &[0.4, 0.2]).unwrap();
        let out = *s.layers().last().unwrap();
        for o in 0..2 {
            for k in 0..n {
                let expected = if k == out.bias_offset + o { 1.0 } else { 0.0 };
                assert_eq!(g[o * n + k], expected, "output {o} coord {k}");
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let s = spec(Activation::Tanh);
        let p = s.init();
        let n = s.param_count();
        let step = 1e-6;
        let mut rng = RngStream::new(StreamKey::new(4, 0, 0));
        let close = |a: f64, f: f64| (a - f).abs() / f.abs().max(1.0) < 1e-5;
        for _ in 0..50 {
            let t = rng.uniform();
            let x = [rng.normal(), rng.normal()];
            let ev = evaluate(&s, &p.theta, t, &x, true, true).unwrap();
            let g = ev.grad_theta.unwrap();
            let j = ev.jac.unwrap();
            for k in 0..n {
                let mut tp = p.theta.clone();
                let mut tm = p.theta.clone();
                tp[k] += step;
                tm[k] -= step;
                let up = forward(&s, &tp, t, &x).unwrap();
                let um = forward(&s, &tm, t, &x).unwrap();
                for o in 0..2 {
                    assert!(close(g[o * n + k], (up[o] - um[o]) / (2.0 * step)));
                }
            }
            for a in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[a] += step;
                xm[a] -= step;
                let up = forward(&s, &p.theta, t, &xp).unwrap();
                let um = forward(&s, &p.theta, t, &xm).unwrap();
                for o in 0..2 {
                    assert!(close(j.x[o * 2 + a], (up[o] - um[o]) / (2.0 * step)));
                }
            }
            let up = forward(&s, &p.theta, t + step, &x).unwrap();
            let um = forward(&s, &p.theta, t - step, &x).unwrap();
            for o in 0..2 {
                assert!(close(j.t[o], (up[o] - um[o]) / (2.0 * step)));
            }
        }
    }

    #[test]
    fn output_layer_scaling_is_linear() {
        let s = spec(Activation::Tanh);
        let p = s.init();
        let out = *s.layers().last().unwrap();
        let mut scaled = p.theta.clone();
        for v in &mut scaled[out.weight_offset..] {
            *v *= 2.0;
        }
        let a = forward(&s, &p.theta, 0.2, &[0.3, -0.7]).unwrap();
        let b = forward(&s, &scaled, 0.2, &[0.3, -0.7]).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(2.0 * u, *v);
        }
    }

    #[test]
    fn flatten_roundtrip_and_binary() {
        let s = spec(Activation::Relu);
        let p = s.init();
        assert_eq!(FlatParams::flatten(&p.unflatten(&s).unwrap()), p);
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 8 * p.theta.len());
        assert_eq!(FlatParams::read_binary(&buf[..]).unwrap(), p);
        buf[0] = b'X';
        assert!(FlatParams::read_binary(&buf[..]).is_err());
    }

    #[test]
    fn csv_export_has_one_row_per_param() {
        let s = spec(Activation::Tanh);
        let p = s.init();
        let mut buf = Vec::new();
        p.write_csv(&s, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + s.param_count());
    }

    #[test]
    fn init_is_deterministic() {
        let s = spec(Activation::Tanh);
        assert_eq!(s.init(), s.init());
        let mut other = s.clone();
        other.init_seed += 1;
        assert_ne!(s.init(), other.init());
    }

    #[test]
    fn dimension_errors() {
        let s = spec(Activation::Tanh);
        assert!(forward(&s, &[0.0; 3], 0.0, &[0.0, 0.0]).is_err());
        assert!(forward(&s, &s.init().theta, 0.0, &[0.0]).is_err());
        assert!(MlpSpec::new(3, vec![0], 1, Activation::Tanh, 0).is_err());
    }
}
