//! Feed-forward networks with hand-written reverse mode, Adam, early stopping.
//!
//! Parameters live in one flat buffer per network, laid out layer by layer as
//! `W_l` (in×out, row-major) followed by `b_l` (out). Gradients share the
//! layout, so optimizer state is a pair of flat vectors.

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::matstat::{Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Elu,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    activation: Activation,
    /// Whether the last layer is followed by the activation too.
    activate_output: bool,
    params: Vec<f64>,
    #[serde(skip)]
    generation: u64,
}

/// Values recorded by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
}

impl Mlp {
    /// Fan-in scaled uniform initialisation: every weight and bias of a layer
    /// with fan-in `f` is drawn from U(-1/√f, 1/√f).
    pub fn new(layer_dims: &[usize], activation: Activation, activate_output: bool, rng: &mut SeededRng) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidConfig {
                field: "layer_dims".into(),
                reason: format!("need at least two positive widths, got {layer_dims:?}"),
            });
        }
        let mut params = Vec::with_capacity(param_count(layer_dims));
        for w in layer_dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] + w[1] {
                params.push(rng.uniform_range(-bound, bound));
            }
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            activate_output,
            params,
            generation: 0,
        })
    }

    /// Network with the given flat parameters.
    pub fn from_params(layer_dims: &[usize], activation: Activation, activate_output: bool, params: Vec<f64>) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidConfig {
                field: "layer_dims".into(),
                reason: format!("need at least two positive widths, got {layer_dims:?}"),
            });
        }
        let expected = param_count(layer_dims);
        if params.len() != expected {
            return Err(dim_mismatch("Mlp::from_params", expected, params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                what: "network parameters".into(),
            });
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            activate_output,
            params,
            generation: 0,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn activates_output(&self) -> bool {
        self.activate_output
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access. Bumps the generation, invalidating tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Offsets of `(W_l, b_l)` in the flat buffer.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.layer_dims[..=l].windows(2) {
            off += w[0] * w[1] + w[1];
        }
        let (i, o) = (self.layer_dims[l], self.layer_dims[l + 1]);
        (off, off + i * o)
    }

    /// Named parameter blocks as `(name, start, end)`.
    pub fn blocks(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::with_capacity(2 * self.num_layers());
        for l in 0..self.num_layers() {
            let (w, b) = self.layer_offsets(l);
            out.push((format!("layer{l}.weight"), w, b));
            out.push((format!("layer{l}.bias"), b, b + self.layer_dims[l + 1]));
        }
        out
    }

    fn activated(&self, l: usize) -> bool {
        l + 1 < self.num_layers() || self.activate_output
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        if x.cols() != self.input_dim() {
            return Err(dim_mismatch("Mlp::forward", format!("{} input columns", self.input_dim()), x.cols()));
        }
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut h = x.clone();
        for l in 0..self.num_layers() {
            let z = self.affine(l, &h);
            let a = if self.activated(l) {
                let act = self.activation;
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
                a
            } else {
                z.clone()
            };
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        Ok((
            h,
            Tape {
                generation: self.generation,
                inputs,
                pre,
            },
        ))
    }

    /// Forward pass without recording.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(dim_mismatch("Mlp::predict", format!("{} input columns", self.input_dim()), x.cols()));
        }
        let mut h = x.clone();
        for l in 0..self.num_layers() {
            let mut z = self.affine(l, &h);
            if self.activated(l) {
                let act = self.activation;
                z.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            h = z;
        }
        Ok(h)
    }

    fn affine(&self, l: usize, x: &Matrix) -> Matrix {
        let (wo, bo) = self.layer_offsets(l);
        let (din, dout) = (self.layer_dims[l], self.layer_dims[l + 1]);
        let w = &self.params[wo..bo];
        let b = &self.params[bo..bo + dout];
        let n = x.rows();
        let mut out = Matrix::zeros(n, dout);
        for i in 0..n {
            let xi = x.row(i);
            let oi = out.row_mut(i);
            oi.copy_from_slice(b);
            for (k, &xk) in xi.iter().enumerate().take(din) {
                if xk == 0.0 {
                    continue;
                }
                let wk = &w[k * dout..(k + 1) * dout];
                for (o, wv) in oi.iter_mut().zip(wk) {
                    *o += xk * wv;
                }
            }
        }
        out
    }

    /// Reverse pass: gradients of a scalar loss whose derivative with respect
    /// to the output is `dy`. Returns `(parameter gradient, dX)`.
    pub fn backward(&self, tape: &Tape, dy: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        if tape.generation != self.generation {
            return Err(Error::StaleTape {
                tape: tape.generation,
                current: self.generation,
            });
        }
        let n = tape.inputs[0].rows();
        if dy.shape() != (n, self.output_dim()) {
            return Err(dim_mismatch(
                "Mlp::backward",
                format!("{n}x{}", self.output_dim()),
                format!("{:?}", dy.shape()),
            ));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut upstream = dy.clone();
        for l in (0..self.num_layers()).rev() {
            let (din, dout) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let mut dz = upstream;
            if self.activated(l) {
                let act = self.activation;
                for (g, z) in dz.as_mut_slice().iter_mut().zip(tape.pre[l].as_slice()) {
                    *g *= act.derivative(*z);
                }
            }
            let (wo, bo) = self.layer_offsets(l);
            let input = &tape.inputs[l];
            {
                let (gw, gb) = grad[wo..bo + dout].split_at_mut(bo - wo);
                for i in 0..n {
                    let dzi = dz.row(i);
                    for (b, d) in gb.iter_mut().zip(dzi) {
                        *b += d;
                    }
                    for (k, &xk) in input.row(i).iter().enumerate() {
                        if xk == 0.0 {
                            continue;
                        }
                        for (g, d) in gw[k * dout..(k + 1) * dout].iter_mut().zip(dzi) {
                            *g += xk * d;
                        }
                    }
                }
            }
            let w = &self.params[wo..bo];
            let mut dx = Matrix::zeros(n, din);
            for i in 0..n {
                let dzi = dz.row(i);
                let dxi = dx.row_mut(i);
                for (k, out) in dxi.iter_mut().enumerate() {
                    *out = crate::matstat::dot(&w[k * dout..(k + 1) * dout], dzi);
                }
            }
            upstream = dx;
        }
        Ok((grad, upstream))
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// lr 1e-3, weight decay 1e-4.
    pub fn for_net(net: &Mlp) -> Self {
        Self::new(net.params().len(), 1e-3, 1e-4)
    }
}

/// One Adam update with decoupled weight decay: `p ← p·(1 - lr·wd)` and then
/// the bias-corrected Adam delta.
pub fn adam_step(net: &mut Mlp, grads: &[f64], state: &mut AdamState) -> Result<()> {
    if grads.len() != net.params.len() || state.m.len() != grads.len() || state.v.len() != grads.len() {
        return Err(dim_mismatch(
            "adam_step",
            net.params.len(),
            format!("grads {}, moments {}/{}", grads.len(), state.m.len(), state.v.len()),
        ));
    }
    for (name, s, e) in net.blocks() {
        if grads[s..e].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { block: name });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let decay = 1.0 - state.lr * state.weight_decay;
    let params = net.params_mut();
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        *p = *p * decay - state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    if net.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            what: "parameters after update".into(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub metric: String,
    pub higher_is_better: bool,
    pub best_metric: Option<f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(metric: impl Into<String>, patience: usize, higher_is_better: bool) -> Self {
        Self {
            patience,
            metric: metric.into(),
            higher_is_better,
            best_metric: None,
            best_epoch: 0,
        }
    }

    /// Record the metric for `epoch`. A non-finite value never counts as an
    /// improvement.
    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        let better = value.is_finite()
            && match self.best_metric {
                None => true,
                Some(b) => {
                    if self.higher_is_better {
                        value > b
                    } else {
                        value < b
                    }
                }
            };
        if better {
            self.best_metric = Some(value);
            self.best_epoch = epoch;
        }
        StopDecision {
            improved: better,
            stop: epoch.saturating_sub(self.best_epoch) > self.patience,
        }
    }
}
