//! Reverse-mode gradients for small MLPs built from dense and
//! adapter-wrapped linear layers, plus Adam with decoupled weight decay.
//!
//! The forward pass records each layer's input and pre-activation on a
//! [`Tape`]; the backward pass walks the tape in reverse and accumulates into
//! [`Param::grad`]. Frozen parameters are skipped at accumulation time, so
//! their gradients stay zero.

use crate::adapters::LinearAdapter;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
}

impl Param {
    pub fn trainable(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(value: Matrix) -> Self {
        let mut p = Self::trainable(value);
        p.trainable = false;
        p
    }

    /// Adds `g` to the gradient of a trainable parameter; no-op when frozen.
    pub fn accumulate(&mut self, g: &Matrix) {
        if self.trainable {
            self.grad.axpy(1.0, g);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Matrix,
    v: Matrix,
}

/// Adam state for a fixed, ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update with decoupled weight decay:
    ///
    /// ```text
    /// θ ← θ − lr·( m̂ / (√v̂ + ε) + wd·θ )
    /// ```
    ///
    /// Only trainable parameters move. Every gradient is cleared afterwards.
    /// The parameter list must have the same order and shapes on every call.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: Matrix::zeros(p.value.rows(), p.value.cols()),
                    v: Matrix::zeros(p.value.rows(), p.value.cols()),
                })
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter list changed between steps");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (p, mom) in params.iter_mut().zip(self.moments.iter_mut()) {
            assert_eq!(p.value.shape(), mom.m.shape(), "parameter shape changed between steps");
            if p.trainable {
                let g = p.grad.data();
                let theta = p.value.data_mut();
                let m = mom.m.data_mut();
                let v = mom.v.data_mut();
                for i in 0..theta.len() {
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    theta[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * theta[i]);
                }
            }
            p.zero_grad();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
pub enum Linear {
    Dense { weight: Param, bias: Param },
    Adapted { adapter: Box<LinearAdapter>, bias: Param },
}

impl Linear {
    pub fn dense(weight: Matrix, bias: Matrix) -> Self {
        Linear::Dense {
            weight: Param::trainable(weight),
            bias: Param::trainable(bias),
        }
    }

    pub fn in_features(&self) -> usize {
        match self {
            Linear::Dense { weight, .. } => weight.value.cols(),
            Linear::Adapted { adapter, .. } => adapter.shape().1,
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            Linear::Dense { weight, .. } => weight.value.rows(),
            Linear::Adapted { adapter, .. } => adapter.shape().0,
        }
    }

    pub fn bias(&self) -> &Param {
        match self {
            Linear::Dense { bias, .. } | Linear::Adapted { bias, .. } => bias,
        }
    }

    /// The frozen (or, for dense layers, current) base weight.
    pub fn base_weight(&self) -> &Matrix {
        match self {
            Linear::Dense { weight, .. } => &weight.value,
            Linear::Adapted { adapter, .. } => adapter.base(),
        }
    }

    pub fn adapter(&self) -> Option<&LinearAdapter> {
        match self {
            Linear::Adapted { adapter, .. } => Some(adapter),
            Linear::Dense { .. } => None,
        }
    }

    pub fn adapter_mut(&mut self) -> Option<&mut LinearAdapter> {
        match self {
            Linear::Adapted { adapter, .. } => Some(adapter),
            Linear::Dense { .. } => None,
        }
    }

    fn forward(&self, x: &Matrix, ranks: Option<&[usize]>) -> Matrix {
        let mut y = match self {
            Linear::Dense { weight, .. } => weight.value.matmul(x),
            Linear::Adapted { adapter, .. } => adapter.forward_ranks(x, ranks.expect("ranks computed")),
        };
        add_bias(&mut y, &self.bias().value);
        y
    }

    fn backward(&mut self, x: &Matrix, dy: &Matrix, ranks: Option<&[usize]>, need_dx: bool) -> Option<Matrix> {
        match self {
            Linear::Dense { weight, bias } => {
                if weight.trainable {
                    weight.accumulate(&dy.matmul_t(x));
                }
                if bias.trainable {
                    bias.accumulate(&row_sums(dy));
                }
                need_dx.then(|| weight.value.t_matmul(dy))
            }
            Linear::Adapted { adapter, bias } => {
                if bias.trainable {
                    bias.accumulate(&row_sums(dy));
                }
                adapter.backward_ranks(x, dy, ranks.expect("ranks computed"), need_dx)
            }
        }
    }
}

fn add_bias(y: &mut Matrix, bias: &Matrix) {
    for i in 0..y.rows() {
        let b = bias.get(i, 0);
        y.row_mut(i).iter_mut().for_each(|v| *v += b);
    }
}

fn row_sums(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), 1, |i, _| m.row(i).iter().sum())
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub linear: Linear,
    pub activation: Activation,
}

/// Values recorded by [`Mlp::forward_tape`] for the backward pass.
pub struct Tape {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    ranks: Vec<Option<Vec<usize>>>,
}

#[derive(Clone, Debug, Default)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Mean over all entries of `(pred − target)²`.
pub fn mse(pred: &Matrix, target: &Matrix) -> f64 {
    let n = pred.data().len() as f64;
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    fn check_batch(&self, x: &Matrix, timesteps: &[usize]) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::domain("network has no layers"))?;
        if x.rows() != first.linear.in_features() {
            return Err(Error::domain(format!(
                "input has {} features, network expects {}",
                x.rows(),
                first.linear.in_features()
            )));
        }
        if timesteps.len() != x.cols() {
            return Err(Error::domain(format!(
                "{} timesteps for a batch of {}",
                timesteps.len(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix, timesteps: &[usize]) -> Result<Matrix> {
        Ok(self.forward_tape(x, timesteps)?.0)
    }

    /// Forward pass over a batch whose columns carry their own timesteps.
    pub fn forward_tape(&self, x: &Matrix, timesteps: &[usize]) -> Result<(Matrix, Tape)> {
        self.check_batch(x, timesteps)?;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            ranks: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for layer in &self.layers {
            let ranks = match &layer.linear {
                Linear::Adapted { adapter, .. } => Some(
                    timesteps
                        .iter()
                        .map(|&t| adapter.active_rank(t))
                        .collect::<Result<Vec<_>>>()?,
                ),
                Linear::Dense { .. } => None,
            };
            let z = layer.linear.forward(&h, ranks.as_deref());
            let out = z.map(|v| layer.activation.apply(v));
            tape.inputs.push(std::mem::replace(&mut h, out));
            tape.pre.push(z);
            tape.ranks.push(ranks);
        }
        Ok((h, tape))
    }

    /// Backpropagates `dout` (gradient w.r.t. the network output) through the tape.
    pub fn backward(&mut self, tape: Tape, dout: Matrix) {
        let mut grad = dout;
        for (idx, layer) in self.layers.iter_mut().enumerate().rev() {
            let pre = &tape.pre[idx];
            let mut dz = grad;
            for (g, &z) in dz.data_mut().iter_mut().zip(pre.data()) {
                *g *= layer.activation.derivative(z);
            }
            let need_dx = idx > 0;
            match layer
                .linear
                .backward(&tape.inputs[idx], &dz, tape.ranks[idx].as_deref(), need_dx)
            {
                Some(dx) => grad = dx,
                None => break,
            }
        }
    }

    /// MSE loss against `target`, with gradients accumulated into every trainable parameter.
    pub fn forward_backward(&mut self, x: &Matrix, timesteps: &[usize], target: &Matrix) -> Result<f64> {
        self.forward_backward_reg(x, timesteps, target, 0.0)
    }

    /// As [`Mlp::forward_backward`], plus `λ·Σ_layers (‖AAᵀ − I‖² + ‖BᵀB − I‖²)`
    /// over adapted layers when `lambda_reg > 0`.
    pub fn forward_backward_reg(
        &mut self,
        x: &Matrix,
        timesteps: &[usize],
        target: &Matrix,
        lambda_reg: f64,
    ) -> Result<f64> {
        let (out, tape) = self.forward_tape(x, timesteps)?;
        if out.shape() != target.shape() {
            return Err(Error::domain(format!(
                "target shape {:?} differs from output {:?}",
                target.shape(),
                out.shape()
            )));
        }
        let loss = mse(&out, target);
        let scale = 2.0 / out.data().len() as f64;
        let dout = out.sub(target).scale(scale);
        self.backward(tape, dout);
        let mut penalty = 0.0;
        for layer in &mut self.layers {
            if let Some(adapter) = layer.linear.adapter_mut() {
                penalty += adapter.accumulate_penalty(lambda_reg);
            }
        }
        let total = loss + penalty;
        if !total.is_finite() {
            return Err(Error::Numerical(format!("loss is {total}")));
        }
        Ok(total)
    }

    /// Loss without touching gradients; same objective as [`Mlp::forward_backward_reg`].
    pub fn loss(&self, x: &Matrix, timesteps: &[usize], target: &Matrix, lambda_reg: f64) -> Result<f64> {
        let out = self.forward(x, timesteps)?;
        let mut total = mse(&out, target);
        if lambda_reg != 0.0 {
            for layer in &self.layers {
                if let Some(ad) = layer.linear.adapter() {
                    total += crate::adapters::adalora_penalty(&ad.a.value, &ad.b.value, lambda_reg);
                }
            }
        }
        Ok(total)
    }

    /// Every parameter, named `<layer>.<W|b|A|B|S>`, in a stable order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let name = &layer.name;
            match &mut layer.linear {
                Linear::Dense { weight, bias } => {
                    out.push((format!("{name}.W"), weight));
                    out.push((format!("{name}.b"), bias));
                }
                Linear::Adapted { adapter, bias } => {
                    for (suffix, p) in adapter.params_mut() {
                        out.push((format!("{name}.{suffix}"), p));
                    }
                    out.push((format!("{name}.b"), bias));
                }
            }
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let name = &layer.name;
            match &layer.linear {
                Linear::Dense { weight, bias } => {
                    out.push((format!("{name}.W"), weight));
                    out.push((format!("{name}.b"), bias));
                }
                Linear::Adapted { adapter, bias } => {
                    for (suffix, p) in adapter.params() {
                        out.push((format!("{name}.{suffix}"), p));
                    }
                    out.push((format!("{name}.b"), bias));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.trainable = trainable;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Relative gradient error of one trainable parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    /// `‖g_analytic − g_fd‖₂ / max(‖g_analytic‖₂, ‖g_fd‖₂)`, zero when both vanish.
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.rel_error))
    }
}

/// Compares analytic gradients of every trainable parameter with central
/// finite differences of step `h`.
pub fn gradient_check(
    net: &Mlp,
    x: &Matrix,
    timesteps: &[usize],
    target: &Matrix,
    lambda_reg: f64,
    h: f64,
) -> Result<GradCheckReport> {
    let mut analytic = net.clone();
    analytic.zero_grad();
    analytic.forward_backward_reg(x, timesteps, target, lambda_reg)?;
    let grads: Vec<(String, bool, Matrix)> = analytic
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.trainable, p.grad.clone()))
        .collect();

    let mut probe = net.clone();
    let mut entries = Vec::new();
    for (idx, (name, trainable, g)) in grads.into_iter().enumerate() {
        if !trainable {
            continue;
        }
        let len = g.data().len();
        let mut fd = vec![0.0; len];
        for (e, slot) in fd.iter_mut().enumerate() {
            let orig = probe.params_mut()[idx].value.data()[e];
            probe.params_mut()[idx].value.data_mut()[e] = orig + h;
            let up = probe.loss(x, timesteps, target, lambda_reg)?;
            probe.params_mut()[idx].value.data_mut()[e] = orig - h;
            let down = probe.loss(x, timesteps, target, lambda_reg)?;
            probe.params_mut()[idx].value.data_mut()[e] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = g
            .data()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = g.frobenius_norm();
        let nf = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = na.max(nf);
        let rel_error = if denom == 0.0 { 0.0 } else { diff / denom };
        entries.push(GradCheckEntry { name, rel_error });
    }
    Ok(GradCheckReport { entries })
}
