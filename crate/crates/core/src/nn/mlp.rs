use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::loss::sigmoid;
use super::matrix::{axpy, dot, Matrix};
use crate::error::{ensure, Error, Result};
use crate::rng::rng_from_seed;

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One dense layer: affine map, optional batch norm, activation, dropout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub batchnorm: bool,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec { in_dim, out_dim, activation, dropout: 0.0, batchnorm: false }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn with_batchnorm(mut self, on: bool) -> Self {
        self.batchnorm = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.in_dim >= 1 && self.out_dim >= 1,
            Config,
            "layer dims must be positive, got {}x{}",
            self.in_dim,
            self.out_dim
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            Config,
            "dropout {} outside [0, 1)",
            self.dropout
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn identity(dim: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }
}

/// Parameters of one layer. `weights` is `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub batchnorm: Option<BatchNorm>,
}

/// A feed-forward stack of [`DenseLayer`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr", into = "MlpRepr")]
pub struct Mlp {
    specs: Vec<LayerSpec>,
    layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    pub input: Option<Matrix>,
    /// `x W^T + b`.
    pub linear: Option<Matrix>,
    /// Normalized linear output (batch statistics in Train, running in Eval).
    pub normalized: Option<Matrix>,
    pub batch_mean: Option<Vec<f64>>,
    pub batch_var: Option<Vec<f64>>,
    /// Input to the activation function.
    pub pre_activation: Option<Matrix>,
    /// Activation output before dropout.
    pub activation: Option<Matrix>,
    /// Inverted-dropout multipliers (0 or 1/(1-p)); `None` means all ones.
    pub mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

/// Gradients shape-congruent with an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        let layers = mlp
            .layers
            .iter()
            .map(|l| LayerGrads {
                weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                bias: vec![0.0; l.bias.len()],
                gamma: l.batchnorm.as_ref().map(|b| vec![0.0; b.gamma.len()]),
                beta: l.batchnorm.as_ref().map(|b| vec![0.0; b.beta.len()]),
            })
            .collect();
        Gradients { layers }
    }

    /// Flat views in the same order as [`Mlp::param_slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
            if let (Some(g), Some(b)) = (&l.gamma, &l.beta) {
                out.push(g.as_slice());
                out.push(b.as_slice());
            }
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Mlp {
    /// Random initialization: weights uniform in ±sqrt(6/(in+out)), zero bias,
    /// identity batch norm.
    pub fn new(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_specs(&specs)?;
        let mut rng = rng_from_seed(seed);
        let layers = specs
            .iter()
            .map(|s| {
                let bound = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
                let w = (0..s.in_dim * s.out_dim)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                DenseLayer {
                    weights: Matrix::from_raw(s.out_dim, s.in_dim, w),
                    bias: vec![0.0; s.out_dim],
                    batchnorm: s.batchnorm.then(|| BatchNorm::identity(s.out_dim)),
                }
            })
            .collect();
        Ok(Mlp { specs, layers })
    }

    /// All weights and biases zero; batch norm at identity.
    pub fn zeros(specs: Vec<LayerSpec>) -> Result<Self> {
        let mut m = Mlp::new(specs, 0)?;
        for l in &mut m.layers {
            l.weights.as_mut_slice().fill(0.0);
        }
        Ok(m)
    }

    pub fn from_parts(specs: Vec<LayerSpec>, layers: Vec<DenseLayer>) -> Result<Self> {
        validate_specs(&specs)?;
        ensure!(
            specs.len() == layers.len(),
            Shape,
            "{} specs for {} layers",
            specs.len(),
            layers.len()
        );
        for (i, (s, l)) in specs.iter().zip(&layers).enumerate() {
            l.weights.check_shape(s.out_dim, s.in_dim, &format!("layer {i} weights"))?;
            ensure!(l.bias.len() == s.out_dim, Shape, "layer {i} bias length");
            ensure!(
                l.bias.iter().all(|v| v.is_finite()),
                NonFinite,
                "layer {i} bias"
            );
            match (&l.batchnorm, s.batchnorm) {
                (Some(bn), true) => {
                    for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                        ensure!(v.len() == s.out_dim, Shape, "layer {i} batchnorm length");
                        ensure!(
                            v.iter().all(|x| x.is_finite()),
                            NonFinite,
                            "layer {i} batchnorm"
                        );
                    }
                    ensure!(
                        bn.running_var.iter().all(|&v| v > 0.0),
                        Config,
                        "layer {i}: running variance must be positive"
                    );
                }
                (None, false) => {}
                _ => {
                    return Err(Error::Shape(format!(
                        "layer {i}: batchnorm state does not match spec"
                    )))
                }
            }
        }
        Ok(Mlp { specs, layers })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].out_dim
    }

    /// Flat views of every trainable block: per layer weights, bias and, when
    /// present, gamma and beta. Running statistics are excluded.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
            if let Some(bn) = &l.batchnorm {
                out.push(bn.gamma.as_slice());
                out.push(bn.beta.as_slice());
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
            if let Some(bn) = &mut l.batchnorm {
                out.push(bn.gamma.as_mut_slice());
                out.push(bn.beta.as_mut_slice());
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Feeds every parameter and running statistic, bit for bit, into `hasher`.
    pub fn hash_into(&self, hasher: &mut Sha256) {
        for l in &self.layers {
            for v in l.weights.as_slice().iter().chain(&l.bias) {
                hasher.update(v.to_bits().to_le_bytes());
            }
            if let Some(bn) = &l.batchnorm {
                for v in bn.gamma.iter().chain(&bn.beta).chain(&bn.running_mean).chain(&bn.running_var) {
                    hasher.update(v.to_bits().to_le_bytes());
                }
            }
        }
    }

    /// SHA-256 over the exact bit patterns of all state.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        hex::encode(h.finalize())
    }

    /// Runs the network. Dropout masks are drawn from `seed` in Train mode,
    /// so the same seed reproduces the same masks.
    pub fn forward(&self, x: &Matrix, mode: Mode, seed: u64) -> Result<(Matrix, ForwardTrace)> {
        self.run(x, mode, seed, true)
    }

    /// Eval-mode forward without keeping a trace.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.run(x, Mode::Eval, 0, false)?.0)
    }

    fn run(&self, x: &Matrix, mode: Mode, seed: u64, keep: bool) -> Result<(Matrix, ForwardTrace)> {
        ensure!(
            x.cols() == self.in_dim(),
            Shape,
            "input has {} columns, network expects {}",
            x.cols(),
            self.in_dim()
        );
        let n = x.rows();
        let mut rng = rng_from_seed(seed);
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (spec, layer) in self.specs.iter().zip(&self.layers) {
            let mut t = LayerTrace::default();
            let mut z = Matrix::zeros(n, spec.out_dim);
            for r in 0..n {
                let xr = current.row(r);
                let zr = z.row_mut(r);
                for (o, zo) in zr.iter_mut().enumerate() {
                    *zo = dot(xr, layer.weights.row(o)) + layer.bias[o];
                }
            }
            let pre = if let Some(bn) = &layer.batchnorm {
                let (mean, var) = match mode {
                    Mode::Train => {
                        let (m, v) = column_moments(&z);
                        (m, v)
                    }
                    Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = z.clone();
                let mut y = z.clone();
                for r in 0..n {
                    let xr = xhat.row_mut(r);
                    for j in 0..spec.out_dim {
                        xr[j] = (xr[j] - mean[j]) * inv_std[j];
                    }
                    let yr = y.row_mut(r);
                    for j in 0..spec.out_dim {
                        yr[j] = bn.gamma[j] * xr[j] + bn.beta[j];
                    }
                }
                if keep {
                    t.normalized = Some(xhat);
                    if mode == Mode::Train {
                        t.batch_mean = Some(mean);
                        t.batch_var = Some(var);
                    }
                }
                y
            } else {
                z.clone()
            };
            let mut a = pre.map(|v| spec.activation.apply(v));
            if keep {
                t.input = Some(current);
                t.linear = Some(z);
                t.pre_activation = Some(pre);
            }
            if mode == Mode::Train && spec.dropout > 0.0 {
                let keep_p = 1.0 - spec.dropout;
                let scale = 1.0 / keep_p;
                let mask: Vec<f64> = (0..a.as_slice().len())
                    .map(|_| if rng.random::<f64>() < keep_p { scale } else { 0.0 })
                    .collect();
                if keep {
                    t.activation = Some(a.clone());
                }
                for (v, m) in a.as_mut_slice().iter_mut().zip(&mask) {
                    *v *= m;
                }
                if keep {
                    t.mask = Some(mask);
                }
            } else if keep {
                t.activation = Some(a.clone());
            }
            current = a;
            if keep {
                traces.push(t);
            }
        }
        current.ensure_finite("network output")?;
        Ok((current, ForwardTrace { mode, layers: traces }))
    }

    /// Exact reverse-mode gradients of the traced computation.
    ///
    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &Matrix) -> Result<(Gradients, Matrix)> {
        ensure!(
            trace.layers.len() == self.layers.len(),
            Shape,
            "trace has {} layers, network has {}",
            trace.layers.len(),
            self.layers.len()
        );
        let n = upstream.rows();
        upstream.check_shape(n, self.out_dim(), "upstream gradient")?;
        let mut grads = Gradients::zeros_like(self);
        let mut delta = upstream.clone();
        for (li, ((spec, layer), t)) in self
            .specs
            .iter()
            .zip(&self.layers)
            .zip(&trace.layers)
            .enumerate()
            .rev()
        {
            let (Some(input), Some(pre), Some(act)) = (&t.input, &t.pre_activation, &t.activation)
            else {
                return Err(Error::Shape(format!("layer {li}: incomplete trace")));
            };
            ensure!(input.rows() == n, Shape, "layer {li}: trace batch size differs");
            if let Some(mask) = &t.mask {
                for (d, m) in delta.as_mut_slice().iter_mut().zip(mask) {
                    *d *= m;
                }
            }
            // through the activation
            for ((d, &z), &a) in delta
                .as_mut_slice()
                .iter_mut()
                .zip(pre.as_slice())
                .zip(act.as_slice())
            {
                *d *= spec.activation.derivative(z, a);
            }
            let g = &mut grads.layers[li];
            if let Some(bn) = &layer.batchnorm {
                let xhat = t
                    .normalized
                    .as_ref()
                    .ok_or_else(|| Error::Shape(format!("layer {li}: missing batchnorm trace")))?;
                let dim = spec.out_dim;
                let mut dgamma = vec![0.0; dim];
                let mut dbeta = vec![0.0; dim];
                for r in 0..n {
                    let dr = delta.row(r);
                    let xr = xhat.row(r);
                    for j in 0..dim {
                        dbeta[j] += dr[j];
                        dgamma[j] += dr[j] * xr[j];
                    }
                }
                match (trace.mode, &t.batch_var) {
                    (Mode::Train, Some(var)) => {
                        // dz = inv_std/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                        let nf = n as f64;
                        let mut sum_dx = vec![0.0; dim];
                        let mut sum_dx_x = vec![0.0; dim];
                        for r in 0..n {
                            let dr = delta.row(r);
                            let xr = xhat.row(r);
                            for j in 0..dim {
                                let dx = dr[j] * bn.gamma[j];
                                sum_dx[j] += dx;
                                sum_dx_x[j] += dx * xr[j];
                            }
                        }
                        let inv_std: Vec<f64> =
                            var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                        for r in 0..n {
                            let xr = xhat.row(r).to_vec();
                            let dr = delta.row_mut(r);
                            for j in 0..dim {
                                let dx = dr[j] * bn.gamma[j];
                                dr[j] = inv_std[j] / nf
                                    * (nf * dx - sum_dx[j] - xr[j] * sum_dx_x[j]);
                            }
                        }
                    }
                    _ => {
                        let scale: Vec<f64> = bn
                            .gamma
                            .iter()
                            .zip(&bn.running_var)
                            .map(|(g, v)| g / (v + BN_EPS).sqrt())
                            .collect();
                        for r in 0..n {
                            for (d, s) in delta.row_mut(r).iter_mut().zip(&scale) {
                                *d *= s;
                            }
                        }
                    }
                }
                g.gamma = Some(dgamma);
                g.beta = Some(dbeta);
            }
            let in_dim = spec.in_dim;
            let mut dx = Matrix::zeros(n, in_dim);
            {
                let gw = g.weights.as_mut_slice();
                for r in 0..n {
                    let dr = delta.row(r);
                    let xr = input.row(r);
                    for (o, &d) in dr.iter().enumerate() {
                        if d != 0.0 {
                            axpy(d, xr, &mut gw[o * in_dim..(o + 1) * in_dim]);
                        }
                        g.bias[o] += d;
                    }
                }
                for r in 0..n {
                    let dr = delta.row(r);
                    let out = dx.row_mut(r);
                    for (o, &d) in dr.iter().enumerate() {
                        if d != 0.0 {
                            axpy(d, layer.weights.row(o), out);
                        }
                    }
                }
            }
            delta = dx;
        }
        Ok((grads, delta))
    }

    /// Folds the batch statistics of a Train-mode trace into the running
    /// estimates (momentum [`BN_MOMENTUM`], unbiased variance).
    pub fn commit_batch_stats(&mut self, trace: &ForwardTrace) {
        if trace.mode != Mode::Train {
            return;
        }
        for (layer, t) in self.layers.iter_mut().zip(&trace.layers) {
            let (Some(bn), Some(mean), Some(var)) = (&mut layer.batchnorm, &t.batch_mean, &t.batch_var)
            else {
                continue;
            };
            let n = t.input.as_ref().map_or(1, |m| m.rows());
            let correction = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
            for j in 0..mean.len() {
                bn.running_mean[j] = (1.0 - BN_MOMENTUM) * bn.running_mean[j] + BN_MOMENTUM * mean[j];
                bn.running_var[j] =
                    (1.0 - BN_MOMENTUM) * bn.running_var[j] + BN_MOMENTUM * var[j] * correction;
                bn.running_var[j] = bn.running_var[j].max(f64::MIN_POSITIVE);
            }
        }
    }
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    ensure!(!specs.is_empty(), Config, "network needs at least one layer");
    for s in specs {
        s.validate()?;
    }
    for (i, w) in specs.windows(2).enumerate() {
        ensure!(
            w[0].out_dim == w[1].in_dim,
            Config,
            "layer {i} outputs {} but layer {} expects {}",
            w[0].out_dim,
            i + 1,
            w[1].in_dim
        );
    }
    Ok(())
}

/// Per-column mean and biased variance.
fn column_moments(z: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = z.rows() as f64;
    let mut mean = vec![0.0; z.cols()];
    for r in z.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; z.cols()];
    for r in z.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    weights: Vec<f64>,
    bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    batchnorm: Option<BatchNorm>,
}

#[derive(Serialize, Deserialize)]
struct MlpRepr {
    specs: Vec<LayerSpec>,
    layers: Vec<LayerRepr>,
}

impl From<Mlp> for MlpRepr {
    fn from(m: Mlp) -> Self {
        MlpRepr {
            specs: m.specs,
            layers: m
                .layers
                .into_iter()
                .map(|l| LayerRepr {
                    weights: l.weights.into_vec(),
                    bias: l.bias,
                    batchnorm: l.batchnorm,
                })
                .collect(),
        }
    }
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = Error;

    fn try_from(r: MlpRepr) -> Result<Self> {
        ensure!(r.specs.len() == r.layers.len(), Shape, "specs and layers differ in count");
        let layers = r
            .specs
            .iter()
            .zip(r.layers)
            .map(|(s, l)| {
                Ok(DenseLayer {
                    weights: Matrix::new(s.out_dim, s.in_dim, l.weights)?,
                    bias: l.bias,
                    batchnorm: l.batchnorm,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_parts(r.specs, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng_from_seed(seed);
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn weighted_sum(out: &Matrix, w: &Matrix) -> f64 {
        out.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    }

    /// Central differences of `sum(w * forward(x))` against `backward(w)`.
    fn check_gradients(net: &Mlp, x: &Matrix, mode: Mode, seed: u64) -> f64 {
        let (out, trace) = net.forward(x, mode, seed).unwrap();
        let w = rand_matrix(out.rows(), out.cols(), 99);
        let (grads, dx) = net.backward(&trace, &w).unwrap();
        let analytic = grads.flatten();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let n = net.n_params();
        for k in 0..n {
            let eval = |delta: f64| {
                let mut p = net.clone();
                let mut idx = k;
                for s in p.param_slices_mut() {
                    if idx < s.len() {
                        s[idx] += delta;
                        break;
                    }
                    idx -= s.len();
                }
                weighted_sum(&p.forward(x, mode, seed).unwrap().0, &w)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-6);
            worst = worst.max(err);
        }
        for k in 0..x.as_slice().len() {
            let mut up = x.clone();
            up.as_mut_slice()[k] += h;
            let mut dn = x.clone();
            dn.as_mut_slice()[k] -= h;
            let fd = (weighted_sum(&net.forward(&up, mode, seed).unwrap().0, &w)
                - weighted_sum(&net.forward(&dn, mode, seed).unwrap().0, &w))
                / (2.0 * h);
            let a = dx.as_slice()[k];
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = Mlp::zeros(vec![LayerSpec::new(2, 2, Activation::Identity)]).unwrap();
        net.layers_mut()[0].weights = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![3.5, -1.0]]).unwrap();
        assert_eq!(net.predict(&x).unwrap().as_slice(), &[3.5, -1.0]);
    }

    #[test]
    fn zero_sigmoid_layer_outputs_half() {
        let net = Mlp::zeros(vec![LayerSpec::new(3, 2, Activation::Sigmoid)]).unwrap();
        let out = net.predict(&rand_matrix(4, 3, 1)).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn two_layer_net_matches_straight_line_arithmetic() {
        let net = Mlp::new(
            vec![
                LayerSpec::new(3, 5, Activation::Relu),
                LayerSpec::new(5, 2, Activation::Sigmoid),
            ],
            11,
        )
        .unwrap();
        let x = rand_matrix(4, 3, 2);
        let out = net.predict(&x).unwrap();
        let (l0, l1) = (&net.layers()[0], &net.layers()[1]);
        for r in 0..4 {
            let mut hidden = [0.0; 5];
            for (o, h) in hidden.iter_mut().enumerate() {
                let mut s = l0.bias[o];
                for i in 0..3 {
                    s += l0.weights.get(o, i) * x.get(r, i);
                }
                *h = if s > 0.0 { s } else { 0.0 };
            }
            for o in 0..2 {
                let mut s = l1.bias[o];
                for (i, h) in hidden.iter().enumerate() {
                    s += l1.weights.get(o, i) * h;
                }
                let expected = 1.0 / (1.0 + (-s).exp());
                assert!((out.get(r, o) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = Mlp::new(vec![LayerSpec::new(3, 2, Activation::Relu)], 0).unwrap();
        assert!(matches!(net.predict(&rand_matrix(2, 4, 0)), Err(Error::Shape(_))));
        let bad = vec![
            LayerSpec::new(3, 2, Activation::Relu),
            LayerSpec::new(3, 1, Activation::Sigmoid),
        ];
        assert!(Mlp::new(bad, 0).is_err());
    }

    #[test]
    fn identity_layer_weight_gradient() {
        let net = Mlp::new(vec![LayerSpec::new(3, 2, Activation::Identity)], 4).unwrap();
        let x = rand_matrix(5, 3, 7);
        let (_, trace) = net.forward(&x, Mode::Eval, 0).unwrap();
        let (g, _) = net.backward(&trace, &Matrix::filled(5, 2, 1.0)).unwrap();
        // dW[o][i] = sum_r x[r][i] for every output o
        for o in 0..2 {
            for i in 0..3 {
                let col_sum: f64 = x.column(i).iter().sum();
                assert!((g.layers[0].weights.get(o, i) - col_sum).abs() < 1e-12);
            }
            assert!((g.layers[0].bias[o] - 5.0).abs() < 1e-12);
        }
        assert!(check_gradients(&net, &x, Mode::Eval, 0) < 1e-4);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Mlp::new(
            vec![
                LayerSpec::new(3, 4, Activation::Relu).with_batchnorm(true),
                LayerSpec::new(4, 2, Activation::Sigmoid),
            ],
            3,
        )
        .unwrap();
        let x = rand_matrix(6, 3, 1);
        let (_, trace) = net.forward(&x, Mode::Train, 5).unwrap();
        let (g, dx) = net.backward(&trace, &Matrix::zeros(6, 2)).unwrap();
        assert!(g.is_zero());
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_gradients_match_masked_finite_differences() {
        let net = Mlp::new(
            vec![
                LayerSpec::new(4, 6, Activation::Relu).with_dropout(0.2),
                LayerSpec::new(6, 5, Activation::Relu).with_dropout(0.2),
                LayerSpec::new(5, 2, Activation::Sigmoid),
            ],
            21,
        )
        .unwrap();
        let x = rand_matrix(7, 4, 8);
        assert!(check_gradients(&net, &x, Mode::Train, 1234) < 1e-4);
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut net = Mlp::new(
            vec![
                LayerSpec::new(3, 5, Activation::Relu).with_batchnorm(true),
                LayerSpec::new(5, 4, Activation::Identity).with_batchnorm(true).with_dropout(0.3),
                LayerSpec::new(4, 1, Activation::Sigmoid),
            ],
            5,
        )
        .unwrap();
        for l in net.layers_mut() {
            if let Some(bn) = &mut l.batchnorm {
                bn.gamma.iter_mut().enumerate().for_each(|(i, g)| *g = 0.5 + 0.2 * i as f64);
                bn.beta.iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64 - 0.2);
                bn.running_mean.iter_mut().for_each(|m| *m = 0.3);
                bn.running_var.iter_mut().for_each(|v| *v = 1.7);
            }
        }
        let x = rand_matrix(8, 3, 9);
        assert!(check_gradients(&net, &x, Mode::Train, 77) < 1e-4);
        assert!(check_gradients(&net, &x, Mode::Eval, 0) < 1e-4);
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let net = Mlp::new(vec![LayerSpec::new(3, 8, Activation::Relu).with_dropout(0.4)], 1).unwrap();
        let x = rand_matrix(10, 3, 3);
        let a = net.forward(&x, Mode::Train, 42).unwrap().0;
        let b = net.forward(&x, Mode::Train, 42).unwrap().0;
        let c = net.forward(&x, Mode::Train, 43).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Eval mode ignores the seed
        assert_eq!(
            net.forward(&x, Mode::Eval, 1).unwrap().0,
            net.forward(&x, Mode::Eval, 2).unwrap().0
        );
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut net =
            Mlp::new(vec![LayerSpec::new(1, 1, Activation::Identity).with_batchnorm(true)], 0).unwrap();
        net.layers_mut()[0].weights = Matrix::new(1, 1, vec![1.0]).unwrap();
        let x = Matrix::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, trace) = net.forward(&x, Mode::Train, 0).unwrap();
        net.commit_batch_stats(&trace);
        let bn = net.layers()[0].batchnorm.as_ref().unwrap();
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let net = Mlp::new(
            vec![
                LayerSpec::new(3, 4, Activation::Relu).with_batchnorm(true).with_dropout(0.1),
                LayerSpec::new(4, 1, Activation::Sigmoid),
            ],
            8,
        )
        .unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&json).unwrap();
        assert_eq!(net.digest(), back.digest());
        assert_eq!(json, serde_json::to_string(&back).unwrap());
    }
}
