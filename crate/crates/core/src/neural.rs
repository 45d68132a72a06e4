//! Fixed-topology ReLU networks with hand-written reverse mode, Adam, the
//! reparameterized Gaussian draw and a Cholesky covariance head.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::rng;

/// Samples per parallel work unit when accumulating minibatch gradients.
/// Partial sums are combined in chunk order, so the result does not depend on
/// the thread count.
pub(crate) const GRAD_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs × inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != inputs * outputs {
            return Err(Error::Shape {
                expected: inputs * outputs,
                actual: weights.len(),
            });
        }
        if bias.len() != outputs {
            return Err(Error::Shape {
                expected: outputs,
                actual: bias.len(),
            });
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b
        }));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations recorded by [`Mlp::forward_trace`]: the input followed by the
/// output of every layer (post-ReLU for hidden layers).
#[derive(Clone, Debug)]
pub struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace holds at least the input")
    }

    /// Which hidden units are active, layer by layer.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let hidden = &self.activations[1..self.activations.len() - 1];
        hidden.iter().flatten().map(|&a| a > 0.0).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= s);
            l.bias.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Flat view in the same order as [`Mlp::params`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }
}

impl Mlp {
    /// He-uniform weights, zero biases. `widths` lists input, hidden and
    /// output sizes.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        check_widths(widths)?;
        let mut rng = rng::seeded(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let limit = (6.0 / inputs as f64).sqrt();
                let weights = (0..inputs * outputs)
                    .map(|_| limit * (2.0 * rng::uniform(&mut rng) - 1.0))
                    .collect();
                Dense {
                    inputs,
                    outputs,
                    weights,
                    bias: vec![0.0; outputs],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        Ok(Self {
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Shape {
                    expected: pair[0].outputs,
                    actual: pair[1].inputs,
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameter blocks in order `layer0.weight, layer0.bias, layer1.weight, …`.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn block_name(index: usize) -> String {
        let kind = if index.is_multiple_of(2) { "weight" } else { "bias" };
        format!("layer{}.{kind}", index / 2)
    }

    pub fn zero_output_layer(&mut self) {
        let last = self.layers.len() - 1;
        let out = &mut self.layers[last];
        out.weights.iter_mut().for_each(|w| *w = 0.0);
        out.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if l < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(&activations[l], &mut out);
            if l < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            activations.push(out);
        }
        Ok(Trace { activations })
    }

    /// Reverse-mode pass. Returns parameter gradients and the gradient with
    /// respect to the network input.
    pub fn backward(&self, trace: &Trace, upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::Shape {
                expected: self.layers.len() + 1,
                actual: trace.activations.len(),
            });
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape {
                expected: self.output_dim(),
                actual: upstream.len(),
            });
        }
        let mut delta = upstream.to_vec();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[l];
            let mut weights = vec![0.0; layer.weights.len()];
            for (row, &d) in weights.chunks_exact_mut(layer.inputs).zip(&delta) {
                if d != 0.0 {
                    row.iter_mut().zip(input).for_each(|(g, a)| *g = d * a);
                }
            }
            let mut back = vec![0.0; layer.inputs];
            for (row, &d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                if d != 0.0 {
                    back.iter_mut().zip(row).for_each(|(b, w)| *b += d * w);
                }
            }
            if l > 0 {
                // ReLU gate from the recorded post-activation.
                back.iter_mut()
                    .zip(input)
                    .for_each(|(b, &a)| if a <= 0.0 { *b = 0.0 });
            }
            layers.push(LayerGrad {
                weights,
                bias: std::mem::replace(&mut delta, back),
            });
        }
        layers.reverse();
        Ok((Gradients { layers }, delta))
    }

    pub fn predict(&self, x: &PointCloud) -> Result<PointCloud> {
        let rows: Vec<Vec<f64>> = x.rows().map(|r| self.forward(r)).collect::<Result<_>>()?;
        let flat = rows.concat();
        PointCloud::new(x.name().to_owned(), self.output_dim(), flat)
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::invalid(format!(
            "layer widths must list at least two positive sizes, got {widths:?}"
        )));
    }
    Ok(())
}

/// Raw output index of `L[(row, col)]`, `col ≤ row`, in row-major lower-triangle order.
#[inline]
pub fn tril_index(row: usize, col: usize) -> usize {
    row * (row + 1) / 2 + col
}

pub fn tril_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Network whose `D(D+1)/2` outputs fill a lower-triangular factor `L` with
/// diagonal `softplus(raw) + SOFTPLUS_FLOOR`. The covariance is `L Lᵀ`, which
/// is positive definite for every input.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceHead {
    net: Mlp,
    dim: usize,
}

impl CovarianceHead {
    pub const SOFTPLUS_FLOOR: f64 = 1e-5;

    pub fn new(input: usize, hidden: &[usize], dim: usize, seed: u64) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(tril_len(dim)))
            .collect();
        Ok(Self {
            net: Mlp::new(&widths, seed)?,
            dim,
        })
    }

    pub fn from_net(net: Mlp, dim: usize) -> Result<Self> {
        if net.output_dim() != tril_len(dim) {
            return Err(Error::Shape {
                expected: tril_len(dim),
                actual: net.output_dim(),
            });
        }
        Ok(Self { net, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn factor_from_raw(&self, raw: &[f64]) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for c in 0..r {
                l[(r, c)] = raw[tril_index(r, c)];
            }
            l[(r, r)] = softplus(raw[tril_index(r, r)]) + Self::SOFTPLUS_FLOOR;
        }
        l
    }

    pub fn factor(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.factor_from_raw(&self.net.forward(x)?))
    }

    pub fn factor_trace(&self, x: &[f64]) -> Result<(DMatrix<f64>, Trace)> {
        let trace = self.net.forward_trace(x)?;
        Ok((self.factor_from_raw(trace.output()), trace))
    }

    pub fn covariance(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let l = self.factor(x)?;
        Ok(&l * l.transpose())
    }

    /// Back-propagates a gradient with respect to the lower triangle of `L`.
    pub fn backward(&self, trace: &Trace, grad_factor: &DMatrix<f64>) -> Result<Gradients> {
        let raw = trace.output();
        let mut upstream = vec![0.0; tril_len(self.dim)];
        for r in 0..self.dim {
            for c in 0..r {
                upstream[tril_index(r, c)] = grad_factor[(r, c)];
            }
            let i = tril_index(r, r);
            upstream[i] = grad_factor[(r, r)] * sigmoid(raw[i]);
        }
        Ok(self.net.backward(trace, &upstream)?.0)
    }
}

/// `z = mean + L · noise`.
pub fn reparameterize(mean: &[f64], chol: &DMatrix<f64>, noise: &[f64]) -> Result<Vec<f64>> {
    let d = mean.len();
    if chol.nrows() != d || chol.ncols() != d {
        return Err(Error::Shape {
            expected: d,
            actual: chol.nrows(),
        });
    }
    if noise.len() != d {
        return Err(Error::Shape {
            expected: d,
            actual: noise.len(),
        });
    }
    Ok((0..d)
        .map(|r| mean[r] + (0..=r).map(|c| chol[(r, c)] * noise[c]).sum::<f64>())
        .collect())
}

/// Gradient of a scalar loss through [`reparameterize`] into the factor:
/// `∂loss/∂L_rc = g_r · noise_c` for `c ≤ r`.
pub fn reparameterize_factor_grad(grad_z: &[f64], noise: &[f64]) -> DMatrix<f64> {
    let d = grad_z.len();
    DMatrix::from_fn(d, d, |r, c| if c <= r { grad_z[r] * noise[c] } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(block_sizes: &[usize], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_mlp(net: &Mlp, lr: f64) -> Self {
        let sizes: Vec<usize> = net.params().iter().map(|b| b.len()).collect();
        Self::new(&sizes, lr)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Nothing is modified when any gradient
    /// entry is non-finite.
    pub fn update(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        block_name: impl Fn(usize) -> String,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape {
                expected: self.first.len(),
                actual: params.len().min(grads.len()),
            });
        }
        for (b, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[b].len() || g.len() != p.len() {
                return Err(Error::Shape {
                    expected: self.first[b].len(),
                    actual: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDivergence {
                    epoch: 0,
                    message: format!("non-finite gradient in {}", block_name(b)),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[b];
            let v = &mut self.second[b];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_mlp(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        let g = grads.blocks();
        let mut p = net.params_mut();
        self.update(&mut p, &g, Mlp::block_name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionConfig {
    pub epochs: usize,
    pub lr: f64,
    /// When set, the learning rate decays geometrically from `lr` to this
    /// value over the epochs.
    pub lr_final: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1e-3,
            lr_final: None,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Regression {
    pub net: Mlp,
    /// Mean squared error per epoch, averaged over coordinates.
    pub loss_curve: Vec<f64>,
    /// Full-data mean squared error of the returned network.
    pub final_loss: f64,
}

/// Mean squared error over all rows and coordinates.
pub fn mse(net: &Mlp, inputs: &PointCloud, targets: &PointCloud) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in inputs.rows().zip(targets.rows()) {
        let out = net.forward(x)?;
        total += out.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / (inputs.len() * targets.dim()) as f64)
}

/// Minibatch Adam on mean squared error.
pub fn fit_regression(
    mut net: Mlp,
    inputs: &PointCloud,
    targets: &PointCloud,
    config: &RegressionConfig,
) -> Result<Regression> {
    if inputs.len() != targets.len() {
        return Err(Error::Shape {
            expected: inputs.len(),
            actual: targets.len(),
        });
    }
    if inputs.dim() != net.input_dim() || targets.dim() != net.output_dim() {
        return Err(Error::Shape {
            expected: net.input_dim(),
            actual: inputs.dim(),
        });
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let n = inputs.len();
    let out_dim = targets.dim() as f64;
    let mut adam = AdamState::for_mlp(&net, config.lr);
    let mut rng = rng::seeded(config.seed);
    let mut loss_curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        adam.lr = decayed_lr(config.lr, config.lr_final, epoch, config.epochs);
        let order = rng::permutation(&mut rng, n);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let partials: Vec<(Gradients, f64)> = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut g = Gradients::zeros_like(&net);
                    let mut loss = 0.0;
                    for &i in chunk {
                        let trace = net.forward_trace(inputs.point(i))?;
                        let resid: Vec<f64> = trace
                            .output()
                            .iter()
                            .zip(targets.point(i))
                            .map(|(a, b)| a - b)
                            .collect();
                        loss += resid.iter().map(|r| r * r).sum::<f64>() / out_dim;
                        let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * r / out_dim).collect();
                        g.add_assign(&net.backward(&trace, &upstream)?.0);
                    }
                    Ok((g, loss))
                })
                .collect::<Result<_>>()?;
            let mut grads = Gradients::zeros_like(&net);
            for (g, loss) in &partials {
                grads.add_assign(g);
                epoch_loss += loss;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step_mlp(&mut net, &grads).map_err(|e| with_epoch(e, epoch))?;
        }
        let epoch_loss = epoch_loss / n as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::TrainingDivergence {
                epoch,
                message: "regression loss is not finite".into(),
            });
        }
        loss_curve.push(epoch_loss);
    }
    let final_loss = mse(&net, inputs, targets)?;
    Ok(Regression {
        net,
        loss_curve,
        final_loss,
    })
}

/// Geometric interpolation from `lr` to `lr_final` across `epochs`.
pub(crate) fn decayed_lr(lr: f64, lr_final: Option<f64>, epoch: usize, epochs: usize) -> f64 {
    match lr_final {
        Some(last) if epochs > 1 => lr * (last / lr).powf(epoch as f64 / (epochs - 1) as f64),
        _ => lr,
    }
}

pub(crate) fn with_epoch(err: Error, epoch: usize) -> Error {
    match err {
        Error::TrainingDivergence { message, .. } => Error::TrainingDivergence { epoch, message },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent forward oracle: dense matrices built from the layer data.
    fn oracle_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut cur = nalgebra::DVector::from_column_slice(x);
        let last = net.layers().len() - 1;
        for (l, layer) in net.layers().iter().enumerate() {
            let w = DMatrix::from_row_slice(layer.outputs(), layer.inputs(), layer.weights());
            let b = nalgebra::DVector::from_column_slice(layer.bias());
            cur = w * cur + b;
            if l < last {
                cur = cur.map(|v| if v > 0.0 { v } else { 0.0 });
            }
        }
        cur.iter().copied().collect()
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut net = Mlp::zeros(&[3, 5, 2]).unwrap();
        net.layers_mut()[1].bias_mut().copy_from_slice(&[0.5, -2.0]);
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.5, -2.0]);
    }

    #[test]
    fn identity_layers() {
        let eye = |n: usize| {
            let mut w = vec![0.0; n * n];
            (0..n).for_each(|i| w[i * n + i] = 1.0);
            Dense::new(n, n, w, vec![0.0; n]).unwrap()
        };
        let linear = Mlp::from_layers(vec![eye(3)]).unwrap();
        assert_eq!(linear.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);
        let gated = Mlp::from_layers(vec![eye(3), eye(3)]).unwrap();
        assert_eq!(gated.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, 0.0, 3.0]);
    }

    #[test]
    fn forward_matches_matrix_oracle() {
        let mut rng = rng::seeded(1);
        for seed in 0..20 {
            let mut net = Mlp::new(&[4, 17, 9, 3], seed).unwrap();
            for p in net.params_mut() {
                p.iter_mut().for_each(|v| *v += 0.1 * rng::normal(&mut rng));
            }
            let x = rng::normal_vec(&mut rng, 4);
            let a = net.forward(&x).unwrap();
            let b = oracle_forward(&net, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = Mlp::new(&[3, 4, 2], 0).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape { expected: 3, actual: 1 })));
        assert!(Mlp::new(&[3], 0).is_err());
        assert!(Mlp::new(&[3, 0, 2], 0).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let net = Mlp::new(&[3, 8, 2], 4).unwrap();
        let trace = net.forward_trace(&[0.3, -0.1, 0.8]).unwrap();
        let (g, input) = net.backward(&trace, &[0.0, 0.0]).unwrap();
        assert!(g.blocks().iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_gradient_is_input() {
        let net = Mlp::new(&[4, 1], 2).unwrap();
        let x = [0.5, -1.5, 2.0, 3.0];
        let trace = net.forward_trace(&x).unwrap();
        let (g, _) = net.backward(&trace, &[1.0]).unwrap();
        assert_eq!(g.layers[0].weights, x.to_vec());
        assert_eq!(g.layers[0].bias, vec![1.0]);
    }

    #[test]
    fn reparameterize_cases() {
        let mean = [1.0, 2.0];
        let l = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.5, 1.0]);
        assert_eq!(reparameterize(&mean, &l, &[0.0, 0.0]).unwrap(), mean.to_vec());
        let eye = DMatrix::identity(2, 2);
        assert_eq!(reparameterize(&mean, &eye, &[0.3, -0.4]).unwrap(), vec![1.3, 1.6]);
        assert!(reparameterize(&mean, &eye, &[0.3]).is_err());
    }

    #[test]
    fn reparameterize_covariance_monte_carlo() {
        let l = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 0.8, 0.0, -0.3, 0.2, 0.4]);
        let target = &l * l.transpose();
        let mut rng = rng::seeded(12);
        let n = 100_000;
        let mut cov = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let z = reparameterize(&[0.0; 3], &l, &rng::normal_vec(&mut rng, 3)).unwrap();
            let v = nalgebra::DVector::from_vec(z);
            cov += &v * v.transpose();
        }
        cov /= n as f64;
        let rel = (&cov - &target).norm() / target.norm();
        assert!(rel < 0.05, "{rel}");
    }

    #[test]
    fn covariance_head_is_spd() {
        let head = CovarianceHead::new(3, &[16], 3, 5).unwrap();
        let mut rng = rng::seeded(5);
        for _ in 0..100 {
            let x: Vec<f64> = rng::normal_vec(&mut rng, 3).iter().map(|v| 3.0 * v).collect();
            let l = head.factor(&x).unwrap();
            for r in 0..3 {
                assert!(l[(r, r)] >= CovarianceHead::SOFTPLUS_FLOOR);
            }
            assert!(head.covariance(&x).unwrap().cholesky().is_some());
        }
    }

    #[test]
    fn adam_zero_gradient_no_change() {
        let mut p = vec![1.0, -2.0];
        let mut adam = AdamState::new(&[2], 0.1);
        adam.update(&mut [p.as_mut_slice()], &[&[0.0, 0.0]], |_| "p".into()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        let mut p = vec![0.0, 0.0];
        let mut adam = AdamState::new(&[2], 0.01);
        adam.update(&mut [p.as_mut_slice()], &[&[3.0, -0.2]], |_| "p".into()).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut net = Mlp::new(&[2, 2], 0).unwrap();
        let before = net.clone();
        let mut adam = AdamState::for_mlp(&net, 0.1);
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].bias[1] = f64::NAN;
        match adam.step_mlp(&mut net, &g) {
            Err(Error::TrainingDivergence { message, .. }) => assert!(message.contains("layer0.bias")),
            other => panic!("{other:?}"),
        }
        assert_eq!(net, before);
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        // f(p) = Σ a_i (p_i - c_i)², gradient 2 a_i (p_i - c_i).
        let a = [1.0, 3.0, 0.5];
        let c = [2.0, -1.0, 0.5];
        let mut p = vec![0.0; 3];
        let mut adam = AdamState::new(&[3], 0.05);
        let grad = |p: &[f64]| -> Vec<f64> { (0..3).map(|i| 2.0 * a[i] * (p[i] - c[i])).collect() };
        let mut steps = 0;
        while steps < 5000 {
            let g = grad(&p);
            if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6 {
                break;
            }
            adam.update(&mut [p.as_mut_slice()], &[&g], |_| "p".into()).unwrap();
            steps += 1;
        }
        let g = grad(&p);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6, "{p:?} after {steps}");
    }

    #[test]
    fn regression_zero_targets_zero_loss() {
        let x = PointCloud::new("x", 2, vec![0.1, 0.2, 0.3, 0.4, -1.0, 2.0]).unwrap();
        let y = PointCloud::new("y", 1, vec![0.0, 0.0, 0.0]).unwrap();
        let mut net = Mlp::new(&[2, 8, 1], 0).unwrap();
        net.zero_output_layer();
        assert_eq!(mse(&net, &x, &y).unwrap(), 0.0);
        let cfg = RegressionConfig {
            epochs: 3,
            ..Default::default()
        };
        let fit = fit_regression(net, &x, &y, &cfg).unwrap();
        assert_eq!(fit.loss_curve[0], 0.0);
        assert_eq!(fit.final_loss, 0.0);
    }

    #[test]
    fn regression_learns_linear_map() {
        let mut rng = rng::seeded(3);
        let a = [[1.0, -0.5, 0.25], [0.3, 0.8, -1.2]];
        let n = 200;
        let xs: Vec<f64> = rng::normal_vec(&mut rng, 3 * n);
        let ys: Vec<f64> = xs
            .chunks(3)
            .flat_map(|x| a.iter().map(move |row| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()))
            .collect();
        let x = PointCloud::new("x", 3, xs).unwrap();
        let y = PointCloud::new("y", 2, ys).unwrap();
        let net = Mlp::new(&[3, 2], 1).unwrap();
        let cfg = RegressionConfig {
            epochs: 400,
            lr: 1e-2,
            batch_size: 20,
            seed: 2,
            ..Default::default()
        };
        let fit = fit_regression(net, &x, &y, &cfg).unwrap();
        assert!(fit.final_loss < 1e-6, "{}", fit.final_loss);
    }

    #[test]
    fn regression_is_deterministic() {
        let x = crate::data::gen_circle(64, 1.0, 0.0, 0).unwrap();
        let y = PointCloud::new("y", 1, x.rows().map(|p| p[0] * p[1]).collect()).unwrap();
        let cfg = RegressionConfig {
            epochs: 5,
            ..Default::default()
        };
        let a = fit_regression(Mlp::new(&[3, 32, 1], 9).unwrap(), &x, &y, &cfg).unwrap();
        let b = fit_regression(Mlp::new(&[3, 32, 1], 9).unwrap(), &x, &y, &cfg).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.loss_curve, b.loss_curve);
    }
}
