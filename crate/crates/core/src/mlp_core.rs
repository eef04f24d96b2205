//! Fully-connected network with hand-written derivatives.
//!
//! Layout: a batch is an `N x n_0` matrix with one sample per row, layer `l` holds
//! `W^l` of shape `n_{l-1} x n_l`, and `h^l = a^{l-1} W^l + b^l`. Hidden layers apply the
//! activation; the last layer is linear with a single output.
//!
//! The loss is the batch-averaged `E = 1/(2 sigma2 N) * sum (y - yhat)^2`. Averaging
//! instead of summing is equivalent to running the summed loss with noise variance
//! `N * sigma2`, and keeps gradient and curvature magnitudes independent of batch size.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest layer (in weights) for which the full Kronecker-lifted Hessian is materialized.
pub const EXACT_LAYER_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, h: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-h).exp()),
            Activation::Tanh => h.tanh(),
            Activation::Relu => h.max(0.0),
        }
    }

    pub fn derivative(self, h: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = self.apply(h);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = h.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Second derivative; relu uses `f''(0) = 0`.
    pub fn second_derivative(self, h: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = self.apply(h);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Activation::Tanh => {
                let t = h.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Relu => 0.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Weights, bias and prune mask of one dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `n_{l-1} x n_l`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    /// `true` = active. Inactive weights are held at exactly zero.
    pub mask: Array2<bool>,
}

impl LayerParams {
    pub fn dense(w: Array2<f64>, b: Array1<f64>) -> Self {
        let mask = Array2::from_elem(w.raw_dim(), true);
        Self { w, b, mask }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Deactivates entry `(i, j)` and zeroes its weight. Irreversible.
    pub fn prune_entry(&mut self, i: usize, j: usize) {
        self.mask[[i, j]] = false;
        self.w[[i, j]] = 0.0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<LayerParams>,
    pub activation: Activation,
}

impl Network {
    /// Glorot-uniform weights, zero biases, all entries active. `hidden` may be empty,
    /// giving a single linear layer.
    pub fn new(input: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if input == 0 || hidden.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive (input {input}, hidden {hidden:?})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    rng.random_range(-limit..=limit)
                });
                LayerParams::dense(w, Array1::zeros(fan_out))
            })
            .collect();
        Ok(Self { layers, activation })
    }

    /// Validates shapes and mask consistency of hand-built layers.
    pub fn from_layers(layers: Vec<LayerParams>, activation: Activation) -> Result<Self> {
        let net = Self { layers, activation };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.b.len() != layer.fan_out() || layer.mask.raw_dim() != layer.w.raw_dim() {
                return Err(Error::Shape(format!(
                    "layer {l}: bias or mask shape disagrees with weights"
                )));
            }
            if l > 0 && self.layers[l - 1].fan_out() != layer.fan_in() {
                return Err(Error::Shape(format!(
                    "layer {l} expects {} inputs but layer {} produces {}",
                    layer.fan_in(),
                    l - 1,
                    self.layers[l - 1].fan_out()
                )));
            }
            if layer.w.iter().chain(layer.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "layer {l} has non-finite parameters"
                )));
            }
            if layer
                .w
                .iter()
                .zip(layer.mask.iter())
                .any(|(&w, &m)| !m && w != 0.0)
            {
                return Err(Error::Shape(format!(
                    "layer {l} has a nonzero masked-out weight"
                )));
            }
        }
        if self.output_width() != 1 {
            return Err(Error::Shape(format!(
                "output layer must have one unit, has {}",
                self.output_width()
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(LayerParams::fan_out).unwrap_or(0)
    }

    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(|l| l.w.len()).sum()
    }

    pub fn active_weights(&self) -> usize {
        self.layers.iter().map(LayerParams::active_count).sum()
    }

    /// Predictions for a batch without keeping the trace.
    pub fn predict(&self, z: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(forward(self, z)?.output)
    }
}

/// Cached pre-activations and activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[l]` is the input to layer `l`; `inputs[0]` is the batch itself.
    pub inputs: Vec<Array2<f64>>,
    /// `pre[l] = inputs[l] W^l + b^l`.
    pub pre: Vec<Array2<f64>>,
    pub output: Array1<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.output.len()
    }
}

pub fn forward(net: &Network, z: ArrayView2<f64>) -> Result<ForwardTrace> {
    if z.ncols() != net.input_width() {
        return Err(Error::Shape(format!(
            "batch has {} columns, network expects {}",
            z.ncols(),
            net.input_width()
        )));
    }
    let last = net.layers.len() - 1;
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut a = z.to_owned();
    for (l, layer) in net.layers.iter().enumerate() {
        let h = a.dot(&layer.w) + &layer.b;
        let next = if l < last {
            h.mapv(|v| net.activation.apply(v))
        } else {
            Array2::zeros((0, 0))
        };
        inputs.push(std::mem::replace(&mut a, next));
        pre.push(h);
    }
    let output = pre[last].column(0).to_owned();
    Ok(ForwardTrace {
        inputs,
        pre,
        output,
    })
}

/// Batch-averaged loss `1/(2 sigma2 N) * sum (y - yhat)^2`.
pub fn loss(net: &Network, z: ArrayView2<f64>, targets: &Array1<f64>, sigma2: f64) -> Result<f64> {
    let trace = forward(net, z)?;
    loss_from_trace(&trace, targets, sigma2)
}

pub fn loss_from_trace(trace: &ForwardTrace, targets: &Array1<f64>, sigma2: f64) -> Result<f64> {
    check_targets(trace, targets)?;
    let n = targets.len() as f64;
    let sse: f64 = trace
        .output
        .iter()
        .zip(targets.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sse / (2.0 * sigma2 * n))
}

fn check_targets(trace: &ForwardTrace, targets: &Array1<f64>) -> Result<()> {
    if targets.len() != trace.batch_size() || targets.is_empty() {
        return Err(Error::Shape(format!(
            "{} targets for a trace of {} samples",
            targets.len(),
            trace.batch_size()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureMode {
    /// Keeps the `f''` term and materializes `M ⊗ H` per layer. Small layers only.
    ExactSmall,
    /// Drops the `f''` term (positive semidefinite) and returns only the diagonal.
    GaussNewtonDiag,
}

/// Derivative information for one layer.
#[derive(Debug, Clone)]
pub struct LayerCurvature {
    /// `dE/dW^l`, zero where the mask is inactive.
    pub grad_w: Array2<f64>,
    pub grad_b: Array1<f64>,
    /// Batch-averaged pre-activation Hessian `H^l`, `n_l x n_l`.
    pub pre_hessian: Option<Array2<f64>>,
    /// `M^{l-1} = mean(a^{l-1} a^{l-1}^T)`, `n_{l-1} x n_{l-1}`.
    pub input_moment: Option<Array2<f64>>,
    /// `hdiag(i, j) = M(i, i) * H(j, j)`, same shape as `W^l`.
    pub hdiag: Option<Array2<f64>>,
    /// `M ⊗ H`, indexed by the row-major flattening `i * n_l + j` of `W^l`.
    pub full_hessian: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct CurvatureBundle {
    pub layers: Vec<LayerCurvature>,
    pub loss: f64,
}

impl CurvatureBundle {
    pub fn hdiag(&self, layer: usize) -> Option<&Array2<f64>> {
        self.layers.get(layer).and_then(|l| l.hdiag.as_ref())
    }
}

/// Gradients of the batch-averaged loss by the backprop recursion
/// `dE/da^l = (dE/da^{l+1} ∘ f'(h^{l+1})) W^{l+1}^T`.
pub fn backward(
    net: &Network,
    trace: &ForwardTrace,
    targets: &Array1<f64>,
    sigma2: f64,
) -> Result<CurvatureBundle> {
    check_trace(net, trace)?;
    let loss = loss_from_trace(trace, targets, sigma2)?;
    let n = trace.batch_size() as f64;
    let last = net.layers.len() - 1;

    // delta = dE/dh for the current layer, N x n_l.
    let residual = &trace.output - targets;
    let mut delta = residual.mapv(|r| r / (sigma2 * n)).insert_axis(Axis(1));
    let mut layers = Vec::with_capacity(net.layers.len());
    for l in (0..=last).rev() {
        let layer = &net.layers[l];
        let mut grad_w = trace.inputs[l].t().dot(&delta);
        zero_masked(&mut grad_w, &layer.mask);
        let grad_b = delta.sum_axis(Axis(0));
        if l > 0 {
            let d_act = delta.dot(&layer.w.t());
            delta = d_act * trace.pre[l - 1].mapv(|h| net.activation.derivative(h));
        }
        layers.push(LayerCurvature {
            grad_w,
            grad_b,
            pre_hessian: None,
            input_moment: None,
            hdiag: None,
            full_hessian: None,
        });
    }
    layers.reverse();
    Ok(CurvatureBundle { layers, loss })
}

fn zero_masked(grad: &mut Array2<f64>, mask: &Array2<bool>) {
    grad.zip_mut_with(mask, |g, &m| {
        if !m {
            *g = 0.0;
        }
    });
}

fn check_trace(net: &Network, trace: &ForwardTrace) -> Result<()> {
    let stale = trace.pre.len() != net.layers.len()
        || net
            .layers
            .iter()
            .zip(&trace.pre)
            .zip(&trace.inputs)
            .any(|((layer, h), a)| h.ncols() != layer.fan_out() || a.ncols() != layer.fan_in());
    if stale {
        return Err(Error::Shape("trace does not belong to this network".into()));
    }
    Ok(())
}

/// Gradients plus the recursive pre-activation Hessians
/// `H^l = B^l W^{l+1} H^{l+1} W^{l+1}^T B^l + D^l`, lifted to layer weights as `M^{l-1} ⊗ H^l`.
///
/// The lift uses the batch means `M` and `H`, so `full_hessian` equals the true layer
/// Hessian for a single-sample batch and is its Kronecker-factored approximation otherwise.
pub fn curvature(
    net: &Network,
    trace: &ForwardTrace,
    targets: &Array1<f64>,
    sigma2: f64,
    mode: CurvatureMode,
) -> Result<CurvatureBundle> {
    let mut bundle = backward(net, trace, targets, sigma2)?;
    if mode == CurvatureMode::ExactSmall {
        if let Some((l, layer)) = net
            .layers
            .iter()
            .enumerate()
            .find(|(_, layer)| layer.w.len() > EXACT_LAYER_LIMIT)
        {
            return Err(Error::Config(format!(
                "exact curvature requested for layer {l} with {} weights (limit {EXACT_LAYER_LIMIT})",
                layer.w.len()
            )));
        }
    }
    let pre_hessians = match mode {
        CurvatureMode::GaussNewtonDiag => gauss_newton_pre_hessians(net, trace, sigma2),
        CurvatureMode::ExactSmall => exact_pre_hessians(net, trace, targets, sigma2),
    };
    let n = trace.batch_size() as f64;
    for ((lc, h), a) in bundle
        .layers
        .iter_mut()
        .zip(pre_hessians)
        .zip(&trace.inputs)
    {
        let m = a.t().dot(a) / n;
        let m_diag = m.diag();
        let h_diag = h.diag();
        let hdiag = Array2::from_shape_fn((m.nrows(), h.nrows()), |(i, j)| m_diag[i] * h_diag[j]);
        if mode == CurvatureMode::ExactSmall {
            lc.full_hessian = Some(kron(&m, &h));
        }
        lc.hdiag = Some(hdiag);
        lc.input_moment = Some(m);
        lc.pre_hessian = Some(h);
    }
    Ok(bundle)
}

/// Without the `f''` term every per-sample `H^l` is the rank-one `g g^T / sigma2` with
/// `g = d yhat / d h^l`, so the batch mean is `J^T J / (N sigma2)` for the Jacobian rows `J`.
fn gauss_newton_pre_hessians(net: &Network, trace: &ForwardTrace, sigma2: f64) -> Vec<Array2<f64>> {
    let n = trace.batch_size();
    let last = net.layers.len() - 1;
    let mut jac = Array2::<f64>::ones((n, 1));
    let mut out = Vec::with_capacity(net.layers.len());
    for l in (0..=last).rev() {
        out.push(jac.t().dot(&jac) / (n as f64 * sigma2));
        if l > 0 {
            jac = jac.dot(&net.layers[l].w.t())
                * trace.pre[l - 1].mapv(|h| net.activation.derivative(h));
        }
    }
    out.reverse();
    out
}

/// Full per-sample recursion including `D^l = diag(f''(h^l) ∘ de/da^l)`, averaged over the batch.
fn exact_pre_hessians(
    net: &Network,
    trace: &ForwardTrace,
    targets: &Array1<f64>,
    sigma2: f64,
) -> Vec<Array2<f64>> {
    let n = trace.batch_size();
    let last = net.layers.len() - 1;
    let f = net.activation;
    let mut sums: Vec<Array2<f64>> = net
        .layers
        .iter()
        .map(|layer| Array2::zeros((layer.fan_out(), layer.fan_out())))
        .collect();
    for t in 0..n {
        let mut h_mat = Array2::from_elem((1, 1), 1.0 / sigma2);
        let mut delta = Array1::from_elem(1, (trace.output[t] - targets[t]) / sigma2);
        for l in (0..=last).rev() {
            sums[l] += &h_mat;
            if l == 0 {
                break;
            }
            let w = &net.layers[l].w;
            let d_act = w.dot(&delta);
            let pre = trace.pre[l - 1].row(t);
            let fp = pre.mapv(|v| f.derivative(v));
            let lifted = w.dot(&h_mat).dot(&w.t());
            let mut next =
                Array2::from_shape_fn(lifted.raw_dim(), |(i, j)| fp[i] * lifted[[i, j]] * fp[j]);
            for i in 0..next.nrows() {
                next[[i, i]] += f.second_derivative(pre[i]) * d_act[i];
            }
            delta = d_act * fp;
            h_mat = next;
        }
    }
    sums.into_iter().map(|s| s / n as f64).collect()
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(r, c)| {
        a[[r / br, c / bc]] * b[[r % br, c % bc]]
    })
}
