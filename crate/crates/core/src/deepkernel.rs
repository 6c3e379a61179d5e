//! Deep kernel: a feed-forward feature map composed with the exponential
//! correlation kernel `exp(-Σ θ_k |u_k - v_k|^{p_k})`, with reverse-mode
//! gradients of kernel-matrix contractions with respect to every parameter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

/// Width of each hidden layer of the feature network.
pub const HIDDEN_UNITS: usize = 40;
/// Number of hidden layers of the feature network.
pub const HIDDEN_LAYERS: usize = 2;

pub const THETA_MIN: f64 = 1e-5;
pub const THETA_MAX: f64 = 100.0;
pub const P_MIN: f64 = 1.0;
pub const P_MAX: f64 = 2.0;

/// Distances below this are treated as exactly zero inside `|Δ|^p`.
const ZERO_DISTANCE: f64 = 1e-300;

/// One fully connected layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn glorot(inputs: usize, outputs: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Layer {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| rng.uniform_in(-limit, limit))
                .collect(),
            biases: vec![0.0; outputs],
        }
    }

    fn apply(&self, a: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.biases[o] + row.iter().zip(a).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }
}

/// Feature network parameters. No layers means the identity map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Activations retained by a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// Pre-activation outputs of each layer.
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

impl MlpParams {
    /// The identity feature map.
    pub fn identity() -> Self {
        MlpParams { layers: Vec::new() }
    }

    /// `d → hidden… → d` network with Glorot-uniform weights and zero biases.
    pub fn glorot(d: usize, hidden: &[usize], rng: &mut RngStream) -> Self {
        let mut sizes = vec![d];
        sizes.extend_from_slice(hidden);
        sizes.push(d);
        MlpParams {
            layers: sizes
                .windows(2)
                .map(|w| Layer::glorot(w[0], w[1], rng))
                .collect(),
        }
    }

    /// Default architecture: two hidden layers of 40 rectified units.
    pub fn standard(d: usize, rng: &mut RngStream) -> Self {
        MlpParams::glorot(d, &[HIDDEN_UNITS; HIDDEN_LAYERS], rng)
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    /// Layer widths from input to output, e.g. `[d, 40, 40, d]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.layers.iter().map(|l| l.inputs).collect();
        if let Some(last) = self.layers.last() {
            sizes.push(last.outputs);
        }
        sizes
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Checks that the network maps `d` inputs to `d` outputs.
    pub fn validate(&self, d: usize) -> Result<()> {
        let mut width = d;
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs != width
                || l.weights.len() != l.inputs * l.outputs
                || l.biases.len() != l.outputs
            {
                return Err(Error::ShapeMismatch(format!("layer {i} does not chain")));
            }
            width = l.outputs;
        }
        if width != d {
            return Err(Error::ShapeMismatch(format!(
                "network output width {width}, expected {d}"
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        match self.layers.first() {
            Some(l) if l.inputs != x.len() => Err(Error::ShapeMismatch(format!(
                "input of length {}, network expects {}",
                x.len(),
                l.inputs
            ))),
            _ => Ok(()),
        }
    }

    /// Feature vector of `x`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            a = layer.apply(&a);
            if i < last {
                relu_in_place(&mut a);
            }
        }
        Ok(a)
    }

    pub fn forward_traced(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        self.check_input(x)?;
        let mut trace = ForwardTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut a = x.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&a);
            trace.inputs.push(std::mem::take(&mut a));
            a = z.clone();
            if i < last {
                relu_in_place(&mut a);
            }
            trace.pre.push(z);
        }
        Ok((a, trace))
    }

    /// Accumulates `∂/∂(w, b)` of `grad_out · φ(x)` into `acc`.
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &[f64], acc: &mut MlpParams) {
        let mut g = grad_out.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i < last {
                for (gj, z) in g.iter_mut().zip(&trace.pre[i]) {
                    if *z <= 0.0 {
                        *gj = 0.0;
                    }
                }
            }
            let input = &trace.inputs[i];
            let acc_layer = &mut acc.layers[i];
            for o in 0..layer.outputs {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                acc_layer.biases[o] += go;
                let row = &mut acc_layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, a) in row.iter_mut().zip(input) {
                    *w += go * a;
                }
            }
            if i > 0 {
                let mut next = vec![0.0; layer.inputs];
                for o in 0..layer.outputs {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += go * w;
                    }
                }
                g = next;
            }
        }
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
    }

    fn unflatten_from(&mut self, flat: &[f64]) -> usize {
        let mut pos = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        pos
    }
}

fn relu_in_place(a: &mut [f64]) {
    for v in a {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Per-dimension parameters of the exponential correlation kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseKernelParams {
    /// `θ_k = exp(log_theta_k)`.
    pub log_theta: Vec<f64>,
    pub p: Vec<f64>,
}

impl BaseKernelParams {
    pub fn new(theta: &[f64], p: &[f64]) -> Self {
        BaseKernelParams {
            log_theta: theta.iter().map(|t| t.ln()).collect(),
            p: p.to_vec(),
        }
    }

    pub fn uniform(d: usize, theta: f64, p: f64) -> Self {
        BaseKernelParams::new(&vec![theta; d], &vec![p; d])
    }

    pub fn dim(&self) -> usize {
        self.log_theta.len()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.log_theta.iter().map(|l| l.exp()).collect()
    }

    /// Projects onto `θ ∈ [1e-5, 100]`, `p ∈ [1, 2]`.
    pub fn clamp(&mut self) {
        let (lo, hi) = (THETA_MIN.ln(), THETA_MAX.ln());
        for l in &mut self.log_theta {
            *l = l.clamp(lo, hi);
        }
        for p in &mut self.p {
            *p = p.clamp(P_MIN, P_MAX);
        }
    }

    /// Task-specific parameters: `log θ + Δlog θ`, `p + Δp`, projected.
    pub fn with_increments(&self, inc: &TaskIncrements) -> BaseKernelParams {
        let mut out = BaseKernelParams {
            log_theta: self
                .log_theta
                .iter()
                .zip(&inc.delta_log_theta)
                .map(|(a, b)| a + b)
                .collect(),
            p: self.p.iter().zip(&inc.delta_p).map(|(a, b)| a + b).collect(),
        };
        out.clamp();
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.len() != self.log_theta.len() {
            return Err(Error::ShapeMismatch("log_theta and p lengths differ".into()));
        }
        if self.log_theta.iter().chain(&self.p).any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite kernel parameter".into()));
        }
        Ok(())
    }
}

/// Offsets on top of the task-independent base-kernel parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskIncrements {
    pub delta_log_theta: Vec<f64>,
    pub delta_p: Vec<f64>,
}

impl TaskIncrements {
    pub fn zeros(d: usize) -> Self {
        TaskIncrements {
            delta_log_theta: vec![0.0; d],
            delta_p: vec![0.0; d],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.delta_log_theta.iter().chain(&self.delta_p).all(|v| *v == 0.0)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.delta_log_theta.clone();
        v.extend_from_slice(&self.delta_p);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let d = flat.len() / 2;
        TaskIncrements {
            delta_log_theta: flat[..d].to_vec(),
            delta_p: flat[d..].to_vec(),
        }
    }
}

/// Full parameter set `{w, b, θ, p}` of the deep kernel. Also used as the
/// container for gradients with the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepKernelParams {
    pub mlp: MlpParams,
    pub base: BaseKernelParams,
}

impl DeepKernelParams {
    /// Standard architecture with Glorot weights, `θ = 1` and `p = 2`.
    pub fn init(d: usize, rng: &mut RngStream) -> Self {
        DeepKernelParams {
            mlp: MlpParams::standard(d, rng),
            base: BaseKernelParams::uniform(d, 1.0, P_MAX),
        }
    }

    /// Plain exponential kernel on raw (scaled) inputs.
    pub fn identity(base: BaseKernelParams) -> Self {
        DeepKernelParams {
            mlp: MlpParams::identity(),
            base,
        }
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.mlp.validate(self.dim())
    }

    pub fn zeros_like(&self) -> Self {
        DeepKernelParams {
            mlp: self.mlp.zeros_like(),
            base: BaseKernelParams {
                log_theta: vec![0.0; self.dim()],
                p: vec![0.0; self.dim()],
            },
        }
    }

    pub fn with_increments(&self, inc: &TaskIncrements) -> DeepKernelParams {
        DeepKernelParams {
            mlp: self.mlp.clone(),
            base: self.base.with_increments(inc),
        }
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params() + 2 * self.dim()
    }

    /// Layout: per layer weights then biases, then `log_theta`, then `p`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        self.mlp.flatten_into(&mut v);
        v.extend_from_slice(&self.base.log_theta);
        v.extend_from_slice(&self.base.p);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let d = self.dim();
        let pos = self.mlp.unflatten_from(flat);
        self.base.log_theta.copy_from_slice(&flat[pos..pos + d]);
        self.base.p.copy_from_slice(&flat[pos + d..pos + 2 * d]);
    }

    pub fn features(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter()
            .map(|x| {
                if x.len() != self.dim() {
                    return Err(Error::ShapeMismatch(format!(
                        "point of length {}, kernel dimension {}",
                        x.len(),
                        self.dim()
                    )));
                }
                self.mlp.forward(x)
            })
            .collect()
    }
}

/// `|a|^p` as `exp(p ln|a|)`, zero below 1e-300.
#[inline]
fn abs_pow(a: f64, p: f64) -> f64 {
    let a = a.abs();
    if a < ZERO_DISTANCE {
        0.0
    } else {
        (p * a.ln()).exp()
    }
}

/// Sum `Σ_k θ_k |u_k - v_k|^{p_k}`.
#[inline]
fn weighted_distance(theta: &[f64], p: &[f64], u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..u.len() {
        s += theta[k] * abs_pow(u[k] - v[k], p[k]);
    }
    s
}

pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    params.forward(x)
}

/// `exp(-Σ θ_k |u_k - v_k|^{p_k})`.
pub fn base_kernel(base: &BaseKernelParams, u: &[f64], v: &[f64]) -> f64 {
    let theta = base.theta();
    (-weighted_distance(&theta, &base.p, u, v)).exp()
}

pub fn deep_kernel(params: &DeepKernelParams, xi: &[f64], xj: &[f64]) -> Result<f64> {
    let u = params.mlp.forward(xi)?;
    let v = params.mlp.forward(xj)?;
    if u.len() != params.dim() {
        return Err(Error::ShapeMismatch("feature width differs from kernel dimension".into()));
    }
    Ok(base_kernel(&params.base, &u, &v))
}

/// Correlation matrix over precomputed features, plus `nugget` on the diagonal.
pub fn kernel_matrix_from_features(base: &BaseKernelParams, feats: &[Vec<f64>], nugget: f64) -> Matrix {
    let n = feats.len();
    let theta = base.theta();
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        r[(i, i)] = 1.0 + nugget;
        for j in 0..i {
            let v = (-weighted_distance(&theta, &base.p, &feats[i], &feats[j])).exp();
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

/// Correlations between one feature vector and a set of features.
pub fn cross_correlations(base: &BaseKernelParams, theta: &[f64], f: &[f64], feats: &[Vec<f64>]) -> Vec<f64> {
    feats
        .iter()
        .map(|g| (-weighted_distance(theta, &base.p, f, g)).exp())
        .collect()
}

pub fn kernel_matrix(params: &DeepKernelParams, xs: &[Vec<f64>], nugget: f64) -> Result<Matrix> {
    let feats = params.features(xs)?;
    Ok(kernel_matrix_from_features(&params.base, &feats, nugget))
}

/// Gradients of `Σ_ij C_ij R_ij` with respect to `log θ`, `p` and the features.
pub struct FeatureGradients {
    pub log_theta: Vec<f64>,
    pub p: Vec<f64>,
    /// One row per point; `None` when feature gradients were not requested.
    pub features: Option<Vec<Vec<f64>>>,
}

/// Contracts `cotangent` against `∂R/∂(log θ, p, φ)` for a kernel matrix built
/// from `feats`. Only the symmetric part of `cotangent` matters.
pub fn base_gradients(
    base: &BaseKernelParams,
    feats: &[Vec<f64>],
    kernel: &Matrix,
    cotangent: &Matrix,
    want_features: bool,
) -> FeatureGradients {
    let n = feats.len();
    let d = base.dim();
    let theta = base.theta();
    let mut g_lt = vec![0.0; d];
    let mut g_p = vec![0.0; d];
    let mut g_f = if want_features {
        Some(vec![vec![0.0; d]; n])
    } else {
        None
    };
    for i in 0..n {
        for j in 0..i {
            let c = cotangent[(i, j)] + cotangent[(j, i)];
            if c == 0.0 {
                continue;
            }
            // R_ij without nugget: off-diagonal entries carry none.
            let cr = c * kernel[(i, j)];
            for k in 0..d {
                let delta = feats[i][k] - feats[j][k];
                let a = delta.abs();
                if a < ZERO_DISTANCE {
                    continue;
                }
                let ln_a = a.ln();
                let pow = (base.p[k] * ln_a).exp();
                let t = theta[k] * pow;
                // ∂R/∂logθ_k = -R θ_k |Δ|^p
                g_lt[k] -= cr * t;
                // ∂R/∂p_k = -R θ_k |Δ|^p ln|Δ|
                g_p[k] -= cr * t * ln_a;
                if let Some(gf) = g_f.as_mut() {
                    // ∂R/∂φ_ik = -R θ_k p_k |Δ|^{p-1} sign(Δ)
                    let dphi = -cr * theta[k] * base.p[k] * pow / a * delta.signum();
                    gf[i][k] += dphi;
                    gf[j][k] -= dphi;
                }
            }
        }
    }
    FeatureGradients {
        log_theta: g_lt,
        p: g_p,
        features: g_f,
    }
}

/// `Σ_ij cotangent_ij ∂R_ij/∂γ` for every scalar of `γ = {w, b, log θ, p}`.
pub fn kernel_gradients(params: &DeepKernelParams, xs: &[Vec<f64>], cotangent: &Matrix) -> Result<DeepKernelParams> {
    let n = xs.len();
    if cotangent.rows() != n || cotangent.cols() != n {
        return Err(Error::ShapeMismatch(format!(
            "cotangent {}x{} for {n} points",
            cotangent.rows(),
            cotangent.cols()
        )));
    }
    let mut feats = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    for x in xs {
        if x.len() != params.dim() {
            return Err(Error::ShapeMismatch(format!(
                "point of length {}, kernel dimension {}",
                x.len(),
                params.dim()
            )));
        }
        let (f, t) = params.mlp.forward_traced(x)?;
        feats.push(f);
        traces.push(t);
    }
    let r = kernel_matrix_from_features(&params.base, &feats, 0.0);
    Ok(accumulate_gradients(params, &feats, &traces, &r, cotangent))
}

/// Gradient assembly once features, traces and the kernel matrix are known.
pub(crate) fn accumulate_gradients(
    params: &DeepKernelParams,
    feats: &[Vec<f64>],
    traces: &[ForwardTrace],
    kernel: &Matrix,
    cotangent: &Matrix,
) -> DeepKernelParams {
    let want_features = !params.mlp.is_identity();
    let fg = base_gradients(&params.base, feats, kernel, cotangent, want_features);
    let mut grad = params.zeros_like();
    grad.base.log_theta = fg.log_theta;
    grad.base.p = fg.p;
    if let Some(gf) = fg.features {
        for (trace, g) in traces.iter().zip(&gf) {
            params.mlp.backward(trace, g, &mut grad.mlp);
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_params(d: usize, hidden: &[usize], rng: &mut RngStream) -> DeepKernelParams {
        let mut mlp = MlpParams::glorot(d, hidden, rng);
        for l in &mut mlp.layers {
            for b in &mut l.biases {
                *b = rng.uniform_in(-0.3, 0.3);
            }
        }
        let theta: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.3, 3.0)).collect();
        let p: Vec<f64> = (0..d).map(|_| rng.uniform_in(1.2, 1.9)).collect();
        DeepKernelParams {
            mlp,
            base: BaseKernelParams::new(&theta, &p),
        }
    }

    fn random_points(n: usize, d: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.uniform()).collect()).collect()
    }

    #[test]
    fn zero_network_maps_to_zero() {
        let mut rng = RngStream::new(3, 0);
        let mut mlp = MlpParams::standard(4, &mut rng);
        mlp = mlp.zeros_like();
        assert_eq!(mlp.forward(&[0.3, -2.0, 5.0, 1.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn rectifier_blocks_negative_preactivation() {
        // 1 -> 1 -> 1: hidden pre-activation -1 contributes nothing downstream
        let mlp = MlpParams {
            layers: vec![
                Layer { inputs: 1, outputs: 1, weights: vec![1.0], biases: vec![-2.0] },
                Layer { inputs: 1, outputs: 1, weights: vec![7.0], biases: vec![0.5] },
            ],
        };
        assert_eq!(mlp.forward(&[1.0]).unwrap(), vec![0.5]);
        assert_eq!(mlp.forward(&[3.0]).unwrap(), vec![7.5]);
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let mut rng = RngStream::new(4, 0);
        let mlp = MlpParams::standard(3, &mut rng);
        let x = [0.1, 0.2, 0.3];
        assert_eq!(mlp.forward(&x).unwrap(), mlp.forward(&x).unwrap());
        assert!(matches!(mlp.forward(&[0.1]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn base_kernel_values() {
        let b = BaseKernelParams::new(&[1.0], &[2.0]);
        assert_eq!(base_kernel(&b, &[0.7], &[0.7]), 1.0);
        assert!((base_kernel(&b, &[0.0], &[1.0]) - (-1.0f64).exp()).abs() < 1e-15);
        let tiny = BaseKernelParams::new(&[1e-12, 1e-12], &[1.5, 2.0]);
        assert!((base_kernel(&tiny, &[0.0, 3.0], &[1.0, -2.0]) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deep_kernel_properties() {
        let mut rng = RngStream::new(5, 0);
        let p = random_params(3, &[40, 40], &mut rng);
        let a = [0.2, 0.9, 0.4];
        let b = [0.7, 0.1, 0.5];
        assert_eq!(deep_kernel(&p, &a, &a).unwrap(), 1.0);
        assert_eq!(deep_kernel(&p, &a, &b).unwrap(), deep_kernel(&p, &b, &a).unwrap());
        let direct = base_kernel(&p.base, &p.mlp.forward(&a).unwrap(), &p.mlp.forward(&b).unwrap());
        assert_eq!(deep_kernel(&p, &a, &b).unwrap(), direct);

        let id = DeepKernelParams::identity(p.base.clone());
        assert_eq!(deep_kernel(&id, &a, &b).unwrap(), base_kernel(&p.base, &a, &b));
    }

    #[test]
    fn zero_increments_are_bit_identical() {
        let mut rng = RngStream::new(6, 0);
        let p = random_params(3, &[8], &mut rng);
        let q = p.with_increments(&TaskIncrements::zeros(3));
        let xs = random_points(5, 3, &mut rng);
        assert_eq!(kernel_matrix(&p, &xs, 1e-8).unwrap(), kernel_matrix(&q, &xs, 1e-8).unwrap());
    }

    #[test]
    fn kernel_matrix_basics() {
        let mut rng = RngStream::new(7, 0);
        let p = random_params(2, &[5], &mut rng);
        let k1 = kernel_matrix(&p, &[vec![0.3, 0.3]], 1e-6).unwrap();
        assert_eq!(k1[(0, 0)], 1.0 + 1e-6);
        let dup = kernel_matrix(&p, &[vec![0.3, 0.1], vec![0.3, 0.1]], 0.0).unwrap();
        assert_eq!(dup[(0, 1)], 1.0);
        for s in 0..100 {
            let mut r = RngStream::new(s, 1);
            let p = random_params(3, &[10, 10], &mut r);
            let xs = random_points(12, 3, &mut r);
            let k = kernel_matrix(&p, &xs, 1e-8).unwrap();
            assert_eq!(k.max_asymmetry(), 0.0);
            assert!(k.as_slice().iter().all(|v| *v > 0.0 && *v <= 1.0 + 1e-8));
            crate::numkit::cholesky_decompose(&k).unwrap();
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let mut rng = RngStream::new(8, 0);
        let p = random_params(3, &[6, 6], &mut rng);
        let xs = random_points(4, 3, &mut rng);
        let g = kernel_gradients(&p, &xs, &Matrix::zeros(4, 4)).unwrap();
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
        assert!(kernel_gradients(&p, &xs, &Matrix::zeros(3, 3)).is_err());
    }

    fn contraction(p: &DeepKernelParams, xs: &[Vec<f64>], c: &Matrix) -> f64 {
        let r = kernel_matrix(p, xs, 0.0).unwrap();
        r.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = RngStream::new(100 + seed, 0);
            let p = random_params(3, &[40, 40], &mut rng);
            let xs = random_points(8, 3, &mut rng);
            let mut c = Matrix::zeros(8, 8);
            for i in 0..8 {
                for j in 0..=i {
                    let v = rng.uniform_in(-1.0, 1.0);
                    c[(i, j)] = v;
                    c[(j, i)] = v;
                }
            }
            let g = kernel_gradients(&p, &xs, &c).unwrap().to_flat();
            let flat = p.to_flat();
            let h = 1e-5;
            let mut worst = 0.0f64;
            for idx in 0..flat.len() {
                let mut q = p.clone();
                let mut f = flat.clone();
                f[idx] += h;
                q.set_flat(&f);
                let up = contraction(&q, &xs, &c);
                f[idx] -= 2.0 * h;
                q.set_flat(&f);
                let down = contraction(&q, &xs, &c);
                let fd = (up - down) / (2.0 * h);
                let err = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-3);
                worst = worst.max(err);
            }
            assert!(worst < 1e-4, "seed {seed}: worst relative error {worst}");
        }
    }

    #[test]
    fn log_theta_gradient_closed_form() {
        let mut rng = RngStream::new(11, 0);
        let base = BaseKernelParams::new(&[0.7, 2.0], &[2.0, 2.0]);
        let p = DeepKernelParams::identity(base.clone());
        let xs = random_points(6, 2, &mut rng);
        let mut c = Matrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..=i {
                let v = rng.uniform_in(-1.0, 1.0);
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        let g = kernel_gradients(&p, &xs, &c).unwrap();
        let r = kernel_matrix(&p, &xs, 0.0).unwrap();
        let theta = base.theta();
        for k in 0..2 {
            let mut expect = 0.0;
            for i in 0..6 {
                for j in 0..6 {
                    let dx = xs[i][k] - xs[j][k];
                    expect -= c[(i, j)] * r[(i, j)] * theta[k] * dx * dx;
                }
            }
            assert!((expect - g.base.log_theta[k]).abs() < 1e-12 * expect.abs().max(1.0));
        }
    }
}
