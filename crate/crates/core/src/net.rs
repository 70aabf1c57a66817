//! Small multilayer perceptrons with hand-derived passes.
//!
//! Everything the training loop needs is written out explicitly: forward,
//! reverse-mode input and parameter gradients, and a forward-over-reverse
//! dual pass that yields Hessian-vector products and the parameter gradient
//! of ⟨u, ∇ₓf⟩ in one sweep. Activations are restricted to C∞ choices so
//! curvature-based bounds and drift tests stay meaningful.

use crate::error::{Result, SgnError};
use crate::hamiltonian::Hamiltonian;
use crate::linalg::Matrix;
use crate::rng::Rng;

/// Smooth activation functions. Piecewise-linear activations are
/// unrepresentable by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            // max(x,0) + ln(1 + e^{-|x|}) is stable for large |x|.
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    fn prime(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(x),
        }
    }

    fn second(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Softplus => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    /// Global bound on |σ''|, used by the curvature surrogate.
    pub fn second_derivative_bound(self) -> f64 {
        match self {
            // max |2t(1-t²)| over t ∈ (-1,1) is 4/(3√3).
            Activation::Tanh => 4.0 / (3.0 * 3.0f64.sqrt()),
            Activation::Softplus => 0.25,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
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

/// Parameters of one MLP. The hidden layers use `activation`; the final
/// layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    spectral_cap: Option<f64>,
}

/// Per-layer cache from a forward pass, consumed by the backward passes.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// inputs[i] is the input of layer i; inputs[0] is x.
    inputs: Vec<Vec<f64>>,
    /// preacts[i] is the pre-activation of layer i.
    preacts: Vec<Vec<f64>>,
}

/// Parameter-space gradients shaped exactly like the owning `MlpParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub d_weights: Vec<Matrix>,
    pub d_biases: Vec<Vec<f64>>,
}

impl GradBundle {
    pub fn zeros_like(net: &MlpParams) -> Self {
        GradBundle {
            d_weights: net
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            d_biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &GradBundle, factor: f64) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += factor * y;
            }
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.d_weights {
            for v in w.data_mut() {
                *v *= factor;
            }
        }
        for b in &mut self.d_biases {
            for v in b.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.d_weights.iter().zip(&self.d_biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        let w = self
            .d_weights
            .iter()
            .fold(0.0f64, |m, w| m.max(w.max_abs()));
        let b = self
            .d_biases
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        w.max(b)
    }
}

impl MlpParams {
    pub fn new(
        layer_dims: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
        spectral_cap: Option<f64>,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(SgnError::invalid("MLP needs at least input and output dims"));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(SgnError::invalid("layer dims must be positive"));
        }
        let l = layer_dims.len() - 1;
        if weights.len() != l || biases.len() != l {
            return Err(SgnError::dim("MLP layer count", l, weights.len().min(biases.len())));
        }
        for i in 0..l {
            if weights[i].rows() != layer_dims[i + 1] || weights[i].cols() != layer_dims[i] {
                return Err(SgnError::invalid(format!(
                    "weight {i} must be {}x{}, got {}x{}",
                    layer_dims[i + 1],
                    layer_dims[i],
                    weights[i].rows(),
                    weights[i].cols()
                )));
            }
            if biases[i].len() != layer_dims[i + 1] {
                return Err(SgnError::dim(format!("bias {i}"), layer_dims[i + 1], biases[i].len()));
            }
        }
        if let Some(cap) = spectral_cap {
            if !(cap > 0.0) {
                return Err(SgnError::invalid("spectral cap must be positive"));
            }
        }
        Ok(MlpParams {
            layer_dims,
            weights,
            biases,
            activation,
            spectral_cap,
        })
    }

    /// Variance-preserving initialization: W ~ N(0, 1/fan_in), b = 0.
    /// A configured spectral cap is applied immediately.
    pub fn init(
        layer_dims: &[usize],
        activation: Activation,
        spectral_cap: Option<f64>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let l = layer_dims.len().saturating_sub(1);
        let mut weights = Vec::with_capacity(l);
        let mut biases = Vec::with_capacity(l);
        for i in 0..l {
            let (fan_out, fan_in) = (layer_dims[i + 1], layer_dims[i]);
            let std = (1.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_out * fan_in)
                .map(|_| std * rng.standard_normal())
                .collect();
            weights.push(Matrix::new(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        let net = MlpParams::new(layer_dims.to_vec(), weights, biases, activation, spectral_cap)?;
        Ok(match spectral_cap {
            Some(_) => net.spectral_normalize(SPECTRAL_ITERS).0,
            None => net,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn spectral_cap(&self) -> Option<f64> {
        self.spectral_cap
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    fn is_last(&self, layer: usize) -> bool {
        layer + 1 == self.weights.len()
    }

    /// Affine + activation composition; the cache feeds the backward passes.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(SgnError::dim("MLP input", self.input_dim(), x.len()));
        }
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut preacts = Vec::with_capacity(self.weights.len());
        let mut a = x.to_vec();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.matvec(&a);
            for (zi, bi) in z.iter_mut().zip(b) {
                *zi += bi;
            }
            inputs.push(a);
            a = if self.is_last(i) {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            preacts.push(z);
        }
        Ok((a, ForwardCache { inputs, preacts }))
    }

    /// Reverse pass for an arbitrary output cotangent: returns the input
    /// gradient and the parameter gradients of ⟨upstream, output⟩.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> (Vec<f64>, GradBundle) {
        debug_assert_eq!(upstream.len(), self.output_dim());
        let l = self.weights.len();
        let mut d_weights = vec![Matrix::zeros(1, 1); l];
        let mut d_biases = vec![Vec::new(); l];
        let mut s = upstream.to_vec();
        let mut input_grad = Vec::new();
        for i in (0..l).rev() {
            d_weights[i] = outer(&s, &cache.inputs[i]);
            d_biases[i] = s.clone();
            let v = self.weights[i].matvec_t(&s);
            if i > 0 {
                s = cache.preacts[i - 1]
                    .iter()
                    .zip(&v)
                    .map(|(&z, &vi)| self.activation.prime(z) * vi)
                    .collect();
            } else {
                input_grad = v;
            }
        }
        (input_grad, GradBundle { d_weights, d_biases })
    }

    /// ∇ₓ of a scalar-output network.
    pub fn input_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.require_scalar_output()?;
        let (_, cache) = self.forward(x)?;
        Ok(self.backward(&cache, &[1.0]).0)
    }

    /// ∂(upstream · output)/∂(weights, biases) for a scalar-output network.
    pub fn param_grad(&self, x: &[f64], upstream: f64) -> Result<GradBundle> {
        self.require_scalar_output()?;
        let (_, cache) = self.forward(x)?;
        Ok(self.backward(&cache, &[upstream]).1)
    }

    /// Parameter gradient of ⟨upstream_vec, ∇ₓ output⟩ for a scalar-output
    /// network, by forward-over-reverse differentiation.
    pub fn input_grad_param_grad(&self, x: &[f64], upstream_vec: &[f64]) -> Result<GradBundle> {
        Ok(self.grad_dual(x, upstream_vec)?.param_tangent)
    }

    fn require_scalar_output(&self) -> Result<()> {
        if self.output_dim() != 1 {
            return Err(SgnError::dim("scalar-output MLP", 1, self.output_dim()));
        }
        Ok(())
    }

    /// Forward-over-reverse dual pass for a scalar-output network.
    ///
    /// With input tangent u it returns in one sweep:
    ///   grad          = ∇ₓf(x)
    ///   hessian_vec   = ∇²f(x)·u
    ///   param_tangent = ∂⟨u, ∇ₓf⟩/∂(weights, biases)
    pub fn grad_dual(&self, x: &[f64], u: &[f64]) -> Result<DualGrad> {
        self.require_scalar_output()?;
        if x.len() != self.input_dim() {
            return Err(SgnError::dim("MLP input", self.input_dim(), x.len()));
        }
        if u.len() != x.len() {
            return Err(SgnError::dim("input tangent", x.len(), u.len()));
        }
        let l = self.weights.len();

        // Forward with dual numbers (value, directional derivative along u).
        let mut inputs = Vec::with_capacity(l);
        let mut inputs_dot = Vec::with_capacity(l);
        let mut preacts = Vec::with_capacity(l);
        let mut preacts_dot = Vec::with_capacity(l);
        let mut a = x.to_vec();
        let mut a_dot = u.to_vec();
        for i in 0..l {
            let w = &self.weights[i];
            let mut z = w.matvec(&a);
            for (zi, bi) in z.iter_mut().zip(&self.biases[i]) {
                *zi += bi;
            }
            let z_dot = w.matvec(&a_dot);
            inputs.push(a);
            inputs_dot.push(a_dot);
            if self.is_last(i) {
                a = z.clone();
                a_dot = z_dot.clone();
            } else {
                a = z.iter().map(|&v| self.activation.apply(v)).collect();
                a_dot = z
                    .iter()
                    .zip(&z_dot)
                    .map(|(&zv, &dv)| self.activation.prime(zv) * dv)
                    .collect();
            }
            preacts.push(z);
            preacts_dot.push(z_dot);
        }

        // Reverse with dual sensitivities.
        let mut d_weights = vec![Matrix::zeros(1, 1); l];
        let mut d_biases = vec![Vec::new(); l];
        let mut s = vec![1.0];
        let mut s_dot = vec![0.0];
        let mut grad = Vec::new();
        let mut hessian_vec = Vec::new();
        for i in (0..l).rev() {
            // Tangent of dW_i = s ⊗ input_i.
            let mut dw = outer(&s_dot, &inputs[i]);
            let dw2 = outer(&s, &inputs_dot[i]);
            for (x, y) in dw.data_mut().iter_mut().zip(dw2.data()) {
                *x += y;
            }
            d_weights[i] = dw;
            d_biases[i] = s_dot.clone();

            let v = self.weights[i].matvec_t(&s);
            let v_dot = self.weights[i].matvec_t(&s_dot);
            if i > 0 {
                let z = &self.preact(&preacts, i - 1);
                let z_dot = &preacts_dot[i - 1];
                let mut s_new = Vec::with_capacity(v.len());
                let mut s_dot_new = Vec::with_capacity(v.len());
                for j in 0..v.len() {
                    let prime = self.activation.prime(z[j]);
                    let second = self.activation.second(z[j]);
                    s_new.push(prime * v[j]);
                    s_dot_new.push(second * z_dot[j] * v[j] + prime * v_dot[j]);
                }
                s = s_new;
                s_dot = s_dot_new;
            } else {
                grad = v;
                hessian_vec = v_dot;
            }
        }
        Ok(DualGrad {
            grad,
            hessian_vec,
            param_tangent: GradBundle { d_weights, d_biases },
        })
    }

    fn preact<'a>(&self, preacts: &'a [Vec<f64>], i: usize) -> &'a [f64] {
        &preacts[i]
    }

    /// Estimate each ‖W_l‖₂ by power iteration from a fixed-seed start
    /// vector and rescale any layer above the cap down to it. Returns the
    /// capped network and the per-layer norm estimates after capping.
    pub fn spectral_normalize(&self, iters: usize) -> (MlpParams, Vec<f64>) {
        assert!(iters >= 1, "power iteration needs iters >= 1");
        let mut capped = self.clone();
        let mut norms = Vec::with_capacity(self.weights.len());
        for (l, w) in self.weights.iter().enumerate() {
            let mut est = spectral_norm_estimate(w, iters, l as u64);
            if let Some(cap) = self.spectral_cap {
                if est > cap {
                    capped.weights[l] = w.scaled(cap / est);
                    est = cap;
                }
            }
            norms.push(est);
        }
        (capped, norms)
    }

    pub fn spectral_norms(&self, iters: usize) -> Vec<f64> {
        self.weights
            .iter()
            .enumerate()
            .map(|(l, w)| spectral_norm_estimate(w, iters, l as u64))
            .collect()
    }

    pub fn flat_len(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.data().len() + b.len())
            .sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    /// Overwrite parameters from a flat slice in `flat_params` order.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(SgnError::dim("flat parameter length", self.flat_len(), flat.len()));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let n = w.data().len();
            w.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let blen = b.len();
            b.copy_from_slice(&flat[off..off + blen]);
            off += blen;
        }
        Ok(())
    }
}

/// Output of the forward-over-reverse pass.
#[derive(Debug, Clone)]
pub struct DualGrad {
    pub grad: Vec<f64>,
    pub hessian_vec: Vec<f64>,
    pub param_tangent: GradBundle,
}

pub const SPECTRAL_ITERS: usize = 50;

fn spectral_norm_estimate(w: &Matrix, iters: usize, layer: u64) -> f64 {
    // Fixed-seed start vector keeps the estimate deterministic.
    let mut rng = Rng::new(0x5FEC_7AA1 ^ layer);
    let mut v = rng.standard_normal_vec(w.cols());
    normalize(&mut v);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let wv = w.matvec(&v);
        sigma = norm(&wv);
        if sigma == 0.0 {
            return 0.0;
        }
        v = w.matvec_t(&wv);
        if norm(&v) == 0.0 {
            return sigma;
        }
        normalize(&mut v);
    }
    sigma
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

fn outer(a: &[f64], b: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(a.len(), b.len());
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            m.set(i, j, ai * bj);
        }
    }
    m
}

/// Separable neural Hamiltonian H(q, p) = K(p) + V(q) with scalar-output
/// sub-networks on R^d. Keeps the explicit leapfrog scheme exactly
/// symplectic.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableHamiltonianNet {
    kinetic: MlpParams,
    potential: MlpParams,
}

impl SeparableHamiltonianNet {
    pub fn new(kinetic: MlpParams, potential: MlpParams) -> Result<Self> {
        if kinetic.output_dim() != 1 || potential.output_dim() != 1 {
            return Err(SgnError::invalid(
                "hamiltonian sub-networks must have scalar output",
            ));
        }
        if kinetic.input_dim() != potential.input_dim() {
            return Err(SgnError::dim(
                "potential input dim",
                kinetic.input_dim(),
                potential.input_dim(),
            ));
        }
        Ok(SeparableHamiltonianNet { kinetic, potential })
    }

    pub fn random(
        d: usize,
        hidden: &[usize],
        activation: Activation,
        spectral_cap: Option<f64>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut dims = vec![d];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let kinetic = MlpParams::init(&dims, activation, spectral_cap, rng)?;
        let potential = MlpParams::init(&dims, activation, spectral_cap, rng)?;
        SeparableHamiltonianNet::new(kinetic, potential)
    }

    pub fn dim(&self) -> usize {
        self.kinetic.input_dim()
    }

    pub fn kinetic(&self) -> &MlpParams {
        &self.kinetic
    }

    pub fn potential(&self) -> &MlpParams {
        &self.potential
    }

    pub fn kinetic_mut(&mut self) -> &mut MlpParams {
        &mut self.kinetic
    }

    pub fn potential_mut(&mut self) -> &mut MlpParams {
        &mut self.potential
    }

    /// Re-cap both sub-networks; returns per-layer norm estimates (kinetic
    /// then potential).
    pub fn spectral_normalize(&self, iters: usize) -> (SeparableHamiltonianNet, Vec<f64>) {
        let (k, mut nk) = self.kinetic.spectral_normalize(iters);
        let (v, nv) = self.potential.spectral_normalize(iters);
        nk.extend(nv);
        (SeparableHamiltonianNet { kinetic: k, potential: v }, nk)
    }

    fn scalar_grad(net: &MlpParams, x: &[f64]) -> Vec<f64> {
        let (_, cache) = net.forward(x).expect("validated dims");
        net.backward(&cache, &[1.0]).0
    }

    fn scalar_value(net: &MlpParams, x: &[f64]) -> f64 {
        net.forward(x).expect("validated dims").0[0]
    }
}

impl Hamiltonian for SeparableHamiltonianNet {
    fn accepts_dim(&self, d: usize) -> bool {
        d == self.dim()
    }

    fn energy(&self, q: &[f64], p: &[f64]) -> f64 {
        Self::scalar_value(&self.kinetic, p) + Self::scalar_value(&self.potential, q)
    }

    fn grad_q(&self, q: &[f64], _p: &[f64]) -> Vec<f64> {
        Self::scalar_grad(&self.potential, q)
    }

    fn grad_p(&self, _q: &[f64], p: &[f64]) -> Vec<f64> {
        Self::scalar_grad(&self.kinetic, p)
    }

    fn is_separable(&self) -> bool {
        true
    }
}

/// Conservative curvature surrogate for the step-size guard:
/// max over the two sub-networks of (∏ₗ ‖Wₗ‖₂)² · max|σ''|.
///
/// A purely affine sub-network has zero curvature, so depth-1 nets
/// contribute 0. This upper-bounds the Hessian norm of each energy term; it
/// is a surrogate, not the exact four-constant expression, and is always at
/// least as large as the true curvature on the unit ball.
pub fn lipschitz_bound(hnet: &SeparableHamiltonianNet) -> f64 {
    let per_net = |net: &MlpParams| -> f64 {
        if net.layer_count() < 2 {
            return 0.0;
        }
        let product: f64 = net.spectral_norms(SPECTRAL_ITERS).iter().product();
        product * product * net.activation().second_derivative_bound()
    };
    per_net(hnet.kinetic()).max(per_net(hnet.potential()))
}

/// The cruder spectral-product bound (∏ₗ ‖Wₗ‖₂)² without the activation
/// curvature factor; reported alongside the surrogate so the tighter of the
/// two can drive the guard.
pub fn lipschitz_bound_spectral(hnet: &SeparableHamiltonianNet) -> f64 {
    let per_net = |net: &MlpParams| -> f64 {
        let product: f64 = net.spectral_norms(SPECTRAL_ITERS).iter().product();
        product * product
    };
    per_net(hnet.kinetic()).max(per_net(hnet.potential()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single_linear(w: Vec<Vec<f64>>, b: Vec<f64>) -> MlpParams {
        let cols = w[0].len();
        let rows = w.len();
        MlpParams::new(
            vec![cols, rows],
            vec![Matrix::from_rows(&w).unwrap()],
            vec![b],
            Activation::Tanh,
            None,
        )
        .unwrap()
    }

    fn random_net(dims: &[usize], act: Activation, seed: u64) -> MlpParams {
        let mut rng = Rng::new(seed);
        MlpParams::init(dims, act, None, &mut rng).unwrap()
    }

    #[test]
    fn forward_zero_net_is_zero() {
        let net = MlpParams::new(
            vec![3, 4, 2],
            vec![Matrix::zeros(4, 3), Matrix::zeros(2, 4)],
            vec![vec![0.0; 4], vec![0.0; 2]],
            Activation::Tanh,
            None,
        )
        .unwrap();
        let (y, _) = net.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_single_affine_layer() {
        let net = single_linear(vec![vec![2.0]], vec![1.0]);
        let (y, _) = net.forward(&[3.0]).unwrap();
        assert_eq!(y, vec![7.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = random_net(&[3, 8, 2], Activation::Tanh, 99);
        let x = [0.3, -1.2, 0.8];
        let (a, _) = net.forward(&x).unwrap();
        let (b, _) = net.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn input_grad_zero_net() {
        let net = MlpParams::new(
            vec![2, 1],
            vec![Matrix::zeros(1, 2)],
            vec![vec![0.0]],
            Activation::Tanh,
            None,
        )
        .unwrap();
        assert_eq!(net.input_grad(&[5.0, -3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn input_grad_linear_net() {
        let net = single_linear(vec![vec![3.0, -1.0]], vec![0.0]);
        assert_eq!(net.input_grad(&[0.7, 2.2]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn input_grad_requires_scalar_output() {
        let net = random_net(&[2, 4, 2], Activation::Tanh, 1);
        assert!(net.input_grad(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn input_grad_matches_finite_differences() {
        let net = random_net(&[4, 8, 8, 1], Activation::Tanh, 7);
        let mut rng = Rng::new(8);
        let x = rng.standard_normal_vec(4);
        let grad = net.input_grad(&x).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd =
                (net.forward(&xp).unwrap().0[0] - net.forward(&xm).unwrap().0[0]) / (2.0 * h);
            let scale = 1.0f64.max(grad[i].abs());
            assert!(
                (grad[i] - fd).abs() / scale < 1e-6,
                "component {i}: {} vs {}",
                grad[i],
                fd
            );
        }
    }

    #[test]
    fn param_grad_zero_upstream() {
        let net = random_net(&[2, 4, 1], Activation::Softplus, 3);
        let g = net.param_grad(&[0.5, -0.5], 0.0).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn param_grad_single_linear_layer() {
        let net = single_linear(vec![vec![1.5]], vec![0.2]);
        let g = net.param_grad(&[2.0], 1.0).unwrap();
        assert_eq!(g.d_weights[0].data(), &[2.0]);
        assert_eq!(g.d_biases[0], vec![1.0]);
    }

    #[test]
    fn param_grad_matches_finite_differences() {
        let net = random_net(&[3, 6, 1], Activation::Tanh, 21);
        let x = [0.4, -0.9, 1.1];
        let upstream = 0.7;
        let analytic = net.param_grad(&x, upstream).unwrap().flat();
        let h = 1e-6;
        let flat = net.flat_params();
        for i in 0..flat.len() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut fp = flat.clone();
            fp[i] += h;
            plus.set_flat_params(&fp).unwrap();
            fp[i] -= 2.0 * h;
            minus.set_flat_params(&fp).unwrap();
            let fd = upstream * (plus.forward(&x).unwrap().0[0] - minus.forward(&x).unwrap().0[0])
                / (2.0 * h);
            let scale = 1.0f64.max(analytic[i].abs());
            assert!(
                (analytic[i] - fd).abs() / scale < 1e-5,
                "param {i}: {} vs {}",
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn dual_pass_zero_tangent_gives_zero_bundle() {
        let net = random_net(&[2, 5, 1], Activation::Tanh, 13);
        let g = net.input_grad_param_grad(&[0.3, 0.4], &[0.0, 0.0]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn dual_pass_matches_finite_differences_of_directional_derivative() {
        // d/dθ ⟨u, ∇ₓf⟩ checked against central differences in each θ.
        let net = random_net(&[1, 4, 1], Activation::Tanh, 31);
        let x = [0.6];
        let u = [1.3];
        let analytic = net.input_grad_param_grad(&x, &u).unwrap().flat();
        let h = 1e-5;
        let flat = net.flat_params();
        let dir = |n: &MlpParams| -> f64 {
            let g = n.input_grad(&x).unwrap();
            g.iter().zip(&u).map(|(a, b)| a * b).sum()
        };
        for i in 0..flat.len() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut fp = flat.clone();
            fp[i] += h;
            plus.set_flat_params(&fp).unwrap();
            fp[i] -= 2.0 * h;
            minus.set_flat_params(&fp).unwrap();
            let fd = (dir(&plus) - dir(&minus)) / (2.0 * h);
            let scale = 1.0f64.max(analytic[i].abs());
            assert!(
                (analytic[i] - fd).abs() / scale < 1e-4,
                "param {i}: {} vs {}",
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn dual_pass_is_linear_in_upstream() {
        let net = random_net(&[3, 6, 1], Activation::Softplus, 17);
        let x = [0.2, -0.4, 0.9];
        let u1 = [0.5, 1.0, -2.0];
        let u2 = [-1.5, 0.3, 0.8];
        let sum: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a + b).collect();
        let g1 = net.input_grad_param_grad(&x, &u1).unwrap();
        let g2 = net.input_grad_param_grad(&x, &u2).unwrap();
        let gs = net.input_grad_param_grad(&x, &sum).unwrap();
        let mut combined = g1.clone();
        combined.add_scaled(&g2, 1.0);
        let ga = combined.flat();
        let gb = gs.flat();
        for (a, b) in ga.iter().zip(&gb) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn hessian_vec_matches_finite_differences() {
        let net = random_net(&[3, 8, 1], Activation::Tanh, 41);
        let x = [0.1, 0.7, -0.3];
        let u = [1.0, -0.5, 0.25];
        let dual = net.grad_dual(&x, &u).unwrap();
        let h = 1e-6;
        let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a - h * b).collect();
        let gp = net.input_grad(&xp).unwrap();
        let gm = net.input_grad(&xm).unwrap();
        for i in 0..3 {
            let fd = (gp[i] - gm[i]) / (2.0 * h);
            let scale = 1.0f64.max(dual.hessian_vec[i].abs());
            assert!(
                (dual.hessian_vec[i] - fd).abs() / scale < 1e-5,
                "component {i}: {} vs {}",
                dual.hessian_vec[i],
                fd
            );
        }
    }

    #[test]
    fn spectral_normalize_diagonal_case() {
        // ‖diag(2,1)‖₂ = 2; capping at 1 halves the matrix.
        let net = MlpParams::new(
            vec![2, 2],
            vec![Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap()],
            vec![vec![0.0; 2]],
            Activation::Tanh,
            Some(1.0),
        )
        .unwrap();
        let (capped, norms) = net.spectral_normalize(100);
        let w = &capped.weights()[0];
        assert_relative_eq!(w.get(0, 0), 1.0, max_relative = 1e-9);
        assert_relative_eq!(w.get(1, 1), 0.5, max_relative = 1e-9);
        assert!(norms[0] <= 1.0 * (1.0 + 1e-6));
    }

    #[test]
    fn spectral_normalize_leaves_small_norms_alone() {
        let net = MlpParams::new(
            vec![2, 2],
            vec![Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.25]]).unwrap()],
            vec![vec![0.0; 2]],
            Activation::Tanh,
            Some(1.0),
        )
        .unwrap();
        let (capped, _) = net.spectral_normalize(100);
        assert_eq!(capped.weights()[0], net.weights()[0]);
    }

    #[test]
    fn power_iteration_close_to_sampled_norm_bound() {
        // Oracle: randomized lower bound max ‖Wx‖/‖x‖ over 1e5 random
        // probes (odd probes smoothed once by x ← WᵀWx, still a valid
        // lower bound), plus convergence of the iteration across restarts.
        let mut rng = Rng::new(300);
        let w = Matrix::new(8, 8, rng.standard_normal_vec(64)).unwrap();
        let est = spectral_norm_estimate(&w, 200, 0);
        let mut best = 0.0f64;
        for i in 0..100_000 {
            let mut x = rng.standard_normal_vec(8);
            if i % 2 == 1 {
                x = w.matvec_t(&w.matvec(&x));
            }
            let n = norm(&x);
            if n == 0.0 {
                continue;
            }
            best = best.max(norm(&w.matvec(&x)) / n);
        }
        assert!(best <= est * (1.0 + 1e-9), "sampled bound exceeds estimate");
        assert!(
            (est - best) / est < 0.01,
            "estimate {est} vs sampled {best}"
        );
        // Restarting from different seeds converges to the same value.
        for layer_seed in 1..4 {
            let restart = spectral_norm_estimate(&w, 200, layer_seed);
            assert!((restart - est).abs() / est < 1e-9);
        }
    }

    #[test]
    fn spectral_cap_invariant_after_normalization() {
        for seed in 0..5 {
            let mut rng = Rng::new(1000 + seed);
            let net = MlpParams::init(&[4, 16, 16, 1], Activation::Tanh, Some(0.8), &mut rng)
                .unwrap();
            let norms = net.spectral_norms(SPECTRAL_ITERS);
            for n in norms {
                assert!(n <= 0.8 * (1.0 + 1e-6), "norm {n} above cap");
            }
        }
    }

    #[test]
    fn lipschitz_bound_zero_and_linear_nets() {
        let zero = MlpParams::new(
            vec![2, 3, 1],
            vec![Matrix::zeros(3, 2), Matrix::zeros(1, 3)],
            vec![vec![0.0; 3], vec![0.0]],
            Activation::Tanh,
            None,
        )
        .unwrap();
        let h = SeparableHamiltonianNet::new(zero.clone(), zero).unwrap();
        assert_eq!(lipschitz_bound(&h), 0.0);

        // Single affine layer: zero curvature regardless of weights.
        let lin = single_linear(vec![vec![3.0, -2.0]], vec![0.0]);
        let h = SeparableHamiltonianNet::new(lin.clone(), lin).unwrap();
        assert_eq!(lipschitz_bound(&h), 0.0);
        assert!(lipschitz_bound_spectral(&h) > 0.0);
    }

    #[test]
    fn separable_net_construction_guards() {
        let scalar = random_net(&[2, 4, 1], Activation::Tanh, 5);
        let vector = random_net(&[2, 4, 2], Activation::Tanh, 6);
        assert!(SeparableHamiltonianNet::new(scalar.clone(), vector).is_err());
        let other_dim = random_net(&[3, 4, 1], Activation::Tanh, 7);
        assert!(SeparableHamiltonianNet::new(scalar, other_dim).is_err());
    }

    #[test]
    fn gradient_suite_over_random_nets() {
        // Depths 1–3, widths 4–32: first-order passes vs finite differences.
        let mut rng = Rng::new(424242);
        let mut checked = 0;
        for depth in 1..=3usize {
            for &width in &[4usize, 8, 32] {
                for case in 0..8 {
                    let mut dims = vec![3usize];
                    dims.extend(std::iter::repeat(width).take(depth - 1));
                    dims.push(1);
                    let act = if case % 2 == 0 {
                        Activation::Tanh
                    } else {
                        Activation::Softplus
                    };
                    let net = MlpParams::init(&dims, act, None, &mut rng).unwrap();
                    let x = rng.standard_normal_vec(3);
                    let grad = net.input_grad(&x).unwrap();
                    let h = 1e-6;
                    for i in 0..3 {
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[i] += h;
                        xm[i] -= h;
                        let fd = (net.forward(&xp).unwrap().0[0]
                            - net.forward(&xm).unwrap().0[0])
                            / (2.0 * h);
                        let scale = 1.0f64.max(grad[i].abs());
                        assert!((grad[i] - fd).abs() / scale < 1e-5);
                    }
                    checked += 1;
                }
            }
        }
        assert!(checked >= 64);
    }
}
