//! The full generative model: Gaussian encoder, Hamiltonian flow in latent
//! space, decoder, and likelihood evaluation.
//!
//! The flow contributes no density term — its Jacobian determinant is one —
//! so the ELBO is just reconstruction minus KL, and in exact-affine decoder
//! mode the model admits closed-form log-likelihoods via the inverse flow
//! plus the affine log-determinant.

use crate::error::{Result, SgnError};
use crate::integrator::{self, FlowConfig, StepMode};
use crate::net::{Activation, MlpParams, SeparableHamiltonianNet};
use crate::phase::PhaseState;
use crate::rng::Rng;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
pub const LN_2PI: f64 = 1.8378770664093453; // ln(2π)

/// Diagonal Gaussian in (mean, log-variance) form. Log-variances are
/// clamped to [-10, 10] at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(SgnError::dim("gaussian log_var length", mean.len(), log_var.len()));
        }
        if mean.is_empty() {
            return Err(SgnError::invalid("gaussian parameters must be non-empty"));
        }
        if !mean.iter().chain(log_var.iter()).all(|v| v.is_finite()) {
            return Err(SgnError::NonFinite("gaussian parameters".into()));
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(GaussianParams { mean, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        log_diag_gaussian(z, &self.mean, &self.log_var)
    }
}

/// D_KL(N(μ, diag e^{lv}) ‖ N(0, I)) in closed form.
pub fn gaussian_kl(g: &GaussianParams) -> f64 {
    0.5 * g
        .mean
        .iter()
        .zip(&g.log_var)
        .map(|(&m, &lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

pub fn log_std_normal(z: &[f64]) -> f64 {
    -0.5 * (z.len() as f64) * LN_2PI - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

pub fn log_diag_gaussian(x: &[f64], mean: &[f64], log_var: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), mean.len());
    debug_assert_eq!(x.len(), log_var.len());
    x.iter()
        .zip(mean)
        .zip(log_var)
        .map(|((&xi, &mi), &lv)| {
            let diff = xi - mi;
            -0.5 * (LN_2PI + lv) - 0.5 * diff * diff * (-lv).exp()
        })
        .sum()
}

/// Decoder family.
#[derive(Debug, Clone, PartialEq)]
pub enum DecoderMode {
    /// Diagonal Gaussian p(x | z_T) parameterized by an MLP 2d → 2·data_dim.
    Gaussian(MlpParams),
    /// Invertible elementwise affine output map Λ(z) = scale ⊙ z + shift
    /// with an exact log-determinant; requires data_dim = 2d.
    ExactAffine { scale: Vec<f64>, shift: Vec<f64> },
}

/// Encoder + Hamiltonian flow + decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SgnModel {
    data_dim: usize,
    latent_half_dim: usize,
    encoder: MlpParams,
    hamiltonian: SeparableHamiltonianNet,
    decoder: DecoderMode,
    flow_cfg: FlowConfig,
}

/// One ELBO evaluation, split into its terms.
///
/// `elbo = reconstruction - kl` always; `logdet_correction` reports the
/// affine volume term already contained in the reconstruction (0 in
/// Gaussian mode).
#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub elbo: f64,
    pub logdet_correction: f64,
}

impl SgnModel {
    pub fn new(
        data_dim: usize,
        latent_half_dim: usize,
        encoder: MlpParams,
        hamiltonian: SeparableHamiltonianNet,
        decoder: DecoderMode,
        flow_cfg: FlowConfig,
    ) -> Result<Self> {
        if data_dim == 0 || latent_half_dim == 0 {
            return Err(SgnError::invalid("dimensions must be positive"));
        }
        let d2 = 2 * latent_half_dim;
        if encoder.input_dim() != data_dim {
            return Err(SgnError::dim("encoder input", data_dim, encoder.input_dim()));
        }
        if encoder.output_dim() != 2 * d2 {
            return Err(SgnError::dim("encoder output", 2 * d2, encoder.output_dim()));
        }
        if hamiltonian.dim() != latent_half_dim {
            return Err(SgnError::dim("hamiltonian dim", latent_half_dim, hamiltonian.dim()));
        }
        match &decoder {
            DecoderMode::Gaussian(net) => {
                if net.input_dim() != d2 {
                    return Err(SgnError::dim("decoder input", d2, net.input_dim()));
                }
                if net.output_dim() != 2 * data_dim {
                    return Err(SgnError::dim("decoder output", 2 * data_dim, net.output_dim()));
                }
            }
            DecoderMode::ExactAffine { scale, shift } => {
                if data_dim != d2 {
                    return Err(SgnError::dim("exact-affine data_dim", d2, data_dim));
                }
                if scale.len() != d2 || shift.len() != d2 {
                    return Err(SgnError::dim(
                        "affine parameter length",
                        d2,
                        scale.len().min(shift.len()),
                    ));
                }
                if scale.iter().any(|&s| s == 0.0 || !s.is_finite()) {
                    return Err(SgnError::invalid("affine scale entries must be nonzero"));
                }
                // The inverse flow needs step sizes known without a forward
                // pass, which only fixed mode provides.
                if !matches!(flow_cfg.mode(), StepMode::Fixed) {
                    return Err(SgnError::invalid(
                        "exact-affine decoder requires fixed-step flow",
                    ));
                }
            }
        }
        Ok(SgnModel {
            data_dim,
            latent_half_dim,
            encoder,
            hamiltonian,
            decoder,
            flow_cfg,
        })
    }

    /// Random initialization of every component. `decoder_hidden = None`
    /// selects the exact-affine decoder (identity Λ at init).
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        data_dim: usize,
        latent_half_dim: usize,
        encoder_hidden: &[usize],
        hamiltonian_hidden: &[usize],
        decoder_hidden: Option<&[usize]>,
        activation: Activation,
        spectral_cap: Option<f64>,
        flow_cfg: FlowConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d2 = 2 * latent_half_dim;
        let mut enc_dims = vec![data_dim];
        enc_dims.extend_from_slice(encoder_hidden);
        enc_dims.push(2 * d2);
        let encoder = MlpParams::init(&enc_dims, activation, None, rng)?;
        let hamiltonian = SeparableHamiltonianNet::random(
            latent_half_dim,
            hamiltonian_hidden,
            activation,
            spectral_cap,
            rng,
        )?;
        let decoder = match decoder_hidden {
            Some(hidden) => {
                let mut dec_dims = vec![d2];
                dec_dims.extend_from_slice(hidden);
                dec_dims.push(2 * data_dim);
                DecoderMode::Gaussian(MlpParams::init(&dec_dims, activation, None, rng)?)
            }
            None => DecoderMode::ExactAffine {
                scale: vec![1.0; d2],
                shift: vec![0.0; d2],
            },
        };
        SgnModel::new(
            data_dim,
            latent_half_dim,
            encoder,
            hamiltonian,
            decoder,
            flow_cfg,
        )
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn latent_half_dim(&self) -> usize {
        self.latent_half_dim
    }

    pub fn encoder(&self) -> &MlpParams {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut MlpParams {
        &mut self.encoder
    }

    pub fn hamiltonian(&self) -> &SeparableHamiltonianNet {
        &self.hamiltonian
    }

    pub fn hamiltonian_mut(&mut self) -> &mut SeparableHamiltonianNet {
        &mut self.hamiltonian
    }

    pub fn set_hamiltonian(&mut self, h: SeparableHamiltonianNet) {
        self.hamiltonian = h;
    }

    pub fn decoder(&self) -> &DecoderMode {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut DecoderMode {
        &mut self.decoder
    }

    pub fn flow_cfg(&self) -> &FlowConfig {
        &self.flow_cfg
    }

    pub fn set_flow_cfg(&mut self, cfg: FlowConfig) {
        self.flow_cfg = cfg;
    }

    /// q_φ(z₀ | x): encoder output split into mean and clamped log-variance.
    pub fn encode(&self, x: &[f64]) -> Result<GaussianParams> {
        if x.len() != self.data_dim {
            return Err(SgnError::dim("encode input", self.data_dim, x.len()));
        }
        let (out, _) = self.encoder.forward(x)?;
        let d2 = 2 * self.latent_half_dim;
        GaussianParams::new(out[..d2].to_vec(), out[d2..].to_vec())
    }

    /// z₀ = μ + exp(lv/2) ⊙ ε with ε ~ N(0, I). The first d coordinates
    /// become q, the last d become p.
    pub fn reparam_sample(&self, g: &GaussianParams, rng: &mut Rng) -> PhaseState {
        let eps = rng.standard_normal_vec(g.dim());
        Self::reparam_with_eps(g, &eps)
    }

    /// Deterministic reparameterization for a given ε draw.
    pub fn reparam_with_eps(g: &GaussianParams, eps: &[f64]) -> PhaseState {
        debug_assert_eq!(eps.len(), g.dim());
        let z: Vec<f64> = g
            .mean
            .iter()
            .zip(&g.log_var)
            .zip(eps)
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect();
        PhaseState::from_flat(&z).expect("gaussian params validated")
    }

    /// log p_θ(x | z_T) for the Gaussian decoder.
    pub fn decode_log_prob(&self, z_t: &PhaseState, x: &[f64]) -> Result<f64> {
        if x.len() != self.data_dim {
            return Err(SgnError::dim("decode target", self.data_dim, x.len()));
        }
        if z_t.dim() != self.latent_half_dim {
            return Err(SgnError::dim("decode latent", self.latent_half_dim, z_t.dim()));
        }
        let net = match &self.decoder {
            DecoderMode::Gaussian(net) => net,
            DecoderMode::ExactAffine { .. } => {
                return Err(SgnError::WrongDecoderMode { expected: "gaussian" })
            }
        };
        let (out, _) = net.forward(&z_t.to_flat())?;
        let (mean, log_var) = split_decoder_output(&out, self.data_dim);
        Ok(log_diag_gaussian(x, &mean, &log_var))
    }

    /// The per-point training objective.
    ///
    /// Gaussian mode: reconstruction averaged over `mc_samples`
    /// reparameterized draws, each pushed through the flow; KL in closed
    /// form; no flow density term. Exact-affine mode: the exact
    /// log-likelihood (the bound is tight), with the affine volume term
    /// reported in `logdet_correction`.
    pub fn elbo(&self, x: &[f64], rng: &mut Rng, mc_samples: usize) -> Result<ElboBreakdown> {
        if mc_samples == 0 {
            return Err(SgnError::invalid("mc_samples must be >= 1"));
        }
        match &self.decoder {
            DecoderMode::Gaussian(_) => {
                let g = self.encode(x)?;
                let kl = gaussian_kl(&g);
                let mut rec = 0.0;
                for s in 0..mc_samples {
                    let z0 = self.reparam_sample(&g, rng);
                    let (z_t, _) = integrator::flow(&self.hamiltonian, &z0, &self.flow_cfg)
                        .map_err(|e| tag_sample(e, s))?;
                    rec += self.decode_log_prob(&z_t, x)?;
                }
                rec /= mc_samples as f64;
                Ok(ElboBreakdown {
                    reconstruction: rec,
                    kl,
                    elbo: rec - kl,
                    logdet_correction: 0.0,
                })
            }
            DecoderMode::ExactAffine { scale, .. } => {
                let ll = self.exact_log_likelihood(x)?;
                let logdet: f64 = scale.iter().map(|s| s.abs().ln()).sum();
                Ok(ElboBreakdown {
                    reconstruction: ll,
                    kl: 0.0,
                    elbo: ll,
                    logdet_correction: -logdet,
                })
            }
        }
    }

    /// Draw from the model: z₀ ~ N(0, I) → flow → decoder mean (Gaussian,
    /// noiseless convention) or Λ(z_T) (exact-affine).
    pub fn generate(&self, rng: &mut Rng, n: usize) -> Result<Vec<Vec<f64>>> {
        let d2 = 2 * self.latent_half_dim;
        let mut out = Vec::with_capacity(n);
        for s in 0..n {
            let z0 = PhaseState::from_flat(&rng.standard_normal_vec(d2))?;
            let (z_t, _) = integrator::flow(&self.hamiltonian, &z0, &self.flow_cfg)
                .map_err(|e| tag_sample(e, s))?;
            let x = match &self.decoder {
                DecoderMode::Gaussian(net) => {
                    let (dec, _) = net.forward(&z_t.to_flat())?;
                    dec[..self.data_dim].to_vec()
                }
                DecoderMode::ExactAffine { scale, shift } => z_t
                    .to_flat()
                    .iter()
                    .zip(scale)
                    .zip(shift)
                    .map(|((&z, &a), &b)| a * z + b)
                    .collect(),
            };
            out.push(x);
        }
        Ok(out)
    }

    /// Exact log p(x) in exact-affine mode:
    /// log N(Φ_T⁻¹(Λ⁻¹(x)); 0, I) − Σᵢ log|scaleᵢ|.
    pub fn exact_log_likelihood(&self, x: &[f64]) -> Result<f64> {
        let (scale, shift) = match &self.decoder {
            DecoderMode::ExactAffine { scale, shift } => (scale, shift),
            DecoderMode::Gaussian(_) => {
                return Err(SgnError::WrongDecoderMode { expected: "exact_affine" })
            }
        };
        if x.len() != self.data_dim {
            return Err(SgnError::dim("likelihood input", self.data_dim, x.len()));
        }
        let z_t_flat: Vec<f64> = x
            .iter()
            .zip(scale)
            .zip(shift)
            .map(|((&xi, &a), &b)| (xi - b) / a)
            .collect();
        let z_t = PhaseState::from_flat(&z_t_flat)?;
        let dts = self.flow_cfg.fixed_step_sizes()?;
        let z0 = integrator::inverse_flow(&self.hamiltonian, &z_t, &dts)?;
        let logdet: f64 = scale.iter().map(|s| s.abs().ln()).sum();
        Ok(log_std_normal(&z0.to_flat()) - logdet)
    }

    /// Importance-weighted log-likelihood estimate with the encoder as
    /// proposal: log (1/S) Σ exp[log p_θ(x|Φ(z₀ˢ)) + log p(z₀ˢ) − log q(z₀ˢ|x)].
    pub fn iw_log_likelihood(&self, x: &[f64], rng: &mut Rng, s_count: usize) -> Result<f64> {
        if s_count == 0 {
            return Err(SgnError::invalid("importance sample count must be >= 1"));
        }
        if matches!(self.decoder, DecoderMode::ExactAffine { .. }) {
            return Err(SgnError::WrongDecoderMode { expected: "gaussian" });
        }
        let g = self.encode(x)?;
        let mut terms = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let z0 = self.reparam_sample(&g, rng);
            let (z_t, _) = integrator::flow(&self.hamiltonian, &z0, &self.flow_cfg)
                .map_err(|e| tag_sample(e, s))?;
            let flat = z0.to_flat();
            let term =
                self.decode_log_prob(&z_t, x)? + log_std_normal(&flat) - g.log_density(&flat);
            terms.push(term);
        }
        Ok(log_mean_exp(&terms))
    }

    /// Flat parameter vector: encoder, kinetic, potential, decoder.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.encoder.flat_params();
        out.extend(self.hamiltonian.kinetic().flat_params());
        out.extend(self.hamiltonian.potential().flat_params());
        match &self.decoder {
            DecoderMode::Gaussian(net) => out.extend(net.flat_params()),
            DecoderMode::ExactAffine { scale, shift } => {
                out.extend_from_slice(scale);
                out.extend_from_slice(shift);
            }
        }
        out
    }

    pub fn flat_len(&self) -> usize {
        let dec = match &self.decoder {
            DecoderMode::Gaussian(net) => net.flat_len(),
            DecoderMode::ExactAffine { scale, shift } => scale.len() + shift.len(),
        };
        self.encoder.flat_len()
            + self.hamiltonian.kinetic().flat_len()
            + self.hamiltonian.potential().flat_len()
            + dec
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(SgnError::dim("model flat parameters", self.flat_len(), flat.len()));
        }
        let mut off = 0;
        let take = |off: &mut usize, n: usize| -> std::ops::Range<usize> {
            let r = *off..*off + n;
            *off += n;
            r
        };
        let n = self.encoder.flat_len();
        self.encoder.set_flat_params(&flat[take(&mut off, n)])?;
        let n = self.hamiltonian.kinetic().flat_len();
        self.hamiltonian
            .kinetic_mut()
            .set_flat_params(&flat[take(&mut off, n)])?;
        let n = self.hamiltonian.potential().flat_len();
        self.hamiltonian
            .potential_mut()
            .set_flat_params(&flat[take(&mut off, n)])?;
        match &mut self.decoder {
            DecoderMode::Gaussian(net) => {
                let n = net.flat_len();
                net.set_flat_params(&flat[take(&mut off, n)])?;
            }
            DecoderMode::ExactAffine { scale, shift } => {
                let n = scale.len();
                scale.copy_from_slice(&flat[take(&mut off, n)]);
                let n = shift.len();
                shift.copy_from_slice(&flat[take(&mut off, n)]);
            }
        }
        if off != flat.len() {
            return Err(SgnError::dim("model flat parameters", off, flat.len()));
        }
        Ok(())
    }
}

/// Split decoder output into (mean, clamped log-variance).
pub fn split_decoder_output(out: &[f64], data_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mean = out[..data_dim].to_vec();
    let log_var = out[data_dim..]
        .iter()
        .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
        .collect();
    (mean, log_var)
}

/// Numerically stabilized log((1/n) Σ exp(vᵢ)).
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (sum / values.len() as f64).ln()
}

fn tag_sample(e: SgnError, sample: usize) -> SgnError {
    match e {
        SgnError::Divergence { step } => SgnError::SampleDivergence { sample, step },
        other => other,
    }
}
