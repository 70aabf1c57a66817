//! The Hamiltonian interface and the analytic reference Hamiltonians.
//!
//! The integrator only needs the energy and its phase-space gradients. The
//! explicit leapfrog scheme is exactly symplectic for separable H; the
//! `is_separable` flag lets the verification harness flag the one permitted
//! non-separable case (a general quadratic form).

use crate::error::{Result, SgnError};
use crate::linalg::Matrix;
use crate::phase::PhaseState;

/// Energy function on phase space with gradient evaluation.
///
/// Implementations may assume `q.len() == p.len() == d` for a `d` accepted by
/// `accepts_dim`; callers validate dimensions once before stepping.
pub trait Hamiltonian {
    fn accepts_dim(&self, d: usize) -> bool;

    fn energy(&self, q: &[f64], p: &[f64]) -> f64;

    /// ∂H/∂q evaluated at (q, p).
    fn grad_q(&self, q: &[f64], p: &[f64]) -> Vec<f64>;

    /// ∂H/∂p evaluated at (q, p).
    fn grad_p(&self, q: &[f64], p: &[f64]) -> Vec<f64>;

    /// True when H(q, p) = K(p) + V(q).
    fn is_separable(&self) -> bool;
}

/// Closed-form Hamiltonians used as references and oracles.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticHamiltonian {
    /// H = c; the flow is the identity.
    Constant(f64),
    /// H = ½‖p‖²; pure drift.
    FreeParticle,
    /// H = ½‖p‖² + (ω²/2)‖q‖² with angular frequency ω > 0.
    HarmonicOscillator { omega: f64 },
    /// H = ½ zᵀ A z for a symmetric 2d×2d matrix A, z = (q, p).
    Quadratic { a: Matrix },
    /// H = Σᵢ [pᵢ²/(2ml²) + mgl(1 − cos qᵢ)]; nonlinear with bounded curvature.
    Pendulum { mass: f64, length: f64, gravity: f64 },
}

impl AnalyticHamiltonian {
    pub fn harmonic(omega: f64) -> Result<Self> {
        if !(omega > 0.0) {
            return Err(SgnError::invalid(format!(
                "harmonic oscillator needs omega > 0, got {omega}"
            )));
        }
        Ok(AnalyticHamiltonian::HarmonicOscillator { omega })
    }

    pub fn quadratic(a: Matrix) -> Result<Self> {
        if a.rows() != a.cols() || a.rows() % 2 != 0 || a.rows() == 0 {
            return Err(SgnError::invalid(format!(
                "quadratic form must be 2d x 2d, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        if !a.is_symmetric(1e-12) {
            return Err(SgnError::invalid("quadratic form matrix must be symmetric"));
        }
        Ok(AnalyticHamiltonian::Quadratic { a })
    }

    pub fn pendulum(mass: f64, length: f64, gravity: f64) -> Result<Self> {
        if !(mass > 0.0 && length > 0.0 && gravity > 0.0) {
            return Err(SgnError::invalid("pendulum parameters must be positive"));
        }
        Ok(AnalyticHamiltonian::Pendulum {
            mass,
            length,
            gravity,
        })
    }

    /// H(q, p) with dimension checking.
    pub fn value(&self, z: &PhaseState) -> Result<f64> {
        self.check_dim(z)?;
        Ok(self.energy(z.q(), z.p()))
    }

    /// (∂H/∂q, ∂H/∂p) with dimension checking.
    pub fn gradient(&self, z: &PhaseState) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dim(z)?;
        Ok((self.grad_q(z.q(), z.p()), self.grad_p(z.q(), z.p())))
    }

    fn check_dim(&self, z: &PhaseState) -> Result<()> {
        if !self.accepts_dim(z.dim()) {
            return Err(SgnError::dim(
                "hamiltonian phase dimension",
                self.required_dim().unwrap_or(0),
                z.dim(),
            ));
        }
        Ok(())
    }

    fn required_dim(&self) -> Option<usize> {
        match self {
            AnalyticHamiltonian::Quadratic { a } => Some(a.rows() / 2),
            _ => None,
        }
    }

    /// Curvature bound L_H entering the step-size guard Δt < 2/√L_H.
    ///
    /// Exact for the quadratic family: the cross-Lipschitz combination
    /// L_q·L_p + L_qp·L_pq of the gradient map. Harmonic: ω². Pendulum: g/l.
    pub fn curvature_bound(&self) -> f64 {
        match self {
            AnalyticHamiltonian::Constant(_) => 0.0,
            AnalyticHamiltonian::FreeParticle => 0.0,
            AnalyticHamiltonian::HarmonicOscillator { omega } => omega * omega,
            AnalyticHamiltonian::Quadratic { a } => {
                let d = a.rows() / 2;
                let block_norm = |r0: usize, c0: usize| {
                    // Spectral norm upper bound via sqrt(‖B‖₁·‖B‖∞).
                    let mut row_sums = vec![0.0f64; d];
                    let mut col_sums = vec![0.0f64; d];
                    for r in 0..d {
                        for c in 0..d {
                            let v = a.get(r0 + r, c0 + c).abs();
                            row_sums[r] += v;
                            col_sums[c] += v;
                        }
                    }
                    let inf = row_sums.iter().cloned().fold(0.0f64, f64::max);
                    let one = col_sums.iter().cloned().fold(0.0f64, f64::max);
                    (inf * one).sqrt()
                };
                let l_q = block_norm(0, 0);
                let l_p = block_norm(d, d);
                let l_qp = block_norm(0, d);
                let l_pq = block_norm(d, 0);
                l_q * l_p + l_qp * l_pq
            }
            AnalyticHamiltonian::Pendulum {
                mass,
                length,
                gravity,
            } => {
                // max|V''| = mgl, K'' = 1/(ml²): product is g/l.
                let l_q = mass * gravity * length;
                let l_p = 1.0 / (mass * length * length);
                l_q * l_p
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            AnalyticHamiltonian::Constant(_) => "constant",
            AnalyticHamiltonian::FreeParticle => "free_particle",
            AnalyticHamiltonian::HarmonicOscillator { .. } => "harmonic_oscillator",
            AnalyticHamiltonian::Quadratic { .. } => "quadratic",
            AnalyticHamiltonian::Pendulum { .. } => "pendulum",
        }
    }
}

impl Hamiltonian for AnalyticHamiltonian {
    fn accepts_dim(&self, d: usize) -> bool {
        match self.required_dim() {
            Some(required) => d == required,
            None => d >= 1,
        }
    }

    fn energy(&self, q: &[f64], p: &[f64]) -> f64 {
        match self {
            AnalyticHamiltonian::Constant(c) => *c,
            AnalyticHamiltonian::FreeParticle => 0.5 * dot(p, p),
            AnalyticHamiltonian::HarmonicOscillator { omega } => {
                0.5 * dot(p, p) + 0.5 * omega * omega * dot(q, q)
            }
            AnalyticHamiltonian::Quadratic { a } => {
                let z: Vec<f64> = q.iter().chain(p.iter()).copied().collect();
                0.5 * dot(&z, &a.matvec(&z))
            }
            AnalyticHamiltonian::Pendulum {
                mass,
                length,
                gravity,
            } => {
                let kin: f64 = p.iter().map(|pi| pi * pi).sum::<f64>()
                    / (2.0 * mass * length * length);
                let pot: f64 = q
                    .iter()
                    .map(|qi| mass * gravity * length * (1.0 - qi.cos()))
                    .sum();
                kin + pot
            }
        }
    }

    fn grad_q(&self, q: &[f64], p: &[f64]) -> Vec<f64> {
        match self {
            AnalyticHamiltonian::Constant(_) | AnalyticHamiltonian::FreeParticle => {
                vec![0.0; q.len()]
            }
            AnalyticHamiltonian::HarmonicOscillator { omega } => {
                q.iter().map(|qi| omega * omega * qi).collect()
            }
            AnalyticHamiltonian::Quadratic { a } => {
                let z: Vec<f64> = q.iter().chain(p.iter()).copied().collect();
                a.matvec(&z)[..q.len()].to_vec()
            }
            AnalyticHamiltonian::Pendulum {
                mass,
                length,
                gravity,
            } => q
                .iter()
                .map(|qi| mass * gravity * length * qi.sin())
                .collect(),
        }
    }

    fn grad_p(&self, q: &[f64], p: &[f64]) -> Vec<f64> {
        match self {
            AnalyticHamiltonian::Constant(_) => vec![0.0; p.len()],
            AnalyticHamiltonian::FreeParticle => p.to_vec(),
            AnalyticHamiltonian::HarmonicOscillator { .. } => p.to_vec(),
            AnalyticHamiltonian::Quadratic { a } => {
                let z: Vec<f64> = q.iter().chain(p.iter()).copied().collect();
                a.matvec(&z)[q.len()..].to_vec()
            }
            AnalyticHamiltonian::Pendulum { mass, length, .. } => {
                p.iter().map(|pi| pi / (mass * length * length)).collect()
            }
        }
    }

    fn is_separable(&self) -> bool {
        match self {
            AnalyticHamiltonian::Quadratic { a } => {
                // Separable iff the q–p coupling blocks vanish.
                let d = a.rows() / 2;
                for r in 0..d {
                    for c in 0..d {
                        if a.get(r, d + c).abs() > 1e-12 {
                            return false;
                        }
                    }
                }
                true
            }
            _ => true,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
