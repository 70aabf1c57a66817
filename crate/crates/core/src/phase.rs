//! Phase-space state: canonical coordinates z = (q, p).

use crate::error::{Result, SgnError};

/// A point z = (q, p) in the 2d-dimensional phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    q: Vec<f64>,
    p: Vec<f64>,
}

impl PhaseState {
    /// Validating constructor: equal lengths d ≥ 1, all entries finite.
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(SgnError::invalid("phase state needs d >= 1"));
        }
        if q.len() != p.len() {
            return Err(SgnError::dim("phase state p length", q.len(), p.len()));
        }
        if !q.iter().chain(p.iter()).all(|v| v.is_finite()) {
            return Err(SgnError::NonFinite("phase state".into()));
        }
        Ok(PhaseState { q, p })
    }

    /// Internal constructor for states already known finite.
    pub(crate) fn from_parts_unchecked(q: Vec<f64>, p: Vec<f64>) -> Self {
        debug_assert_eq!(q.len(), p.len());
        PhaseState { q, p }
    }

    /// Split a flat vector [q..., p...] of even length 2d.
    pub fn from_flat(z: &[f64]) -> Result<Self> {
        if z.len() < 2 || z.len() % 2 != 0 {
            return Err(SgnError::invalid(format!(
                "flat phase vector must have positive even length, got {}",
                z.len()
            )));
        }
        let d = z.len() / 2;
        PhaseState::new(z[..d].to_vec(), z[d..].to_vec())
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    /// Concatenated [q..., p...] vector.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(2 * self.q.len());
        z.extend_from_slice(&self.q);
        z.extend_from_slice(&self.p);
        z
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.p.iter()).all(|v| v.is_finite())
    }

    /// Euclidean norm of the full (q, p) vector.
    pub fn norm(&self) -> f64 {
        self.q
            .iter()
            .chain(self.p.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// ∞-norm distance to another state.
    pub fn max_abs_diff(&self, other: &PhaseState) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        let dq = self
            .q
            .iter()
            .zip(&other.q)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let dp = self
            .p
            .iter()
            .zip(&other.p)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        dq.max(dp)
    }

    /// Euclidean distance to another state.
    pub fn distance(&self, other: &PhaseState) -> f64 {
        self.q
            .iter()
            .zip(&other.q)
            .chain(self.p.iter().zip(&other.p))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}
