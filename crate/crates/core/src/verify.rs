//! Numerical certification of the flow's structural properties.
//!
//! Every claim the library rests on — unit Jacobian, symplectic form
//! preservation, exact reversibility, quadratic energy-drift scaling,
//! second-order convergence, the Δt·ω < 2 stability window, O(τ) adaptive
//! error control, entropy preservation, and gradient correctness — is
//! rendered as a named check that measures the quantity and reports it
//! against a pinned tolerance. Checks are deterministic given their seeds
//! and never mutate what they inspect.

use crate::error::{Result, SgnError};
use crate::hamiltonian::{AnalyticHamiltonian, Hamiltonian};
use crate::integrator::{self, FlowConfig};
use crate::linalg::{lu_det, Matrix};
use crate::model::SgnModel;
use crate::net::{Activation, MlpParams, SeparableHamiltonianNet};
use crate::phase::PhaseState;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Finite-difference step for flow Jacobians: balances truncation against
/// round-off at 64-bit precision.
pub const FD_JACOBIAN_STEP: f64 = 1e-5;

/// One measured quantity with its acceptance interval.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    pub pass: bool,
}

impl Measurement {
    fn bounded(name: impl Into<String>, value: f64, min: Option<f64>, max: Option<f64>) -> Self {
        let pass = value.is_finite()
            && min.map_or(true, |m| value >= m)
            && max.map_or(true, |m| value <= m);
        Measurement {
            name: name.into(),
            value,
            min,
            max,
            pass,
        }
    }

    fn at_most(name: impl Into<String>, value: f64, max: f64) -> Self {
        Self::bounded(name, value, None, Some(max))
    }

    fn at_least(name: impl Into<String>, value: f64, min: f64) -> Self {
        Self::bounded(name, value, Some(min), None)
    }

    fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self::bounded(name, value, Some(lo), Some(hi))
    }
}

/// Configuration echo attached to each report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct CheckContext {
    pub hamiltonian: String,
    pub d: usize,
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
}

/// Result of one named check. `pass` holds iff every measurement lies in
/// its stated interval; `claim` states the property under audit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VerifyReport {
    pub check: String,
    pub claim: String,
    pub measured: Vec<Measurement>,
    pub pass: bool,
    pub context: CheckContext,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl VerifyReport {
    fn new(
        check: impl Into<String>,
        claim: impl Into<String>,
        measured: Vec<Measurement>,
        context: CheckContext,
    ) -> Self {
        let pass = measured.iter().all(|m| m.pass);
        VerifyReport {
            check: check.into(),
            claim: claim.into(),
            measured,
            pass,
            context,
            note: None,
        }
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    fn failed(mut self, note: impl Into<String>) -> Self {
        self.pass = false;
        self.note = Some(note.into());
        self
    }
}

/// Render reports as an aligned text table.
pub fn summary_table(reports: &[VerifyReport]) -> String {
    let mut out = String::new();
    let name_w = reports.iter().map(|r| r.check.len()).max().unwrap_or(5).max(5);
    out.push_str(&format!("{:<name_w$}  {:<6}  detail\n", "check", "status"));
    for r in reports {
        let status = if r.pass { "PASS" } else { "FAIL" };
        let detail = r
            .measured
            .iter()
            .map(|m| format!("{}={:.3e}", m.name, m.value))
            .collect::<Vec<_>>()
            .join(", ");
        out.push_str(&format!("{:<name_w$}  {:<6}  {}\n", r.check, status, detail));
    }
    out
}

/// Central-difference Jacobian of a phase-space map.
pub fn jacobian_fd(
    map: &dyn Fn(&PhaseState) -> Result<PhaseState>,
    z: &PhaseState,
    h: f64,
) -> Result<Matrix> {
    let n = 2 * z.dim();
    let flat = z.to_flat();
    let mut jac = Matrix::zeros(n, n);
    for col in 0..n {
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[col] += h;
        minus[col] -= h;
        let fp = map(&PhaseState::from_flat(&plus)?)?.to_flat();
        let fm = map(&PhaseState::from_flat(&minus)?)?.to_flat();
        for row in 0..n {
            jac.set(row, col, (fp[row] - fm[row]) / (2.0 * h));
        }
    }
    Ok(jac)
}

/// The canonical block matrix J = [[0, I], [-I, 0]].
pub fn canonical_j(d: usize) -> Matrix {
    let n = 2 * d;
    let mut j = Matrix::zeros(n, n);
    for i in 0..d {
        j.set(i, d + i, 1.0);
        j.set(d + i, i, -1.0);
    }
    j
}

fn flow_map<'a>(
    h: &'a dyn Hamiltonian,
    cfg: &'a FlowConfig,
) -> impl Fn(&PhaseState) -> Result<PhaseState> + 'a {
    move |z: &PhaseState| Ok(integrator::flow(h, z, cfg)?.0)
}

/// |det(DΦ_T) − 1| of an arbitrary phase-space map via finite differences.
pub fn check_unit_jacobian_of_map(
    map: &dyn Fn(&PhaseState) -> Result<PhaseState>,
    z0: &PhaseState,
    context: CheckContext,
) -> VerifyReport {
    let claim = "flow Jacobian determinant equals 1 (volume preservation)";
    match jacobian_fd(map, z0, FD_JACOBIAN_STEP).and_then(|jac| lu_det(&jac)) {
        Ok(det) => VerifyReport::new(
            "unit_jacobian",
            claim,
            vec![Measurement::at_most("abs_det_minus_one", (det - 1.0).abs(), 1e-5)],
            context,
        ),
        Err(e) => VerifyReport::new("unit_jacobian", claim, vec![], context)
            .failed(format!("jacobian evaluation failed: {e}")),
    }
}

/// |det(DΦ_T) − 1| for the N-step flow of `h` (2d ≤ 16).
pub fn check_unit_jacobian(
    h: &dyn Hamiltonian,
    z0: &PhaseState,
    cfg: &FlowConfig,
    context: CheckContext,
) -> VerifyReport {
    if 2 * z0.dim() > 16 {
        return VerifyReport::new("unit_jacobian", "", vec![], context)
            .failed("dense finite-difference Jacobian limited to 2d <= 16");
    }
    let map = flow_map(h, cfg);
    let mut report = check_unit_jacobian_of_map(&map, z0, context);
    if !h.is_separable() {
        report = report.with_note("non-separable hamiltonian: explicit scheme outside its exact-symplecticity domain");
    }
    report
}

/// ‖DᵀJD − J‖∞ for the N-step flow of `h`.
pub fn check_symplectic_form(
    h: &dyn Hamiltonian,
    z0: &PhaseState,
    cfg: &FlowConfig,
    context: CheckContext,
) -> VerifyReport {
    let claim = "flow Jacobian D satisfies DᵀJD = J (symplectic form preservation)";
    if 2 * z0.dim() > 16 {
        return VerifyReport::new("symplectic_form", claim, vec![], context)
            .failed("dense finite-difference Jacobian limited to 2d <= 16");
    }
    let map = flow_map(h, cfg);
    let result = jacobian_fd(&map, z0, FD_JACOBIAN_STEP).and_then(|d_mat| {
        let j = canonical_j(z0.dim());
        let dt_j_d = d_mat.transpose().matmul(&j)?.matmul(&d_mat)?;
        let mut worst = 0.0f64;
        for r in 0..j.rows() {
            for c in 0..j.cols() {
                worst = worst.max((dt_j_d.get(r, c) - j.get(r, c)).abs());
            }
        }
        Ok(worst)
    });
    match result {
        Ok(residual) => {
            let mut report = VerifyReport::new(
                "symplectic_form",
                claim,
                vec![Measurement::at_most("form_residual_inf", residual, 1e-5)],
                context,
            );
            if !h.is_separable() {
                report = report.with_note(
                    "non-separable hamiltonian: explicit scheme outside its exact-symplecticity domain",
                );
            }
            report
        }
        Err(e) => VerifyReport::new("symplectic_form", claim, vec![], context)
            .failed(format!("jacobian evaluation failed: {e}")),
    }
}

/// Forward-then-inverse round trip in the ∞-norm.
pub fn check_reversibility(
    h: &dyn Hamiltonian,
    z0: &PhaseState,
    cfg: &FlowConfig,
    context: CheckContext,
) -> VerifyReport {
    let claim = "inverse flow composed with the flow is the identity (time reversibility)";
    let result = integrator::flow(h, z0, cfg).and_then(|(z_t, trace)| {
        let back = integrator::inverse_flow(h, &z_t, &trace.accepted_dts)?;
        Ok(back.max_abs_diff(z0))
    });
    match result {
        Ok(err) => VerifyReport::new(
            "reversibility",
            claim,
            vec![Measurement::at_most("roundtrip_inf_error", err, 1e-9)],
            context,
        ),
        Err(e) => VerifyReport::new("reversibility", claim, vec![], context)
            .failed(format!("flow failed: {e}")),
    }
}

fn max_energy_drift(
    h: &dyn Hamiltonian,
    z0: &PhaseState,
    dt: f64,
    steps: usize,
) -> Result<(f64, f64)> {
    let e0 = h.energy(z0.q(), z0.p());
    let mut z = z0.clone();
    let mut max_drift = 0.0f64;
    let mut half_drift = 0.0f64;
    for i in 0..steps {
        z = integrator::leapfrog_step(h, &z, dt)?;
        let drift = (h.energy(z.q(), z.p()) - e0).abs();
        max_drift = max_drift.max(drift);
        if i < steps / 2 {
            half_drift = half_drift.max(drift);
        }
    }
    Ok((half_drift, max_drift))
}

/// Energy drift per step size: halving Δt must quarter the drift, and the
/// drift over the full horizon must not grow past its first half.
pub fn check_energy_drift(
    h: &dyn Hamiltonian,
    z0: &PhaseState,
    dt_list: &[f64],
    steps: usize,
    context: CheckContext,
) -> VerifyReport {
    let claim = "energy drift is O(Δt²) and stays bounded over long horizons";
    let mut measured = Vec::new();
    let mut drifts = Vec::new();
    for &dt in dt_list {
        match max_energy_drift(h, z0, dt, steps) {
            Ok((half, full)) => {
                let growth = if half > 0.0 { full / half } else { 1.0 };
                measured.push(Measurement::at_most(
                    format!("drift_growth_dt_{dt}"),
                    growth,
                    1.5,
                ));
                drifts.push(full);
            }
            Err(e) => {
                return VerifyReport::new("energy_drift", claim, measured, context)
                    .failed(format!("flow diverged at dt {dt}: {e}"))
            }
        }
    }
    for w in drifts.windows(2) {
        if w[1] > 0.0 {
            measured.push(Measurement::within(
                "drift_halving_ratio",
                w[0] / w[1],
                3.5,
                4.5,
            ));
        }
    }
    VerifyReport::new("energy_drift", claim, measured, context)
        .with_note(format!("horizon truncated to {steps} steps"))
}

/// Closed-form flows for the analytic reference systems.
pub fn exact_flow(h: &AnalyticHamiltonian, z0: &PhaseState, t: f64) -> Option<PhaseState> {
    match h {
        AnalyticHamiltonian::Constant(_) => Some(z0.clone()),
        AnalyticHamiltonian::FreeParticle => {
            let q = z0
                .q()
                .iter()
                .zip(z0.p())
                .map(|(&q, &p)| q + t * p)
                .collect();
            Some(PhaseState::from_parts_unchecked(q, z0.p().to_vec()))
        }
        AnalyticHamiltonian::HarmonicOscillator { omega } => {
            let (c, s) = ((omega * t).cos(), (omega * t).sin());
            let q: Vec<f64> = z0
                .q()
                .iter()
                .zip(z0.p())
                .map(|(&q, &p)| q * c + p / omega * s)
                .collect();
            let p: Vec<f64> = z0
                .q()
                .iter()
                .zip(z0.p())
                .map(|(&q, &p)| -q * omega * s + p * c)
                .collect();
            Some(PhaseState::from_parts_unchecked(q, p))
        }
        _ => None,
    }
}

/// Least-squares order of the global error against the closed-form flow.
pub fn check_convergence_order(
    h: &AnalyticHamiltonian,
    z0: &PhaseState,
    total_time: f64,
    dt_list: &[f64],
    context: CheckContext,
) -> VerifyReport {
    let claim = "global error against the exact flow scales as Δt² (second order)";
    let Some(reference) = exact_flow(h, z0, total_time) else {
        return VerifyReport::new("convergence_order", claim, vec![], context)
            .failed("no closed-form flow for this hamiltonian");
    };
    let mut errors = Vec::new();
    for &dt in dt_list {
        let cfg = match FlowConfig::fixed(total_time, dt) {
            Ok(c) => c,
            Err(e) => {
                return VerifyReport::new("convergence_order", claim, vec![], context)
                    .failed(format!("bad dt {dt}: {e}"))
            }
        };
        match integrator::flow(h, z0, &cfg) {
            Ok((z, _)) => errors.push(z.distance(&reference)),
            Err(e) => {
                return VerifyReport::new("convergence_order", claim, vec![], context)
                    .failed(format!("flow diverged at dt {dt}: {e}"))
            }
        }
    }
    // The scheme is exact on drift-only systems; the fit would be noise.
    if errors.iter().all(|&e| e < 1e-12) {
        let measured = vec![Measurement::at_most(
            "max_error",
            errors.iter().cloned().fold(0.0, f64::max),
            1e-12,
        )];
        return VerifyReport::new("convergence_order", claim, measured, context)
            .with_note("integrator exact on this system; order fit vacuous");
    }
    let slope = crate::complexity::loglog_slope(dt_list, &errors);
    VerifyReport::new(
        "convergence_order",
        claim,
        vec![Measurement::within("loglog_slope", slope, 1.9, 2.1)],
        context,
    )
}

/// Boundedness below the Δt·ω = 2 threshold, divergence above it.
pub fn check_stability_boundary(
    omega: f64,
    dt_below: f64,
    dt_above: f64,
    steps_below: usize,
    steps_above: usize,
    context: CheckContext,
) -> VerifyReport {
    let claim = "harmonic flow is stable iff Δt·ω < 2";
    let h = match AnalyticHamiltonian::harmonic(omega) {
        Ok(h) => h,
        Err(e) => {
            return VerifyReport::new("stability_boundary", claim, vec![], context)
                .failed(e.to_string())
        }
    };
    // Start on the unit circle.
    let z0 = PhaseState::new(vec![1.0], vec![0.0]).unwrap();

    let run = |dt: f64, steps: usize, ceiling: f64| -> f64 {
        let mut z = z0.clone();
        let mut max_norm = z.norm();
        for _ in 0..steps {
            match integrator::leapfrog_step(&h, &z, dt) {
                Ok(next) => {
                    z = next;
                    max_norm = max_norm.max(z.norm());
                    if max_norm > ceiling {
                        break;
                    }
                }
                Err(_) => return f64::INFINITY,
            }
        }
        max_norm
    };

    let below = run(dt_below, steps_below, 1e7);
    let above = run(dt_above, steps_above, 1e7);
    let measured = vec![
        Measurement::at_most("max_norm_below_threshold", below, 10.0),
        Measurement::at_least("max_norm_above_threshold", above.min(1e300), 1e6),
    ];
    let report = VerifyReport::new("stability_boundary", claim, measured, context);
    if above.is_finite() && above < 1e6 && below < 10.0 {
        return report.failed(format!(
            "configuration error: both step sizes stable (dt·ω = {} and {})",
            dt_below * omega,
            dt_above * omega
        ));
    }
    report
}

/// Adaptive controller audit: the hand-checkable update-rule values plus
/// the O(τ) global-error trend on a nonlinear system.
pub fn check_adaptive_controller(
    taus: &[f64],
    total_time: f64,
    context: CheckContext,
) -> VerifyReport {
    let claim = "adaptive step control keeps the global error proportional to τ";
    let mut measured = Vec::new();

    // Update-rule values, exact by construction.
    let tau = 1e-6;
    let (dt, _) = integrator::adapt_step(0.1, 8.0 * tau, tau, None);
    measured.push(Measurement::within("rule_shrink_half", dt, 0.05 - 1e-15, 0.05 + 1e-15));
    let (dt, _) = integrator::adapt_step(0.1, 0.0, tau, None);
    measured.push(Measurement::within("rule_grow_clamp", dt, 0.15 - 1e-15, 0.15 + 1e-15));
    let (dt, _) = integrator::adapt_step(0.1, tau, tau, None);
    measured.push(Measurement::within("rule_safety_factor", dt, 0.09 - 1e-15, 0.09 + 1e-15));

    // Error-vs-τ trend on the pendulum against a fine fixed-step reference.
    let h = AnalyticHamiltonian::pendulum(1.0, 1.0, 1.0).unwrap();
    let z0 = PhaseState::new(vec![1.0], vec![0.0]).unwrap();
    let reference = {
        let cfg = FlowConfig::fixed(total_time, 1e-5).unwrap();
        match integrator::flow(&h, &z0, &cfg) {
            Ok((z, _)) => z,
            Err(e) => {
                return VerifyReport::new("adaptive_controller", claim, measured, context)
                    .failed(format!("reference flow failed: {e}"))
            }
        }
    };
    let mut ratios = Vec::new();
    for &tau in taus {
        let cfg = match FlowConfig::adaptive(total_time, 0.1, tau, 10_000_000) {
            Ok(c) => c,
            Err(e) => {
                return VerifyReport::new("adaptive_controller", claim, measured, context)
                    .failed(format!("bad tolerance {tau}: {e}"))
            }
        };
        match integrator::flow(&h, &z0, &cfg) {
            Ok((z, _)) => {
                let err = z.distance(&reference);
                ratios.push(err / tau);
            }
            Err(e) => {
                return VerifyReport::new("adaptive_controller", claim, measured, context)
                    .failed(format!("adaptive flow failed at tau {tau}: {e}"))
            }
        }
    }
    // err ≈ C·τ: every per-τ constant within 10× of their geometric mean.
    let geo_mean = (ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp();
    for (i, r) in ratios.iter().enumerate() {
        measured.push(Measurement::within(
            format!("error_per_tau_deviation_{i}"),
            r / geo_mean,
            0.1,
            10.0,
        ));
    }
    VerifyReport::new("adaptive_controller", claim, measured, context)
}

// ---------------------------------------------------------------------
// k-nearest-neighbor differential entropy (Kozachenko–Leonenko).
// ---------------------------------------------------------------------

fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut x = x;
    let mut acc = 0.0;
    while x < 12.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln() - 0.5 * inv - inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 / 252.0))
}

/// ln of the d-dimensional unit-ball volume π^{d/2} / Γ(d/2 + 1).
fn unit_ball_log_volume(d: usize) -> f64 {
    let half_d = d as f64 / 2.0;
    // Γ at integer or half-integer arguments by recurrence.
    let mut x = half_d + 1.0;
    let mut log_gamma = 0.0;
    while x > 1.5 {
        x -= 1.0;
        log_gamma += x.ln();
    }
    if (x - 0.5).abs() < 1e-12 {
        log_gamma += 0.5 * std::f64::consts::PI.ln();
    }
    half_d * std::f64::consts::PI.ln() - log_gamma
}

/// Distances to the k-th nearest neighbor, brute force.
fn kth_nn_distances(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    let n = points.len();
    let mut out = Vec::with_capacity(n);
    let mut best = vec![f64::INFINITY; k];
    for i in 0..n {
        best.fill(f64::INFINITY);
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut d2 = 0.0;
            for (a, b) in points[i].iter().zip(&points[j]) {
                let diff = a - b;
                d2 += diff * diff;
            }
            if d2 < best[k - 1] {
                // Insertion into the small sorted buffer.
                let mut pos = k - 1;
                while pos > 0 && best[pos - 1] > d2 {
                    best[pos] = best[pos - 1];
                    pos -= 1;
                }
                best[pos] = d2;
            }
        }
        out.push(best[k - 1].sqrt());
    }
    out
}

/// Kozachenko–Leonenko differential-entropy estimate (nats).
pub fn knn_entropy(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    assert!(n > k && k >= 1);
    let d = points[0].len();
    let radii = kth_nn_distances(points, k);
    let mean_log_r = radii.iter().map(|r| r.max(1e-300).ln()).sum::<f64>() / n as f64;
    digamma(n as f64) - digamma(k as f64) + unit_ball_log_volume(d) + d as f64 * mean_log_r
}

/// Flow samples of the prior and compare differential entropies.
pub fn check_entropy_preservation(
    m: &SgnModel,
    n: usize,
    k: usize,
    seed: u64,
    context: CheckContext,
) -> VerifyReport {
    check_entropy_preservation_of(m.hamiltonian(), m.flow_cfg(), m.latent_half_dim(), n, k, seed, context)
}

/// Core entropy-preservation measurement for any Hamiltonian.
pub fn check_entropy_preservation_of(
    h: &dyn Hamiltonian,
    cfg: &FlowConfig,
    d: usize,
    n: usize,
    k: usize,
    seed: u64,
    context: CheckContext,
) -> VerifyReport {
    let claim = "the flow preserves differential entropy of the latent distribution";
    let mut rng = Rng::new(seed);
    let mut z0_samples = Vec::with_capacity(n);
    let mut zt_samples = Vec::with_capacity(n);
    for _ in 0..n {
        let z0 = PhaseState::from_flat(&rng.standard_normal_vec(2 * d)).unwrap();
        match integrator::flow(h, &z0, cfg) {
            Ok((z_t, _)) => {
                z0_samples.push(z0.to_flat());
                zt_samples.push(z_t.to_flat());
            }
            Err(e) => {
                return VerifyReport::new("entropy_preservation", claim, vec![], context)
                    .failed(format!("flow diverged while sampling: {e}"))
            }
        }
    }
    let h0 = knn_entropy(&z0_samples, k);
    let ht = knn_entropy(&zt_samples, k);
    VerifyReport::new(
        "entropy_preservation",
        claim,
        vec![Measurement::at_most("entropy_diff_nats", (ht - h0).abs(), 0.05)],
        context,
    )
    .with_note(format!("kNN estimator, k={k}, n={n}"))
}

/// Aggregated finite-difference audit of every analytic gradient pass.
pub fn check_gradient_suite(cases: usize, seed: u64, context: CheckContext) -> VerifyReport {
    let claim = "analytic first- and second-order gradients match finite differences";
    let mut rng = Rng::new(seed);
    let mut worst_first: f64 = 0.0;
    let mut worst_second: f64 = 0.0;
    let widths = [4usize, 8, 16, 32];
    for case in 0..cases {
        let depth = 1 + case % 3;
        let width = widths[case % widths.len()];
        let act = if case % 2 == 0 {
            Activation::Tanh
        } else {
            Activation::Softplus
        };
        let input_dim = 1 + case % 4;
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat(width).take(depth - 1));
        dims.push(1);
        let net = MlpParams::init(&dims, act, None, &mut rng).expect("valid dims");
        let x = rng.standard_normal_vec(input_dim);
        let u = rng.standard_normal_vec(input_dim);

        // First order: input gradient and parameter gradient.
        let grad = net.input_grad(&x).unwrap();
        let h = 1e-6;
        for i in 0..input_dim {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (net.forward(&xp).unwrap().0[0] - net.forward(&xm).unwrap().0[0]) / (2.0 * h);
            worst_first = worst_first.max((grad[i] - fd).abs() / 1.0f64.max(grad[i].abs()));
        }
        let pg = net.param_grad(&x, 1.0).unwrap().flat();
        let base = net.flat_params();
        for idx in [0usize, base.len() / 2, base.len() - 1] {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut fp = base.clone();
            fp[idx] += h;
            plus.set_flat_params(&fp).unwrap();
            fp[idx] -= 2.0 * h;
            minus.set_flat_params(&fp).unwrap();
            let fd = (plus.forward(&x).unwrap().0[0] - minus.forward(&x).unwrap().0[0]) / (2.0 * h);
            worst_first = worst_first.max((pg[idx] - fd).abs() / 1.0f64.max(pg[idx].abs()));
        }

        // Second order: parameter gradient of ⟨u, ∇ₓf⟩.
        let tangent = net.input_grad_param_grad(&x, &u).unwrap().flat();
        let h2 = 1e-5;
        let dir = |n: &MlpParams| -> f64 {
            n.input_grad(&x)
                .unwrap()
                .iter()
                .zip(&u)
                .map(|(a, b)| a * b)
                .sum()
        };
        for idx in [0usize, base.len() - 1] {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut fp = base.clone();
            fp[idx] += h2;
            plus.set_flat_params(&fp).unwrap();
            fp[idx] -= 2.0 * h2;
            minus.set_flat_params(&fp).unwrap();
            let fd = (dir(&plus) - dir(&minus)) / (2.0 * h2);
            worst_second = worst_second.max((tangent[idx] - fd).abs() / 1.0f64.max(tangent[idx].abs()));
        }
    }
    VerifyReport::new(
        "gradient_suite",
        claim,
        vec![
            Measurement::at_most("worst_first_order_rel_err", worst_first, 1e-5),
            Measurement::at_most("worst_second_order_rel_err", worst_second, 1e-4),
        ],
        context,
    )
    .with_note(format!("{cases} random (net, x) cases, depths 1-3, widths 4-32"))
}

/// Deliberately broken leapfrog for mutation testing: the final half-kick
/// is evaluated at the stale pre-step position. (A bare sign flip keeps
/// every substep a shear and so still preserves volume exactly; the stale
/// evaluation point genuinely breaks it.)
pub fn corrupted_leapfrog_step(
    h: &dyn Hamiltonian,
    z: &PhaseState,
    dt: f64,
) -> Result<PhaseState> {
    let d = z.dim();
    let gq = h.grad_q(z.q(), z.p());
    let mut p_half = vec![0.0; d];
    for i in 0..d {
        p_half[i] = z.p()[i] - 0.5 * dt * gq[i];
    }
    let gp = h.grad_p(z.q(), &p_half);
    let mut q_new = vec![0.0; d];
    for i in 0..d {
        q_new[i] = z.q()[i] + dt * gp[i];
    }
    // Bug under test: ∂H/∂q at (q_t, p½) instead of (q_{t+1}, p½).
    let gq2 = h.grad_q(z.q(), &p_half);
    let mut p_new = vec![0.0; d];
    for i in 0..d {
        p_new[i] = p_half[i] - 0.5 * dt * gq2[i];
    }
    if !q_new.iter().chain(p_new.iter()).all(|v| v.is_finite()) {
        return Err(SgnError::Divergence { step: 0 });
    }
    Ok(PhaseState::from_parts_unchecked(q_new, p_new))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Quick,
    Full,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Swap in the corrupted integrator (mutation test hook).
    pub corrupt_integrator: bool,
}

/// Run the whole suite with fixed seeds. Individual failures are report
/// entries, never errors.
pub fn run_all(profile: Profile) -> Vec<VerifyReport> {
    run_all_with(profile, &VerifyOptions::default())
}

pub fn run_all_with(profile: Profile, opts: &VerifyOptions) -> Vec<VerifyReport> {
    let quick = profile == Profile::Quick;
    let mut reports = Vec::new();

    let random_hamiltonian = |d: usize, seed: u64| {
        let mut rng = Rng::new(seed);
        SeparableHamiltonianNet::random(d, &[16, 16], Activation::Tanh, Some(1.0), &mut rng)
            .expect("valid dims")
    };
    let random_state = |d: usize, seed: u64| {
        let mut rng = Rng::new(seed);
        PhaseState::new(rng.standard_normal_vec(d), rng.standard_normal_vec(d)).unwrap()
    };

    // Jacobian structure: constant, harmonic, and random neural systems.
    {
        let dims: &[usize] = if quick { &[1, 2] } else { &[1, 2, 4] };
        let cfg = FlowConfig::fixed(1.0, 0.01).unwrap();
        let harmonic = AnalyticHamiltonian::harmonic(1.0).unwrap();
        let z0 = PhaseState::new(vec![1.0], vec![0.0]).unwrap();
        let ctx = |name: &str, d: usize, seed: u64| CheckContext {
            hamiltonian: name.into(),
            d,
            dt: 0.01,
            steps: 100,
            seed,
        };
        if opts.corrupt_integrator {
            // Mutation hook: run the determinant check on the broken step.
            let h = random_hamiltonian(2, 0xC0);
            let broken = |z: &PhaseState| -> Result<PhaseState> {
                let mut state = z.clone();
                for _ in 0..100 {
                    state = corrupted_leapfrog_step(&h, &state, 0.01)?;
                }
                Ok(state)
            };
            reports.push(
                check_unit_jacobian_of_map(&broken, &random_state(2, 0xC1), ctx("corrupted_neural", 2, 0xC1))
                    .with_note("integrator corruption injected (stale-position final kick)"),
            );
        } else {
            reports.push(check_unit_jacobian(&harmonic, &z0, &cfg, ctx("harmonic_oscillator", 1, 0)));
        }
        reports.push(check_symplectic_form(&harmonic, &z0, &cfg, ctx("harmonic_oscillator", 1, 0)));
        for (i, &d) in dims.iter().enumerate() {
            let seed = 0xA0 + i as u64;
            let h = random_hamiltonian(d, seed);
            let z = random_state(d, seed + 100);
            reports.push(check_unit_jacobian(&h, &z, &cfg, ctx("separable_neural", d, seed)));
            reports.push(check_symplectic_form(&h, &z, &cfg, ctx("separable_neural", d, seed)));
        }
        // Free particle: the shear is exactly symplectic.
        let free = AnalyticHamiltonian::FreeParticle;
        reports.push(check_symplectic_form(
            &free,
            &PhaseState::new(vec![0.0], vec![1.0]).unwrap(),
            &cfg,
            ctx("free_particle", 1, 0),
        ));
    }

    // Reversibility: harmonic long horizon plus random neural systems.
    {
        let harmonic = AnalyticHamiltonian::harmonic(1.0).unwrap();
        let cfg = FlowConfig::fixed(10.0, 0.05).unwrap();
        let z0 = PhaseState::new(vec![1.0], vec![0.0]).unwrap();
        reports.push(check_reversibility(
            &harmonic,
            &z0,
            &cfg,
            CheckContext {
                hamiltonian: "harmonic_oscillator".into(),
                d: 1,
                dt: 0.05,
                steps: 200,
                seed: 0,
            },
        ));
        let cases = if quick { 10 } else { 50 };
        let mut worst = 0.0f64;
        let cfg = FlowConfig::fixed(5.0, 0.05).unwrap();
        for i in 0..cases {
            let h = random_hamiltonian(1 + i % 2, 0xB000 + i as u64);
            let z0 = random_state(1 + i % 2, 0xB100 + i as u64);
            if let Ok((z_t, trace)) = integrator::flow(&h, &z0, &cfg) {
                if let Ok(back) = integrator::inverse_flow(&h, &z_t, &trace.accepted_dts) {
                    worst = worst.max(back.max_abs_diff(&z0));
                }
            }
        }
        reports.push(VerifyReport::new(
            "reversibility_neural",
            "inverse flow composed with the flow is the identity (time reversibility)",
            vec![Measurement::at_most("worst_roundtrip_inf_error", worst, 1e-9)],
            CheckContext {
                hamiltonian: "separable_neural".into(),
                d: 2,
                dt: 0.05,
                steps: 100,
                seed: 0xB000,
            },
        ));
    }

    // Energy drift: harmonic ratio plus pendulum boundedness.
    {
        let harmonic = AnalyticHamiltonian::harmonic(1.0).unwrap();
        let z0 = PhaseState::new(vec![1.0], vec![0.0]).unwrap();
        reports.push(check_energy_drift(
            &harmonic,
            &z0,
            &[0.1, 0.05],
            10_000,
            CheckContext {
                hamiltonian: "harmonic_oscillator".into(),
                d: 1,
                dt: 0.1,
                steps: 10_000,
                seed: 0,
            },
        ));
        let pendulum = AnalyticHamiltonian::pendulum(1.0, 1.0, 1.0).unwrap();
        let steps = if quick { 100_000 } else { 1_000_000 };
        reports.push(check_energy_drift(
            &pendulum,
            &z0,
            &[0.01],
            steps,
            CheckContext {
                hamiltonian: "pendulum".into(),
                d: 1,
                dt: 0.01,
                steps,
                seed: 0,
            },
        ));
    }

    // Convergence order.
    {
        let z0 = PhaseState::new(vec![1.0], vec![0.3]).unwrap();
        let dts = [0.1, 0.05, 0.025, 0.0125];
        for (name, h) in [
            ("free_particle", AnalyticHamiltonian::FreeParticle),
            ("harmonic_oscillator", AnalyticHamiltonian::harmonic(1.0).unwrap()),
            ("harmonic_oscillator_w3", AnalyticHamiltonian::harmonic(3.0).unwrap()),
        ] {
            reports.push(check_convergence_order(
                &h,
                &z0,
                1.0,
                &dts,
                CheckContext {
                    hamiltonian: name.into(),
                    d: 1,
                    dt: 0.1,
                    steps: 0,
                    seed: 0,
                },
            ));
        }
    }

    // Stability boundary at two frequencies.
    {
        let steps_below = if quick { 20_000 } else { 100_000 };
        reports.push(check_stability_boundary(
            1.0,
            1.9,
            2.1,
            steps_below,
            10_000,
            CheckContext {
                hamiltonian: "harmonic_oscillator".into(),
                d: 1,
                dt: 1.9,
                steps: steps_below,
                seed: 0,
            },
        ));
        reports.push(check_stability_boundary(
            2.0,
            0.9,
            1.1,
            steps_below,
            10_000,
            CheckContext {
                hamiltonian: "harmonic_oscillator".into(),
                d: 1,
                dt: 0.9,
                steps: steps_below,
                seed: 0,
            },
        ));
    }

    // Adaptive controller.
    {
        let taus: &[f64] = if quick {
            &[1e-4, 1e-6]
        } else {
            &[1e-4, 1e-6, 1e-8]
        };
        reports.push(check_adaptive_controller(
            taus,
            5.0,
            CheckContext {
                hamiltonian: "pendulum".into(),
                d: 1,
                dt: 0.1,
                steps: 0,
                seed: 0,
            },
        ));
    }

    // Entropy preservation: rotation (exactly invariant) and neural flow.
    {
        let n = if quick { 4000 } else { 20_000 };
        let harmonic = AnalyticHamiltonian::harmonic(1.0).unwrap();
        let cfg = FlowConfig::fixed(1.0, 0.05).unwrap();
        reports.push(check_entropy_preservation_of(
            &harmonic,
            &cfg,
            1,
            n,
            5,
            0xE1,
            CheckContext {
                hamiltonian: "harmonic_oscillator".into(),
                d: 1,
                dt: 0.05,
                steps: 20,
                seed: 0xE1,
            },
        ));
        let h = random_hamiltonian(1, 0xE2);
        reports.push(check_entropy_preservation_of(
            &h,
            &cfg,
            1,
            n,
            5,
            0xE3,
            CheckContext {
                hamiltonian: "separable_neural".into(),
                d: 1,
                dt: 0.05,
                steps: 20,
                seed: 0xE3,
            },
        ));
    }

    // Gradient suite.
    {
        let cases = if quick { 60 } else { 200 };
        reports.push(check_gradient_suite(
            cases,
            0xF1,
            CheckContext {
                hamiltonian: "mlp_suite".into(),
                d: 0,
                dt: 0.0,
                steps: 0,
                seed: 0xF1,
            },
        ));
    }

    reports
}
