//! Explicit leapfrog (Störmer–Verlet) integration of Hamiltonian flows.
//!
//! One step with size Δt:
//!   1. p½   = p  − (Δt/2)·∂H/∂q(q, p)
//!   2. q'   = q  + Δt·∂H/∂p(q, p½)
//!   3. p'   = p½ − (Δt/2)·∂H/∂q(q', p½)
//!
//! Each sub-update is a shear, so the composed map has unit Jacobian for
//! separable H and the step with −Δt is the exact inverse. The module also
//! provides the two-step/double-step local error estimator and the
//! step-size controller with its stability clamp.

use crate::error::{Result, SgnError};
use crate::hamiltonian::Hamiltonian;
use crate::phase::PhaseState;

/// Step-size selection mode.
#[derive(Debug, Clone, PartialEq)]
pub enum StepMode {
    Fixed,
    Adaptive { tolerance: f64 },
}

/// Integration window and step-size policy for a flow map.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    total_time: f64,
    initial_dt: f64,
    mode: StepMode,
    stability_bound: Option<f64>,
    max_steps: usize,
    error_check_interval: usize,
}

impl FlowConfig {
    pub fn new(
        total_time: f64,
        initial_dt: f64,
        mode: StepMode,
        stability_bound: Option<f64>,
        max_steps: usize,
    ) -> Result<Self> {
        if !(total_time > 0.0 && total_time.is_finite()) {
            return Err(SgnError::invalid(format!(
                "total_time must be positive, got {total_time}"
            )));
        }
        if !(initial_dt > 0.0 && initial_dt.is_finite()) {
            return Err(SgnError::invalid(format!(
                "initial_dt must be positive, got {initial_dt}"
            )));
        }
        if let StepMode::Adaptive { tolerance } = mode {
            if !(tolerance > 0.0) {
                return Err(SgnError::invalid(format!(
                    "adaptive tolerance must be positive, got {tolerance}"
                )));
            }
        }
        if let Some(l_h) = stability_bound {
            if !(l_h > 0.0) {
                return Err(SgnError::invalid(format!(
                    "stability bound must be positive, got {l_h}"
                )));
            }
            // Step-size guard: the scheme is only stable for Δt < 2/√L_H.
            let limit = 2.0 / l_h.sqrt();
            if initial_dt >= limit {
                return Err(SgnError::invalid(format!(
                    "initial_dt {initial_dt} violates stability guard: must be < 2/sqrt(L_H) = {limit}"
                )));
            }
        }
        let needed = (total_time / initial_dt).ceil() as usize;
        if max_steps < needed {
            return Err(SgnError::invalid(format!(
                "max_steps {max_steps} < ceil(T/dt0) = {needed}"
            )));
        }
        Ok(FlowConfig {
            total_time,
            initial_dt,
            mode,
            stability_bound,
            max_steps,
            error_check_interval: 1,
        })
    }

    pub fn fixed(total_time: f64, dt: f64) -> Result<Self> {
        let max = ((total_time / dt).ceil() as usize).max(1) + 1;
        FlowConfig::new(total_time, dt, StepMode::Fixed, None, max)
    }

    pub fn adaptive(total_time: f64, dt0: f64, tolerance: f64, max_steps: usize) -> Result<Self> {
        FlowConfig::new(
            total_time,
            dt0,
            StepMode::Adaptive { tolerance },
            None,
            max_steps,
        )
    }

    pub fn with_stability_bound(mut self, l_h: f64) -> Result<Self> {
        if !(l_h > 0.0) {
            return Err(SgnError::invalid("stability bound must be positive"));
        }
        let limit = 2.0 / l_h.sqrt();
        if self.initial_dt >= limit {
            return Err(SgnError::invalid(format!(
                "initial_dt {} violates stability guard: must be < 2/sqrt(L_H) = {limit}",
                self.initial_dt
            )));
        }
        self.stability_bound = Some(l_h);
        Ok(self)
    }

    /// Run the local error estimator only every `k`-th accepted step
    /// (estimates are reused in between). `k = 1` estimates every step.
    pub fn with_error_check_interval(mut self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(SgnError::invalid("error_check_interval must be >= 1"));
        }
        self.error_check_interval = k;
        Ok(self)
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }

    pub fn initial_dt(&self) -> f64 {
        self.initial_dt
    }

    pub fn mode(&self) -> &StepMode {
        &self.mode
    }

    pub fn stability_bound(&self) -> Option<f64> {
        self.stability_bound
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn error_check_interval(&self) -> usize {
        self.error_check_interval
    }

    /// The step sizes a fixed-mode flow will take, known without integrating:
    /// N = round(T/Δt₀) equal steps rescaled so N·Δt = T.
    pub fn fixed_step_sizes(&self) -> Result<Vec<f64>> {
        match self.mode {
            StepMode::Fixed => {
                let n = ((self.total_time / self.initial_dt).round() as usize).max(1);
                Ok(vec![self.total_time / n as f64; n])
            }
            StepMode::Adaptive { .. } => Err(SgnError::invalid(
                "step sizes of an adaptive flow are trajectory dependent",
            )),
        }
    }
}

/// Audit record of one flow evaluation.
#[derive(Debug, Clone, Default)]
pub struct StepTrace {
    pub accepted_dts: Vec<f64>,
    pub error_estimates: Vec<f64>,
    pub clamp_events: usize,
}

impl StepTrace {
    pub fn steps(&self) -> usize {
        self.accepted_dts.len()
    }

    pub fn elapsed(&self) -> f64 {
        self.accepted_dts.iter().sum()
    }
}

/// One leapfrog step. Negative `dt` gives the inverse step.
pub fn leapfrog_step(h: &dyn Hamiltonian, z: &PhaseState, dt: f64) -> Result<PhaseState> {
    if dt == 0.0 {
        return Err(SgnError::invalid("leapfrog step size must be nonzero"));
    }
    let d = z.dim();
    let q = z.q();
    let p = z.p();

    let gq = h.grad_q(q, p);
    let mut p_half = vec![0.0; d];
    for i in 0..d {
        p_half[i] = p[i] - 0.5 * dt * gq[i];
    }

    let gp = h.grad_p(q, &p_half);
    let mut q_new = vec![0.0; d];
    for i in 0..d {
        q_new[i] = q[i] + dt * gp[i];
    }

    let gq2 = h.grad_q(&q_new, &p_half);
    let mut p_new = vec![0.0; d];
    for i in 0..d {
        p_new[i] = p_half[i] - 0.5 * dt * gq2[i];
    }

    if !q_new.iter().chain(p_new.iter()).all(|v| v.is_finite()) {
        return Err(SgnError::Divergence { step: 0 });
    }
    Ok(PhaseState::from_parts_unchecked(q_new, p_new))
}

/// ‖Φ_{2Δt}(z) − Φ_Δt(Φ_Δt(z))‖₂; +∞ if either branch diverges.
pub fn local_error_estimate(h: &dyn Hamiltonian, z: &PhaseState, dt: f64) -> f64 {
    debug_assert!(dt > 0.0);
    let double = leapfrog_step(h, z, 2.0 * dt);
    let twice = leapfrog_step(h, z, dt).and_then(|z1| leapfrog_step(h, &z1, dt));
    match (double, twice) {
        (Ok(a), Ok(b)) => a.distance(&b),
        _ => f64::INFINITY,
    }
}

/// Step-size update rule with stability clamping.
///
/// Δt_new = Δt_old · min(1.5, max(0.5, 0.9·(τ/err)^{1/3})), then clamped to
/// 1.9/√L_H whenever the result would reach the stability limit 2/√L_H.
/// Returns the new step size and whether the clamp fired.
pub fn adapt_step(dt_old: f64, err: f64, tau: f64, stability_bound: Option<f64>) -> (f64, bool) {
    debug_assert!(dt_old > 0.0 && tau > 0.0 && err >= 0.0);
    // err = 0 makes the ratio +∞ and the upper clamp at 1.5 takes over.
    let factor = (0.9 * (tau / err).powf(1.0 / 3.0)).max(0.5).min(1.5);
    let mut dt_new = dt_old * factor;
    let mut clamped = false;
    if let Some(l_h) = stability_bound {
        let limit = 2.0 / l_h.sqrt();
        if dt_new >= limit {
            dt_new = 1.9 / l_h.sqrt();
            clamped = true;
        }
    }
    (dt_new, clamped)
}

/// Snapshot recording policy for flows that will be differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recording {
    None,
    /// Store the state before every step (index i holds z_i).
    AllStates,
}

/// Result of a recorded flow evaluation.
#[derive(Debug, Clone)]
pub struct FlowRun {
    pub state: PhaseState,
    pub trace: StepTrace,
    /// Present under `Recording::AllStates`: z_0 .. z_{N-1}.
    pub states: Option<Vec<PhaseState>>,
}

/// N-step flow map Φ_T.
pub fn flow(h: &dyn Hamiltonian, z0: &PhaseState, cfg: &FlowConfig) -> Result<(PhaseState, StepTrace)> {
    let run = flow_recorded(h, z0, cfg, Recording::None)?;
    Ok((run.state, run.trace))
}

/// Flow map with optional state recording for backpropagation.
pub fn flow_recorded(
    h: &dyn Hamiltonian,
    z0: &PhaseState,
    cfg: &FlowConfig,
    recording: Recording,
) -> Result<FlowRun> {
    if !h.accepts_dim(z0.dim()) {
        return Err(SgnError::dim("flow state dimension", 0, z0.dim()));
    }
    let mut states = match recording {
        Recording::None => None,
        Recording::AllStates => Some(Vec::new()),
    };
    let mut trace = StepTrace::default();
    let mut z = z0.clone();

    match cfg.mode {
        StepMode::Fixed => {
            let dts = cfg.fixed_step_sizes()?;
            if dts.len() > cfg.max_steps {
                return Err(SgnError::MaxStepsExceeded { max: cfg.max_steps });
            }
            for (i, &dt) in dts.iter().enumerate() {
                if let Some(s) = states.as_mut() {
                    s.push(z.clone());
                }
                z = leapfrog_step(h, &z, dt).map_err(|e| at_step(e, i))?;
                trace.accepted_dts.push(dt);
            }
        }
        StepMode::Adaptive { tolerance } => {
            let mut t = 0.0;
            let mut dt = cfg.initial_dt;
            let mut attempts = 0usize;
            let mut since_check = 0usize;
            let mut last_err = 0.0;
            while t < cfg.total_time {
                if attempts >= cfg.max_steps {
                    return Err(SgnError::MaxStepsExceeded { max: cfg.max_steps });
                }
                attempts += 1;
                // Shrink the last step to land exactly on T.
                let remaining = cfg.total_time - t;
                let dt_step = dt.min(remaining);
                let final_step = dt_step >= remaining;

                let err = if since_check == 0 {
                    local_error_estimate(h, &z, dt_step)
                } else {
                    last_err
                };
                if err > tolerance {
                    // Reject: retry from the same state with the shrunk step.
                    let (dt_new, clamped) = adapt_step(dt_step, err, tolerance, cfg.stability_bound);
                    if clamped {
                        trace.clamp_events += 1;
                    }
                    dt = dt_new;
                    since_check = 0;
                    continue;
                }
                if let Some(s) = states.as_mut() {
                    s.push(z.clone());
                }
                z = leapfrog_step(h, &z, dt_step)
                    .map_err(|e| at_step(e, trace.accepted_dts.len()))?;
                trace.accepted_dts.push(dt_step);
                trace.error_estimates.push(err);
                last_err = err;
                since_check = (since_check + 1) % cfg.error_check_interval;
                t = if final_step { cfg.total_time } else { t + dt_step };

                let (dt_new, clamped) = adapt_step(dt_step, err, tolerance, cfg.stability_bound);
                if clamped {
                    trace.clamp_events += 1;
                }
                dt = dt_new;
            }
        }
    }

    Ok(FlowRun {
        state: z,
        trace,
        states,
    })
}

/// Apply a given sequence of (signed) step sizes, optionally recording the
/// state before each step.
pub fn flow_steps(
    h: &dyn Hamiltonian,
    z0: &PhaseState,
    dts: &[f64],
    recording: Recording,
) -> Result<FlowRun> {
    let mut states = match recording {
        Recording::None => None,
        Recording::AllStates => Some(Vec::with_capacity(dts.len())),
    };
    let mut z = z0.clone();
    for (i, &dt) in dts.iter().enumerate() {
        if let Some(s) = states.as_mut() {
            s.push(z.clone());
        }
        z = leapfrog_step(h, &z, dt).map_err(|e| at_step(e, i))?;
    }
    Ok(FlowRun {
        state: z,
        trace: StepTrace {
            accepted_dts: dts.to_vec(),
            error_estimates: Vec::new(),
            clamp_events: 0,
        },
        states,
    })
}

/// Exact inverse of a recorded flow: replay the accepted steps in reverse
/// order with negated step sizes.
pub fn inverse_flow(
    h: &dyn Hamiltonian,
    z_final: &PhaseState,
    accepted_dts: &[f64],
) -> Result<PhaseState> {
    let mut z = z_final.clone();
    for (i, &dt) in accepted_dts.iter().rev().enumerate() {
        z = leapfrog_step(h, &z, -dt).map_err(|e| at_step(e, i))?;
    }
    Ok(z)
}

fn at_step(e: SgnError, step: usize) -> SgnError {
    match e {
        SgnError::Divergence { .. } => SgnError::Divergence { step },
        other => other,
    }
}
