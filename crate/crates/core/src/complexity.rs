//! Runtime and memory scaling measurements.
//!
//! The flow evaluates O(T·d) gradient work and needs no Jacobian; the
//! baseline a determinant-based likelihood would pay is a dense
//! finite-difference Jacobian of the same flow plus an LU determinant.
//! Timings use the median of repeats after one warm-up; scaling exponents
//! come from least-squares fits in log–log space.

use crate::error::Result;
use crate::integrator::{self, Recording};
use crate::linalg::lu_det;
use crate::net::{Activation, SeparableHamiltonianNet};
use crate::phase::PhaseState;
use crate::rng::Rng;
use crate::train::{flow_vjp, BackpropMode, FlowTape, MemProbe};
use crate::verify::jacobian_fd;
use std::time::Instant;

/// Least-squares slope of ln(y) against ln(x).
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    slope(&lx, &ly)
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Median of repeated timings (seconds) after one warm-up run.
pub fn time_median<F: FnMut()>(repeats: usize, mut f: F) -> f64 {
    f(); // warm-up
    let mut times: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

/// Benchmark fixture: a random capped Hamiltonian and start state at
/// latent half-dimension d.
pub fn bench_system(d: usize, width: usize, seed: u64) -> Result<(SeparableHamiltonianNet, PhaseState)> {
    let mut rng = Rng::new(seed);
    let h = SeparableHamiltonianNet::random(d, &[width], Activation::Tanh, Some(1.0), &mut rng)?;
    let z0 = PhaseState::new(
        rng.standard_normal_vec(d),
        rng.standard_normal_vec(d),
    )?;
    Ok((h, z0))
}

/// Seconds per `steps`-step flow evaluation.
pub fn time_flow(h: &SeparableHamiltonianNet, z0: &PhaseState, steps: usize, dt: f64, repeats: usize) -> f64 {
    let dts = vec![dt; steps];
    time_median(repeats, || {
        let run = integrator::flow_steps(h, z0, &dts, Recording::None).unwrap();
        std::hint::black_box(run.state.q()[0]);
    })
}

/// Seconds for the determinant pipeline a Jacobian-based likelihood would
/// pay on the same flow: dense central-difference Jacobian (4d flow
/// evaluations) plus an LU determinant of the 2d × 2d result.
pub fn time_jacobian_baseline(
    h: &SeparableHamiltonianNet,
    z0: &PhaseState,
    steps: usize,
    dt: f64,
    repeats: usize,
) -> f64 {
    let dts = vec![dt; steps];
    let map = |z: &PhaseState| -> Result<PhaseState> {
        Ok(integrator::flow_steps(h, z, &dts, Recording::None)?.state)
    };
    time_median(repeats, || {
        let jac = jacobian_fd(&map, z0, 1e-5).unwrap();
        let det = lu_det(&jac).unwrap();
        std::hint::black_box(det);
    })
}

/// Peak phase states retained by one flow backward pass at N steps.
pub fn peak_states(
    h: &SeparableHamiltonianNet,
    z0: &PhaseState,
    steps: usize,
    dt: f64,
    mode: BackpropMode,
) -> Result<usize> {
    let recording = match mode {
        BackpropMode::Stored => Recording::AllStates,
        BackpropMode::Reversible => Recording::None,
    };
    let dts = vec![dt; steps];
    let run = integrator::flow_steps(h, z0, &dts, recording)?;
    let upstream = vec![1.0; 2 * h.dim()];
    let tape = FlowTape {
        dts: &dts,
        z0,
        z_final: &run.state,
        states: run.states.as_deref(),
    };
    let mut probe = MemProbe::new();
    flow_vjp(h, &tape, &upstream, mode, &mut probe)?;
    Ok(probe.peak())
}

/// One row of benchmark output.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchRow {
    pub kind: String,
    pub d: usize,
    pub steps: usize,
    pub value: f64,
}

/// Flow seconds vs step count at fixed d, with the fitted slope.
pub fn sweep_time_vs_steps(
    d: usize,
    width: usize,
    steps_list: &[usize],
    dt: f64,
    repeats: usize,
) -> Result<(Vec<BenchRow>, f64)> {
    let (h, z0) = bench_system(d, width, 0xB0_01)?;
    let mut rows = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &steps in steps_list {
        let secs = time_flow(&h, &z0, steps, dt, repeats);
        xs.push(steps as f64);
        ys.push(secs);
        rows.push(BenchRow {
            kind: "flow_time_vs_steps".into(),
            d,
            steps,
            value: secs,
        });
    }
    Ok((rows, loglog_slope(&xs, &ys)))
}

/// Flow and Jacobian-baseline seconds vs d, with both fitted slopes.
pub fn sweep_time_vs_dim(
    dims: &[usize],
    width: usize,
    steps: usize,
    dt: f64,
    repeats: usize,
) -> Result<(Vec<BenchRow>, f64, f64)> {
    let mut rows = Vec::new();
    let mut xs = Vec::new();
    let mut flow_secs = Vec::new();
    let mut base_secs = Vec::new();
    for &d in dims {
        let (h, z0) = bench_system(d, width, 0xB0_02 + d as u64)?;
        let f = time_flow(&h, &z0, steps, dt, repeats);
        let b = time_jacobian_baseline(&h, &z0, steps, dt, repeats);
        xs.push(d as f64);
        flow_secs.push(f);
        base_secs.push(b);
        rows.push(BenchRow {
            kind: "flow_time_vs_dim".into(),
            d,
            steps,
            value: f,
        });
        rows.push(BenchRow {
            kind: "jacobian_baseline_vs_dim".into(),
            d,
            steps,
            value: b,
        });
    }
    Ok((
        rows,
        loglog_slope(&xs, &flow_secs),
        loglog_slope(&xs, &base_secs),
    ))
}

/// Peak retained states vs N for both backprop modes.
pub fn sweep_memory_vs_steps(
    d: usize,
    width: usize,
    steps_list: &[usize],
    dt: f64,
) -> Result<Vec<BenchRow>> {
    let (h, z0) = bench_system(d, width, 0xB0_03)?;
    let mut rows = Vec::new();
    for &steps in steps_list {
        for (mode, name) in [
            (BackpropMode::Stored, "peak_states_stored"),
            (BackpropMode::Reversible, "peak_states_reversible"),
        ] {
            let peak = peak_states(&h, &z0, steps, dt, mode)?;
            rows.push(BenchRow {
                kind: name.into(),
                d,
                steps,
                value: peak as f64,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        let s = loglog_slope(&xs, &ys);
        assert!((s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn memory_sweep_shapes() {
        let rows = sweep_memory_vs_steps(1, 4, &[10, 50], 0.01).unwrap();
        assert_eq!(rows.len(), 4);
        let stored: Vec<f64> = rows
            .iter()
            .filter(|r| r.kind == "peak_states_stored")
            .map(|r| r.value)
            .collect();
        assert_eq!(stored, vec![11.0, 51.0]);
        let rev: Vec<f64> = rows
            .iter()
            .filter(|r| r.kind == "peak_states_reversible")
            .map(|r| r.value)
            .collect();
        assert!(rev.iter().all(|&v| v <= 3.0));
    }
}
