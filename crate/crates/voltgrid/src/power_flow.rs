//! Backward/forward sweep power flow for the radial per-unit network.
//!
//! Buses hold constant-PQ injections; the substation bus is the slack and
//! keeps the commanded voltage exactly. Each iteration aggregates branch
//! currents leaf-to-root against the present voltage guess (backward), then
//! re-propagates voltages root-to-leaf across the series impedances
//! (forward), until no bus voltage moves by more than the tolerance.

use num_complex::Complex64;
use thiserror::Error;

use crate::grid::{InjectionSet, PerUnitNetwork};

pub const TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 100;

/// Voltage collapse guard: constant-PQ current injections blow up as the
/// voltage guess approaches zero.
const MIN_VOLTAGE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("power flow did not converge: residual {residual:.3e} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("power flow diverged at bus {bus}")]
    Diverged { bus: String },
}

#[derive(Debug, Clone)]
pub struct VoltageSolution {
    /// Complex bus voltages, per unit, indexed like the network buses.
    pub v: Vec<Complex64>,
    pub iterations: usize,
}

impl VoltageSolution {
    pub fn magnitude(&self, bus: usize) -> f64 {
        self.v[bus].norm()
    }
}

pub fn solve(
    net: &PerUnitNetwork,
    inj: &InjectionSet,
    v_slack: f64,
) -> Result<VoltageSolution, FlowError> {
    solve_with(net, inj, v_slack, TOLERANCE, MAX_ITERATIONS)
}

pub fn solve_with(
    net: &PerUnitNetwork,
    inj: &InjectionSet,
    v_slack: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<VoltageSolution, FlowError> {
    let n = net.n_buses();
    assert_eq!(inj.s.len(), n, "injection set size mismatch");
    let mut v = vec![Complex64::new(v_slack, 0.0); n];
    let mut i_branch = vec![Complex64::new(0.0, 0.0); net.branches.len()];
    let mut i_acc = vec![Complex64::new(0.0, 0.0); n];
    let mut residual = f64::INFINITY;

    for iteration in 1..=max_iterations {
        // Backward: branch currents against present voltages. Reverse
        // breadth-first order visits every child before its parent, so each
        // parent accumulator is complete when its branch current is read.
        i_acc.fill(Complex64::new(0.0, 0.0));
        for &bus in net.order.iter().rev() {
            let Some(pb) = net.parent_branch[bus] else {
                continue;
            };
            if v[bus].norm_sqr() < MIN_VOLTAGE * MIN_VOLTAGE || !v[bus].is_finite() {
                return Err(FlowError::Diverged {
                    bus: net.bus_names[bus].clone(),
                });
            }
            i_acc[bus] += v[bus] * net.shunt[bus] - (inj.s[bus] / v[bus]).conj();
            i_branch[pb] = i_acc[bus];
            let parent = net.branches[pb].from;
            let child_current = i_acc[bus];
            i_acc[parent] += child_current;
        }
        // Forward: voltages from the slack outward.
        residual = 0.0;
        for &bus in &net.order {
            let Some(pb) = net.parent_branch[bus] else {
                continue;
            };
            let b = &net.branches[pb];
            let next = v[b.from] - b.z * i_branch[pb];
            residual = residual.max((next - v[bus]).norm());
            v[bus] = next;
        }
        if residual < tolerance {
            return Ok(VoltageSolution { v, iterations: iteration });
        }
    }
    Err(FlowError::NotConverged {
        iterations: max_iterations,
        residual,
    })
}

/// Series branch currents recomputed from a solution, parent -> child.
pub fn branch_currents(net: &PerUnitNetwork, sol: &VoltageSolution) -> Vec<Complex64> {
    net.branches
        .iter()
        .map(|b| (sol.v[b.from] - sol.v[b.to]) / b.z)
        .collect()
}

/// Total real losses: series `|I|^2 R` over all branches plus real shunt
/// dissipation (zero for the purely capacitive pi halves).
pub fn losses(net: &PerUnitNetwork, sol: &VoltageSolution) -> f64 {
    let series: f64 = branch_currents(net, sol)
        .iter()
        .zip(&net.branches)
        .map(|(i, b)| i.norm_sqr() * b.z.re)
        .sum();
    let shunt: f64 = sol
        .v
        .iter()
        .zip(&net.shunt)
        .map(|(v, y)| v.norm_sqr() * y.re)
        .sum();
    series + shunt
}

/// Complex power injected by the slack bus into the network.
pub fn slack_power(net: &PerUnitNetwork, sol: &VoltageSolution) -> Complex64 {
    let currents = branch_currents(net, sol);
    let mut i = sol.v[net.slack] * net.shunt[net.slack];
    for (bi, b) in net.branches.iter().enumerate() {
        if b.from == net.slack {
            i += currents[bi];
        }
    }
    sol.v[net.slack] * i.conj()
}
