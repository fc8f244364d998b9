//! Voltage-control workbench for radial 20 kV distribution feeders with
//! dispersed generation.
//!
//! The crate models a two-feeder benchmark network (31 MV nodes, 8 DGs, an
//! HV/MV transformer with an on-load tap changer), solves its power flow with
//! a backward/forward sweep, and closes a sampled control loop around it:
//!
//! * [`grid`] parses and validates the declarative network file and converts
//!   it to per-unit quantities on the 50 MVA / 20 kV system base.
//! * [`power_flow`] solves the radial network for complex bus voltages.
//! * [`plant`] steps the quasi-static simulator: first-order AVR reactive
//!   lags, scheduled load/generation events, tap actuation.
//! * [`sysid`] runs pulse experiments against a simulator and assembles a
//!   truncated impulse-response model (per-channel coefficient sequences).
//! * [`predictor`] turns model plus input/disturbance history into horizon
//!   predictions with a constant output-offset correction.
//! * [`qp`] is a dense primal active-set solver for strictly convex QPs.
//! * [`mpc`] assembles and solves the receding-horizon problem that tracks
//!   voltage references by commanding DG power factors, with two scalar
//!   slacks softening the voltage band.
//! * [`oltc`] converts persistent slack activity into tap commands.
//! * [`scenario`] executes declarative experiment specs and emits CSV traces,
//!   run summaries and plot scripts.
//!
//! With the default `parallel` feature, identification channel experiments
//! and batch scenario runs fan out over rayon; sequential equivalents are
//! always compiled and produce bit-identical results.

// Negated float comparisons in validation code are deliberate: `!(a < b)`
// rejects NaN along with the out-of-range values, `a >= b` would not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod grid;
pub mod mpc;
pub mod oltc;
pub mod plant;
pub mod power_flow;
pub mod predictor;
pub mod qp;
pub mod scenario;
pub mod sysid;
mod textfmt;

/// Bundled benchmark network file (two rural feeders fed by one HV/MV
/// substation transformer).
pub const BENCHMARK_NET: &str = include_str!("../data/benchmark.net");

/// System apparent-power base, MVA.
pub const S_BASE_MVA: f64 = 50.0;
/// MV voltage base, kV.
pub const V_BASE_KV: f64 = 20.0;
/// Nominal frequency, Hz.
pub const F_NOMINAL_HZ: f64 = 50.0;

/// Default controlled nodes: five on feeder 1, six on feeder 2.
pub const CONTROLLED_NODES: [&str; 11] = [
    "N03", "N06", "N11", "N14", "N18", "N19", "N21", "N23", "N27", "N28", "N32",
];
/// Generators whose active and reactive powers are treated as measured
/// disturbances by default.
pub const DISTURBANCE_GENERATORS: [&str; 3] = ["DG1", "DG2", "DG3"];
