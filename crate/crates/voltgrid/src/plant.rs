//! Quasi-static network simulator.
//!
//! Each sample the simulator: converts commanded power factors into reactive
//! setpoints, advances the first-order AVR lag of every generator, applies
//! any scheduled load/generation events that have come due, moves the HV/MV
//! tap changer, and solves the resulting power flow. Dynamics faster than
//! the sample period are assumed settled, so the electrical state is a fresh
//! flow solution every step.

use num_complex::Complex64;
use thiserror::Error;

use crate::grid::{InjectionSet, OperatingPoint, PerUnitNetwork};
use crate::power_flow::{self, FlowError, VoltageSolution};

/// Convergence threshold for [`SimState::run_to_steady_state`]: largest
/// voltage magnitude change between consecutive samples, per unit.
pub const STEADY_TOLERANCE: f64 = 1e-9;
/// Step bound for [`SimState::run_to_steady_state`].
pub const STEADY_MAX_STEPS: usize = 1000;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("power flow failed at t = {time_s} s: {source}")]
    Flow {
        time_s: f64,
        #[source]
        source: FlowError,
    },
    #[error("event {0}: {1}")]
    BadEvent(String, String),
    #[error("steady state requested with {0} event(s) still pending")]
    PendingEvents(usize),
    #[error("no steady state within {0} steps")]
    NoSteadyState(usize),
    #[error("power factor command {value} for generator {gen} outside (0, 1]")]
    BadPowerFactor { gen: String, value: f64 },
    #[error("expected {expected} power factor commands, got {got}")]
    CommandLength { expected: usize, got: usize },
}

/// Reactive setpoint for one generator running at power factor `pf`.
///
/// `sign = +1.0` makes the machine absorb reactive power (underexcited),
/// `-1.0` makes it inject. `tan(acos(pf))` is evaluated as
/// `sqrt(1 - pf^2) / pf`, exact at both ends of the range.
pub fn reactive_setpoint(p: f64, pf: f64, sign: f64) -> f64 {
    -sign * p * (1.0 - pf * pf).max(0.0).sqrt() / pf
}

/// First-order lag states of all generator AVR loops.
///
/// Per sample: `q <- a*q + (1-a)*q_ref` with `a = exp(-T/tau)`; `tau = 0`
/// gives `a = 0`, i.e. the setpoint is reached within one sample.
#[derive(Debug, Clone)]
pub struct AvrState {
    /// Delivered reactive power per generator, per unit.
    pub q: Vec<f64>,
    /// Discrete pole per generator.
    pub a: Vec<f64>,
}

impl AvrState {
    pub fn new(n_gens: usize, t_sample_s: f64, tau_s: f64) -> AvrState {
        let a = (-t_sample_s / tau_s).exp();
        AvrState {
            q: vec![0.0; n_gens],
            a: vec![a; n_gens],
        }
    }

    fn advance(&mut self, q_ref: &[f64]) {
        for ((q, a), r) in self.q.iter_mut().zip(&self.a).zip(q_ref) {
            *q = *a * *q + (1.0 - *a) * *r;
        }
    }
}

/// HV/MV on-load tap changer position.
///
/// A positive command raises the tap index, which lowers the MV-side
/// voltage: the slack magnitude is `v_hv / (1 + step * position)`.
#[derive(Debug, Clone)]
pub struct TapState {
    pub position: i32,
    pub limit: i32,
    pub step: f64,
    /// Primary-side voltage, per unit.
    pub v_hv_pu: f64,
}

impl TapState {
    pub fn v_slack(&self) -> f64 {
        self.v_hv_pu / (1.0 + self.step * self.position as f64)
    }

    /// Moves the position by `cmd`, saturating at `±limit`. Returns the
    /// actual movement after saturation.
    pub fn apply(&mut self, cmd: i32) -> i32 {
        let target = (self.position + cmd).clamp(-self.limit, self.limit);
        let moved = target - self.position;
        self.position = target;
        moved
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    /// Multiply the load's demand by `1 + factor` (factor > -1).
    ScaleLoad { factor: f64 },
    /// Set a generator's active production, in MW.
    SetGeneratorP { mw: f64 },
    /// Remove the load entirely.
    DisconnectLoad,
}

#[derive(Debug, Clone)]
pub struct Event {
    pub time_s: f64,
    /// Load record id or generator id, depending on the kind.
    pub target: String,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy)]
enum ResolvedTarget {
    Load(usize),
    Gen(usize),
}

/// Time-sorted event list with an exactly-once application cursor.
#[derive(Debug, Clone)]
pub struct EventSchedule {
    events: Vec<Event>,
    targets: Vec<ResolvedTarget>,
    next: usize,
}

impl EventSchedule {
    pub fn empty() -> EventSchedule {
        EventSchedule {
            events: Vec::new(),
            targets: Vec::new(),
            next: 0,
        }
    }

    /// Validates and resolves `events` against the network. Events must be
    /// sorted by time, load events must name load records, generation
    /// events must name generators with `0 <= mw`.
    pub fn new(
        net: &PerUnitNetwork,
        events: Vec<Event>,
    ) -> Result<EventSchedule, PlantError> {
        let mut targets = Vec::with_capacity(events.len());
        let mut prev = f64::NEG_INFINITY;
        for ev in &events {
            let tag = format!("{} @ {} s", ev.target, ev.time_s);
            if !ev.time_s.is_finite() || ev.time_s < 0.0 {
                return Err(PlantError::BadEvent(tag, "time must be >= 0".into()));
            }
            if ev.time_s < prev {
                return Err(PlantError::BadEvent(tag, "events out of order".into()));
            }
            prev = ev.time_s;
            let target = match ev.kind {
                EventKind::ScaleLoad { factor } => {
                    if !(factor > -1.0) || !factor.is_finite() {
                        return Err(PlantError::BadEvent(
                            tag,
                            format!("scale factor {factor} must be > -1"),
                        ));
                    }
                    ResolvedTarget::Load(lookup_load(net, &ev.target, &tag)?)
                }
                EventKind::DisconnectLoad => {
                    ResolvedTarget::Load(lookup_load(net, &ev.target, &tag)?)
                }
                EventKind::SetGeneratorP { mw } => {
                    if !mw.is_finite() || mw < 0.0 {
                        return Err(PlantError::BadEvent(
                            tag,
                            format!("production {mw} MW must be >= 0"),
                        ));
                    }
                    ResolvedTarget::Gen(lookup_gen(net, &ev.target, &tag)?)
                }
            };
            targets.push(target);
        }
        Ok(EventSchedule {
            events,
            targets,
            next: 0,
        })
    }

    pub fn pending(&self) -> usize {
        self.events.len() - self.next
    }
}

fn lookup_load(net: &PerUnitNetwork, id: &str, tag: &str) -> Result<usize, PlantError> {
    net.load_ids
        .iter()
        .position(|l| l == id)
        .ok_or_else(|| PlantError::BadEvent(tag.into(), format!("unknown load {id}")))
}

fn lookup_gen(net: &PerUnitNetwork, id: &str, tag: &str) -> Result<usize, PlantError> {
    net.gen_ids
        .iter()
        .position(|g| g == id)
        .ok_or_else(|| PlantError::BadEvent(tag.into(), format!("unknown generator {id}")))
}

/// Simulator configuration. `Default` gives the nominal setup: 2 s sample
/// time, 6 s AVR time constant, tap centred with the primary at 1.0 p.u.,
/// generators absorbing when commanded below unity power factor.
#[derive(Debug, Clone)]
pub struct PlantConfig {
    pub op: OperatingPoint,
    pub t_sample_s: f64,
    pub tau_avr_s: f64,
    pub v_hv_pu: f64,
    pub initial_tap: i32,
    /// +1.0: sub-unity power factor commands absorb reactive power.
    pub q_sign: f64,
    /// Convergence tolerance handed to every flow solve.
    pub flow_tolerance: f64,
}

impl Default for PlantConfig {
    fn default() -> PlantConfig {
        PlantConfig {
            op: OperatingPoint::SevenAm,
            t_sample_s: 2.0,
            tau_avr_s: 6.0,
            v_hv_pu: 1.0,
            initial_tap: 0,
            q_sign: 1.0,
            flow_tolerance: power_flow::TOLERANCE,
        }
    }
}

/// Everything the controller may observe after one sample.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub time_s: f64,
    pub solution: VoltageSolution,
    /// Active production per generator, per unit.
    pub gen_p: Vec<f64>,
    /// Delivered reactive power per generator, per unit.
    pub gen_q: Vec<f64>,
    /// Tap position after this sample's command.
    pub tap_position: i32,
    /// Ids of events applied during this sample.
    pub fired: Vec<String>,
}

/// Full simulator state.
#[derive(Debug, Clone)]
pub struct SimState {
    net: PerUnitNetwork,
    pub config: PlantConfig,
    pub avr: AvrState,
    pub tap: TapState,
    schedule: EventSchedule,
    /// Demand multiplier per load record; 0 once disconnected.
    load_scale: Vec<f64>,
    /// Current active production per generator, per unit.
    gen_p: Vec<f64>,
    /// One-shot additive injection per bus, cleared after the next solve.
    pulse: Vec<Complex64>,
    time_s: f64,
}

impl SimState {
    pub fn new(net: &PerUnitNetwork, config: PlantConfig) -> SimState {
        SimState::with_events(net, config, EventSchedule::empty())
    }

    pub fn with_events(
        net: &PerUnitNetwork,
        config: PlantConfig,
        schedule: EventSchedule,
    ) -> SimState {
        let n_gens = net.gen_bus.len();
        let gen_p = net.gen_p(config.op).to_vec();
        let avr = AvrState::new(n_gens, config.t_sample_s, config.tau_avr_s);
        let tap = TapState {
            position: config.initial_tap.clamp(-net.tap_limit, net.tap_limit),
            limit: net.tap_limit,
            step: net.tap_step,
            v_hv_pu: config.v_hv_pu,
        };
        let n = net.n_buses();
        SimState {
            net: net.clone(),
            config,
            avr,
            tap,
            schedule,
            load_scale: vec![1.0; net.load_bus.len()],
            gen_p,
            pulse: vec![Complex64::new(0.0, 0.0); n],
            time_s: 0.0,
        }
    }

    pub fn network(&self) -> &PerUnitNetwork {
        &self.net
    }

    pub fn time_s(&self) -> f64 {
        self.time_s
    }

    pub fn n_gens(&self) -> usize {
        self.gen_p.len()
    }

    /// Current active production per generator, per unit.
    pub fn gen_p(&self) -> &[f64] {
        &self.gen_p
    }

    /// Adds a one-shot injection at `bus` for the next sample only.
    /// Used by the identification pulses; cleared once solved.
    pub fn add_pulse(&mut self, bus: usize, s: Complex64) {
        self.pulse[bus] += s;
    }

    /// Advances one sample: reactive setpoints from `pf_commands`, AVR lag,
    /// due events, tap command, then a fresh flow solution.
    pub fn step(&mut self, pf_commands: &[f64], tap_cmd: i32) -> Result<StepOutput, PlantError> {
        if pf_commands.len() != self.gen_p.len() {
            return Err(PlantError::CommandLength {
                expected: self.gen_p.len(),
                got: pf_commands.len(),
            });
        }
        let mut q_ref = Vec::with_capacity(self.gen_p.len());
        for (gi, (&pf, &p)) in pf_commands.iter().zip(&self.gen_p).enumerate() {
            if !(pf > 0.0 && pf <= 1.0) {
                return Err(PlantError::BadPowerFactor {
                    gen: self.net.gen_ids[gi].clone(),
                    value: pf,
                });
            }
            q_ref.push(reactive_setpoint(p, pf, self.config.q_sign));
        }
        self.avr.advance(&q_ref);

        self.time_s += self.config.t_sample_s;
        let mut fired = Vec::new();
        while self.schedule.next < self.schedule.events.len()
            && self.schedule.events[self.schedule.next].time_s <= self.time_s
        {
            let i = self.schedule.next;
            let ev = &self.schedule.events[i];
            match (self.schedule.targets[i], &ev.kind) {
                (ResolvedTarget::Load(li), EventKind::ScaleLoad { factor }) => {
                    self.load_scale[li] *= 1.0 + factor;
                }
                (ResolvedTarget::Load(li), EventKind::DisconnectLoad) => {
                    self.load_scale[li] = 0.0;
                }
                (ResolvedTarget::Gen(gi), EventKind::SetGeneratorP { mw }) => {
                    self.gen_p[gi] = mw / self.net.s_base_mva;
                }
                _ => unreachable!("target kind fixed at schedule construction"),
            }
            fired.push(ev.target.clone());
            self.schedule.next += 1;
        }

        self.tap.apply(tap_cmd);

        let inj = self.injections();
        self.pulse.iter_mut().for_each(|p| *p = Complex64::new(0.0, 0.0));
        let solution = power_flow::solve_with(
            &self.net,
            &inj,
            self.tap.v_slack(),
            self.config.flow_tolerance,
            power_flow::MAX_ITERATIONS,
        )
            .map_err(|source| PlantError::Flow {
                time_s: self.time_s,
                source,
            })?;
        Ok(StepOutput {
            time_s: self.time_s,
            solution,
            gen_p: self.gen_p.clone(),
            gen_q: self.avr.q.clone(),
            tap_position: self.tap.position,
            fired,
        })
    }

    fn injections(&self) -> InjectionSet {
        let mut inj = InjectionSet::zero(self.net.n_buses());
        for (li, s) in self.net.load_s(self.config.op).iter().enumerate() {
            inj.s[self.net.load_bus[li]] -= s * self.load_scale[li];
        }
        for (gi, (&p, &q)) in self.gen_p.iter().zip(&self.avr.q).enumerate() {
            inj.s[self.net.gen_bus[gi]] += Complex64::new(p, q);
        }
        for (b, p) in self.pulse.iter().enumerate() {
            inj.s[b] += p;
        }
        inj
    }

    /// Solves the flow for the current state without advancing time: no
    /// AVR update, no events, no tap movement. Used to read the initial
    /// condition before the loop starts.
    pub fn measure(&self) -> Result<StepOutput, PlantError> {
        let inj = self.injections();
        let solution = power_flow::solve_with(
            &self.net,
            &inj,
            self.tap.v_slack(),
            self.config.flow_tolerance,
            power_flow::MAX_ITERATIONS,
        )
            .map_err(|source| PlantError::Flow {
                time_s: self.time_s,
                source,
            })?;
        Ok(StepOutput {
            time_s: self.time_s,
            solution,
            gen_p: self.gen_p.clone(),
            gen_q: self.avr.q.clone(),
            tap_position: self.tap.position,
            fired: Vec::new(),
        })
    }

    /// Steps with constant commands until the largest voltage magnitude
    /// change between samples drops below [`STEADY_TOLERANCE`]. All events
    /// must already have been applied.
    pub fn run_to_steady_state(
        &mut self,
        pf_commands: &[f64],
    ) -> Result<StepOutput, PlantError> {
        if self.schedule.pending() > 0 {
            return Err(PlantError::PendingEvents(self.schedule.pending()));
        }
        let mut prev: Option<Vec<f64>> = None;
        for _ in 0..STEADY_MAX_STEPS {
            let out = self.step(pf_commands, 0)?;
            let mags: Vec<f64> = out.solution.v.iter().map(|v| v.norm()).collect();
            if let Some(p) = &prev {
                let delta = mags
                    .iter()
                    .zip(p)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0_f64, f64::max);
                if delta < STEADY_TOLERANCE {
                    return Ok(out);
                }
            }
            prev = Some(mags);
        }
        Err(PlantError::NoSteadyState(STEADY_MAX_STEPS))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::NetworkModel;
    use crate::BENCHMARK_NET;

    fn network() -> PerUnitNetwork {
        NetworkModel::parse(BENCHMARK_NET)
            .unwrap()
            .to_per_unit()
            .unwrap()
    }

    #[test]
    fn reactive_setpoint_three_four_five() {
        // cos(phi) = 0.6 on a 3-4-5 triangle: |q| = p * 4 / 3.
        let q = reactive_setpoint(3.0, 0.6, 1.0);
        assert!((q + 4.0).abs() < 1e-12);
        assert_eq!(reactive_setpoint(3.0, 1.0, 1.0), 0.0);
        let q_inj = reactive_setpoint(3.0, 0.6, -1.0);
        assert!((q_inj - 4.0).abs() < 1e-12);
    }

    #[test]
    fn avr_geometric_approach() {
        let net = network();
        let cfg = PlantConfig {
            tau_avr_s: 6.0,
            ..PlantConfig::default()
        };
        let mut sim = SimState::new(&net, cfg);
        let pf = vec![0.9; sim.n_gens()];
        let a = (-2.0_f64 / 6.0).exp();
        let q_ref: Vec<f64> = sim
            .gen_p()
            .iter()
            .map(|&p| reactive_setpoint(p, 0.9, 1.0))
            .collect();
        for k in 1..=5 {
            sim.step(&pf, 0).unwrap();
            for (gi, r) in q_ref.iter().enumerate() {
                let expect = r * (1.0 - a.powi(k));
                assert!((sim.avr.q[gi] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn instant_avr_when_tau_zero() {
        let net = network();
        let cfg = PlantConfig {
            tau_avr_s: 0.0,
            ..PlantConfig::default()
        };
        let mut sim = SimState::new(&net, cfg);
        let pf = vec![0.8; sim.n_gens()];
        let out = sim.step(&pf, 0).unwrap();
        for (gi, &p) in out.gen_p.iter().enumerate() {
            let expect = reactive_setpoint(p, 0.8, 1.0);
            assert!((out.gen_q[gi] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn raise_command_lowers_every_bus() {
        let net = network();
        for op in OperatingPoint::ALL {
            let cfg = PlantConfig {
                op,
                ..PlantConfig::default()
            };
            let mut a = SimState::new(&net, cfg.clone());
            let mut b = SimState::new(&net, cfg);
            let pf = vec![1.0; a.n_gens()];
            let out_a = a.step(&pf, 0).unwrap();
            let out_b = b.step(&pf, 1).unwrap();
            assert_eq!(out_b.tap_position, 1);
            for bus in 0..net.n_buses() {
                assert!(
                    out_b.solution.magnitude(bus) < out_a.solution.magnitude(bus),
                    "bus {} did not drop at {}",
                    net.bus_names[bus],
                    op.label()
                );
            }
        }
    }

    #[test]
    fn tap_saturates_at_limit() {
        let mut tap = TapState {
            position: 5,
            limit: 6,
            step: 0.015,
            v_hv_pu: 1.0,
        };
        assert_eq!(tap.apply(3), 1);
        assert_eq!(tap.position, 6);
        assert_eq!(tap.apply(1), 0);
        assert!((tap.v_slack() - 1.0 / 1.09).abs() < 1e-15);
        assert_eq!(tap.apply(-13), -12);
        assert_eq!(tap.position, -6);
        assert!((tap.v_slack() - 1.0 / 0.91).abs() < 1e-15);
    }

    #[test]
    fn load_increase_lowers_local_voltage() {
        let net = network();
        let cfg = PlantConfig::default();
        let schedule = EventSchedule::new(
            &net,
            vec![Event {
                time_s: 4.0,
                target: "N32.2".into(),
                kind: EventKind::ScaleLoad { factor: 0.5 },
            }],
        )
        .unwrap();
        let mut with = SimState::with_events(&net, cfg.clone(), schedule);
        let mut without = SimState::new(&net, cfg);
        let pf = vec![1.0; with.n_gens()];
        let n32 = net.bus_index("N32").unwrap();

        let a1 = with.step(&pf, 0).unwrap();
        let b1 = without.step(&pf, 0).unwrap();
        assert!(a1.fired.is_empty());
        assert_eq!(a1.solution.magnitude(n32), b1.solution.magnitude(n32));

        let a2 = with.step(&pf, 0).unwrap();
        let b2 = without.step(&pf, 0).unwrap();
        assert_eq!(a2.fired, vec!["N32.2".to_string()]);
        assert!(a2.solution.magnitude(n32) < b2.solution.magnitude(n32));

        // Exactly once: no re-application afterwards.
        let a3 = with.step(&pf, 0).unwrap();
        assert!(a3.fired.is_empty());
    }

    #[test]
    fn generation_step_raises_local_voltage() {
        let net = network();
        let schedule = EventSchedule::new(
            &net,
            vec![Event {
                time_s: 2.0,
                target: "DG2".into(),
                kind: EventKind::SetGeneratorP { mw: 5.0 },
            }],
        )
        .unwrap();
        let cfg = PlantConfig::default();
        let mut with = SimState::with_events(&net, cfg.clone(), schedule);
        let mut without = SimState::new(&net, cfg);
        let pf = vec![1.0; with.n_gens()];
        let n03 = net.bus_index("N03").unwrap();
        let a = with.step(&pf, 0).unwrap();
        let b = without.step(&pf, 0).unwrap();
        assert_eq!(a.gen_p[1], 5.0 / 50.0);
        assert!(a.solution.magnitude(n03) > b.solution.magnitude(n03));
    }

    #[test]
    fn disconnect_zeroes_demand() {
        let net = network();
        let schedule = EventSchedule::new(
            &net,
            vec![Event {
                time_s: 2.0,
                target: "N18".into(),
                kind: EventKind::DisconnectLoad,
            }],
        )
        .unwrap();
        let cfg = PlantConfig::default();
        let mut with = SimState::with_events(&net, cfg.clone(), schedule);
        let mut without = SimState::new(&net, cfg);
        let pf = vec![1.0; with.n_gens()];
        let n18 = net.bus_index("N18").unwrap();
        let a = with.step(&pf, 0).unwrap();
        let b = without.step(&pf, 0).unwrap();
        assert!(a.solution.magnitude(n18) > b.solution.magnitude(n18));
    }

    #[test]
    fn schedule_rejections() {
        let net = network();
        let bad_order = EventSchedule::new(
            &net,
            vec![
                Event {
                    time_s: 10.0,
                    target: "N18".into(),
                    kind: EventKind::DisconnectLoad,
                },
                Event {
                    time_s: 5.0,
                    target: "N03".into(),
                    kind: EventKind::DisconnectLoad,
                },
            ],
        );
        assert!(bad_order.is_err());
        let unknown = EventSchedule::new(
            &net,
            vec![Event {
                time_s: 1.0,
                target: "N99".into(),
                kind: EventKind::DisconnectLoad,
            }],
        );
        assert!(unknown.is_err());
        let bad_factor = EventSchedule::new(
            &net,
            vec![Event {
                time_s: 1.0,
                target: "N18".into(),
                kind: EventKind::ScaleLoad { factor: -1.0 },
            }],
        );
        assert!(bad_factor.is_err());
    }

    #[test]
    fn steady_state_requires_consumed_schedule() {
        let net = network();
        let schedule = EventSchedule::new(
            &net,
            vec![Event {
                time_s: 1e6,
                target: "N18".into(),
                kind: EventKind::DisconnectLoad,
            }],
        )
        .unwrap();
        let mut sim = SimState::with_events(&net, PlantConfig::default(), schedule);
        let pf = vec![1.0; sim.n_gens()];
        assert!(matches!(
            sim.run_to_steady_state(&pf),
            Err(PlantError::PendingEvents(1))
        ));
    }

    #[test]
    fn steady_state_is_idempotent() {
        let net = network();
        let mut sim = SimState::new(&net, PlantConfig::default());
        let pf = vec![0.9; sim.n_gens()];
        let settled = sim.run_to_steady_state(&pf).unwrap();
        let next = sim.step(&pf, 0).unwrap();
        for bus in 0..net.n_buses() {
            let d = (settled.solution.magnitude(bus) - next.solution.magnitude(bus)).abs();
            assert!(d < STEADY_TOLERANCE);
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let net = network();
        let mk = || {
            let schedule = EventSchedule::new(
                &net,
                vec![
                    Event {
                        time_s: 6.0,
                        target: "N08".into(),
                        kind: EventKind::ScaleLoad { factor: 1.0 },
                    },
                    Event {
                        time_s: 10.0,
                        target: "DG5".into(),
                        kind: EventKind::SetGeneratorP { mw: 3.75 },
                    },
                ],
            )
            .unwrap();
            SimState::with_events(&net, PlantConfig::default(), schedule)
        };
        let mut a = mk();
        let mut b = mk();
        let pf: Vec<f64> = (0..a.n_gens()).map(|i| 0.85 + 0.01 * i as f64).collect();
        for k in 0..10 {
            let cmd = if k == 4 { 1 } else { 0 };
            let oa = a.step(&pf, cmd).unwrap();
            let ob = b.step(&pf, cmd).unwrap();
            for bus in 0..net.n_buses() {
                assert_eq!(oa.solution.v[bus], ob.solution.v[bus]);
            }
            assert_eq!(oa.gen_q, ob.gen_q);
        }
    }

    #[test]
    fn pulse_is_one_shot() {
        let net = network();
        let mut pulsed = SimState::new(&net, PlantConfig::default());
        let mut plain = SimState::new(&net, PlantConfig::default());
        let pf = vec![1.0; pulsed.n_gens()];
        let bus = net.bus_index("N14").unwrap();
        pulsed.add_pulse(bus, Complex64::new(0.05, 0.0));
        let p1 = pulsed.step(&pf, 0).unwrap();
        let q1 = plain.step(&pf, 0).unwrap();
        assert!(p1.solution.magnitude(bus) > q1.solution.magnitude(bus));
        let p2 = pulsed.step(&pf, 0).unwrap();
        let q2 = plain.step(&pf, 0).unwrap();
        assert_eq!(p2.solution.v[bus], q2.solution.v[bus]);
    }
}
