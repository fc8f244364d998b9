//! Declarative experiment runner.
//!
//! A scenario file names an operating point, a model source, an event
//! schedule and the controller settings; [`run`] closes the loop around the
//! simulator (measure, control step, tap supervision, plant step) and
//! returns a per-sample trace plus a summary. Traces serialize to CSV with
//! full-precision numbers so a parsed file reproduces the run bit for bit,
//! and every run can emit a self-contained Python script that renders the
//! feeder voltage panels with the band limits drawn in.
//!
//! A plant failure or persistent solver degradation ends the run early; the
//! partial trace is kept and the summary records the reason.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::grid::{OperatingPoint, PerUnitNetwork};
use crate::mpc::{MpcConfig, MpcController, MpcError};
use crate::oltc::OltcSupervisor;
use crate::plant::{Event, EventKind, EventSchedule, PlantConfig, PlantError, SimState};
use crate::sysid::{
    self, Amplitudes, GridExperiment, ImpulseResponseModel, SysIdError, DEFAULT_MODEL_MEMORY,
};
use crate::textfmt::{self, Doc, ParseError};
use crate::{CONTROLLED_NODES, DISTURBANCE_GENERATORS};

/// Consecutive degraded control samples after which a run is abandoned.
pub const DEGRADED_ABORT_SAMPLES: usize = 5;
/// Samples the run must extend past the last scheduled event.
pub const EVENT_MARGIN_SAMPLES: usize = 10;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario file: {0}")]
    Format(#[from] ParseError),
    #[error("scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Controller(#[from] MpcError),
    #[error(transparent)]
    Identification(#[from] SysIdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

/// Where the controller's impulse-response model comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSource {
    /// Run the pulse experiments at the given operating point.
    Identify { op: OperatingPoint },
    /// Load a previously saved model file.
    File(PathBuf),
}

/// How the voltage references are chosen at the start of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMode {
    /// Track the nominal profile (plus any explicit per-node entries).
    Nominal,
    /// Hold the voltages measured before the first control step.
    Initial,
}

/// A parsed experiment description.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub name: String,
    pub op: OperatingPoint,
    pub duration_s: f64,
    pub t_sample_s: f64,
    pub tau_avr_s: f64,
    /// Voltage on the HV side of the substation transformer, per unit.
    pub v_hv_pu: f64,
    pub initial_tap: i32,
    /// Whether slack activity is allowed to move the tap during the run.
    pub oltc: bool,
    pub dwell_time_s: f64,
    /// Convergence tolerance for every flow solve in the run.
    pub flow_tolerance: f64,
    pub model: ModelSource,
    pub references: ReferenceMode,
    pub controller: MpcConfig,
    pub events: Vec<Event>,
}

impl ScenarioSpec {
    pub fn from_text(text: &str) -> Result<ScenarioSpec, ScenarioError> {
        let doc = Doc::parse(text)?;
        let sec = doc.require("scenario")?;
        let mut kv = sec.as_map()?;
        let mut take = |key: &str| kv.remove(key);

        let name = take("name")
            .map(|(v, _)| v)
            .ok_or_else(|| invalid("missing name"))?;
        let op_raw = take("operating_point").ok_or_else(|| invalid("missing operating_point"))?;
        let op = OperatingPoint::from_label(&op_raw.0)
            .ok_or_else(|| invalid(format!("unknown operating_point {:?}", op_raw.0)))?;
        let num = |entry: Option<(String, usize)>, what: &str, default: f64| match entry {
            Some((v, line)) => textfmt::parse_f64(&v, line, what),
            None => Ok(default),
        };
        let duration_s = num(take("duration_s"), "duration_s", f64::NAN)?;
        let t_sample_s = num(take("t_sample_s"), "t_sample_s", 2.0)?;
        let tau_avr_s = num(take("tau_avr_s"), "tau_avr_s", 6.0)?;
        let v_hv_pu = num(take("v_hv_pu"), "v_hv_pu", 1.0)?;
        let dwell_time_s = num(take("dwell_time_s"), "dwell_time_s", 75.0)?;
        let flow_tolerance = num(
            take("flow_tolerance"),
            "flow_tolerance",
            crate::power_flow::TOLERANCE,
        )?;
        let initial_tap = match take("initial_tap") {
            Some((v, _)) => v
                .parse()
                .map_err(|e| invalid(format!("initial_tap: {e}")))?,
            None => 0,
        };
        let oltc = match take("oltc").as_ref().map(|(v, _)| v.as_str()) {
            None | Some("off") => false,
            Some("on") => true,
            Some(other) => return Err(invalid(format!("oltc must be on or off, not {other:?}"))),
        };
        let model = match take("model") {
            None => ModelSource::Identify { op },
            Some((v, _)) => parse_model_source(&v, op)?,
        };
        let references = match take("references").as_ref().map(|(v, _)| v.as_str()) {
            None | Some("nominal") => ReferenceMode::Nominal,
            Some("initial") => ReferenceMode::Initial,
            Some(other) => {
                return Err(invalid(format!(
                    "references must be nominal or initial, not {other:?}"
                )))
            }
        };
        if let Some(key) = kv.keys().next() {
            return Err(invalid(format!("unknown [scenario] key {key:?}")));
        }

        let mut events = Vec::new();
        if let Some(sec) = doc.section("events") {
            for row in &sec.rows {
                events.push(parse_event(row)?);
            }
        }
        let controller = MpcConfig::from_doc(&doc)?;

        let spec = ScenarioSpec {
            name,
            op,
            duration_s,
            t_sample_s,
            tau_avr_s,
            v_hv_pu,
            initial_tap,
            oltc,
            dwell_time_s,
            flow_tolerance,
            model,
            references,
            controller,
            events,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a spec from disk; a relative model file path is resolved
    /// against the spec's own directory.
    pub fn load(path: &Path) -> Result<ScenarioSpec, ScenarioError> {
        let mut spec = ScenarioSpec::from_text(&std::fs::read_to_string(path)?)?;
        if let ModelSource::File(p) = &spec.model {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    spec.model = ModelSource::File(dir.join(p));
                }
            }
        }
        Ok(spec)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(invalid(format!(
                "name {:?} must be nonempty and filesystem-safe",
                self.name
            )));
        }
        for (what, v) in [
            ("duration_s", self.duration_s),
            ("t_sample_s", self.t_sample_s),
            ("dwell_time_s", self.dwell_time_s),
            ("v_hv_pu", self.v_hv_pu),
            ("flow_tolerance", self.flow_tolerance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{what} must be positive, got {v}")));
            }
        }
        if !(self.tau_avr_s.is_finite() && self.tau_avr_s >= 0.0) {
            return Err(invalid(format!(
                "tau_avr_s must be nonnegative, got {}",
                self.tau_avr_s
            )));
        }
        if self.initial_tap.abs() > 6 {
            return Err(invalid(format!(
                "initial_tap {} outside the +/-6 range",
                self.initial_tap
            )));
        }
        let last_event = self
            .events
            .iter()
            .map(|e| e.time_s)
            .fold(f64::NEG_INFINITY, f64::max);
        let margin = EVENT_MARGIN_SAMPLES as f64 * self.t_sample_s;
        if !self.events.is_empty() && self.duration_s < last_event + margin {
            return Err(invalid(format!(
                "duration_s {} does not cover the last event at {} s plus {} s of settling",
                self.duration_s, last_event, margin
            )));
        }
        if self.references == ReferenceMode::Initial && !self.controller.references.is_empty() {
            return Err(invalid(
                "explicit [references] entries conflict with references = initial",
            ));
        }
        Ok(())
    }

    pub fn plant_config(&self) -> PlantConfig {
        PlantConfig {
            op: self.op,
            t_sample_s: self.t_sample_s,
            tau_avr_s: self.tau_avr_s,
            v_hv_pu: self.v_hv_pu,
            initial_tap: self.initial_tap,
            flow_tolerance: self.flow_tolerance,
            ..PlantConfig::default()
        }
    }

    /// Number of control samples covering the configured duration.
    pub fn steps(&self) -> usize {
        (self.duration_s / self.t_sample_s).ceil() as usize
    }

    /// Loads or identifies the controller model. Identification always runs
    /// against the nominal substation voltage and centered tap, so a cached
    /// model is reusable by every scenario at the same operating point; the
    /// controller's per-step offset correction absorbs the bias when the
    /// plant itself starts elsewhere.
    pub fn prepare_model(
        &self,
        net: &PerUnitNetwork,
    ) -> Result<ImpulseResponseModel, ScenarioError> {
        match &self.model {
            ModelSource::File(path) => Ok(ImpulseResponseModel::load(path)?),
            ModelSource::Identify { op } => {
                let config = PlantConfig {
                    op: *op,
                    t_sample_s: self.t_sample_s,
                    tau_avr_s: self.tau_avr_s,
                    flow_tolerance: self.flow_tolerance,
                    ..PlantConfig::default()
                };
                let exp =
                    GridExperiment::new(net, config, &CONTROLLED_NODES, &DISTURBANCE_GENERATORS)?;
                let amplitudes = Amplitudes::uniform(
                    net.gen_bus.len(),
                    2 * DISTURBANCE_GENERATORS.len(),
                );
                Ok(sysid::identify(&exp, &amplitudes, DEFAULT_MODEL_MEMORY)?)
            }
        }
    }
}

fn parse_model_source(value: &str, default_op: OperatingPoint) -> Result<ModelSource, ScenarioError> {
    if value == "identify" {
        return Ok(ModelSource::Identify { op: default_op });
    }
    if let Some(label) = value.strip_prefix("identify@") {
        let op = OperatingPoint::from_label(label)
            .ok_or_else(|| invalid(format!("unknown operating point {label:?} in model")))?;
        return Ok(ModelSource::Identify { op });
    }
    if let Some(path) = value.strip_prefix("file ") {
        return Ok(ModelSource::File(PathBuf::from(path.trim())));
    }
    Err(invalid(format!(
        "model must be identify, identify@<point> or file <path>, not {value:?}"
    )))
}

fn parse_event(row: &textfmt::Row) -> Result<Event, ScenarioError> {
    let kind: String = row.field(1, "event kind")?;
    let (kind, n) = match kind.as_str() {
        "scale" => (
            EventKind::ScaleLoad {
                factor: row.field(3, "scale factor")?,
            },
            4,
        ),
        "set_p" => (
            EventKind::SetGeneratorP {
                mw: row.field(3, "generator power")?,
            },
            4,
        ),
        "disconnect" => (EventKind::DisconnectLoad, 3),
        other => {
            return Err(ScenarioError::Format(textfmt::err(
                row.line,
                format!("unknown event kind {other:?}"),
            )))
        }
    };
    row.expect_len(n)?;
    Ok(Event {
        time_s: row.field(0, "event time")?,
        target: row.fields[2].clone(),
        kind,
    })
}

/// One control sample of a run: the measured voltages the controller saw,
/// the commands it issued, and the plant activity within the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time_s: f64,
    /// Controlled node voltage magnitudes at the sample instant.
    pub v: Vec<f64>,
    /// Power-factor references applied over the following interval.
    pub pf: Vec<f64>,
    pub slack_lower: f64,
    pub slack_upper: f64,
    /// Tap position after applying this sample's command.
    pub tap: i32,
    /// Targets of the scheduled events that fired within the interval.
    pub events: Vec<String>,
}

/// Band statistics of one controlled node over a run.
#[derive(Debug, Clone)]
pub struct NodeSummary {
    pub name: String,
    pub v_min: f64,
    pub v_max: f64,
    pub time_below_s: f64,
    pub time_above_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub name: String,
    pub operating_point: OperatingPoint,
    pub steps: usize,
    pub duration_s: f64,
    pub v_min_band: f64,
    pub v_max_band: f64,
    pub nodes: Vec<NodeSummary>,
    pub tap_changes: usize,
    pub max_slack_lower: f64,
    pub max_slack_upper: f64,
    pub degraded_samples: usize,
    /// Why the run ended early, if it did.
    pub aborted: Option<String>,
    pub notes: Vec<String>,
}

impl RunSummary {
    pub fn to_text(&self) -> String {
        let f = textfmt::fmt_f64;
        let mut out = String::new();
        out.push_str("[run]\n");
        out.push_str(&format!("name = {}\n", self.name));
        out.push_str(&format!(
            "operating_point = {}\n",
            self.operating_point.label()
        ));
        out.push_str(&format!("steps = {}\n", self.steps));
        out.push_str(&format!("duration_s = {}\n", f(self.duration_s)));
        out.push_str(&format!("v_min_band = {}\n", f(self.v_min_band)));
        out.push_str(&format!("v_max_band = {}\n", f(self.v_max_band)));
        out.push_str(&format!("tap_changes = {}\n", self.tap_changes));
        out.push_str(&format!("max_slack_lower = {}\n", f(self.max_slack_lower)));
        out.push_str(&format!("max_slack_upper = {}\n", f(self.max_slack_upper)));
        out.push_str(&format!("degraded_samples = {}\n", self.degraded_samples));
        if let Some(reason) = &self.aborted {
            out.push_str(&format!("aborted = {reason}\n"));
        }
        out.push_str("\n[nodes]\n# name v_min v_max time_below_s time_above_s\n");
        for n in &self.nodes {
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                n.name,
                f(n.v_min),
                f(n.v_max),
                f(n.time_below_s),
                f(n.time_above_s)
            ));
        }
        if !self.notes.is_empty() {
            out.push_str("\n[notes]\n");
            for note in &self.notes {
                out.push_str(note);
                out.push('\n');
            }
        }
        out
    }
}

/// Reads a summary back from [`RunSummary::to_text`] output.
pub fn parse_summary(text: &str) -> Result<RunSummary, ScenarioError> {
    let doc = Doc::parse(text)?;
    let kv = doc.require("run")?.as_map()?;
    let get = |key: &str| {
        kv.get(key)
            .ok_or_else(|| invalid(format!("summary missing {key}")))
    };
    let num = |key: &str| -> Result<f64, ScenarioError> {
        let (v, line) = get(key)?;
        Ok(textfmt::parse_f64(v, *line, key)?)
    };
    let int = |key: &str| -> Result<usize, ScenarioError> {
        let (v, _) = get(key)?;
        v.parse()
            .map_err(|_| invalid(format!("summary: bad {key} value {v:?}")))
    };
    let op_label = &get("operating_point")?.0;
    let mut nodes = Vec::new();
    if let Some(sec) = doc.section("nodes") {
        for row in &sec.rows {
            row.expect_len(5)?;
            nodes.push(NodeSummary {
                name: row.fields[0].clone(),
                v_min: row.field(1, "v_min")?,
                v_max: row.field(2, "v_max")?,
                time_below_s: row.field(3, "time_below_s")?,
                time_above_s: row.field(4, "time_above_s")?,
            });
        }
    }
    let notes = doc
        .section("notes")
        .map(|sec| sec.rows.iter().map(|r| r.raw.clone()).collect())
        .unwrap_or_default();
    Ok(RunSummary {
        name: get("name")?.0.clone(),
        operating_point: OperatingPoint::from_label(op_label)
            .ok_or_else(|| invalid(format!("summary: unknown operating point {op_label:?}")))?,
        steps: int("steps")?,
        duration_s: num("duration_s")?,
        v_min_band: num("v_min_band")?,
        v_max_band: num("v_max_band")?,
        nodes,
        tap_changes: int("tap_changes")?,
        max_slack_lower: num("max_slack_lower")?,
        max_slack_upper: num("max_slack_upper")?,
        degraded_samples: int("degraded_samples")?,
        aborted: kv.get("aborted").map(|(v, _)| v.clone()),
        notes,
    })
}

/// Everything a finished (or aborted) run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    /// Controlled node names, in trace column order.
    pub outputs: Vec<String>,
    /// Input channel names, in trace column order.
    pub inputs: Vec<String>,
    /// Output names grouped by the feeder that serves them.
    pub feeders: Vec<Vec<String>>,
    pub trace: Vec<TraceRecord>,
    pub summary: RunSummary,
}

impl RunResult {
    pub fn to_csv(&self) -> String {
        trace_to_csv(&self.outputs, &self.inputs, &self.trace)
    }
}

/// Groups output names by the slack-adjacent bus at the head of their
/// feeder, preserving the given order within each group.
fn feeder_groups(net: &PerUnitNetwork, names: &[String], buses: &[usize]) -> Vec<Vec<String>> {
    let mut heads: Vec<usize> = Vec::new();
    let mut groups: Vec<Vec<String>> = Vec::new();
    for (name, &bus) in names.iter().zip(buses) {
        let mut cur = bus;
        while cur != net.slack {
            let pb = net.parent_branch[cur].expect("non-slack bus has a parent");
            let br = &net.branches[pb];
            let parent = if br.to == cur { br.from } else { br.to };
            if parent == net.slack {
                break;
            }
            cur = parent;
        }
        match heads.iter().position(|&h| h == cur) {
            Some(i) => groups[i].push(name.clone()),
            None => {
                heads.push(cur);
                groups.push(vec![name.clone()]);
            }
        }
    }
    groups
}

/// Prepares the spec's model and runs it.
pub fn run_spec(net: &PerUnitNetwork, spec: &ScenarioSpec) -> Result<RunResult, ScenarioError> {
    let model = spec.prepare_model(net)?;
    run(net, spec, &model)
}

/// Runs every spec, one per worker thread.
#[cfg(feature = "parallel")]
pub fn run_batch(
    net: &PerUnitNetwork,
    specs: &[ScenarioSpec],
) -> Vec<Result<RunResult, ScenarioError>> {
    use rayon::prelude::*;
    specs.par_iter().map(|s| run_spec(net, s)).collect()
}

/// Runs every spec.
#[cfg(not(feature = "parallel"))]
pub fn run_batch(
    net: &PerUnitNetwork,
    specs: &[ScenarioSpec],
) -> Vec<Result<RunResult, ScenarioError>> {
    run_batch_serial(net, specs)
}

/// Single-threaded batch; the results match [`run_batch`] exactly.
pub fn run_batch_serial(
    net: &PerUnitNetwork,
    specs: &[ScenarioSpec],
) -> Vec<Result<RunResult, ScenarioError>> {
    specs.iter().map(|s| run_spec(net, s)).collect()
}

/// Closes the loop: measure, control step, tap supervision, plant step,
/// one trace record per sample. A plant failure or
/// [`DEGRADED_ABORT_SAMPLES`] consecutive solver failures stop the run
/// early with the partial trace kept.
pub fn run(
    net: &PerUnitNetwork,
    spec: &ScenarioSpec,
    model: &ImpulseResponseModel,
) -> Result<RunResult, ScenarioError> {
    if model.t_sample_s != spec.t_sample_s {
        return Err(invalid(format!(
            "model sampled at {} s, scenario at {} s",
            model.t_sample_s, spec.t_sample_s
        )));
    }
    if model.nu() != net.gen_bus.len() {
        return Err(invalid(format!(
            "model has {} inputs, network {} generators",
            model.nu(),
            net.gen_bus.len()
        )));
    }
    let out_bus: Vec<usize> = model
        .registry
        .outputs
        .iter()
        .map(|n| {
            net.bus_index(n)
                .ok_or_else(|| invalid(format!("model output {n:?} is not a network bus")))
        })
        .collect::<Result<_, _>>()?;
    let dist: Vec<(usize, bool)> = model
        .registry
        .disturbances
        .iter()
        .map(|name| {
            let (gen, part) = name
                .rsplit_once('.')
                .ok_or_else(|| invalid(format!("disturbance {name:?} is not <generator>.<P|Q>")))?;
            let gi = net
                .gen_ids
                .iter()
                .position(|id| id == gen)
                .ok_or_else(|| invalid(format!("disturbance {name:?} names no generator")))?;
            match part {
                "P" => Ok((gi, false)),
                "Q" => Ok((gi, true)),
                _ => Err(invalid(format!("disturbance {name:?} is not <generator>.<P|Q>"))),
            }
        })
        .collect::<Result<_, _>>()?;

    let mut controller = MpcController::new(model.clone(), &spec.controller)?;
    let schedule = EventSchedule::new(net, spec.events.clone())?;
    let mut sim = SimState::with_events(net, spec.plant_config(), schedule);
    let mut supervisor = OltcSupervisor::from_dwell_time(spec.dwell_time_s, spec.t_sample_s);

    let mut notes = Vec::new();
    if model.operating_point != spec.op.label() {
        notes.push(format!(
            "model identified at {}, plant running at {}",
            model.operating_point,
            spec.op.label()
        ));
    }

    let mut meas = sim.measure()?;
    if spec.references == ReferenceMode::Initial {
        let y0: Vec<f64> = out_bus.iter().map(|&b| meas.solution.magnitude(b)).collect();
        controller.set_references(&y0)?;
    }

    let steps = spec.steps();
    let mut trace: Vec<TraceRecord> = Vec::with_capacity(steps);
    let mut aborted = None;
    let mut consecutive_degraded = 0usize;
    for _ in 0..steps {
        let y: Vec<f64> = out_bus.iter().map(|&b| meas.solution.magnitude(b)).collect();
        let d: Vec<f64> = dist
            .iter()
            .map(|&(gi, is_q)| if is_q { meas.gen_q[gi] } else { meas.gen_p[gi] })
            .collect();
        let out = match controller.control_step(&y, &d) {
            Ok(out) => out,
            Err(e) => {
                aborted = Some(format!("controller failed at t = {} s: {e}", meas.time_s));
                break;
            }
        };
        if out.degraded {
            consecutive_degraded += 1;
            if consecutive_degraded == 1 {
                notes.push(format!("solver degraded at t = {} s, input held", meas.time_s));
            }
            if consecutive_degraded >= DEGRADED_ABORT_SAMPLES {
                aborted = Some(format!(
                    "solver degraded for {consecutive_degraded} consecutive samples at t = {} s",
                    meas.time_s
                ));
                break;
            }
        } else {
            consecutive_degraded = 0;
        }
        let tap_cmd = if spec.oltc {
            supervisor.supervise(out.slack_lower, out.slack_upper)
        } else {
            0
        };
        let mut step = match sim.step(&out.pf_refs, tap_cmd) {
            Ok(step) => step,
            Err(e) => {
                aborted = Some(format!("plant failed: {e}"));
                break;
            }
        };
        trace.push(TraceRecord {
            time_s: meas.time_s,
            v: y,
            pf: out.pf_refs,
            slack_lower: out.slack_lower,
            slack_upper: out.slack_upper,
            tap: step.tap_position,
            events: std::mem::take(&mut step.fired),
        });
        meas = step;
    }

    let summary = summarize(
        spec,
        &model.registry.outputs,
        &trace,
        controller.degraded_samples(),
        aborted,
        notes,
    );
    Ok(RunResult {
        outputs: model.registry.outputs.clone(),
        inputs: model.registry.inputs.clone(),
        feeders: feeder_groups(net, &model.registry.outputs, &out_bus),
        trace,
        summary,
    })
}

fn summarize(
    spec: &ScenarioSpec,
    outputs: &[String],
    trace: &[TraceRecord],
    degraded_samples: usize,
    aborted: Option<String>,
    notes: Vec<String>,
) -> RunSummary {
    let (lo, hi) = (spec.controller.v_min, spec.controller.v_max);
    let nodes = outputs
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut s = NodeSummary {
                name: name.clone(),
                v_min: f64::INFINITY,
                v_max: f64::NEG_INFINITY,
                time_below_s: 0.0,
                time_above_s: 0.0,
            };
            for rec in trace {
                let v = rec.v[j];
                s.v_min = s.v_min.min(v);
                s.v_max = s.v_max.max(v);
                if v < lo {
                    s.time_below_s += spec.t_sample_s;
                } else if v > hi {
                    s.time_above_s += spec.t_sample_s;
                }
            }
            if trace.is_empty() {
                s.v_min = f64::NAN;
                s.v_max = f64::NAN;
            }
            s
        })
        .collect();
    let mut tap_changes = 0;
    let mut prev_tap = spec.initial_tap;
    for rec in trace {
        if rec.tap != prev_tap {
            tap_changes += 1;
            prev_tap = rec.tap;
        }
    }
    RunSummary {
        name: spec.name.clone(),
        operating_point: spec.op,
        steps: trace.len(),
        duration_s: trace.len() as f64 * spec.t_sample_s,
        v_min_band: lo,
        v_max_band: hi,
        nodes,
        tap_changes,
        max_slack_lower: trace.iter().map(|r| r.slack_lower).fold(0.0, f64::max),
        max_slack_upper: trace.iter().map(|r| r.slack_upper).fold(0.0, f64::max),
        degraded_samples,
        aborted,
        notes,
    }
}

/// Renders a trace as CSV: one header row, then per-sample rows with
/// full-precision numbers, so the parsed file reproduces the run exactly.
pub fn trace_to_csv(outputs: &[String], inputs: &[String], trace: &[TraceRecord]) -> String {
    let f = textfmt::fmt_f64;
    let mut out = String::from("time_s");
    for name in outputs {
        out.push_str(",v_");
        out.push_str(name);
    }
    for name in inputs {
        out.push(',');
        out.push_str(name);
    }
    out.push_str(",eps_lower,eps_upper,tap,events\n");
    for rec in trace {
        out.push_str(&f(rec.time_s));
        for &v in &rec.v {
            out.push(',');
            out.push_str(&f(v));
        }
        for &pf in &rec.pf {
            out.push(',');
            out.push_str(&f(pf));
        }
        out.push_str(&format!(
            ",{},{},{},{}\n",
            f(rec.slack_lower),
            f(rec.slack_upper),
            rec.tap,
            rec.events.join(";")
        ));
    }
    out
}

/// A trace read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrace {
    pub outputs: Vec<String>,
    pub inputs: Vec<String>,
    pub records: Vec<TraceRecord>,
}

pub fn trace_from_csv(text: &str) -> Result<ParsedTrace, ScenarioError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| invalid("empty trace file"))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.first() != Some(&"time_s") || columns.last() != Some(&"events") {
        return Err(invalid("trace header must run time_s .. events"));
    }
    let outputs: Vec<String> = columns[1..]
        .iter()
        .take_while(|c| c.starts_with("v_"))
        .map(|c| c[2..].to_string())
        .collect();
    let fixed_tail = ["eps_lower", "eps_upper", "tap", "events"];
    if columns.len() < 1 + outputs.len() + fixed_tail.len() {
        return Err(invalid("trace header too short"));
    }
    let tail_at = columns.len() - fixed_tail.len();
    if columns[tail_at..] != fixed_tail {
        return Err(invalid("trace header must end eps_lower,eps_upper,tap,events"));
    }
    let inputs: Vec<String> = columns[1 + outputs.len()..tail_at]
        .iter()
        .map(|c| c.to_string())
        .collect();

    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(invalid(format!(
                "csv row {row}: {} fields, header has {}",
                fields.len(),
                columns.len()
            )));
        }
        let num = |s: &str, what: &str| -> Result<f64, ScenarioError> {
            s.parse()
                .map_err(|_| invalid(format!("csv row {row}: bad {what} value {s:?}")))
        };
        let ny = outputs.len();
        let nu = inputs.len();
        records.push(TraceRecord {
            time_s: num(fields[0], "time")?,
            v: fields[1..1 + ny]
                .iter()
                .map(|s| num(s, "voltage"))
                .collect::<Result<_, _>>()?,
            pf: fields[1 + ny..1 + ny + nu]
                .iter()
                .map(|s| num(s, "power factor"))
                .collect::<Result<_, _>>()?,
            slack_lower: num(fields[tail_at], "slack")?,
            slack_upper: num(fields[tail_at + 1], "slack")?,
            tap: fields[tail_at + 2]
                .parse()
                .map_err(|_| invalid(format!("csv row {row}: bad tap value")))?,
            events: if fields[tail_at + 3].is_empty() {
                Vec::new()
            } else {
                fields[tail_at + 3].split(';').map(str::to_string).collect()
            },
        });
    }
    Ok(ParsedTrace {
        outputs,
        inputs,
        records,
    })
}

/// Emits a self-contained Python script that renders the run: one voltage
/// panel per feeder with the band limits drawn in, plus power-factor and
/// slack/tap panels. The script reads the CSV next to it (or a path given
/// as its first argument) and writes a PNG alongside.
pub fn plot_script(result: &RunResult, csv_name: &str) -> String {
    let py_list = |names: &[String], prefix: &str| {
        let quoted: Vec<String> = names.iter().map(|n| format!("\"{prefix}{n}\"")).collect();
        format!("[{}]", quoted.join(", "))
    };
    let feeders: Vec<String> = result
        .feeders
        .iter()
        .map(|group| py_list(group, "v_"))
        .collect();
    let mut s = String::new();
    s.push_str("#!/usr/bin/env python3\n");
    s.push_str(&format!(
        "\"\"\"Renders the {} run: feeder voltages with band limits, power factors, slacks and tap.\"\"\"\n",
        result.summary.name
    ));
    s.push_str("import csv\nimport sys\nfrom pathlib import Path\n\n");
    s.push_str("import matplotlib\n\nmatplotlib.use(\"Agg\")\nimport matplotlib.pyplot as plt\n\n");
    s.push_str(&format!("CSV_NAME = \"{csv_name}\"\n"));
    s.push_str(&format!(
        "V_MIN = {}\nV_MAX = {}\n",
        textfmt::fmt_f64(result.summary.v_min_band),
        textfmt::fmt_f64(result.summary.v_max_band)
    ));
    s.push_str(&format!("FEEDERS = [{}]\n", feeders.join(", ")));
    s.push_str(&format!(
        "PF_COLUMNS = {}\n\n",
        py_list(&result.inputs, "")
    ));
    s.push_str(
        r#"path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent / CSV_NAME
with open(path, newline="") as fh:
    rows = list(csv.DictReader(fh))
t = [float(r["time_s"]) for r in rows]
event_times = [float(r["time_s"]) for r in rows if r["events"]]

n_panels = len(FEEDERS) + 2
fig, axes = plt.subplots(n_panels, 1, figsize=(9.0, 2.8 * n_panels), sharex=True)
for i, columns in enumerate(FEEDERS):
    ax = axes[i]
    for c in columns:
        ax.plot(t, [float(r[c]) for r in rows], label=c[2:])
    ax.axhline(V_MIN, color="black", linestyle="--", linewidth=0.8)
    ax.axhline(V_MAX, color="black", linestyle="--", linewidth=0.8)
    for et in event_times:
        ax.axvline(et, color="gray", linewidth=0.5, alpha=0.6)
    ax.set_ylabel("voltage (p.u.)")
    ax.set_title("feeder %d" % (i + 1))
    ax.legend(ncol=4, fontsize=7)
ax = axes[len(FEEDERS)]
for c in PF_COLUMNS:
    ax.plot(t, [float(r[c]) for r in rows], label=c.split(".")[0], drawstyle="steps-post")
ax.set_ylabel("power factor")
ax.legend(ncol=4, fontsize=7)
ax = axes[-1]
ax.plot(t, [float(r["eps_lower"]) for r in rows], label="lower slack")
ax.plot(t, [float(r["eps_upper"]) for r in rows], label="upper slack")
ax.set_ylabel("slack (p.u.)")
ax.legend(loc="upper left", fontsize=7)
tap_ax = ax.twinx()
tap_ax.step(t, [int(r["tap"]) for r in rows], where="post", color="tab:red")
tap_ax.set_ylabel("tap position")
axes[-1].set_xlabel("time (s)")
fig.tight_layout()
out = path.with_suffix(".png")
fig.savefig(out, dpi=150)
print(out)
"#,
    );
    s
}

/// Writes `<name>.csv`, `<name>.summary.txt` and `<name>.plot.py` into
/// `dir`, creating it if needed. Returns the paths written.
pub fn write_outputs(result: &RunResult, dir: &Path) -> Result<Vec<PathBuf>, ScenarioError> {
    std::fs::create_dir_all(dir)?;
    let name = &result.summary.name;
    let csv_name = format!("{name}.csv");
    let paths = vec![
        dir.join(&csv_name),
        dir.join(format!("{name}.summary.txt")),
        dir.join(format!("{name}.plot.py")),
    ];
    std::fs::write(&paths[0], result.to_csv())?;
    std::fs::write(&paths[1], result.summary.to_text())?;
    std::fs::write(&paths[2], plot_script(result, &csv_name))?;
    Ok(paths)
}
