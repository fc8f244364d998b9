//! Impulse-response identification by pulse experiments.
//!
//! The controller's internal model is a truncated impulse response: M
//! coefficient matrices `g_i` (outputs x inputs) and `gamma_i` (outputs x
//! disturbances) at a fixed sample time. Each column is measured directly:
//! settle the plant at the operating point, deflect one channel by a small
//! amplitude for exactly one sample, and record the output deviations for
//! the next M samples. Channels are independent, so the experiments can run
//! in parallel on separate simulator instances; `identify_serial` always
//! produces bit-identical results on one thread.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::grid::PerUnitNetwork;
use crate::plant::{PlantConfig, PlantError, SimState};
use crate::textfmt::{self, Doc, ParseError};

/// Default number of impulse-response samples kept per channel. At the
/// 2 s sample time this covers three minutes, past the slowest AVR tail.
pub const DEFAULT_MODEL_MEMORY: usize = 90;
/// Default one-sample deflection of a power-factor reference. Negative:
/// references sit at unity, so the only admissible deviation is downward.
pub const DEFAULT_INPUT_AMPLITUDE: f64 = -0.02;
/// Default one-sample deflection of a disturbance power channel, per unit.
pub const DEFAULT_DISTURBANCE_AMPLITUDE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SysIdError {
    #[error("pulse amplitude for channel {0} must be nonzero")]
    ZeroAmplitude(String),
    #[error("channel {channel}: {source}")]
    ChannelFailed {
        channel: String,
        #[source]
        source: PlantError,
    },
    #[error("channel {channel}: amplitude {amplitude} pushes the reference out of range")]
    BadAmplitude { channel: String, amplitude: f64 },
    #[error("{0}")]
    Plant(#[from] PlantError),
    #[error("model file: {0}")]
    Format(#[from] ParseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    BadModel(String),
}

/// Named signal sets of an identified model, with the operating values the
/// deviation coordinates are measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRegistry {
    pub outputs: Vec<String>,
    /// Output values at the operating point the deviations refer to.
    pub y_nominal: Vec<f64>,
    pub inputs: Vec<String>,
    pub u_op: Vec<f64>,
    pub disturbances: Vec<String>,
    pub d_op: Vec<f64>,
}

impl ChannelRegistry {
    pub fn validate(&self) -> Result<(), SysIdError> {
        let check = |names: &[String], vals: &[f64], what: &str| {
            if names.len() != vals.len() {
                return Err(SysIdError::BadModel(format!(
                    "{what}: {} names but {} operating values",
                    names.len(),
                    vals.len()
                )));
            }
            let mut seen = std::collections::BTreeSet::new();
            for n in names {
                if !seen.insert(n) {
                    return Err(SysIdError::BadModel(format!("duplicate {what} channel {n}")));
                }
            }
            Ok(())
        };
        check(&self.outputs, &self.y_nominal, "output")?;
        check(&self.inputs, &self.u_op, "input")?;
        check(&self.disturbances, &self.d_op, "disturbance")
    }
}

/// Truncated impulse-response model in deviation coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponseModel {
    pub t_sample_s: f64,
    /// Truncation length: `g` and `gamma` each hold this many matrices.
    pub m: usize,
    pub operating_point: String,
    pub registry: ChannelRegistry,
    /// `g[i-1]` maps the input deviation applied i samples ago to today's
    /// output deviation.
    pub g: Vec<DMatrix<f64>>,
    pub gamma: Vec<DMatrix<f64>>,
}

impl ImpulseResponseModel {
    pub fn ny(&self) -> usize {
        self.registry.outputs.len()
    }

    pub fn nu(&self) -> usize {
        self.registry.inputs.len()
    }

    pub fn nd(&self) -> usize {
        self.registry.disturbances.len()
    }

    /// Largest entry of the last input coefficient matrix relative to the
    /// largest entry overall; small means the response is exhausted within
    /// the truncation window.
    pub fn exhaustion_ratio(&self) -> f64 {
        let max_abs = |m: &DMatrix<f64>| m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
        let peak = self.g.iter().map(max_abs).fold(0.0_f64, f64::max);
        if peak == 0.0 {
            return 0.0;
        }
        max_abs(&self.g[self.m - 1]) / peak
    }

    /// Output deviations produced by input/disturbance deviation sequences.
    /// `u[k]`/`d[k]` are the deviations applied at sample k; the result has
    /// `steps` rows and row k depends on samples strictly before k.
    pub fn simulate(&self, u: &[Vec<f64>], d: &[Vec<f64>], steps: usize) -> Vec<Vec<f64>> {
        let ny = self.ny();
        let mut y = vec![vec![0.0; ny]; steps];
        for (k, yk) in y.iter_mut().enumerate() {
            for i in 1..=self.m.min(k) {
                let gi = &self.g[i - 1];
                if let Some(uk) = u.get(k - i) {
                    for (r, yr) in yk.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (c, uv) in uk.iter().enumerate() {
                            acc += gi[(r, c)] * uv;
                        }
                        *yr += acc;
                    }
                }
                let gm = &self.gamma[i - 1];
                if let Some(dk) = d.get(k - i) {
                    for (r, yr) in yk.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (c, dv) in dk.iter().enumerate() {
                            acc += gm[(r, c)] * dv;
                        }
                        *yr += acc;
                    }
                }
            }
        }
        y
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# truncated impulse-response model\n");
        out.push_str("# deviations around the listed operating values\n");
        out.push_str("[model]\n");
        out.push_str(&format!("t_sample_s = {}\n", textfmt::fmt_f64(self.t_sample_s)));
        out.push_str(&format!("m = {}\n", self.m));
        out.push_str(&format!("operating_point = {}\n", self.operating_point));
        out.push_str("\n[outputs]\n# name nominal\n");
        for (n, v) in self.registry.outputs.iter().zip(&self.registry.y_nominal) {
            out.push_str(&format!("{n} {}\n", textfmt::fmt_f64(*v)));
        }
        out.push_str("\n[inputs]\n# name operating_value\n");
        for (n, v) in self.registry.inputs.iter().zip(&self.registry.u_op) {
            out.push_str(&format!("{n} {}\n", textfmt::fmt_f64(*v)));
        }
        out.push_str("\n[disturbances]\n# name operating_value\n");
        for (n, v) in self.registry.disturbances.iter().zip(&self.registry.d_op) {
            out.push_str(&format!("{n} {}\n", textfmt::fmt_f64(*v)));
        }
        out.push_str("\n[g]\n# step output coefficients_per_input\n");
        for (i, m) in self.g.iter().enumerate() {
            for (r, name) in self.registry.outputs.iter().enumerate() {
                out.push_str(&format!("{} {name}", i + 1));
                for c in 0..self.nu() {
                    out.push(' ');
                    out.push_str(&textfmt::fmt_f64(m[(r, c)]));
                }
                out.push('\n');
            }
        }
        out.push_str("\n[gamma]\n# step output coefficients_per_disturbance\n");
        for (i, m) in self.gamma.iter().enumerate() {
            for (r, name) in self.registry.outputs.iter().enumerate() {
                out.push_str(&format!("{} {name}", i + 1));
                for c in 0..self.nd() {
                    out.push(' ');
                    out.push_str(&textfmt::fmt_f64(m[(r, c)]));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<ImpulseResponseModel, SysIdError> {
        let doc = Doc::parse(text)?;
        let model = doc.require("model")?;
        let kv = model.as_map()?;
        let need = |k: &str| -> Result<&(String, usize), SysIdError> {
            kv.get(k)
                .ok_or_else(|| SysIdError::BadModel(format!("[model] missing {k}")))
        };
        let (v, line) = need("t_sample_s")?;
        let t_sample_s = textfmt::parse_f64(v, *line, "t_sample_s")?;
        let (v, _) = need("m")?;
        let m: usize = v
            .parse()
            .map_err(|e| SysIdError::BadModel(format!("m: {e}")))?;
        if m < 1 {
            return Err(SysIdError::BadModel("m must be >= 1".into()));
        }
        let operating_point = need("operating_point")?.0.clone();

        let names_vals = |section: &str| -> Result<(Vec<String>, Vec<f64>), SysIdError> {
            let sec = doc.require(section)?;
            let mut names = Vec::new();
            let mut vals = Vec::new();
            for row in &sec.rows {
                row.expect_len(2)?;
                names.push(row.fields[0].to_string());
                vals.push(row.field::<f64>(1, "operating value")?);
            }
            Ok((names, vals))
        };
        let (outputs, y_nominal) = names_vals("outputs")?;
        let (inputs, u_op) = names_vals("inputs")?;
        let (disturbances, d_op) = names_vals("disturbances")?;
        let registry = ChannelRegistry {
            outputs,
            y_nominal,
            inputs,
            u_op,
            disturbances,
            d_op,
        };
        registry.validate()?;
        let ny = registry.outputs.len();

        let read_block = |section: &str, ncols: usize| -> Result<Vec<DMatrix<f64>>, SysIdError> {
            let sec = doc.require(section)?;
            let mut mats = vec![DMatrix::zeros(ny, ncols); m];
            let mut seen = vec![false; m * ny];
            for row in &sec.rows {
                row.expect_len(2 + ncols)?;
                let step: usize = row.field(0, "step")?;
                if step < 1 || step > m {
                    return Err(SysIdError::BadModel(format!(
                        "[{section}] step {step} outside 1..={m}"
                    )));
                }
                let name = &row.fields[1];
                let r = registry
                    .outputs
                    .iter()
                    .position(|o| o == name)
                    .ok_or_else(|| {
                        SysIdError::BadModel(format!("[{section}] unknown output {name}"))
                    })?;
                let slot = (step - 1) * ny + r;
                if seen[slot] {
                    return Err(SysIdError::BadModel(format!(
                        "[{section}] duplicate row for step {step} output {name}"
                    )));
                }
                seen[slot] = true;
                for c in 0..ncols {
                    mats[step - 1][(r, c)] = row.field(2 + c, "coefficient")?;
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(SysIdError::BadModel(format!("[{section}] incomplete")));
            }
            Ok(mats)
        };
        let g = read_block("g", registry.inputs.len())?;
        let gamma = read_block("gamma", registry.disturbances.len())?;
        Ok(ImpulseResponseModel {
            t_sample_s,
            m,
            operating_point,
            registry,
            g,
            gamma,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SysIdError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &std::path::Path) -> Result<ImpulseResponseModel, SysIdError> {
        ImpulseResponseModel::from_text(&std::fs::read_to_string(path)?)
    }
}

/// A plant on which one-sample pulse experiments can be run. Every call
/// starts from the same settled operating point, so experiments on
/// different channels are independent and may run concurrently.
pub trait PulseExperiment: Sync {
    fn registry(&self) -> ChannelRegistry;
    fn t_sample_s(&self) -> f64;
    fn operating_point(&self) -> String;
    /// Output deviations over `steps` samples after a one-sample deflection
    /// of input `channel` by `amplitude`. Row i-1 is the deviation i samples
    /// after the pulse.
    fn input_pulse(
        &self,
        channel: usize,
        amplitude: f64,
        steps: usize,
    ) -> Result<Vec<Vec<f64>>, SysIdError>;
    /// Same for a disturbance channel.
    fn disturbance_pulse(
        &self,
        channel: usize,
        amplitude: f64,
        steps: usize,
    ) -> Result<Vec<Vec<f64>>, SysIdError>;
}

/// Pulse sizes per channel.
#[derive(Debug, Clone)]
pub struct Amplitudes {
    pub input: Vec<f64>,
    pub disturbance: Vec<f64>,
}

impl Amplitudes {
    pub fn uniform(nu: usize, nd: usize) -> Amplitudes {
        Amplitudes {
            input: vec![DEFAULT_INPUT_AMPLITUDE; nu],
            disturbance: vec![DEFAULT_DISTURBANCE_AMPLITUDE; nd],
        }
    }
}

enum Channel {
    Input(usize),
    Disturbance(usize),
}

fn run_channel(
    exp: &dyn PulseExperiment,
    registry: &ChannelRegistry,
    which: &Channel,
    amplitudes: &Amplitudes,
    m: usize,
) -> Result<Vec<Vec<f64>>, SysIdError> {
    let (name, a, resp) = match *which {
        Channel::Input(j) => {
            let a = amplitudes.input[j];
            (&registry.inputs[j], a, exp.input_pulse(j, a, m))
        }
        Channel::Disturbance(j) => {
            let a = amplitudes.disturbance[j];
            (&registry.disturbances[j], a, exp.disturbance_pulse(j, a, m))
        }
    };
    if a == 0.0 {
        return Err(SysIdError::ZeroAmplitude(name.clone()));
    }
    let resp = resp?;
    Ok(resp
        .into_iter()
        .map(|row| row.into_iter().map(|dy| dy / a).collect())
        .collect())
}

fn assemble(
    exp: &dyn PulseExperiment,
    m: usize,
    columns: Vec<Vec<Vec<f64>>>,
) -> ImpulseResponseModel {
    let registry = exp.registry();
    let ny = registry.outputs.len();
    let nu = registry.inputs.len();
    let nd = registry.disturbances.len();
    let mut g = vec![DMatrix::zeros(ny, nu); m];
    let mut gamma = vec![DMatrix::zeros(ny, nd); m];
    for (c, col) in columns.iter().enumerate() {
        for i in 0..m {
            for r in 0..ny {
                if c < nu {
                    g[i][(r, c)] = col[i][r];
                } else {
                    gamma[i][(r, c - nu)] = col[i][r];
                }
            }
        }
    }
    ImpulseResponseModel {
        t_sample_s: exp.t_sample_s(),
        m,
        operating_point: exp.operating_point(),
        registry,
        g,
        gamma,
    }
}

fn channel_list(nu: usize, nd: usize) -> Vec<Channel> {
    (0..nu)
        .map(Channel::Input)
        .chain((0..nd).map(Channel::Disturbance))
        .collect()
}

/// Runs every channel experiment and assembles the model, one experiment
/// per worker thread when the `parallel` feature is active.
#[cfg(feature = "parallel")]
pub fn identify(
    exp: &dyn PulseExperiment,
    amplitudes: &Amplitudes,
    m: usize,
) -> Result<ImpulseResponseModel, SysIdError> {
    use rayon::prelude::*;
    let registry = exp.registry();
    registry.validate()?;
    check_sizes(&registry, amplitudes)?;
    let channels = channel_list(registry.inputs.len(), registry.disturbances.len());
    let columns: Result<Vec<_>, SysIdError> = channels
        .par_iter()
        .map(|ch| run_channel(exp, &registry, ch, amplitudes, m))
        .collect();
    Ok(assemble(exp, m, columns?))
}

/// Runs every channel experiment and assembles the model.
#[cfg(not(feature = "parallel"))]
pub fn identify(
    exp: &dyn PulseExperiment,
    amplitudes: &Amplitudes,
    m: usize,
) -> Result<ImpulseResponseModel, SysIdError> {
    identify_serial(exp, amplitudes, m)
}

/// Single-threaded identification; bit-identical to [`identify`].
pub fn identify_serial(
    exp: &dyn PulseExperiment,
    amplitudes: &Amplitudes,
    m: usize,
) -> Result<ImpulseResponseModel, SysIdError> {
    let registry = exp.registry();
    registry.validate()?;
    check_sizes(&registry, amplitudes)?;
    let channels = channel_list(registry.inputs.len(), registry.disturbances.len());
    let columns: Result<Vec<_>, SysIdError> = channels
        .iter()
        .map(|ch| run_channel(exp, &registry, ch, amplitudes, m))
        .collect();
    Ok(assemble(exp, m, columns?))
}

fn check_sizes(registry: &ChannelRegistry, amplitudes: &Amplitudes) -> Result<(), SysIdError> {
    if amplitudes.input.len() != registry.inputs.len()
        || amplitudes.disturbance.len() != registry.disturbances.len()
    {
        return Err(SysIdError::BadModel(format!(
            "amplitudes sized {}x{}, registry {}x{}",
            amplitudes.input.len(),
            amplitudes.disturbance.len(),
            registry.inputs.len(),
            registry.disturbances.len()
        )));
    }
    Ok(())
}

/// One row of a linearity check: the same channel pulsed at two sizes, and
/// the largest relative disagreement between the scaled responses.
#[derive(Debug, Clone)]
pub struct LinearityRow {
    pub channel: String,
    pub amplitude_a: f64,
    pub amplitude_b: f64,
    /// max over samples/outputs of |ra/a - rb/b|, relative to the peak of
    /// |ra/a|. Zero for a perfectly linear plant.
    pub max_relative_deviation: f64,
}

/// Pulses every input channel at two amplitudes and reports how far the
/// plant is from linear at this operating point. Report only; large values
/// mean the identified model extrapolates poorly.
pub fn validate_linearity(
    exp: &dyn PulseExperiment,
    pairs: &[(f64, f64)],
    steps: usize,
) -> Result<Vec<LinearityRow>, SysIdError> {
    let registry = exp.registry();
    let mut rows = Vec::new();
    for (j, name) in registry.inputs.iter().enumerate() {
        for &(a, b) in pairs {
            if a == 0.0 || b == 0.0 {
                return Err(SysIdError::ZeroAmplitude(name.clone()));
            }
            let ra = exp.input_pulse(j, a, steps)?;
            let rb = exp.input_pulse(j, b, steps)?;
            let mut peak = 0.0_f64;
            let mut dev = 0.0_f64;
            for (rowa, rowb) in ra.iter().zip(&rb) {
                for (&va, &vb) in rowa.iter().zip(rowb) {
                    peak = peak.max((va / a).abs());
                    dev = dev.max((va / a - vb / b).abs());
                }
            }
            rows.push(LinearityRow {
                channel: name.clone(),
                amplitude_a: a,
                amplitude_b: b,
                max_relative_deviation: if peak > 0.0 { dev / peak } else { 0.0 },
            });
        }
    }
    Ok(rows)
}

/// Pulse experiments on the benchmark network: inputs are the generator
/// power-factor references, disturbances the active and reactive powers of
/// a designated generator subset, outputs the controlled node voltages.
pub struct GridExperiment {
    baseline: SimState,
    y0: Vec<f64>,
    controlled: Vec<usize>,
    controlled_names: Vec<String>,
    /// Generator indices whose P and Q act as measured disturbances.
    dist_gens: Vec<usize>,
    pf_op: Vec<f64>,
}

impl GridExperiment {
    /// Settles the plant at the configured operating point and freezes that
    /// state as the baseline every pulse starts from.
    pub fn new(
        net: &PerUnitNetwork,
        config: PlantConfig,
        controlled_nodes: &[&str],
        disturbance_generators: &[&str],
    ) -> Result<GridExperiment, SysIdError> {
        let controlled: Vec<usize> = controlled_nodes
            .iter()
            .map(|n| {
                net.bus_index(n)
                    .ok_or_else(|| SysIdError::BadModel(format!("unknown controlled node {n}")))
            })
            .collect::<Result<_, _>>()?;
        let dist_gens: Vec<usize> = disturbance_generators
            .iter()
            .map(|g| {
                net.gen_ids
                    .iter()
                    .position(|id| id == g)
                    .ok_or_else(|| SysIdError::BadModel(format!("unknown generator {g}")))
            })
            .collect::<Result<_, _>>()?;
        let mut baseline = SimState::new(net, config);
        let pf_op = vec![1.0; baseline.n_gens()];
        let settled = baseline.run_to_steady_state(&pf_op)?;
        let y0 = controlled
            .iter()
            .map(|&b| settled.solution.magnitude(b))
            .collect();
        Ok(GridExperiment {
            baseline,
            y0,
            controlled,
            controlled_names: controlled_nodes.iter().map(|s| s.to_string()).collect(),
            dist_gens,
            pf_op,
        })
    }

    fn deviations(&self, out: &crate::plant::StepOutput) -> Vec<f64> {
        self.controlled
            .iter()
            .zip(&self.y0)
            .map(|(&b, &y0)| out.solution.magnitude(b) - y0)
            .collect()
    }
}

impl PulseExperiment for GridExperiment {
    fn registry(&self) -> ChannelRegistry {
        let net = self.baseline.network();
        let mut disturbances = Vec::new();
        let mut d_op = Vec::new();
        for &gi in &self.dist_gens {
            disturbances.push(format!("{}.P", net.gen_ids[gi]));
            d_op.push(self.baseline.gen_p()[gi]);
        }
        for &gi in &self.dist_gens {
            disturbances.push(format!("{}.Q", net.gen_ids[gi]));
            d_op.push(self.baseline.avr.q[gi]);
        }
        ChannelRegistry {
            outputs: self.controlled_names.clone(),
            y_nominal: vec![1.0; self.controlled_names.len()],
            inputs: net.gen_ids.iter().map(|g| format!("{g}.pf")).collect(),
            u_op: self.pf_op.clone(),
            disturbances,
            d_op,
        }
    }

    fn t_sample_s(&self) -> f64 {
        self.baseline.config.t_sample_s
    }

    fn operating_point(&self) -> String {
        self.baseline.config.op.label().to_string()
    }

    fn input_pulse(
        &self,
        channel: usize,
        amplitude: f64,
        steps: usize,
    ) -> Result<Vec<Vec<f64>>, SysIdError> {
        let name = format!("{}.pf", self.baseline.network().gen_ids[channel]);
        let pulsed = self.pf_op[channel] + amplitude;
        if !(pulsed > 0.0 && pulsed <= 1.0) {
            return Err(SysIdError::BadAmplitude {
                channel: name,
                amplitude,
            });
        }
        let mut sim = self.baseline.clone();
        let mut pf = self.pf_op.clone();
        pf[channel] = pulsed;
        let mut rows = Vec::with_capacity(steps);
        let wrap = |source: PlantError| SysIdError::ChannelFailed {
            channel: name.clone(),
            source,
        };
        let out = sim.step(&pf, 0).map_err(wrap)?;
        rows.push(self.deviations(&out));
        pf[channel] = self.pf_op[channel];
        for _ in 1..steps {
            let out = sim.step(&pf, 0).map_err(|source| SysIdError::ChannelFailed {
                channel: name.clone(),
                source,
            })?;
            rows.push(self.deviations(&out));
        }
        Ok(rows)
    }

    fn disturbance_pulse(
        &self,
        channel: usize,
        amplitude: f64,
        steps: usize,
    ) -> Result<Vec<Vec<f64>>, SysIdError> {
        let ng = self.dist_gens.len();
        let (gi, s) = if channel < ng {
            (self.dist_gens[channel], Complex64::new(amplitude, 0.0))
        } else {
            (self.dist_gens[channel - ng], Complex64::new(0.0, amplitude))
        };
        let net = self.baseline.network();
        let name = format!(
            "{}.{}",
            net.gen_ids[gi],
            if channel < ng { "P" } else { "Q" }
        );
        let bus = net.gen_bus[gi];
        let mut sim = self.baseline.clone();
        sim.add_pulse(bus, s);
        let mut rows = Vec::with_capacity(steps);
        for _ in 0..steps {
            let out = sim.step(&self.pf_op, 0).map_err(|source| {
                SysIdError::ChannelFailed {
                    channel: name.clone(),
                    source,
                }
            })?;
            rows.push(self.deviations(&out));
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::NetworkModel;
    use crate::plant::PlantConfig;
    use crate::{BENCHMARK_NET, CONTROLLED_NODES, DISTURBANCE_GENERATORS};

    /// y(k) = a*y(k-1) + b*u(k-1) + c*d(k-1): impulse response b*a^(i-1)
    /// from the input, c*a^(i-1) from the disturbance.
    struct FirstOrderLab {
        a: f64,
        b: f64,
        c: f64,
    }

    impl FirstOrderLab {
        fn response(&self, gain: f64, amplitude: f64, steps: usize) -> Vec<Vec<f64>> {
            (0..steps)
                .map(|i| vec![gain * self.a.powi(i as i32) * amplitude])
                .collect()
        }
    }

    impl PulseExperiment for FirstOrderLab {
        fn registry(&self) -> ChannelRegistry {
            ChannelRegistry {
                outputs: vec!["y".into()],
                y_nominal: vec![0.0],
                inputs: vec!["u".into()],
                u_op: vec![0.0],
                disturbances: vec!["d".into()],
                d_op: vec![0.0],
            }
        }
        fn t_sample_s(&self) -> f64 {
            1.0
        }
        fn operating_point(&self) -> String {
            "test".into()
        }
        fn input_pulse(
            &self,
            _channel: usize,
            amplitude: f64,
            steps: usize,
        ) -> Result<Vec<Vec<f64>>, SysIdError> {
            Ok(self.response(self.b, amplitude, steps))
        }
        fn disturbance_pulse(
            &self,
            _channel: usize,
            amplitude: f64,
            steps: usize,
        ) -> Result<Vec<Vec<f64>>, SysIdError> {
            Ok(self.response(self.c, amplitude, steps))
        }
    }

    fn grid_experiment() -> GridExperiment {
        let net = NetworkModel::parse(BENCHMARK_NET)
            .unwrap()
            .to_per_unit()
            .unwrap();
        GridExperiment::new(
            &net,
            PlantConfig::default(),
            &CONTROLLED_NODES,
            &DISTURBANCE_GENERATORS,
        )
        .unwrap()
    }

    #[test]
    fn geometric_plant_recovered_exactly() {
        let lab = FirstOrderLab {
            a: 0.5,
            b: 1.0,
            c: 2.0,
        };
        let amps = Amplitudes {
            input: vec![1.0],
            disturbance: vec![1.0],
        };
        let model = identify_serial(&lab, &amps, 20).unwrap();
        for i in 1..=20 {
            assert!((model.g[i - 1][(0, 0)] - 0.5_f64.powi(i as i32 - 1)).abs() < 1e-15);
            assert!((model.gamma[i - 1][(0, 0)] - 2.0 * 0.5_f64.powi(i as i32 - 1)).abs() < 1e-15);
        }
    }

    #[test]
    fn parallel_and_serial_agree_bitwise() {
        let exp = grid_experiment();
        let amps = Amplitudes::uniform(8, 6);
        let par = identify(&exp, &amps, 12).unwrap();
        let ser = identify_serial(&exp, &amps, 12).unwrap();
        assert_eq!(par, ser);
    }

    #[test]
    fn zero_amplitude_is_an_error() {
        let lab = FirstOrderLab {
            a: 0.5,
            b: 1.0,
            c: 0.0,
        };
        let amps = Amplitudes {
            input: vec![0.0],
            disturbance: vec![1.0],
        };
        assert!(matches!(
            identify_serial(&lab, &amps, 5),
            Err(SysIdError::ZeroAmplitude(_))
        ));
    }

    #[test]
    fn slow_plant_reports_poor_exhaustion() {
        let lab = FirstOrderLab {
            a: 0.99,
            b: 1.0,
            c: 0.0,
        };
        let amps = Amplitudes {
            input: vec![1.0],
            disturbance: vec![1.0],
        };
        let model = identify_serial(&lab, &amps, 10).unwrap();
        assert!(model.exhaustion_ratio() > 0.9);
        let fast = FirstOrderLab {
            a: 0.3,
            b: 1.0,
            c: 0.0,
        };
        let model = identify_serial(&fast, &amps, 20).unwrap();
        assert!(model.exhaustion_ratio() < 1e-9);
    }

    #[test]
    fn recorded_pulse_reproduced_by_model() {
        // Power-of-two amplitude: dividing and re-multiplying is exact, so
        // the model replays the recorded deviations bit for bit.
        let exp = grid_experiment();
        let a = -0.03125;
        let recorded = exp.input_pulse(2, a, 10).unwrap();
        let amps = Amplitudes {
            input: vec![a; 8],
            disturbance: vec![0.0625; 6],
        };
        let model = identify_serial(&exp, &amps, 10).unwrap();
        let mut u = vec![vec![0.0; 8]];
        u[0][2] = a;
        let replay = model.simulate(&u, &[], 11);
        for i in 1..=10 {
            for r in 0..11 {
                assert_eq!(replay[i][r], recorded[i - 1][r]);
            }
        }
    }

    #[test]
    fn feeders_do_not_couple() {
        // DG1 (feeder 1) cannot move feeder-2 voltages and vice versa: the
        // substation busbar is the angle reference for both radial feeders.
        let exp = grid_experiment();
        let amps = Amplitudes::uniform(8, 6);
        let model = identify(&exp, &amps, 15).unwrap();
        let feeder2_outputs = 5..11; // N19 N21 N23 N27 N28 N32
        for i in 0..15 {
            for r in feeder2_outputs.clone() {
                assert!(model.g[i][(r, 0)].abs() < 1e-9, "DG1 moved a feeder-2 node");
                assert!(model.gamma[i][(r, 0)].abs() < 1e-9);
            }
            for r in 0..5 {
                // DG6 sits on feeder 2 (input column 5).
                assert!(model.g[i][(r, 5)].abs() < 1e-9, "DG6 moved a feeder-1 node");
            }
        }
    }

    #[test]
    fn pulse_signs_and_disturbance_memory() {
        let exp = grid_experiment();
        let amps = Amplitudes::uniform(8, 6);
        let model = identify(&exp, &amps, 10).unwrap();
        // Lowering a power factor absorbs reactive power and must depress
        // the generator's own node: deviation and amplitude share sign.
        let n06 = 1;
        assert!(model.g[0][(n06, 0)] > 0.0);
        // Extra active production raises the local voltage immediately.
        assert!(model.gamma[0][(n06, 0)] > 0.0);
        // Production acts through the network only; no memory after the
        // pulse sample.
        for i in 1..10 {
            for r in 0..11 {
                for c in 0..6 {
                    assert!(model.gamma[i][(r, c)].abs() < 1e-9);
                }
            }
        }
        // The power-factor path does have memory: the AVR lag spreads the
        // response over several samples.
        assert!(model.g[1][(n06, 0)].abs() > model.g[0][(n06, 0)].abs() * 0.1);
    }

    #[test]
    fn linearity_report() {
        let lab = FirstOrderLab {
            a: 0.5,
            b: 3.0,
            c: 0.0,
        };
        let rows = validate_linearity(&lab, &[(1.0, 2.0)], 10).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].max_relative_deviation, 0.0);

        let exp = grid_experiment();
        let rows = validate_linearity(&exp, &[(-0.01, -0.01), (-0.01, -0.02)], 10).unwrap();
        for row in &rows {
            if row.amplitude_a == row.amplitude_b {
                assert_eq!(row.max_relative_deviation, 0.0);
            } else {
                assert!(row.max_relative_deviation.is_finite());
            }
        }
    }

    #[test]
    fn model_file_round_trips_bit_exactly() {
        let exp = grid_experiment();
        let amps = Amplitudes::uniform(8, 6);
        let model = identify(&exp, &amps, 8).unwrap();
        let text = model.to_text();
        let back = ImpulseResponseModel::from_text(&text).unwrap();
        assert_eq!(model, back);
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn simulate_superposition() {
        let lab = FirstOrderLab {
            a: 0.6,
            b: 1.5,
            c: -0.7,
        };
        let amps = Amplitudes {
            input: vec![1.0],
            disturbance: vec![1.0],
        };
        let model = identify_serial(&lab, &amps, 25).unwrap();
        let u1 = vec![vec![1.0], vec![0.0], vec![0.5]];
        let u2 = vec![vec![0.0], vec![-2.0], vec![0.25]];
        let sum: Vec<Vec<f64>> = u1
            .iter()
            .zip(&u2)
            .map(|(a, b)| vec![a[0] + b[0]])
            .collect();
        let d = vec![vec![0.3], vec![0.0], vec![-1.0]];
        let y1 = model.simulate(&u1, &d, 20);
        let y2 = model.simulate(&u2, &[], 20);
        let ys = model.simulate(&sum, &d, 20);
        for k in 0..20 {
            assert!((y1[k][0] + y2[k][0] - ys[k][0]).abs() < 1e-10);
        }
    }
}
