//! Receding-horizon voltage controller.
//!
//! Each sample the controller estimates the model's output offset from the
//! newest measurement, predicts the horizon as `Y = G U + F`, and minimizes
//!
//! ```text
//!   (Y - Yref)' Qbar (Y - Yref) + U' Rbar U + mu1*eps1^2 + mu2*eps2^2
//! ```
//!
//! over the stacked moves U and two scalar slacks that soften the voltage
//! band. Hard constraints keep every commanded power factor inside its
//! physical interval; the band constraints `Ymin - eps1 <= Y <= Ymax + eps2`
//! are always satisfiable thanks to the slacks, so the program is feasible
//! by construction. Only the first move is applied, then the horizon rolls.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::predictor::{self, History, Prediction, PredictorError};
use crate::qp::{self, QpError, QpProblem};
use crate::sysid::{ChannelRegistry, ImpulseResponseModel};
use crate::textfmt::{self, Doc, ParseError};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("{0}")]
    BadConfig(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite measurement in {0}")]
    BadMeasurement(&'static str),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error("assembly produced an unsolvable program: {0}")]
    Assembly(#[from] QpError),
    #[error("controller config file: {0}")]
    Format(#[from] ParseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Controller settings. The defaults are the tuning used throughout the
/// bundled experiments: horizon 10, two free moves, uniform output weight
/// 10, move weight 0.1, slack penalties 1000, voltage band [0.9, 1.1] p.u.,
/// power-factor interval [0.6, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub move_horizon: usize,
    /// Output weight applied to every channel unless overridden.
    pub q_weight: f64,
    /// Per-output-name overrides of the Q diagonal.
    pub q_overrides: Vec<(String, f64)>,
    pub r_weight: f64,
    /// Penalty on the lower-band slack.
    pub mu_lower: f64,
    /// Penalty on the upper-band slack.
    pub mu_upper: f64,
    pub pf_min: f64,
    pub pf_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Per-output-name reference deviations from nominal (default zero).
    pub references: Vec<(String, f64)>,
}

impl Default for MpcConfig {
    fn default() -> MpcConfig {
        MpcConfig {
            horizon: 10,
            move_horizon: 2,
            q_weight: 10.0,
            q_overrides: Vec::new(),
            r_weight: 0.1,
            mu_lower: 1000.0,
            mu_upper: 1000.0,
            pf_min: 0.6,
            pf_max: 1.0,
            v_min: 0.9,
            v_max: 1.1,
            references: Vec::new(),
        }
    }
}

impl MpcConfig {
    pub fn to_text(&self) -> String {
        let f = textfmt::fmt_f64;
        let mut out = String::new();
        out.push_str("# receding-horizon controller settings\n[controller]\n");
        out.push_str(&format!("horizon = {}\n", self.horizon));
        out.push_str(&format!("move_horizon = {}\n", self.move_horizon));
        out.push_str(&format!("q_weight = {}\n", f(self.q_weight)));
        out.push_str(&format!("r_weight = {}\n", f(self.r_weight)));
        out.push_str(&format!("mu_lower = {}\n", f(self.mu_lower)));
        out.push_str(&format!("mu_upper = {}\n", f(self.mu_upper)));
        out.push_str(&format!("pf_min = {}\n", f(self.pf_min)));
        out.push_str(&format!("pf_max = {}\n", f(self.pf_max)));
        out.push_str(&format!("v_min = {}\n", f(self.v_min)));
        out.push_str(&format!("v_max = {}\n", f(self.v_max)));
        out.push_str("\n[q_overrides]\n# output_name weight\n");
        for (n, v) in &self.q_overrides {
            out.push_str(&format!("{n} {}\n", f(*v)));
        }
        out.push_str("\n[references]\n# output_name deviation_from_nominal\n");
        for (n, v) in &self.references {
            out.push_str(&format!("{n} {}\n", f(*v)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<MpcConfig, MpcError> {
        let doc = Doc::parse(text)?;
        doc.require("controller")?;
        MpcConfig::from_doc(&doc)
    }

    /// Reads controller settings out of an already-parsed document. A
    /// missing `[controller]` section means defaults, which lets a larger
    /// file embed the settings alongside its own sections.
    pub(crate) fn from_doc(doc: &Doc) -> Result<MpcConfig, MpcError> {
        let mut cfg = MpcConfig::default();
        if let Some(sec) = doc.section("controller") {
            let kv = sec.as_map()?;
            for (key, (value, line)) in &kv {
                let fv = || textfmt::parse_f64(value, *line, key);
                match key.as_str() {
                    "horizon" => {
                        cfg.horizon = value
                            .parse()
                            .map_err(|e| MpcError::BadConfig(format!("horizon: {e}")))?
                    }
                    "move_horizon" => {
                        cfg.move_horizon = value
                            .parse()
                            .map_err(|e| MpcError::BadConfig(format!("move_horizon: {e}")))?
                    }
                    "q_weight" => cfg.q_weight = fv()?,
                    "r_weight" => cfg.r_weight = fv()?,
                    "mu_lower" => cfg.mu_lower = fv()?,
                    "mu_upper" => cfg.mu_upper = fv()?,
                    "pf_min" => cfg.pf_min = fv()?,
                    "pf_max" => cfg.pf_max = fv()?,
                    "v_min" => cfg.v_min = fv()?,
                    "v_max" => cfg.v_max = fv()?,
                    other => {
                        return Err(MpcError::BadConfig(format!(
                            "unknown [controller] key {other}"
                        )))
                    }
                }
            }
        }
        if let Some(sec) = doc.section("q_overrides") {
            for row in &sec.rows {
                row.expect_len(2)?;
                cfg.q_overrides
                    .push((row.fields[0].clone(), row.field(1, "weight")?));
            }
        }
        if let Some(sec) = doc.section("references") {
            for row in &sec.rows {
                row.expect_len(2)?;
                cfg.references
                    .push((row.fields[0].clone(), row.field(1, "reference")?));
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), MpcError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &std::path::Path) -> Result<MpcConfig, MpcError> {
        MpcConfig::from_text(&std::fs::read_to_string(path)?)
    }

    /// Checks the settings against a model's channels and expands them to
    /// per-channel vectors in deviation coordinates.
    pub fn resolve(&self, registry: &ChannelRegistry) -> Result<ResolvedConfig, MpcError> {
        if !(self.move_horizon >= 1 && self.horizon >= self.move_horizon) {
            return Err(MpcError::BadConfig(format!(
                "need horizon >= move_horizon >= 1, got {} and {}",
                self.horizon, self.move_horizon
            )));
        }
        for (what, v) in [
            ("q_weight", self.q_weight),
            ("r_weight", self.r_weight),
            ("mu_lower", self.mu_lower),
            ("mu_upper", self.mu_upper),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(MpcError::BadConfig(format!("{what} must be positive, got {v}")));
            }
        }
        if !(self.pf_min < self.pf_max) {
            return Err(MpcError::BadConfig(format!(
                "pf interval [{}, {}] is empty",
                self.pf_min, self.pf_max
            )));
        }
        if !(self.v_min < self.v_max) {
            return Err(MpcError::BadConfig(format!(
                "voltage band [{}, {}] is empty",
                self.v_min, self.v_max
            )));
        }
        let ny = registry.outputs.len();
        let mut q = vec![self.q_weight; ny];
        for (name, w) in &self.q_overrides {
            let r = registry
                .outputs
                .iter()
                .position(|o| o == name)
                .ok_or_else(|| MpcError::BadConfig(format!("q override for unknown output {name}")))?;
            if !(*w > 0.0) {
                return Err(MpcError::BadConfig(format!(
                    "q override for {name} must be positive"
                )));
            }
            q[r] = *w;
        }
        let mut y_ref_dev = vec![0.0; ny];
        for (name, dev) in &self.references {
            let r = registry
                .outputs
                .iter()
                .position(|o| o == name)
                .ok_or_else(|| MpcError::BadConfig(format!("reference for unknown output {name}")))?;
            y_ref_dev[r] = *dev;
        }
        let mut u_lower = Vec::with_capacity(registry.inputs.len());
        let mut u_upper = Vec::with_capacity(registry.inputs.len());
        for (j, op) in registry.u_op.iter().enumerate() {
            if !(self.pf_min <= *op && *op <= self.pf_max) {
                return Err(MpcError::BadConfig(format!(
                    "operating power factor {op} of {} outside [{}, {}]",
                    registry.inputs[j], self.pf_min, self.pf_max
                )));
            }
            u_lower.push(self.pf_min - op);
            u_upper.push(self.pf_max - op);
        }
        let y_lower = registry.y_nominal.iter().map(|n| self.v_min - n).collect();
        let y_upper = registry.y_nominal.iter().map(|n| self.v_max - n).collect();
        Ok(ResolvedConfig {
            horizon: self.horizon,
            move_horizon: self.move_horizon,
            q,
            r: self.r_weight,
            mu_lower: self.mu_lower,
            mu_upper: self.mu_upper,
            u_lower,
            u_upper,
            y_lower,
            y_upper,
            y_ref_dev,
        })
    }
}

/// Per-channel expansion of [`MpcConfig`] in deviation coordinates.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub horizon: usize,
    pub move_horizon: usize,
    pub q: Vec<f64>,
    pub r: f64,
    pub mu_lower: f64,
    pub mu_upper: f64,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    pub y_lower: Vec<f64>,
    pub y_upper: Vec<f64>,
    pub y_ref_dev: Vec<f64>,
}

/// Builds the quadratic program over `z = [U; eps1; eps2]`.
///
/// With the solver's `1/2 z'Hz + f'z` convention the blocks are
/// `H_UU = 2(G'QbarG + Rbar)`, `f_U = 2 G'Qbar (F - Yref)`, and the slack
/// diagonal holds `2*mu`. General rows stack the upper band constraints for
/// all horizon steps, then the lower ones.
pub fn assemble(cfg: &ResolvedConfig, pred: &Prediction) -> Result<QpProblem, MpcError> {
    let ny = pred.ny;
    let nu = pred.nu;
    let n_moves = cfg.move_horizon * nu;
    let n_rows = cfg.horizon * ny;
    if cfg.q.len() != ny || cfg.y_ref_dev.len() != ny || cfg.u_lower.len() != nu {
        return Err(MpcError::Dimension(format!(
            "config sized for {}x{} channels, prediction has {ny}x{nu}",
            cfg.q.len(),
            cfg.u_lower.len()
        )));
    }
    if pred.horizon != cfg.horizon || pred.move_horizon != cfg.move_horizon {
        return Err(MpcError::Dimension(format!(
            "prediction horizon {}x{} vs config {}x{}",
            pred.horizon, pred.move_horizon, cfg.horizon, cfg.move_horizon
        )));
    }
    let nz = n_moves + 2;
    let e1 = n_moves;
    let e2 = n_moves + 1;

    // Qbar diagonal over the stacked horizon and the residual F - Yref.
    let qbar = DVector::from_fn(n_rows, |i, _| cfg.q[i % ny]);
    let resid = DVector::from_fn(n_rows, |i, _| pred.free[i] - cfg.y_ref_dev[i % ny]);

    let mut h = DMatrix::zeros(nz, nz);
    // G' Qbar G, folded into the move block.
    for a in 0..n_moves {
        for b in a..n_moves {
            let mut acc = 0.0;
            for r in 0..n_rows {
                acc += pred.dynamic[(r, a)] * qbar[r] * pred.dynamic[(r, b)];
            }
            h[(a, b)] = 2.0 * acc;
            h[(b, a)] = h[(a, b)];
        }
        h[(a, a)] += 2.0 * cfg.r;
    }
    h[(e1, e1)] = 2.0 * cfg.mu_lower;
    h[(e2, e2)] = 2.0 * cfg.mu_upper;

    let mut f = DVector::zeros(nz);
    for a in 0..n_moves {
        let mut acc = 0.0;
        for r in 0..n_rows {
            acc += pred.dynamic[(r, a)] * qbar[r] * resid[r];
        }
        f[a] = 2.0 * acc;
    }

    // Band rows: Y <= Ymax + eps2 stacked first, then Ymin - eps1 <= Y.
    let mut a_mat = DMatrix::zeros(2 * n_rows, nz);
    let mut b_vec = DVector::zeros(2 * n_rows);
    for r in 0..n_rows {
        for c in 0..n_moves {
            a_mat[(r, c)] = pred.dynamic[(r, c)];
            a_mat[(n_rows + r, c)] = -pred.dynamic[(r, c)];
        }
        a_mat[(r, e2)] = -1.0;
        b_vec[r] = cfg.y_upper[r % ny] - pred.free[r];
        a_mat[(n_rows + r, e1)] = -1.0;
        b_vec[n_rows + r] = pred.free[r] - cfg.y_lower[r % ny];
    }

    let mut lower = DVector::from_element(nz, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(nz, f64::INFINITY);
    for j in 0..n_moves {
        lower[j] = cfg.u_lower[j % nu];
        upper[j] = cfg.u_upper[j % nu];
    }
    lower[e1] = 0.0;
    lower[e2] = 0.0;

    Ok(QpProblem {
        h,
        f,
        a: a_mat,
        b: b_vec,
        lower,
        upper,
    })
}

/// What one controller sample produced.
#[derive(Debug, Clone)]
pub struct ControlOutput {
    /// Absolute power-factor references to apply, one per generator.
    pub pf_refs: Vec<f64>,
    /// Optimal lower-band slack.
    pub slack_lower: f64,
    /// Optimal upper-band slack.
    pub slack_upper: f64,
    /// True when the solver failed and the previous input was held.
    pub degraded: bool,
    pub objective: f64,
}

/// Controller state: the model, the resolved tuning, and the input and
/// disturbance history the predictor needs.
pub struct MpcController {
    model: ImpulseResponseModel,
    resolved: ResolvedConfig,
    history: History,
    /// Last applied input deviations (held on solver failure).
    u_prev: Vec<f64>,
    degraded_samples: usize,
    #[cfg(test)]
    force_solver_failure: bool,
}

impl MpcController {
    pub fn new(model: ImpulseResponseModel, config: &MpcConfig) -> Result<MpcController, MpcError> {
        let resolved = config.resolve(&model.registry)?;
        let history = History::zeros(model.m, model.nu(), model.nd());
        let nu = model.nu();
        Ok(MpcController {
            model,
            resolved,
            history,
            u_prev: vec![0.0; nu],
            degraded_samples: 0,
            #[cfg(test)]
            force_solver_failure: false,
        })
    }

    pub fn model(&self) -> &ImpulseResponseModel {
        &self.model
    }

    /// Replaces the voltage references with absolute per-unit values.
    pub fn set_references(&mut self, v_ref: &[f64]) -> Result<(), MpcError> {
        if v_ref.len() != self.model.ny() {
            return Err(MpcError::Dimension(format!(
                "{} references for {} outputs",
                v_ref.len(),
                self.model.ny()
            )));
        }
        for (r, v) in v_ref.iter().enumerate() {
            self.resolved.y_ref_dev[r] = v - self.model.registry.y_nominal[r];
        }
        Ok(())
    }

    /// Samples the controller: measurements in, power-factor references out.
    /// `y_meas` are the controlled voltages (p.u.), `d_meas` the disturbance
    /// channels in the registry's units and order. On solver failure the
    /// previous input is held and `degraded` is set on the output.
    pub fn control_step(&mut self, y_meas: &[f64], d_meas: &[f64]) -> Result<ControlOutput, MpcError> {
        let ny = self.model.ny();
        let nd = self.model.nd();
        if y_meas.len() != ny {
            return Err(MpcError::Dimension(format!(
                "{} voltage measurements for {ny} outputs",
                y_meas.len()
            )));
        }
        if d_meas.len() != nd {
            return Err(MpcError::Dimension(format!(
                "{} disturbance measurements for {nd} channels",
                d_meas.len()
            )));
        }
        if y_meas.iter().any(|v| !v.is_finite()) {
            return Err(MpcError::BadMeasurement("voltages"));
        }
        if d_meas.iter().any(|v| !v.is_finite()) {
            return Err(MpcError::BadMeasurement("disturbances"));
        }
        let y_dev: Vec<f64> = y_meas
            .iter()
            .zip(&self.model.registry.y_nominal)
            .map(|(y, n)| y - n)
            .collect();
        let d_dev: Vec<f64> = d_meas
            .iter()
            .zip(&self.model.registry.d_op)
            .map(|(d, o)| d - o)
            .collect();

        let delta = predictor::estimate_delta(&self.model, &self.history, &y_dev)?;
        let d_future = vec![d_dev.clone()];
        let pred = predictor::build_prediction(
            &self.model,
            &self.history,
            &delta,
            &d_future,
            self.resolved.horizon,
            self.resolved.move_horizon,
        )?;
        let qp_problem = assemble(&self.resolved, &pred)?;
        let start = self.feasible_start(&qp_problem, &pred);

        let solved = qp::solve(&qp_problem, &start);
        #[cfg(test)]
        let solved = if self.force_solver_failure {
            Err(QpError::IterationLimit {
                iterations: 0,
                stationarity: f64::INFINITY,
            })
        } else {
            solved
        };

        let nu = self.model.nu();
        let output = match solved {
            Ok(sol) => {
                let mut u0 = Vec::with_capacity(nu);
                for j in 0..nu {
                    // Defensive clamp; the box constraints already hold.
                    let dev = sol.z[j]
                        .clamp(self.resolved.u_lower[j], self.resolved.u_upper[j]);
                    u0.push(dev);
                }
                self.u_prev = u0.clone();
                ControlOutput {
                    pf_refs: u0
                        .iter()
                        .zip(&self.model.registry.u_op)
                        .map(|(d, op)| d + op)
                        .collect(),
                    slack_lower: sol.z[sol.z.len() - 2].max(0.0),
                    slack_upper: sol.z[sol.z.len() - 1].max(0.0),
                    degraded: false,
                    objective: sol.objective,
                }
            }
            Err(_) => {
                self.degraded_samples += 1;
                ControlOutput {
                    pf_refs: self
                        .u_prev
                        .iter()
                        .zip(&self.model.registry.u_op)
                        .map(|(d, op)| d + op)
                        .collect(),
                    slack_lower: 0.0,
                    slack_upper: 0.0,
                    degraded: true,
                    objective: f64::NAN,
                }
            }
        };
        self.history.advance(&self.u_prev, &d_dev)?;
        Ok(output)
    }

    /// Number of samples the controller spent in degraded (held-input) mode.
    pub fn degraded_samples(&self) -> usize {
        self.degraded_samples
    }

    /// Strictly feasible start: zero moves, slacks one above the current
    /// free-response violation.
    fn feasible_start(&self, qp_problem: &QpProblem, pred: &Prediction) -> DVector<f64> {
        let ny = pred.ny;
        let mut over = 0.0_f64;
        let mut under = 0.0_f64;
        for r in 0..pred.free.len() {
            over = over.max(pred.free[r] - self.resolved.y_upper[r % ny]);
            under = under.max(self.resolved.y_lower[r % ny] - pred.free[r]);
        }
        let nz = qp_problem.n_vars();
        let mut z: DVector<f64> = DVector::zeros(nz);
        for j in 0..nz - 2 {
            z[j] = z[j].clamp(qp_problem.lower[j], qp_problem.upper[j]);
        }
        z[nz - 2] = under.max(0.0) + 1.0;
        z[nz - 1] = over.max(0.0) + 1.0;
        z
    }

    #[cfg(test)]
    fn set_force_solver_failure(&mut self, fail: bool) {
        self.force_solver_failure = fail;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tiny_model(g1: f64, nu_extra: usize) -> ImpulseResponseModel {
        // Single output, 1 + nu_extra inputs, short memory, one disturbance.
        let nu = 1 + nu_extra;
        let gs = [g1, g1 * 0.5, g1 * 0.25];
        ImpulseResponseModel {
            t_sample_s: 2.0,
            m: 3,
            operating_point: "test".into(),
            registry: ChannelRegistry {
                outputs: vec!["V1".into()],
                y_nominal: vec![1.0],
                inputs: (0..nu).map(|i| format!("u{i}")).collect(),
                u_op: vec![1.0; nu],
                disturbances: vec!["d0".into()],
                d_op: vec![0.0],
            },
            g: gs
                .iter()
                .map(|&v| DMatrix::from_element(1, nu, v))
                .collect(),
            gamma: (0..3).map(|_| DMatrix::zeros(1, 1)).collect(),
        }
    }

    #[test]
    fn defaults_are_the_documented_tuning() {
        let cfg = MpcConfig::default();
        assert_eq!(cfg.horizon, 10);
        assert_eq!(cfg.move_horizon, 2);
        assert_eq!(cfg.q_weight, 10.0);
        assert_eq!(cfg.r_weight, 0.1);
        assert_eq!(cfg.mu_lower, 1000.0);
        assert_eq!(cfg.mu_upper, 1000.0);
        assert_eq!((cfg.pf_min, cfg.pf_max), (0.6, 1.0));
        assert_eq!((cfg.v_min, cfg.v_max), (0.9, 1.1));
    }

    #[test]
    fn config_file_round_trip() {
        let mut cfg = MpcConfig::default();
        cfg.q_overrides.push(("V1".into(), 25.0));
        cfg.references.push(("V1".into(), -0.0125));
        let text = cfg.to_text();
        let back = MpcConfig::from_text(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn assembled_dimensions_and_slack_entries() {
        // Sizes of the bundled benchmark problem: 11 outputs, 8 inputs,
        // horizon 10, two moves: 18 variables and 220 band rows.
        let mut rng = StdRng::seed_from_u64(5);
        let ny = 11;
        let nu = 8;
        let model = ImpulseResponseModel {
            t_sample_s: 2.0,
            m: 4,
            operating_point: "test".into(),
            registry: ChannelRegistry {
                outputs: (0..ny).map(|i| format!("N{i:02}")).collect(),
                y_nominal: vec![1.0; ny],
                inputs: (0..nu).map(|i| format!("DG{i}.pf")).collect(),
                u_op: vec![1.0; nu],
                disturbances: vec!["D.P".into()],
                d_op: vec![0.0],
            },
            g: (0..4)
                .map(|_| DMatrix::from_fn(ny, nu, |_, _| rng.random_range(-0.01..0.01)))
                .collect(),
            gamma: (0..4).map(|_| DMatrix::zeros(ny, 1)).collect(),
        };
        let cfg = MpcConfig::default();
        let resolved = cfg.resolve(&model.registry).unwrap();
        let history = History::zeros(4, nu, 1);
        let delta = DVector::zeros(ny);
        let pred = predictor::build_prediction(&model, &history, &delta, &[], 10, 2).unwrap();
        let qp_problem = assemble(&resolved, &pred).unwrap();
        assert_eq!(qp_problem.n_vars(), 18);
        assert_eq!(qp_problem.a.nrows(), 220);
        assert_eq!(qp_problem.h[(16, 16)], 2000.0);
        assert_eq!(qp_problem.h[(17, 17)], 2000.0);
        assert_eq!(qp_problem.lower[16], 0.0);
        assert!(qp_problem.upper[16].is_infinite());
        // Move bounds in deviation coordinates: [0.6, 1] around 1.
        assert_eq!(qp_problem.lower[0], -0.4);
        assert_eq!(qp_problem.upper[0], 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(8);
        let model = tiny_model(0.02, 2);
        let cfg = MpcConfig::default();
        let resolved = cfg.resolve(&model.registry).unwrap();
        let mut history = History::zeros(3, 3, 1);
        history.advance(&[-0.1, 0.05, 0.0], &[0.02]).unwrap();
        let delta = DVector::from_element(1, 0.03);
        let pred =
            predictor::build_prediction(&model, &history, &delta, &[], 10, 2).unwrap();
        let qp_problem = assemble(&resolved, &pred).unwrap();

        // Explicit objective from first principles.
        let explicit = |z: &DVector<f64>| -> f64 {
            let nz = z.len();
            let u = z.rows(0, nz - 2).into_owned();
            let y = pred.evaluate(&u);
            let mut j = 0.0;
            for yv in y.iter() {
                let e = yv - resolved.y_ref_dev[0];
                j += resolved.q[0] * e * e;
            }
            for uv in u.iter() {
                j += resolved.r * uv * uv;
            }
            j + resolved.mu_lower * z[nz - 2] * z[nz - 2]
                + resolved.mu_upper * z[nz - 1] * z[nz - 1]
        };

        for _ in 0..20 {
            let z = DVector::from_fn(8, |_, _| rng.random_range(-0.5..0.5));
            let grad_assembled = &qp_problem.h * &z + &qp_problem.f;
            let eps = 1e-6;
            for j in 0..8 {
                let mut zp = z.clone();
                zp[j] += eps;
                let mut zm = z.clone();
                zm[j] -= eps;
                let fd = (explicit(&zp) - explicit(&zm)) / (2.0 * eps);
                let scale = 1.0 + fd.abs().max(grad_assembled[j].abs());
                assert!(
                    ((grad_assembled[j] - fd) / scale).abs() < 1e-6,
                    "component {j}: assembled {} vs finite difference {fd}",
                    grad_assembled[j]
                );
            }
        }
    }

    #[test]
    fn at_reference_the_origin_is_optimal() {
        let model = tiny_model(0.02, 0);
        let mut ctrl = MpcController::new(model, &MpcConfig::default()).unwrap();
        let out = ctrl.control_step(&[1.0], &[0.0]).unwrap();
        assert!(!out.degraded);
        assert!((out.pf_refs[0] - 1.0).abs() < 1e-9);
        assert!(out.slack_lower.abs() < 1e-9);
        assert!(out.slack_upper.abs() < 1e-9);
    }

    #[test]
    fn saturated_overvoltage_engages_the_upper_slack_only() {
        // Offset of +0.3 p.u. with feeble input authority: even full
        // reactive absorption cannot reach the band, so the upper slack
        // carries the violation and the lower slack stays at zero.
        let model = tiny_model(0.01, 0);
        let mut ctrl = MpcController::new(model, &MpcConfig::default()).unwrap();
        let out = ctrl.control_step(&[1.3], &[0.0]).unwrap();
        assert!(!out.degraded);
        assert!(out.slack_upper > 0.05, "slack_upper = {}", out.slack_upper);
        assert!(out.slack_lower.abs() < 1e-9);
        // The controller pushes the input to its absorbing limit.
        assert!((out.pf_refs[0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn applied_power_factors_always_inside_interval() {
        let model = tiny_model(0.05, 1);
        let mut ctrl = MpcController::new(model, &MpcConfig::default()).unwrap();
        for y in [0.5_f64, 0.8, 1.0, 1.2, 1.6] {
            let out = ctrl.control_step(&[y], &[0.0]).unwrap();
            for pf in &out.pf_refs {
                assert!(*pf >= 0.6 - 1e-12 && *pf <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn identical_controllers_are_bit_identical() {
        let mk = || {
            let model = tiny_model(0.03, 1);
            MpcController::new(model, &MpcConfig::default()).unwrap()
        };
        let mut c1 = mk();
        let mut c2 = mk();
        for y in [1.05_f64, 1.12, 0.93, 1.0] {
            let o1 = c1.control_step(&[y], &[0.01]).unwrap();
            let o2 = c2.control_step(&[y], &[0.01]).unwrap();
            assert_eq!(o1.pf_refs, o2.pf_refs);
            assert_eq!(o1.slack_lower, o2.slack_lower);
            assert_eq!(o1.slack_upper, o2.slack_upper);
        }
    }

    #[test]
    fn solver_failure_holds_input_and_flags_degraded() {
        let model = tiny_model(0.03, 0);
        let mut ctrl = MpcController::new(model, &MpcConfig::default()).unwrap();
        let first = ctrl.control_step(&[1.15], &[0.0]).unwrap();
        assert!(!first.degraded);
        ctrl.set_force_solver_failure(true);
        let held = ctrl.control_step(&[1.15], &[0.0]).unwrap();
        assert!(held.degraded);
        assert_eq!(held.pf_refs, first.pf_refs);
        assert_eq!(ctrl.degraded_samples(), 1);
        // Recovery: the solver comes back and the controller resumes.
        ctrl.set_force_solver_failure(false);
        let back = ctrl.control_step(&[1.15], &[0.0]).unwrap();
        assert!(!back.degraded);
    }

    #[test]
    fn bad_configs_rejected() {
        let model = tiny_model(0.01, 0);
        let reg = &model.registry;
        let d = MpcConfig::default;
        let bad = [
            MpcConfig { pf_min: 1.2, ..d() },
            MpcConfig { move_horizon: 11, ..d() },
            MpcConfig { q_weight: 0.0, ..d() },
            MpcConfig { q_overrides: vec![("nope".into(), 1.0)], ..d() },
            MpcConfig { v_min: 1.1, ..d() },
        ];
        for cfg in bad {
            assert!(cfg.resolve(reg).is_err());
        }
    }

    #[test]
    fn measurement_validation() {
        let model = tiny_model(0.01, 0);
        let mut ctrl = MpcController::new(model, &MpcConfig::default()).unwrap();
        assert!(matches!(
            ctrl.control_step(&[f64::NAN], &[0.0]),
            Err(MpcError::BadMeasurement(_))
        ));
        assert!(ctrl.control_step(&[1.0, 1.0], &[0.0]).is_err());
    }
}
