//! Network model: parsing, validation, per-unit conversion.
//!
//! The declarative file (see `data/benchmark.net` for the schema) lists MV
//! buses, line branches, transformers, load records over the four tabulated
//! operating points and generators. `to_per_unit` flattens that into the
//! runtime form: every LV-level load gets an internal bus behind its MV/LV
//! transformer impedance, line constants become complex series impedances
//! and pi-half shunts on the 50 MVA / 20 kV base, and the radial structure
//! is frozen as a parent/child tree rooted at the substation bus.
//!
//! The HV/MV transformer is kept for its tap data only: the substation bus
//! is the slack of every flow solve, so its series impedance never enters
//! the network equations.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::textfmt::{fmt_f64, Doc, ParseError};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("network file: {0}")]
    Parse(#[from] ParseError),
    #[error("invalid network: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> GridError {
    GridError::Invalid(msg.into())
}

/// The four tabulated operating points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatingPoint {
    OneAm,
    SevenAm,
    OnePm,
    SevenPm,
}

impl OperatingPoint {
    pub const ALL: [OperatingPoint; 4] = [
        OperatingPoint::OneAm,
        OperatingPoint::SevenAm,
        OperatingPoint::OnePm,
        OperatingPoint::SevenPm,
    ];

    pub fn index(self) -> usize {
        match self {
            OperatingPoint::OneAm => 0,
            OperatingPoint::SevenAm => 1,
            OperatingPoint::OnePm => 2,
            OperatingPoint::SevenPm => 3,
        }
    }

    pub fn label(self) -> &'static str {
        ["1am", "7am", "1pm", "7pm"][self.index()]
    }

    pub fn from_label(s: &str) -> Option<OperatingPoint> {
        OperatingPoint::ALL.into_iter().find(|op| op.label() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    Substation,
    Mv,
}

#[derive(Debug, Clone)]
pub struct Bus {
    pub id: String,
    pub feeder: u8,
    pub kind: BusKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Cable,
    Overhead,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub name: String,
    pub from: String,
    pub to: String,
    pub kind: BranchKind,
    pub r_ohm_per_km: f64,
    pub l_mh_per_km: f64,
    pub c_uf_per_km: f64,
    pub length_km: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformerKind {
    HvMv,
    MvLv,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub name: String,
    pub kind: TransformerKind,
    pub bus: String,
    /// LV-level load record served by the unit; `None` for the HV/MV unit.
    pub serves: Option<String>,
    pub rated_mva: f64,
    pub cu_loss_kw: f64,
    pub uk_pct: f64,
    pub taps: u32,
    pub tap_step_pct: f64,
}

impl Transformer {
    /// Series impedance in per unit on its own rating.
    pub fn impedance_own_base(&self) -> Result<Complex64, GridError> {
        let r = self.cu_loss_kw * 1e-3 / self.rated_mva;
        let z = self.uk_pct / 100.0;
        if z <= r {
            return Err(invalid(format!(
                "transformer {}: |Z| = {z} not above R = {r}",
                self.name
            )));
        }
        Ok(Complex64::new(r, (z * z - r * r).sqrt()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadLevel {
    Mv,
    Lv,
}

#[derive(Debug, Clone)]
pub struct LoadRecord {
    pub id: String,
    pub bus: String,
    pub category: char,
    pub level: LoadLevel,
    /// MW per operating point, indexed by `OperatingPoint::index`.
    pub p_mw: [f64; 4],
    pub q_mvar: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenTech {
    Tg,
    Pv,
    Ae,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub id: String,
    pub tech: GenTech,
    pub feeder: u8,
    pub bus: String,
    pub p_nominal_mw: f64,
    pub p_mw: [f64; 4],
}

#[derive(Debug, Clone, Copy)]
pub struct Bases {
    pub s_mva: f64,
    pub v_kv: f64,
    pub f_hz: f64,
}

impl Bases {
    pub fn z_ohm(&self) -> f64 {
        self.v_kv * self.v_kv / self.s_mva
    }
}

#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub bases: Bases,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub transformers: Vec<Transformer>,
    pub loads: Vec<LoadRecord>,
    pub generators: Vec<Generator>,
}

fn unique<'a>(kind: &str, ids: impl Iterator<Item = &'a str>) -> Result<(), GridError> {
    let mut seen = BTreeMap::new();
    for id in ids {
        if seen.insert(id, ()).is_some() {
            return Err(invalid(format!("duplicate {kind} id {id:?}")));
        }
    }
    Ok(())
}

impl NetworkModel {
    /// Parses and validates a network document.
    pub fn parse(text: &str) -> Result<NetworkModel, GridError> {
        let doc = Doc::parse(text)?;

        let bases_map = doc.require("bases")?.as_map()?;
        let base_val = |key: &str| -> Result<f64, GridError> {
            let (v, line) = bases_map
                .get(key)
                .ok_or_else(|| invalid(format!("[bases] missing {key}")))?;
            Ok(crate::textfmt::parse_f64(v, *line, key)?)
        };
        let bases = Bases {
            s_mva: base_val("s_mva")?,
            v_kv: base_val("v_kv")?,
            f_hz: base_val("f_hz")?,
        };

        let mut buses = Vec::new();
        for row in &doc.require("buses")?.rows {
            row.expect_len(3)?;
            let kind = match row.fields[2].as_str() {
                "substation" => BusKind::Substation,
                "mv" => BusKind::Mv,
                other => {
                    return Err(invalid(format!(
                        "line {}: unknown bus kind {other:?}",
                        row.line
                    )))
                }
            };
            buses.push(Bus {
                id: row.fields[0].clone(),
                feeder: row.field(1, "feeder")?,
                kind,
            });
        }

        let mut branches = Vec::new();
        for row in &doc.require("branches")?.rows {
            row.expect_len(8)?;
            let kind = match row.fields[3].as_str() {
                "cable" => BranchKind::Cable,
                "overhead" => BranchKind::Overhead,
                other => {
                    return Err(invalid(format!(
                        "line {}: unknown branch kind {other:?}",
                        row.line
                    )))
                }
            };
            branches.push(Branch {
                name: row.fields[0].clone(),
                from: row.fields[1].clone(),
                to: row.fields[2].clone(),
                kind,
                r_ohm_per_km: row.field(4, "r_ohm_km")?,
                l_mh_per_km: row.field(5, "l_mh_km")?,
                c_uf_per_km: row.field(6, "c_uf_km")?,
                length_km: row.field(7, "length_km")?,
            });
        }

        let mut transformers = Vec::new();
        for row in &doc.require("transformers")?.rows {
            row.expect_len(9)?;
            let kind = match row.fields[1].as_str() {
                "hv_mv" => TransformerKind::HvMv,
                "mv_lv" => TransformerKind::MvLv,
                other => {
                    return Err(invalid(format!(
                        "line {}: unknown transformer kind {other:?}",
                        row.line
                    )))
                }
            };
            let serves = match row.fields[3].as_str() {
                "-" => None,
                id => Some(id.to_string()),
            };
            transformers.push(Transformer {
                name: row.fields[0].clone(),
                kind,
                bus: row.fields[2].clone(),
                serves,
                rated_mva: row.field(4, "rated_mva")?,
                cu_loss_kw: row.field(5, "cu_loss_kw")?,
                uk_pct: row.field(6, "uk_pct")?,
                taps: row.field(7, "taps")?,
                tap_step_pct: row.field(8, "tap_step_pct")?,
            });
        }

        let mut loads = Vec::new();
        for row in &doc.require("loads")?.rows {
            row.expect_len(12)?;
            let category = row.fields[2].chars().next().unwrap_or('?');
            if row.fields[2].len() != 1 || !"AILRT".contains(category) {
                return Err(invalid(format!(
                    "line {}: unknown load category {:?}",
                    row.line, row.fields[2]
                )));
            }
            let level = match row.fields[3].as_str() {
                "mv" => LoadLevel::Mv,
                "lv" => LoadLevel::Lv,
                other => {
                    return Err(invalid(format!(
                        "line {}: unknown load level {other:?}",
                        row.line
                    )))
                }
            };
            let mut p_mw = [0.0; 4];
            let mut q_mvar = [0.0; 4];
            for op in 0..4 {
                p_mw[op] = row.field(4 + 2 * op, "p_mw")?;
                q_mvar[op] = row.field(5 + 2 * op, "q_mvar")?;
            }
            loads.push(LoadRecord {
                id: row.fields[0].clone(),
                bus: row.fields[1].clone(),
                category,
                level,
                p_mw,
                q_mvar,
            });
        }

        let mut generators = Vec::new();
        for row in &doc.require("generators")?.rows {
            row.expect_len(9)?;
            let tech = match row.fields[1].as_str() {
                "TG" => GenTech::Tg,
                "PV" => GenTech::Pv,
                "AE" => GenTech::Ae,
                other => {
                    return Err(invalid(format!(
                        "line {}: unknown generator tech {other:?}",
                        row.line
                    )))
                }
            };
            let mut p_mw = [0.0; 4];
            for (op, slot) in p_mw.iter_mut().enumerate() {
                *slot = row.field(5 + op, "p_mw")?;
            }
            generators.push(Generator {
                id: row.fields[0].clone(),
                tech,
                feeder: row.field(2, "feeder")?,
                bus: row.fields[3].clone(),
                p_nominal_mw: row.field(4, "p_nominal_mw")?,
                p_mw,
            });
        }

        let model = NetworkModel {
            bases,
            buses,
            branches,
            transformers,
            loads,
            generators,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), GridError> {
        if self.bases.s_mva <= 0.0 || self.bases.v_kv <= 0.0 || self.bases.f_hz <= 0.0 {
            return Err(invalid("bases must be positive"));
        }
        unique("bus", self.buses.iter().map(|b| b.id.as_str()))?;
        unique("branch", self.branches.iter().map(|b| b.name.as_str()))?;
        unique("transformer", self.transformers.iter().map(|t| t.name.as_str()))?;
        unique("load", self.loads.iter().map(|l| l.id.as_str()))?;
        unique("generator", self.generators.iter().map(|g| g.id.as_str()))?;

        let index: BTreeMap<&str, usize> = self
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.as_str(), i))
            .collect();

        let substations: Vec<&Bus> = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Substation)
            .collect();
        if substations.len() != 1 {
            return Err(invalid(format!(
                "expected exactly one substation bus, found {}",
                substations.len()
            )));
        }
        let slack = substations[0];
        if slack.feeder != 0 {
            return Err(invalid("substation bus must carry feeder 0"));
        }

        for b in &self.branches {
            for end in [&b.from, &b.to] {
                if !index.contains_key(end.as_str()) {
                    return Err(invalid(format!("branch {}: unknown bus {end:?}", b.name)));
                }
            }
            if b.r_ohm_per_km <= 0.0 || b.l_mh_per_km <= 0.0 || b.c_uf_per_km < 0.0 {
                return Err(invalid(format!("branch {}: non-positive constants", b.name)));
            }
            if b.length_km <= 0.0 {
                return Err(invalid(format!("branch {}: non-positive length", b.name)));
            }
            let (ff, tf) = (
                self.buses[index[b.from.as_str()]].feeder,
                self.buses[index[b.to.as_str()]].feeder,
            );
            if ff != 0 && tf != 0 && ff != tf {
                return Err(invalid(format!(
                    "branch {} joins feeder {ff} to feeder {tf}",
                    b.name
                )));
            }
        }

        // Radiality over the MV graph: every bus reached from the substation
        // through exactly one branch path.
        let mut adjacency = vec![Vec::new(); self.buses.len()];
        for (bi, b) in self.branches.iter().enumerate() {
            let f = index[b.from.as_str()];
            let t = index[b.to.as_str()];
            adjacency[f].push((t, bi));
            adjacency[t].push((f, bi));
        }
        let root = index[slack.id.as_str()];
        let mut seen_via = vec![usize::MAX; self.buses.len()];
        seen_via[root] = usize::MAX - 1;
        let mut queue = std::collections::VecDeque::from([root]);
        let mut reached = 1usize;
        while let Some(u) = queue.pop_front() {
            for &(v, bi) in &adjacency[u] {
                if bi == seen_via[u] {
                    continue;
                }
                if seen_via[v] != usize::MAX {
                    return Err(invalid(format!(
                        "cycle detected through branch {}",
                        self.branches[bi].name
                    )));
                }
                seen_via[v] = bi;
                reached += 1;
                queue.push_back(v);
            }
        }
        if reached != self.buses.len() {
            let missing = self
                .buses
                .iter()
                .enumerate()
                .find(|(i, _)| seen_via[*i] == usize::MAX)
                .map(|(_, b)| b.id.clone())
                .unwrap_or_default();
            return Err(invalid(format!("bus {missing} unreachable from substation")));
        }
        if self.branches.len() + 1 != self.buses.len() {
            return Err(invalid(format!(
                "{} branches cannot span {} buses radially",
                self.branches.len(),
                self.buses.len()
            )));
        }

        let load_index: BTreeMap<&str, &LoadRecord> =
            self.loads.iter().map(|l| (l.id.as_str(), l)).collect();
        let mut served = BTreeMap::new();
        let mut hv_mv = 0usize;
        for t in &self.transformers {
            if !index.contains_key(t.bus.as_str()) {
                return Err(invalid(format!("transformer {}: unknown bus {:?}", t.name, t.bus)));
            }
            if t.rated_mva <= 0.0 || t.cu_loss_kw <= 0.0 || t.uk_pct <= 0.0 {
                return Err(invalid(format!("transformer {}: non-positive ratings", t.name)));
            }
            t.impedance_own_base()?;
            match t.kind {
                TransformerKind::HvMv => {
                    hv_mv += 1;
                    if self.buses[index[t.bus.as_str()]].kind != BusKind::Substation {
                        return Err(invalid(format!(
                            "HV/MV transformer {} must connect to the substation bus",
                            t.name
                        )));
                    }
                    if t.serves.is_some() {
                        return Err(invalid(format!(
                            "HV/MV transformer {} cannot serve a load record",
                            t.name
                        )));
                    }
                }
                TransformerKind::MvLv => {
                    let served_id = t.serves.as_deref().ok_or_else(|| {
                        invalid(format!("MV/LV transformer {} must serve a load", t.name))
                    })?;
                    let load = load_index.get(served_id).ok_or_else(|| {
                        invalid(format!(
                            "transformer {}: unknown load record {served_id:?}",
                            t.name
                        ))
                    })?;
                    if load.level != LoadLevel::Lv {
                        return Err(invalid(format!(
                            "transformer {} serves MV-level load {served_id}",
                            t.name
                        )));
                    }
                    if load.bus != t.bus {
                        return Err(invalid(format!(
                            "transformer {} at {} serves load connected at {}",
                            t.name, t.bus, load.bus
                        )));
                    }
                    if served.insert(served_id.to_string(), t.name.clone()).is_some() {
                        return Err(invalid(format!(
                            "load {served_id} served by more than one transformer"
                        )));
                    }
                }
            }
        }
        if hv_mv != 1 {
            return Err(invalid(format!(
                "expected exactly one HV/MV transformer, found {hv_mv}"
            )));
        }

        for l in &self.loads {
            let bus = index
                .get(l.bus.as_str())
                .ok_or_else(|| invalid(format!("load {}: unknown bus {:?}", l.id, l.bus)))?;
            if self.buses[*bus].kind == BusKind::Substation {
                return Err(invalid(format!("load {} attached to the substation bus", l.id)));
            }
            if l.p_mw.iter().chain(&l.q_mvar).any(|v| *v < 0.0) {
                return Err(invalid(format!("load {}: negative power entry", l.id)));
            }
            if l.level == LoadLevel::Lv && !served.contains_key(l.id.as_str()) {
                return Err(invalid(format!(
                    "LV-level load {} has no MV/LV transformer",
                    l.id
                )));
            }
        }

        for g in &self.generators {
            let bus = index
                .get(g.bus.as_str())
                .ok_or_else(|| invalid(format!("generator {}: unknown bus {:?}", g.id, g.bus)))?;
            if self.buses[*bus].kind == BusKind::Substation {
                return Err(invalid(format!("generator {} at the substation bus", g.id)));
            }
            if self.buses[*bus].feeder != g.feeder {
                return Err(invalid(format!(
                    "generator {}: feeder {} does not match bus {} on feeder {}",
                    g.id, g.feeder, g.bus, self.buses[*bus].feeder
                )));
            }
            if g.p_nominal_mw <= 0.0 {
                return Err(invalid(format!("generator {}: non-positive rating", g.id)));
            }
            for (op, p) in OperatingPoint::ALL.iter().zip(g.p_mw) {
                if p < 0.0 || p > g.p_nominal_mw {
                    return Err(invalid(format!(
                        "generator {}: production {p} MW at {} outside [0, {}]",
                        g.id,
                        op.label(),
                        g.p_nominal_mw
                    )));
                }
            }
        }

        Ok(())
    }

    /// Writes the model back in the file format; numeric fields reparse
    /// bit-exactly.
    pub fn serialize(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        out.push_str("[bases]\n");
        let _ = writeln!(out, "s_mva = {}", fmt_f64(self.bases.s_mva));
        let _ = writeln!(out, "v_kv = {}", fmt_f64(self.bases.v_kv));
        let _ = writeln!(out, "f_hz = {}", fmt_f64(self.bases.f_hz));
        out.push_str("\n[buses]\n");
        for b in &self.buses {
            let kind = match b.kind {
                BusKind::Substation => "substation",
                BusKind::Mv => "mv",
            };
            let _ = writeln!(out, "{} {} {}", b.id, b.feeder, kind);
        }
        out.push_str("\n[branches]\n");
        for b in &self.branches {
            let kind = match b.kind {
                BranchKind::Cable => "cable",
                BranchKind::Overhead => "overhead",
            };
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {}",
                b.name,
                b.from,
                b.to,
                kind,
                fmt_f64(b.r_ohm_per_km),
                fmt_f64(b.l_mh_per_km),
                fmt_f64(b.c_uf_per_km),
                fmt_f64(b.length_km)
            );
        }
        out.push_str("\n[transformers]\n");
        for t in &self.transformers {
            let kind = match t.kind {
                TransformerKind::HvMv => "hv_mv",
                TransformerKind::MvLv => "mv_lv",
            };
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {} {}",
                t.name,
                kind,
                t.bus,
                t.serves.as_deref().unwrap_or("-"),
                fmt_f64(t.rated_mva),
                fmt_f64(t.cu_loss_kw),
                fmt_f64(t.uk_pct),
                t.taps,
                fmt_f64(t.tap_step_pct)
            );
        }
        out.push_str("\n[loads]\n");
        for l in &self.loads {
            let level = match l.level {
                LoadLevel::Mv => "mv",
                LoadLevel::Lv => "lv",
            };
            let mut row = format!("{} {} {} {}", l.id, l.bus, l.category, level);
            for op in 0..4 {
                row.push(' ');
                row.push_str(&fmt_f64(l.p_mw[op]));
                row.push(' ');
                row.push_str(&fmt_f64(l.q_mvar[op]));
            }
            let _ = writeln!(out, "{row}");
        }
        out.push_str("\n[generators]\n");
        for g in &self.generators {
            let tech = match g.tech {
                GenTech::Tg => "TG",
                GenTech::Pv => "PV",
                GenTech::Ae => "AE",
            };
            let mut row = format!(
                "{} {} {} {} {}",
                g.id,
                tech,
                g.feeder,
                g.bus,
                fmt_f64(g.p_nominal_mw)
            );
            for op in 0..4 {
                row.push(' ');
                row.push_str(&fmt_f64(g.p_mw[op]));
            }
            let _ = writeln!(out, "{row}");
        }
        out
    }

    /// Converts to the runtime per-unit form.
    pub fn to_per_unit(&self) -> Result<PerUnitNetwork, GridError> {
        let z_base = self.bases.z_ohm();
        let s_base = self.bases.s_mva;
        let omega = 2.0 * PI * self.bases.f_hz;

        let mut bus_names: Vec<String> = self.buses.iter().map(|b| b.id.clone()).collect();
        let mut index: BTreeMap<String, usize> = bus_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let slack = self
            .buses
            .iter()
            .position(|b| b.kind == BusKind::Substation)
            .expect("validated");

        let mut branches = Vec::new();
        for b in &self.branches {
            let z = Complex64::new(
                b.r_ohm_per_km * b.length_km / z_base,
                omega * b.l_mh_per_km * 1e-3 * b.length_km / z_base,
            );
            let b_total = omega * b.c_uf_per_km * 1e-6 * b.length_km * z_base;
            branches.push(PuBranch {
                name: b.name.clone(),
                from: index[&b.from],
                to: index[&b.to],
                z,
                y_half: Complex64::new(0.0, b_total / 2.0),
                transformer: false,
            });
        }

        // One internal LV bus per MV/LV transformer, named after the unit.
        let mut load_bus = vec![usize::MAX; self.loads.len()];
        let mut tap_step = 0.0;
        let mut tap_limit = 0;
        for t in &self.transformers {
            match t.kind {
                TransformerKind::HvMv => {
                    tap_step = t.tap_step_pct / 100.0;
                    tap_limit = (t.taps / 2) as i32;
                }
                TransformerKind::MvLv => {
                    let served = t.serves.as_deref().expect("validated");
                    let li = self.loads.iter().position(|l| l.id == served).expect("validated");
                    let lv_name = format!("{}/lv", t.name);
                    let lv_idx = bus_names.len();
                    bus_names.push(lv_name.clone());
                    index.insert(lv_name, lv_idx);
                    let z = t.impedance_own_base()? * (s_base / t.rated_mva);
                    branches.push(PuBranch {
                        name: t.name.clone(),
                        from: index[&t.bus],
                        to: lv_idx,
                        z,
                        y_half: Complex64::new(0.0, 0.0),
                        transformer: true,
                    });
                    load_bus[li] = lv_idx;
                }
            }
        }
        if tap_step <= 0.0 {
            return Err(invalid("HV/MV transformer has no tap step"));
        }
        for (li, l) in self.loads.iter().enumerate() {
            if l.level == LoadLevel::Mv {
                load_bus[li] = index[&l.bus];
            }
        }
        let gen_bus: Vec<usize> = self.generators.iter().map(|g| index[&g.bus]).collect();

        // Tree structure: breadth-first from the slack.
        let n = bus_names.len();
        let mut adjacency = vec![Vec::new(); n];
        for (bi, b) in branches.iter().enumerate() {
            adjacency[b.from].push((b.to, bi));
            adjacency[b.to].push((b.from, bi));
        }
        let mut parent_branch = vec![None; n];
        let mut order = vec![slack];
        let mut head = 0;
        let mut visited = vec![false; n];
        visited[slack] = true;
        while head < order.len() {
            let u = order[head];
            head += 1;
            for &(v, bi) in &adjacency[u] {
                if !visited[v] {
                    visited[v] = true;
                    // Orient the branch parent -> child.
                    if branches[bi].to != v {
                        let b = &mut branches[bi];
                        std::mem::swap(&mut b.from, &mut b.to);
                    }
                    parent_branch[v] = Some(bi);
                    order.push(v);
                }
            }
        }
        debug_assert_eq!(order.len(), n);

        let mut shunt = vec![Complex64::new(0.0, 0.0); n];
        for b in &branches {
            shunt[b.from] += b.y_half;
            shunt[b.to] += b.y_half;
        }

        // Per-operating-point injections in per unit.
        let mut load_s = [const { Vec::new() }; 4];
        let mut gen_p = [const { Vec::new() }; 4];
        for op in 0..4 {
            load_s[op] = self
                .loads
                .iter()
                .map(|l| Complex64::new(l.p_mw[op] / s_base, l.q_mvar[op] / s_base))
                .collect();
            gen_p[op] = self.generators.iter().map(|g| g.p_mw[op] / s_base).collect();
        }

        Ok(PerUnitNetwork {
            bus_names,
            index,
            slack,
            branches,
            parent_branch,
            order,
            shunt,
            load_bus,
            load_ids: self.loads.iter().map(|l| l.id.clone()).collect(),
            gen_bus,
            gen_ids: self.generators.iter().map(|g| g.id.clone()).collect(),
            load_s,
            gen_p,
            tap_step,
            tap_limit,
            s_base_mva: s_base,
        })
    }
}

/// Series element of the per-unit network tree, oriented parent -> child.
#[derive(Debug, Clone)]
pub struct PuBranch {
    pub name: String,
    pub from: usize,
    pub to: usize,
    pub z: Complex64,
    pub y_half: Complex64,
    pub transformer: bool,
}

/// Runtime network: per-unit impedances and the rooted radial tree,
/// including one internal LV bus per MV/LV transformer.
#[derive(Debug, Clone)]
pub struct PerUnitNetwork {
    pub bus_names: Vec<String>,
    index: BTreeMap<String, usize>,
    pub slack: usize,
    pub branches: Vec<PuBranch>,
    /// Branch feeding each bus; `None` only for the slack.
    pub parent_branch: Vec<Option<usize>>,
    /// Buses in breadth-first order starting at the slack.
    pub order: Vec<usize>,
    /// Aggregated shunt admittance per bus (pi-model halves).
    pub shunt: Vec<Complex64>,
    /// Connection bus per load record (LV records point at their LV bus).
    pub load_bus: Vec<usize>,
    pub load_ids: Vec<String>,
    pub gen_bus: Vec<usize>,
    pub gen_ids: Vec<String>,
    load_s: [Vec<Complex64>; 4],
    gen_p: [Vec<f64>; 4],
    /// HV/MV per-tap ratio increment (e.g. 0.015).
    pub tap_step: f64,
    /// Tap position magnitude bound (e.g. 6).
    pub tap_limit: i32,
    pub s_base_mva: f64,
}

impl PerUnitNetwork {
    pub fn n_buses(&self) -> usize {
        self.bus_names.len()
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Per-unit complex power drawn by each load record at `op`.
    pub fn load_s(&self, op: OperatingPoint) -> &[Complex64] {
        &self.load_s[op.index()]
    }

    /// Per-unit active production of each generator at `op`.
    pub fn gen_p(&self, op: OperatingPoint) -> &[f64] {
        &self.gen_p[op.index()]
    }
}

/// Net complex injection per bus, per unit; the slack entry is ignored by
/// the flow solver.
#[derive(Debug, Clone)]
pub struct InjectionSet {
    pub s: Vec<Complex64>,
}

impl InjectionSet {
    pub fn zero(n: usize) -> InjectionSet {
        InjectionSet {
            s: vec![Complex64::new(0.0, 0.0); n],
        }
    }
}

/// Net injections at `op` with every generator at unity power factor.
pub fn operating_point(net: &PerUnitNetwork, op: OperatingPoint) -> InjectionSet {
    let mut inj = InjectionSet::zero(net.n_buses());
    for (li, s) in net.load_s(op).iter().enumerate() {
        inj.s[net.load_bus[li]] -= s;
    }
    for (gi, p) in net.gen_p(op).iter().enumerate() {
        inj.s[net.gen_bus[gi]] += Complex64::new(*p, 0.0);
    }
    inj
}
