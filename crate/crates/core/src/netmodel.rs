//! Network cases: buses, branches, two-port branch admittances and the bus
//! admittance matrix.
//!
//! Buses are addressed by dense 0-based indices internally; the identifiers
//! found in case files are kept in [`NetworkModel::index_of`].

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: malformed field `{field}`: {message}")]
    MalformedField {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: unsupported record: {message}")]
    UnsupportedRecord { line: usize, message: String },
    #[error("invalid case: {0}")]
    Validation(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bus {
    /// Dense 0-based index.
    pub id: usize,
    /// Identifier used by the case file.
    pub ext_id: i64,
    pub is_slack: bool,
    pub shunt_g: f64,
    pub shunt_b: f64,
    /// Solved voltage magnitude, p.u.
    pub v_true: f64,
    /// Solved voltage angle, radians.
    pub theta_true: f64,
    /// Scheduled generation minus load, p.u., when the case carries it.
    pub injection: Option<Complex64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance; half of it sits at each end.
    pub b_charging: f64,
    /// Off-nominal turns ratio on the from side.
    pub tap: f64,
}

/// Two-port admittance of a branch: `[I_f; I_t] = [[y_ff, y_ft], [y_tf, y_tt]] [U_f; U_t]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoPortAdmittance {
    pub y_ff: Complex64,
    pub y_ft: Complex64,
    pub y_tf: Complex64,
    pub y_tt: Complex64,
}

impl TwoPortAdmittance {
    pub fn from_current(&self, u_from: Complex64, u_to: Complex64) -> Complex64 {
        self.y_ff * u_from + self.y_ft * u_to
    }

    pub fn to_current(&self, u_from: Complex64, u_to: Complex64) -> Complex64 {
        self.y_tf * u_from + self.y_tt * u_to
    }
}

/// Series admittance `y = 1/(r + jx)` with charging `j b/2` at each end and
/// the tap on the from side.
pub fn branch_two_port(branch: &Branch) -> TwoPortAdmittance {
    let y = Complex64::new(1.0, 0.0) / Complex64::new(branch.r, branch.x);
    let y_sh = Complex64::new(0.0, branch.b_charging / 2.0);
    let k = branch.tap;
    TwoPortAdmittance {
        y_ff: (y + y_sh) / (k * k),
        y_ft: -y / k,
        y_tf: -y / k,
        y_tt: y + y_sh,
    }
}

/// Square sparse complex matrix stored as sorted rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: Vec<Vec<(usize, Complex64)>>,
}

impl SparseMatrix {
    fn from_maps(maps: Vec<BTreeMap<usize, Complex64>>) -> Self {
        SparseMatrix {
            rows: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn row(&self, i: usize) -> &[(usize, Complex64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        match self.rows[i].binary_search_by_key(&j, |&(c, _)| c) {
            Ok(k) => self.rows[i][k].1,
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    pub fn mul_vec(&self, u: &[Complex64]) -> Vec<Complex64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, y)| y * u[j]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<Complex64>> {
        let n = self.dim();
        let mut d = vec![vec![Complex64::new(0.0, 0.0); n]; n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, y) in row {
                d[i][j] = y;
            }
        }
        d
    }
}

/// Assemble `Y = G + jB` from branch two-ports and bus shunts.
pub fn build_ybus(buses: &[Bus], branches: &[Branch]) -> SparseMatrix {
    let mut maps: Vec<BTreeMap<usize, Complex64>> = vec![BTreeMap::new(); buses.len()];
    let zero = Complex64::new(0.0, 0.0);
    for br in branches {
        let tp = branch_two_port(br);
        let (f, t) = (br.from_bus, br.to_bus);
        *maps[f].entry(f).or_insert(zero) += tp.y_ff;
        *maps[f].entry(t).or_insert(zero) += tp.y_ft;
        *maps[t].entry(f).or_insert(zero) += tp.y_tf;
        *maps[t].entry(t).or_insert(zero) += tp.y_tt;
    }
    for bus in buses {
        let sh = Complex64::new(bus.shunt_g, bus.shunt_b);
        if sh != zero {
            *maps[bus.id].entry(bus.id).or_insert(zero) += sh;
        }
    }
    SparseMatrix::from_maps(maps)
}

#[derive(Clone, Debug)]
pub struct NetworkModel {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub ybus: SparseMatrix,
    two_ports: Vec<TwoPortAdmittance>,
    ext_index: HashMap<i64, usize>,
    slack: usize,
}

impl NetworkModel {
    /// Validate buses and branches and build the admittance matrix.
    pub fn new(
        name: impl Into<String>,
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
    ) -> Result<Self, CaseError> {
        if buses.is_empty() {
            return Err(CaseError::Validation("case has no buses".into()));
        }
        if !(base_mva > 0.0) {
            return Err(CaseError::Validation(format!("base_mva must be positive, got {base_mva}")));
        }
        let mut ext_index = HashMap::with_capacity(buses.len());
        for (i, bus) in buses.iter().enumerate() {
            if bus.id != i {
                return Err(CaseError::Validation(format!(
                    "bus {} stored at position {i}",
                    bus.id
                )));
            }
            if ext_index.insert(bus.ext_id, i).is_some() {
                return Err(CaseError::Validation(format!("duplicate bus id {}", bus.ext_id)));
            }
            if !(bus.v_true > 0.0) {
                return Err(CaseError::Validation(format!(
                    "bus {}: voltage magnitude must be positive",
                    bus.ext_id
                )));
            }
        }
        let slacks: Vec<usize> = buses.iter().filter(|b| b.is_slack).map(|b| b.id).collect();
        let slack = match slacks.as_slice() {
            [s] => *s,
            [] => return Err(CaseError::Validation("no slack bus".into())),
            _ => {
                return Err(CaseError::Validation(format!(
                    "{} slack buses, expected exactly one",
                    slacks.len()
                )))
            }
        };
        for (k, br) in branches.iter().enumerate() {
            let n = buses.len();
            if br.from_bus >= n || br.to_bus >= n {
                return Err(CaseError::Validation(format!("branch {k}: endpoint out of range")));
            }
            if br.from_bus == br.to_bus {
                return Err(CaseError::Validation(format!("branch {k}: from and to bus coincide")));
            }
            if br.r * br.r + br.x * br.x == 0.0 {
                return Err(CaseError::Validation(format!("branch {k}: zero series impedance")));
            }
            if !(br.tap > 0.0) {
                return Err(CaseError::Validation(format!("branch {k}: tap must be positive")));
            }
        }
        check_connected(buses.len(), &branches)?;
        let ybus = build_ybus(&buses, &branches);
        let two_ports = branches.iter().map(branch_two_port).collect();
        Ok(NetworkModel {
            name: name.into(),
            base_mva,
            buses,
            branches,
            ybus,
            two_ports,
            ext_index,
            slack,
        })
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn two_port(&self, branch: usize) -> &TwoPortAdmittance {
        &self.two_ports[branch]
    }

    /// Dense index of the bus carrying external id `ext`.
    pub fn index_of(&self, ext: i64) -> Option<usize> {
        self.ext_index.get(&ext).copied()
    }

    /// Solved complex bus voltages from the case data.
    pub fn true_voltages(&self) -> Vec<Complex64> {
        self.buses
            .iter()
            .map(|b| Complex64::from_polar(b.v_true, b.theta_true))
            .collect()
    }

    pub fn to_case_file(&self) -> CaseFile {
        CaseFile {
            name: Some(self.name.clone()),
            base_mva: self.base_mva,
            buses: self
                .buses
                .iter()
                .map(|b| {
                    let (pg, qg) = match b.injection {
                        Some(s) => (Some(s.re * self.base_mva), Some(s.im * self.base_mva)),
                        None => (None, None),
                    };
                    BusRecord {
                        id: b.ext_id,
                        slack: b.is_slack,
                        gs: b.shunt_g,
                        bs: b.shunt_b,
                        vm: b.v_true,
                        va_deg: b.theta_true.to_degrees(),
                        pd: pg.map(|_| 0.0),
                        qd: qg.map(|_| 0.0),
                        pg,
                        qg,
                    }
                })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|br| BranchRecord {
                    from: self.buses[br.from_bus].ext_id,
                    to: self.buses[br.to_bus].ext_id,
                    r: br.r,
                    x: br.x,
                    b: br.b_charging,
                    tap: br.tap,
                })
                .collect(),
        }
    }
}

fn check_connected(n: usize, branches: &[Branch]) -> Result<(), CaseError> {
    let mut adj = vec![Vec::new(); n];
    for br in branches {
        adj[br.from_bus].push(br.to_bus);
        adj[br.to_bus].push(br.from_bus);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                queue.push_back(j);
            }
        }
    }
    if count != n {
        return Err(CaseError::Validation(format!(
            "network is not connected ({count} of {n} buses reachable)"
        )));
    }
    Ok(())
}

/// On-disk JSON case. Angles are in degrees; shunts and impedances in p.u.;
/// the optional `pd`/`qd`/`pg`/`qg` are MW/MVAr at the case base.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: i64,
    #[serde(default)]
    pub slack: bool,
    #[serde(default)]
    pub gs: f64,
    #[serde(default)]
    pub bs: f64,
    pub vm: f64,
    pub va_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qg: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BranchRecord {
    pub from: i64,
    pub to: i64,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default = "unit_tap")]
    pub tap: f64,
}

fn unit_tap() -> f64 {
    1.0
}

impl CaseFile {
    pub fn into_model(self, fallback_name: &str) -> Result<NetworkModel, CaseError> {
        let base = self.base_mva;
        let mut buses = Vec::with_capacity(self.buses.len());
        let mut index = HashMap::new();
        for (i, rec) in self.buses.iter().enumerate() {
            if index.insert(rec.id, i).is_some() {
                return Err(CaseError::Validation(format!("duplicate bus id {}", rec.id)));
            }
            let injection = match (rec.pg, rec.qg, rec.pd, rec.qd) {
                (None, None, None, None) => None,
                (pg, qg, pd, qd) => Some(Complex64::new(
                    (pg.unwrap_or(0.0) - pd.unwrap_or(0.0)) / base,
                    (qg.unwrap_or(0.0) - qd.unwrap_or(0.0)) / base,
                )),
            };
            buses.push(Bus {
                id: i,
                ext_id: rec.id,
                is_slack: rec.slack,
                shunt_g: rec.gs,
                shunt_b: rec.bs,
                v_true: rec.vm,
                theta_true: rec.va_deg.to_radians(),
                injection,
            });
        }
        let mut branches = Vec::with_capacity(self.branches.len());
        for (k, rec) in self.branches.iter().enumerate() {
            let lookup = |id: i64| {
                index.get(&id).copied().ok_or_else(|| {
                    CaseError::Validation(format!("branch {k}: unknown bus id {id}"))
                })
            };
            branches.push(Branch {
                from_bus: lookup(rec.from)?,
                to_bus: lookup(rec.to)?,
                r: rec.r,
                x: rec.x,
                b_charging: rec.b,
                tap: rec.tap,
            });
        }
        let name = self.name.unwrap_or_else(|| fallback_name.to_string());
        NetworkModel::new(name, base, buses, branches)
    }
}

fn read_text(path: &Path) -> Result<String, CaseError> {
    fs::read_to_string(path).map_err(|source| CaseError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".to_string())
}

pub fn parse_case_json(text: &str, fallback_name: &str) -> Result<NetworkModel, CaseError> {
    let file: CaseFile = serde_json::from_str(text).map_err(|e| CaseError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    file.into_model(fallback_name)
}

/// Load a case in the native JSON schema.
pub fn load_case(path: impl AsRef<Path>) -> Result<NetworkModel, CaseError> {
    let path = path.as_ref();
    parse_case_json(&read_text(path)?, &file_stem(path))
}

/// Import an IEEE Common Data Format file (bus and branch sections).
pub fn import_cdf(path: impl AsRef<Path>) -> Result<NetworkModel, CaseError> {
    let path = path.as_ref();
    parse_cdf(&read_text(path)?, &file_stem(path))
}

enum Section {
    Idle,
    Bus,
    Branch,
    Skip,
}

/// 1-based inclusive column range of a fixed-width record.
fn column<'a>(
    line: &'a str,
    lineno: usize,
    field: &'static str,
    first: usize,
    last: usize,
) -> Result<&'a str, CaseError> {
    if line.len() < last || !line.is_char_boundary(first - 1) || !line.is_char_boundary(last) {
        return Err(CaseError::MalformedField {
            line: lineno,
            field,
            message: format!("record ends before column {last}"),
        });
    }
    Ok(line[first - 1..last].trim())
}

fn number<T: std::str::FromStr>(
    line: &str,
    lineno: usize,
    field: &'static str,
    first: usize,
    last: usize,
) -> Result<T, CaseError> {
    let raw = column(line, lineno, field, first, last)?;
    let raw = if raw.is_empty() { "0" } else { raw };
    raw.parse().map_err(|_| CaseError::MalformedField {
        line: lineno,
        field,
        message: format!("cannot parse {raw:?}"),
    })
}

pub fn parse_cdf(text: &str, fallback_name: &str) -> Result<NetworkModel, CaseError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, title) = lines.next().ok_or(CaseError::MalformedField {
        line: 1,
        field: "title",
        message: "empty file".into(),
    })?;
    let base_mva: f64 = number(title, 1, "base MVA", 32, 37)?;

    let mut buses = Vec::new();
    let mut raw_branches = Vec::new();
    let mut section = Section::Idle;
    let mut seen_bus = false;
    let mut seen_branch = false;
    let mut last_line = 1;
    for (lineno, line) in lines {
        last_line = lineno;
        match section {
            Section::Idle => {
                if line.starts_with("BUS DATA FOLLOWS") {
                    section = Section::Bus;
                    seen_bus = true;
                } else if line.starts_with("BRANCH DATA FOLLOWS") {
                    section = Section::Branch;
                    seen_branch = true;
                } else if line.starts_with("END OF DATA") {
                    break;
                } else if line.contains("FOLLOWS") {
                    section = Section::Skip;
                }
            }
            Section::Skip => {
                if line.starts_with("-9") {
                    section = Section::Idle;
                }
            }
            Section::Bus => {
                if line.starts_with("-999") {
                    section = Section::Idle;
                    continue;
                }
                let ext: i64 = number(line, lineno, "bus number", 1, 4)?;
                let kind: i64 = number(line, lineno, "bus type", 25, 26)?;
                if !(0..=3).contains(&kind) {
                    return Err(CaseError::UnsupportedRecord {
                        line: lineno,
                        message: format!("bus type {kind}"),
                    });
                }
                let vm: f64 = number(line, lineno, "final voltage", 28, 33)?;
                let va: f64 = number(line, lineno, "final angle", 34, 40)?;
                let pd: f64 = number(line, lineno, "load MW", 41, 49)?;
                let qd: f64 = number(line, lineno, "load MVAR", 50, 58)?;
                let pg: f64 = number(line, lineno, "generation MW", 59, 67)?;
                let qg: f64 = number(line, lineno, "generation MVAR", 68, 75)?;
                let gs: f64 = number(line, lineno, "shunt conductance", 107, 114)?;
                let bs: f64 = number(line, lineno, "shunt susceptance", 115, 122)?;
                buses.push(BusRecord {
                    id: ext,
                    slack: kind == 3,
                    gs,
                    bs,
                    vm,
                    va_deg: va,
                    pd: Some(pd),
                    qd: Some(qd),
                    pg: Some(pg),
                    qg: Some(qg),
                });
            }
            Section::Branch => {
                if line.starts_with("-999") {
                    section = Section::Idle;
                    continue;
                }
                let from: i64 = number(line, lineno, "tap bus number", 1, 4)?;
                let to: i64 = number(line, lineno, "Z bus number", 6, 9)?;
                let kind: i64 = number(line, lineno, "branch type", 19, 19)?;
                if !(0..=3).contains(&kind) {
                    return Err(CaseError::UnsupportedRecord {
                        line: lineno,
                        message: format!("branch type {kind} (phase shifters are not supported)"),
                    });
                }
                let r: f64 = number(line, lineno, "resistance", 20, 29)?;
                let x: f64 = number(line, lineno, "reactance", 30, 40)?;
                let b: f64 = number(line, lineno, "line charging", 41, 50)?;
                let ratio: f64 = number(line, lineno, "turns ratio", 77, 82)?;
                let shift: f64 = if line.len() >= 90 {
                    number(line, lineno, "phase shift", 84, 90)?
                } else {
                    0.0
                };
                if shift != 0.0 {
                    return Err(CaseError::UnsupportedRecord {
                        line: lineno,
                        message: format!("phase shift of {shift} degrees"),
                    });
                }
                raw_branches.push(BranchRecord {
                    from,
                    to,
                    r,
                    x,
                    b,
                    tap: if ratio == 0.0 { 1.0 } else { ratio },
                });
            }
        }
    }
    if matches!(section, Section::Bus | Section::Branch) {
        return Err(CaseError::MalformedField {
            line: last_line,
            field: "section terminator",
            message: "file ends inside a data section".into(),
        });
    }
    if !seen_bus || !seen_branch {
        return Err(CaseError::MalformedField {
            line: last_line,
            field: if seen_bus { "branch data" } else { "bus data" },
            message: "section missing".into(),
        });
    }
    CaseFile {
        name: Some(fallback_name.to_string()),
        base_mva,
        buses,
        branches: raw_branches,
    }
    .into_model(fallback_name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn line(r: f64, x: f64, b: f64, tap: f64) -> Branch {
        Branch {
            from_bus: 0,
            to_bus: 1,
            r,
            x,
            b_charging: b,
            tap,
        }
    }

    const TWO_BUS: &str = r#"{
        "base_mva": 100,
        "buses": [
            {"id": 1, "slack": true, "gs": 0, "bs": 0, "vm": 1.0, "va_deg": 0},
            {"id": 2, "slack": false, "gs": 0, "bs": 0, "vm": 0.98, "va_deg": -3}
        ],
        "branches": [{"from": 1, "to": 2, "r": 0, "x": 0.1, "b": 0, "tap": 1}]
    }"#;

    fn close(a: Complex64, b: Complex64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn two_port_plain_line() {
        let tp = branch_two_port(&line(0.0, 0.1, 0.0, 1.0));
        assert!(close(tp.y_ff, c(0.0, -10.0)));
        assert!(close(tp.y_tt, c(0.0, -10.0)));
        assert!(close(tp.y_ft, c(0.0, 10.0)));
        assert_eq!(tp.y_ft, tp.y_tf);
    }

    #[test]
    fn two_port_with_charging() {
        let tp = branch_two_port(&line(0.0, 0.1, 0.2, 1.0));
        assert!(close(tp.y_ff, c(0.0, -9.9)));
        assert!(close(tp.y_tt, c(0.0, -9.9)));
    }

    #[test]
    fn two_port_transformer() {
        let tp = branch_two_port(&line(0.0, 0.1, 0.0, 2.0));
        assert!(close(tp.y_ff, c(0.0, -2.5)));
        assert!(close(tp.y_ft, c(0.0, 5.0)));
        assert!(close(tp.y_tf, c(0.0, 5.0)));
        assert!(close(tp.y_tt, c(0.0, -10.0)));
    }

    #[test]
    fn two_port_transformer_matches_line_rows_with_unit_tap() {
        // Transformer current row with k = 1 must reproduce the line row bit for bit.
        let br = line(0.02, 0.08, 0.0, 1.0);
        let a = branch_two_port(&br);
        let y = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        assert_eq!(a.y_ff, y / 1.0);
        assert_eq!(a.y_ft, -y);
    }

    #[test]
    fn minimal_case_loads() {
        let net = parse_case_json(TWO_BUS, "two").unwrap();
        assert_eq!(net.n_buses(), 2);
        assert_eq!(net.n_branches(), 1);
        assert_eq!(net.slack(), 0);
        assert!((net.buses[1].theta_true + 3f64.to_radians()).abs() < 1e-15);
        let y = net.ybus.to_dense();
        assert!(close(y[0][0], c(0.0, -10.0)));
        assert!(close(y[0][1], c(0.0, 10.0)));
        assert!(close(y[1][0], c(0.0, 10.0)));
        assert!(close(y[1][1], c(0.0, -10.0)));
    }

    #[test]
    fn bus_shunt_enters_diagonal() {
        let text = TWO_BUS.replace(r#""id": 1, "slack": true, "gs": 0, "bs": 0"#, r#""id": 1, "slack": true, "gs": 0, "bs": 0.05"#);
        let net = parse_case_json(&text, "two").unwrap();
        assert!(close(net.ybus.get(0, 0), c(0.0, -9.95)));
    }

    #[test]
    fn missing_branches_key_is_named() {
        let text = r#"{"base_mva": 100, "buses": [{"id": 1, "slack": true, "vm": 1, "va_deg": 0}]}"#;
        match parse_case_json(text, "x") {
            Err(CaseError::Parse { message, .. }) => assert!(message.contains("branches"), "{message}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_position() {
        let text = "{\n  \"base_mva\": 100,\n  \"buses\": [ oops ]\n}";
        match parse_case_json(text, "x") {
            Err(CaseError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn validation_failures() {
        let dup = TWO_BUS.replace(r#""id": 2"#, r#""id": 1"#);
        assert!(matches!(parse_case_json(&dup, "x"), Err(CaseError::Validation(m)) if m.contains("duplicate")));

        let dangling = TWO_BUS.replace(r#""to": 2"#, r#""to": 7"#);
        assert!(matches!(parse_case_json(&dangling, "x"), Err(CaseError::Validation(m)) if m.contains("unknown bus")));

        let zero = TWO_BUS.replace(r#""x": 0.1"#, r#""x": 0"#);
        assert!(matches!(parse_case_json(&zero, "x"), Err(CaseError::Validation(m)) if m.contains("zero series")));

        let no_slack = TWO_BUS.replace(r#""slack": true"#, r#""slack": false"#);
        assert!(matches!(parse_case_json(&no_slack, "x"), Err(CaseError::Validation(m)) if m.contains("no slack")));

        let two_slack = TWO_BUS.replace(r#""slack": false"#, r#""slack": true"#);
        assert!(matches!(parse_case_json(&two_slack, "x"), Err(CaseError::Validation(_))));

        let self_loop = TWO_BUS.replace(r#""to": 2"#, r#""to": 1"#);
        assert!(matches!(parse_case_json(&self_loop, "x"), Err(CaseError::Validation(_))));
    }

    #[test]
    fn disconnected_network_rejected() {
        let text = r#"{
            "base_mva": 100,
            "buses": [
                {"id": 1, "slack": true, "vm": 1.0, "va_deg": 0},
                {"id": 2, "vm": 1.0, "va_deg": 0},
                {"id": 3, "vm": 1.0, "va_deg": 0}
            ],
            "branches": [{"from": 1, "to": 2, "r": 0, "x": 0.1}]
        }"#;
        assert!(matches!(parse_case_json(text, "x"), Err(CaseError::Validation(m)) if m.contains("not connected")));
    }

    #[test]
    fn ybus_row_sums_equal_shunts_for_unit_taps() {
        let text = r#"{
            "base_mva": 100,
            "buses": [
                {"id": 10, "slack": true, "gs": 0.01, "bs": 0.2, "vm": 1.0, "va_deg": 0},
                {"id": 20, "vm": 1.0, "va_deg": 0},
                {"id": 30, "bs": -0.1, "vm": 1.0, "va_deg": 0}
            ],
            "branches": [
                {"from": 10, "to": 20, "r": 0.01, "x": 0.1, "b": 0.04},
                {"from": 20, "to": 30, "r": 0.02, "x": 0.2, "b": 0.02},
                {"from": 20, "to": 30, "r": 0.03, "x": 0.15, "b": 0.0}
            ]
        }"#;
        let net = parse_case_json(text, "x").unwrap();
        let expected = [c(0.01, 0.2 + 0.02), c(0.0, 0.02 + 0.01), c(0.0, -0.1 + 0.01)];
        for i in 0..3 {
            let sum: Complex64 = net.ybus.row(i).iter().map(|&(_, y)| y).sum();
            assert!((sum - expected[i]).norm() < 1e-12, "row {i}: {sum}");
        }
        // parallel branches accumulate off-diagonal
        let y1 = Complex64::new(1.0, 0.0) / c(0.02, 0.2);
        let y2 = Complex64::new(1.0, 0.0) / c(0.03, 0.15);
        assert!(close(net.ybus.get(1, 2), -(y1 + y2)));
        assert_eq!(net.index_of(30), Some(2));
    }
}
