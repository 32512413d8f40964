//! Configuration, experiment orchestration, reports and the command line.

use crate::error::{Error, Result};
use crate::field::{AxisWave, FieldDescriptor, Grid, ScalarField, TimeGrid, VectorField, Wave};
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

/// Flat `key = value` configuration with dotted keys. `#` starts a comment.
/// Defaults handed out by the typed getters are remembered so that reports
/// can list the fully resolved configuration.
#[derive(Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
    defaults: Mutex<BTreeMap<String, String>>,
}

impl Clone for Config {
    fn clone(&self) -> Self {
        Self { entries: self.entries.clone(), defaults: Mutex::new(self.used_defaults()) }
    }
}

impl PartialEq for Config {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: invalid key `{key}`", no + 1)));
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", no + 1)));
            }
        }
        Ok(Self { entries, defaults: Mutex::default() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    fn used_defaults(&self) -> BTreeMap<String, String> {
        self.defaults.lock().map(|d| d.clone()).unwrap_or_default()
    }

    /// Explicit entries plus every default consulted so far.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut all = self.used_defaults();
        all.extend(self.entries.clone());
        all
    }

    fn note_default(&self, key: &str, value: String) {
        if !self.entries.contains_key(key) {
            if let Ok(mut d) = self.defaults.lock() {
                d.insert(key.to_string(), value);
            }
        }
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("`{key}` has invalid value `{s}`"))),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.parsed::<f64>(key)?;
        if v.is_none() {
            self.note_default(key, default.to_string());
        }
        Ok(v.unwrap_or(default))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.parsed::<usize>(key)?;
        if v.is_none() {
            self.note_default(key, default.to_string());
        }
        Ok(v.unwrap_or(default))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        let v = self.parsed::<u64>(key)?;
        if v.is_none() {
            self.note_default(key, default.to_string());
        }
        Ok(v.unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        let v = self.parsed::<bool>(key)?;
        if v.is_none() {
            self.note_default(key, default.to_string());
        }
        Ok(v.unwrap_or(default))
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.note_default(key, default.to_string());
        self.get(key).unwrap_or(default)
    }

    pub fn f64_list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        let v = self.f64_list(key)?;
        if v.is_none() {
            self.note_default(key, default.iter().map(f64::to_string).collect::<Vec<_>>().join(", "));
        }
        Ok(v.unwrap_or_else(|| default.to_vec()))
    }

    /// Comma-separated reals; `inf` is accepted.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("`{key}` has invalid entry `{}`", t.trim())))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    pub fn grid(&self, prefix: &str, dim: usize, length: f64, points: usize) -> Result<Grid> {
        Grid::new(
            self.usize_or(&format!("{prefix}.dim"), dim)?,
            self.f64_or(&format!("{prefix}.length"), length)?,
            self.usize_or(&format!("{prefix}.points"), points)?,
        )
    }

    pub fn time_grid(&self, prefix: &str, t0: f64, t1: f64, steps: usize) -> Result<TimeGrid> {
        TimeGrid::new(
            self.f64_or(&format!("{prefix}.t0"), t0)?,
            self.f64_or(&format!("{prefix}.t1"), t1)?,
            self.usize_or(&format!("{prefix}.steps"), steps)?,
        )
    }

    /// Reads `<prefix>.kind` in {constant, mode, gaussian, random} and its
    /// parameters. Returns `None` when the kind is absent.
    pub fn descriptor(&self, prefix: &str, grid: Grid) -> Result<Option<FieldDescriptor>> {
        let key = |s: &str| format!("{prefix}.{s}");
        let kind = match self.get(&key("kind")) {
            None => return Ok(None),
            Some(k) => k,
        };
        let d = match kind {
            "constant" => FieldDescriptor::Constant(self.f64_or(&key("value"), 0.0)?),
            "mode" => {
                let numbers = self.f64_list(&key("numbers"))?.unwrap_or_else(|| vec![1.0]);
                let wave = match self.str_or(&key("wave"), "sin") {
                    "sin" => Wave::Sin,
                    "cos" => Wave::Cos,
                    w => return Err(Error::Config(format!("`{}` must be sin or cos, got `{w}`", key("wave")))),
                };
                FieldDescriptor::Mode {
                    amplitude: self.f64_or(&key("amplitude"), 1.0)?,
                    waves: numbers.iter().map(|&m| AxisWave { wave, number: m as i32 }).collect(),
                }
            }
            "gaussian" => FieldDescriptor::Gaussian {
                center: self.f64_list(&key("center"))?.unwrap_or_else(|| vec![0.5 * grid.length; grid.dim]),
                sigma: self.f64_or(&key("sigma"), 0.1 * grid.length)?,
                amplitude: self.f64_or(&key("amplitude"), 1.0)?,
            },
            "random" => FieldDescriptor::Random {
                seed: self.u64_or(&key("seed"), self.u64_or("seed", 0)? ^ prefix_salt(prefix))?,
                max_mode: self.usize_or(&key("max_mode"), 2)? as u32,
                amplitude: self.f64_or(&key("amplitude"), 1.0)?,
            },
            other => return Err(Error::Config(format!("unknown field kind `{other}` for `{}`", key("kind")))),
        };
        Ok(Some(d))
    }

    /// Samples `<prefix>` (plus `<prefix>.offset`), or `fallback` when absent.
    pub fn field(&self, prefix: &str, grid: Grid, fallback: FieldDescriptor) -> Result<ScalarField> {
        let d = self.descriptor(prefix, grid)?.unwrap_or(fallback);
        let offset = self.f64_or(&format!("{prefix}.offset"), 0.0)?;
        let f = crate::field::sample_field(grid, &d).map_err(|e| Error::Config(format!("`{prefix}`: {e}")))?;
        Ok(f.map(|x| x + offset))
    }
}

/// Stable per-prefix salt so that fields sharing the global seed differ.
fn prefix_salt(prefix: &str) -> u64 {
    prefix.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Formats a float with 17 significant digits; non-finite values become `null`.
pub fn json_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".to_string()
    }
}

/// Serializes `value` with sorted object keys, two-space indentation and
/// every float printed by [`json_float`].
pub fn to_json_string(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, 0, &mut out);
    out.push('\n');
    out
}

fn write_value(value: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                out.push_str(&json_float(n.as_f64().unwrap_or(f64::NAN)));
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_value(item, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let sorted: BTreeMap<&String, &Value> = map.iter().collect();
            out.push_str("{\n");
            for (i, (k, v)) in sorted.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push_str(": ");
                write_value(v, indent + 1, out);
                out.push_str(if i + 1 < sorted.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

/// How a measured value is compared with its expectation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comparison {
    AtMost,
    AtLeast,
    /// `|measured − expected| ≤ tolerance`.
    Within,
}

impl Comparison {
    fn as_str(self) -> &'static str {
        match self {
            Comparison::AtMost => "<=",
            Comparison::AtLeast => ">=",
            Comparison::Within => "within",
        }
    }
}

/// One machine-checkable assertion in a report.
#[derive(Clone, Debug, PartialEq)]
pub struct Criterion {
    pub name: String,
    pub measured: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
    /// What the expectation rests on: `closed-form`, `refinement`, `bound` or `consistency`.
    pub basis: String,
    pub passed: bool,
}

impl Criterion {
    pub fn new(name: &str, measured: f64, expected: f64, tolerance: f64, comparison: Comparison, basis: &str) -> Self {
        let passed = measured.is_finite()
            && match comparison {
                Comparison::AtMost => measured <= expected + tolerance,
                Comparison::AtLeast => measured >= expected - tolerance,
                Comparison::Within => (measured - expected).abs() <= tolerance,
            };
        Self { name: name.into(), measured, expected, tolerance, comparison, basis: basis.into(), passed }
    }

    pub fn at_most(name: &str, measured: f64, limit: f64, basis: &str) -> Self {
        Self::new(name, measured, limit, 0.0, Comparison::AtMost, basis)
    }

    pub fn at_least(name: &str, measured: f64, limit: f64, basis: &str) -> Self {
        Self::new(name, measured, limit, 0.0, Comparison::AtLeast, basis)
    }

    pub fn within(name: &str, measured: f64, expected: f64, tol: f64, basis: &str) -> Self {
        Self::new(name, measured, expected, tol, Comparison::Within, basis)
    }

    fn to_json(&self) -> Value {
        json!({
            "name": self.name,
            "measured": self.measured,
            "expected": self.expected,
            "tolerance": self.tolerance,
            "comparison": self.comparison.as_str(),
            "basis": self.basis,
            "passed": self.passed,
        })
    }
}

/// Experiment outcome. Wall-clock time is kept out of `report.json` so that
/// repeated runs produce identical bytes; it goes to `timing.json`.
#[derive(Clone, Debug)]
pub struct Report {
    pub experiment: String,
    pub criteria: Vec<Criterion>,
    pub measurements: BTreeMap<String, f64>,
    pub details: Map<String, Value>,
    pub config: BTreeMap<String, String>,
    pub wall_clock: f64,
}

impl Report {
    pub fn new(experiment: &str, config: &Config) -> Self {
        Self {
            experiment: experiment.into(),
            criteria: Vec::new(),
            measurements: BTreeMap::new(),
            details: Map::new(),
            config: config.entries().clone(),
            wall_clock: 0.0,
        }
    }

    pub fn check(&mut self, c: Criterion) -> bool {
        let ok = c.passed;
        self.criteria.push(c);
        ok
    }

    pub fn measure(&mut self, key: &str, value: f64) {
        self.measurements.insert(key.into(), value);
    }

    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "experiment": self.experiment,
            "criteria": self.criteria.iter().map(Criterion::to_json).collect::<Vec<_>>(),
            "measurements": self.measurements,
            "details": Value::Object(self.details.clone()),
            "config": self.config,
            "passed": self.passed(),
            "scheme_version": crate::kssim::SCHEME_VERSION,
            "version": env!("CARGO_PKG_VERSION"),
        })
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.json` and `timing.json` into `dir`, creating it if needed.
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("report.json"), to_json_string(&report.to_json()).as_bytes())?;
    let timing = json!({ "experiment": report.experiment, "wall_clock_seconds": report.wall_clock });
    write_file(&dir.join("timing.json"), to_json_string(&timing).as_bytes())
}

/// Writes a CSV (or any text artifact) produced by `fill` into `dir/name`.
pub fn write_artifact(
    dir: &Path,
    name: &str,
    fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    let mut buf = Vec::new();
    fill(&mut buf).map_err(|e| Error::io(&path, e))?;
    write_file(&path, &buf)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Experiments

use crate::dual::{self, DualProblem, PicardOptions, Snapshots};
use crate::green::{self, Coefficients, GreenOptions, SourcePoint};
use crate::kssim::{self, KSParams, KSState};
use crate::spectral::{self, SmoothingFamily, SpectralPlan};

/// Values of [`Criterion::basis`].
pub const CLOSED_FORM: &str = "closed-form";
pub const REFINEMENT: &str = "refinement";
pub const BOUND: &str = "bound";
pub const CONSISTENCY: &str = "consistency";

fn green_options(cfg: &Config) -> Result<GreenOptions> {
    let d = GreenOptions::default();
    let max_dt = cfg.f64_or("green.max_dt", 0.0)?;
    Ok(GreenOptions {
        epsilon_cells: cfg.f64_or("green.epsilon_cells", d.epsilon_cells)?,
        mollifier_cells: cfg.f64_or("green.mollifier_cells", d.mollifier_cells)?,
        max_dt: (max_dt > 0.0).then_some(max_dt),
        agreement_tol: cfg.f64_or("green.agreement_tol", d.agreement_tol)?,
        failure_tol: cfg.f64_or("green.failure_tol", d.failure_tol)?,
        three_level: cfg.bool_or("green.three_level", d.three_level)?,
    })
}

/// `coeffs.kind` in {zero, constant, synthetic}.
fn coefficients(cfg: &Config, plan: &SpectralPlan, t1: f64) -> Result<Coefficients> {
    let grid = plan.grid();
    match cfg.str_or("coeffs.kind", "zero") {
        "zero" => Ok(Coefficients::zero(grid)),
        "constant" => {
            let drift = cfg.f64_list_or("coeffs.drift", &vec![0.0; grid.dim])?;
            Coefficients::constant(grid, &drift, cfg.f64_or("coeffs.potential", 0.0)?)
        }
        "synthetic" => Coefficients::synthetic(
            plan,
            cfg.u64_or("coeffs.seed", cfg.u64_or("seed", 0)?)?,
            cfg.f64_or("coeffs.drift_amp", 1.0)?,
            cfg.f64_or("coeffs.potential_amp", 1.0)?,
            0.0,
            t1,
            cfg.usize_or("coeffs.samples", 8)?,
        ),
        other => Err(Error::Config(format!("unknown coefficient kind `{other}` for `coeffs.kind`"))),
    }
}

/// Node nearest to `source.center` (default: box centre).
fn source_node(cfg: &Config, grid: Grid) -> Result<usize> {
    let center = cfg.f64_list_or("source.center", &vec![0.5 * grid.length; grid.dim])?;
    if center.len() != grid.dim {
        return Err(Error::Config(format!("`source.center` needs {} entries", grid.dim)));
    }
    let h = grid.spacing();
    let mut idx = [0usize; 3];
    for (d, c) in center.iter().enumerate() {
        idx[d] = ((c / h).round() as i64).rem_euclid(grid.points as i64) as usize;
    }
    Ok(grid.flat_index(idx))
}

/// Periodic heat kernel `Σ_m (4πτ)^{-n/2} exp(−|x−y+mL|²/4τ)`, images `|m_d| ≤ 3`.
fn periodic_heat_kernel(grid: Grid, y: usize, tau: f64) -> ScalarField {
    let yc = grid.coords(y);
    let norm = (4.0 * std::f64::consts::PI * tau).powf(-(grid.dim as f64) / 2.0);
    ScalarField::from_fn(grid, |x| {
        (0..grid.dim)
            .map(|d| {
                (-3..=3)
                    .map(|m| {
                        let r = x[d] - yc[d] + m as f64 * grid.length;
                        (-r * r / (4.0 * tau)).exp()
                    })
                    .sum::<f64>()
            })
            .product::<f64>()
            * norm
    })
}

fn timed(cfg: &Config, f: impl FnOnce() -> Result<Report>) -> Result<Report> {
    let start = std::time::Instant::now();
    let mut report = f()?;
    report.config = cfg.resolved();
    report.wall_clock = start.elapsed().as_secs_f64();
    Ok(report)
}

fn mass_criteria(report: &mut Report, coeffs: &Coefficients, slices: &[ScalarField]) {
    let masses: Vec<f64> = slices.iter().map(crate::field::integrate).collect();
    let worst_neg = slices.iter().map(|s| (-s.min() / s.max().max(1e-300)).max(0.0)).fold(0.0, f64::max);
    report.check(Criterion::at_most("positivity_deficit", worst_neg, 1e-8, BOUND));
    if !coeffs.has_potential() {
        let gap = masses.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
        report.check(Criterion::at_most("mass_deviation", gap, 1e-6, CLOSED_FORM));
    } else {
        let rise = masses.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        report.check(Criterion::at_most("mass_increase", rise.max(0.0), 1e-8, BOUND));
    }
    report.details.insert("masses".into(), json!(masses));
}

/// Fundamental solution at `green.cells` multiples of `h` in `√τ`.
pub fn run_green(cfg: &Config, out: Option<&Path>) -> Result<Report> {
    timed(cfg, || {
        let grid = cfg.grid("grid", 1, 1.0, 256)?;
        let plan = SpectralPlan::new(grid);
        let h = grid.spacing();
        let s = cfg.f64_or("source.time", 0.0)?;
        let taus: Vec<f64> = match cfg.f64_list("green.taus")? {
            Some(t) => t,
            None => cfg
                .f64_list_or("green.cells", &[6.0, 8.0, 12.0])?
                .iter()
                .map(|k| (k * h).powi(2))
                .collect(),
        };
        let times: Vec<f64> = taus.iter().map(|t| s + t).collect();
        let coeffs = coefficients(cfg, &plan, times.iter().copied().fold(s, f64::max))?;
        let y = source_node(cfg, grid)?;
        let table = green::green_function_at(&plan, &coeffs, SourcePoint { time: s, node: y }, &times, &green_options(cfg)?)?;
        let mut report = Report::new("green", cfg);
        if let Some(a) = table.agreement {
            report.measure("agreement", a);
        }
        report.details.insert("converged".into(), json!(table.converged));
        report.details.insert("taus".into(), json!(taus));
        mass_criteria(&mut report, &coeffs, &table.slices);
        if !coeffs.has_drift() && !coeffs.has_potential() {
            let floor = cfg.f64_or("green.bulk_floor", 1e-6)?;
            let gap = taus
                .iter()
                .zip(&table.slices)
                .map(|(&tau, g)| green::bulk_relative_gap(&periodic_heat_kernel(grid, y, tau), g, floor))
                .fold(0.0, f64::max);
            report.check(Criterion::at_most("heat_kernel_gap", gap, cfg.f64_or("green.gap_tol", 0.01)?, CLOSED_FORM));
        }
        if let Some(dir) = out {
            write_artifact(dir, "green.csv", |w| table.write_csv(w))?;
        }
        Ok(report)
    })
}

/// Gaussian and derivative envelope fits over `[0, envelope.t1]`.
pub fn run_envelope(cfg: &Config, out: Option<&Path>) -> Result<Report> {
    timed(cfg, || {
        let grid = cfg.grid("grid", 1, 8.0, 256)?;
        let plan = SpectralPlan::new(grid);
        let tg = cfg.time_grid("envelope", 0.0, 0.5, 20)?;
        let coeffs = coefficients(cfg, &plan, tg.t1)?;
        let y = source_node(cfg, grid)?;
        let floor = cfg.f64_or("envelope.floor", 1e-8)?;
        let table = green::green_function(&plan, &coeffs, SourcePoint { time: tg.t0, node: y }, tg, &green_options(cfg)?)?;
        let fit = green::envelope_fit(&table, floor)?;
        let min_tau = 36.0 * grid.spacing().powi(2);
        let keep: Vec<usize> = (0..table.times.len()).filter(|&i| table.times[i] - table.effective_time >= min_tau).collect();
        let resolved = green::GreenTable {
            times: keep.iter().map(|&i| table.times[i]).collect(),
            slices: keep.iter().map(|&i| table.slices[i].clone()).collect(),
            ..table.clone()
        };
        let deriv = green::derivative_envelope_check(&plan, &resolved, floor)?;
        let mut report = Report::new("envelope", cfg);
        let free = !coeffs.has_drift() && !coeffs.has_potential();
        let n = grid.dim as f64;
        if free {
            let c0 = (4.0 * std::f64::consts::PI).powf(-n / 2.0);
            report.check(Criterion::within("c_fit", fit.c_rate, 0.25, 0.01, CLOSED_FORM));
            report.check(Criterion::within("C_fit", fit.c_const, c0, 0.05 * c0, CLOSED_FORM));
            for d in [&deriv.first, &deriv.second] {
                let e = d.expected_exponent;
                report.check(Criterion::within(&format!("tau_exponent_{}", d.order), d.tau_exponent, e, 0.1 * e, CLOSED_FORM));
            }
        } else {
            report.check(Criterion::at_least("c_fit", fit.c_rate, 0.20, BOUND));
            report.measure("C_fit", fit.c_const);
            for d in [&deriv.first, &deriv.second] {
                report.measure(&format!("tau_exponent_{}", d.order), d.tau_exponent);
            }
        }
        report.check(Criterion::at_most("violation_fraction", fit.violation_fraction, 0.01, BOUND));
        for d in [&deriv.first, &deriv.second] {
            report.check(Criterion::at_most(&format!("violation_fraction_{}", d.order), d.violation_fraction, 0.01, BOUND));
            report.measure(&format!("c_rate_{}", d.order), d.c_rate);
        }
        report.measure("rms_residual", fit.rms_residual);
        report.details.insert("window".into(), json!(fit.window));
        if let Some(dir) = out {
            write_artifact(dir, "green.csv", |w| table.write_csv(w))?;
        }
        Ok(report)
    })
}

fn parse_exponent(s: &str) -> Result<f64> {
    match s.trim() {
        "inf" => Ok(f64::INFINITY),
        t => t.parse().map_err(|_| Error::Config(format!("bad exponent `{t}` in `smoothing.pairs`"))),
    }
}

/// Smoothing-rate fits for `smoothing.pairs = p:r,...` over geometric times.
pub fn run_smoothing(cfg: &Config, _out: Option<&Path>) -> Result<Report> {
    timed(cfg, || {
        let grid = cfg.grid("grid", 2, 1.0, 256)?;
        let plan = SpectralPlan::new(grid);
        let h = grid.spacing();
        let t0 = cfg.f64_or("smoothing.t_min", 24.0 * h * h)?;
        let t1 = cfg.f64_or("smoothing.t_max", (grid.length / 8.0).powi(2))?;
        let count = cfg.usize_or("smoothing.samples", 9)?.max(2);
        let times: Vec<f64> = (0..count).map(|j| t0 * (t1 / t0).powf(j as f64 / (count - 1) as f64)).collect();
        let family = spectral::bump_family(grid, true);
        let mut report = Report::new("smoothing", cfg);
        let run = |pairs: &str, gradient: bool, tol: f64, report: &mut Report| -> Result<()> {
            for pair in pairs.split(',').filter(|s| !s.trim().is_empty()) {
                let (ps, rs) = pair
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("pair `{pair}` must read p:r")))?;
                let (p, r) = (parse_exponent(ps)?, parse_exponent(rs)?);
                let fit = spectral::verify_smoothing(&plan, p, r, &SmoothingFamily::Scalar(family.clone()), &times, gradient)?;
                let name = format!("{}slope_{}_{}", if gradient { "grad_" } else { "" }, ps.trim(), rs.trim());
                report.check(Criterion::within(&name, fit.slope, fit.expected_slope, tol, CLOSED_FORM));
            }
            Ok(())
        };
        run(cfg.str_or("smoothing.pairs", "1:inf,1:2,2:2"), false, 0.08, &mut report)?;
        run(cfg.str_or("smoothing.gradient_pairs", "1:2,1:inf"), true, 0.1, &mut report)?;
        Ok(report)
    })
}

/// Composition residual `Γ(t,s)` vs `Γ(t,r)∘Γ(r,s)`.
pub fn chapman_kolmogorov_experiment(cfg: &Config) -> Result<Report> {
    timed(cfg, || {
        let grid = cfg.grid("grid", 1, 4.0, 128)?;
        let plan = SpectralPlan::new(grid);
        let (s, r, t) = (cfg.f64_or("ck.s", 0.0)?, cfg.f64_or("ck.r", 0.15)?, cfg.f64_or("ck.t", 0.3)?);
        let coeffs = coefficients(cfg, &plan, t)?;
        let y = source_node(cfg, grid)?;
        let ck = green::chapman_kolmogorov_residual(&plan, &coeffs, s, r, t, y, &green_options(cfg)?)?;
        let mut report = Report::new("chapman_kolmogorov", cfg);
        let free = !coeffs.has_drift() && !coeffs.has_potential();
        let tol = if free { 0.01 } else { 0.03 };
        report.check(Criterion::at_most("ck_residual", ck.residual, tol, CONSISTENCY));
        report.measure("sources", ck.sources as f64);
        Ok(report)
    })
}

/// `cfg.field` with an offset applied only when the field is not configured.
fn field_or(cfg: &Config, prefix: &str, grid: Grid, fallback: FieldDescriptor, offset: f64) -> Result<ScalarField> {
    let configured = cfg.get(&format!("{prefix}.kind")).is_some();
    let f = cfg.field(prefix, grid, fallback)?;
    Ok(if configured { f } else { f.map(|x| x + offset) })
}

fn random_descriptor(cfg: &Config, prefix: &str, amplitude: f64) -> Result<FieldDescriptor> {
    Ok(FieldDescriptor::Random { seed: cfg.u64_or("seed", 0)? ^ prefix_salt(prefix), max_mode: 2, amplitude })
}

/// Coupled-system parameters and initial state from `ks.alpha`, `phi`, `eta0`, `c0`.
fn ks_setup(cfg: &Config, grid: Grid) -> Result<(KSParams, KSState, Vec<String>)> {
    let phi = cfg.field("phi", grid, random_descriptor(cfg, "phi", 1.0)?)?;
    let (mut params, warnings) = KSParams::new(cfg.f64_or("ks.alpha", 0.5)?, phi)?;
    params.safety = cfg.f64_or("ks.safety", params.safety)?;
    let mut state = KSState::zeros(grid);
    state.eta = field_or(cfg, "eta0", grid, random_descriptor(cfg, "eta0", 0.5)?, 1.0)?;
    state.c = field_or(cfg, "c0", grid, random_descriptor(cfg, "c0", 0.5)?, 1.0)?;
    Ok((params, state, warnings))
}

fn invariant_criteria(report: &mut Report, sim: &kssim::Simulation) {
    let d = &sim.diagnostics;
    let min_eta = d.iter().map(|x| x.min_eta).fold(f64::INFINITY, f64::min);
    let m0 = d[0].mass;
    let drift = d.iter().map(|x| (x.mass - m0).abs()).fold(0.0, f64::max) / m0.abs().max(1e-300);
    let c_rise = d.windows(2).map(|w| w[1].c_inf - w[0].c_inf).fold(0.0, f64::max);
    let div = d.iter().map(|x| x.div_res).fold(0.0, f64::max);
    report.check(Criterion::at_least("min_eta", min_eta, 0.0, BOUND));
    report.check(Criterion::at_most("mass_drift", drift, 1e-8, CONSISTENCY));
    report.check(Criterion::at_most("c_inf_increase", c_rise, 0.0, BOUND));
    report.check(Criterion::at_most("divergence_residual", div, 1e-8, CONSISTENCY));
}

/// Coupled run with invariant checks; `reconstruct = true` adds the
/// mild-form reconstructions of `v` and `c`.
pub fn run_simulate(cfg: &Config, out: Option<&Path>) -> Result<Report> {
    timed(cfg, || {
        let grid = cfg.grid("grid", 2, 1.0, 32)?;
        let plan = SpectralPlan::new(grid);
        let tg = cfg.time_grid("time", 0.0, 0.1, 50)?;
        let (params, state, warnings) = ks_setup(cfg, grid)?;
        let sim = kssim::run_simulation(&plan, &params, &state, &tg)?;
        let mut report = Report::new("simulate", cfg);
        invariant_criteria(&mut report, &sim);
        report.measure("steps", sim.steps as f64);
        let last = sim.diagnostics.last().copied();
        report.details.insert("final_diagnostics".into(), json!(last));
        report.details.insert("warnings".into(), json!(warnings.iter().chain(&sim.warnings).collect::<Vec<_>>()));
        if cfg.bool_or("reconstruct", false)? {
            let mut copts = kssim::CReconstructOptions { stride: cfg.usize_or("reconstruct.stride", 5)?, ..Default::default() };
            copts.duhamel.method = match cfg.str_or("reconstruct.method", "averaged") {
                "averaged" => green::GreenMethod::Averaged,
                "full" => green::GreenMethod::Full,
                m => return Err(Error::Config(format!("`reconstruct.method` must be averaged or full, got `{m}`"))),
            };
            copts.duhamel.green.max_dt = Some(cfg.f64_or("reconstruct.max_dt", 0.005)?);
            let with_c = cfg.bool_or("reconstruct.c", true)?;
            let rec = kssim::reconstruct_fields(&plan, &params, &sim, with_c.then_some(&copts))?;
            let tol = cfg.f64_or("reconstruct.tol", 0.05)?;
            report.check(Criterion::at_most("v_reconstruction", rec.v_error, tol, CONSISTENCY));
            match rec.c_error {
                Some(e) => {
                    report.check(Criterion::at_most("c_reconstruction", e, tol, CONSISTENCY));
                }
                None => {
                    report.details.insert("c_skipped".into(), json!(rec.c_skipped));
                }
            }
        }
        if let Some(dir) = out {
            write_artifact(dir, "trajectory.csv", |w| kssim::write_trajectory_csv(&sim, w))?;
            write_artifact(dir, "diagnostics.csv", |w| kssim::write_diagnostics_csv(&sim, w))?;
            let summary = kssim::summary_json(&sim, &params);
            write_artifact(dir, "summary.json", |w| std::io::Write::write_all(w, to_json_string(&summary).as_bytes()))?;
        }
        Ok(report)
    })
}

/// Porous-medium runs from Barenblatt data (`φ = 0`, `c = 0`).
pub fn barenblatt_experiment(cfg: &Config) -> Result<Report> {
    timed(cfg, || {
        let grid = cfg.grid("grid", 1, 10.0, 128)?;
        let plan = SpectralPlan::new(grid);
        let tg = cfg.time_grid("time", 0.1, 0.5, 8)?;
        let mass = cfg.f64_or("barenblatt.c0", 1.0)?;
        let center = [0.5 * grid.length; 3];
        let mut report = Report::new("barenblatt", cfg);
        for alpha in cfg.f64_list_or("barenblatt.alphas", &[0.25, 0.5, 1.0])? {
            let (params, _) = KSParams::new(alpha, ScalarField::zeros(grid))?;
            let mut state = KSState::zeros(grid);
            state.eta = kssim::barenblatt(grid, center, alpha, mass, tg.t0);
            let sim = kssim::run_simulation(&plan, &params, &state, &tg)?;
            let exact = kssim::barenblatt(grid, center, alpha, mass, tg.t1);
            let gap = crate::field::integrate(&sim.final_state().eta.sub(&exact).map(f64::abs))
                / crate::field::integrate(&exact.map(f64::abs));
            let log_t: Vec<f64> = sim.times().iter().map(|t| t.ln()).collect();
            let log_r: Vec<f64> = sim.states.iter().map(|s| kssim::support_radius(&s.eta, center, 1e-3).ln()).collect();
            let (slope, _, _) = spectral::linear_fit(&log_t, &log_r);
            let expected = kssim::barenblatt_exponent(grid.dim, alpha);
            report.check(Criterion::at_most(&format!("l1_gap_alpha_{alpha}"), gap, 0.05, CLOSED_FORM));
            report.check(Criterion::within(&format!("support_exponent_alpha_{alpha}"), slope, expected, 0.05 * expected, CLOSED_FORM));
        }
        Ok(report)
    })
}

fn picard_options(cfg: &Config) -> Result<PicardOptions> {
    let d = PicardOptions::default();
    Ok(PicardOptions {
        tol: cfg.f64_or("dual.tol", d.tol)?,
        max_iter: cfg.usize_or("dual.max_iter", d.max_iter)?,
        escalate: cfg.bool_or("dual.escalate", d.escalate)?,
        mu_start: cfg.f64_or("dual.mu_start", d.mu_start)?,
        mu_cap: cfg.f64_or("dual.mu_cap", d.mu_cap)?,
        ratio_limit: cfg.f64_or("dual.ratio_limit", d.ratio_limit)?,
        s: cfg.f64_or("dual.s", d.s)?,
        p: cfg.f64_or("dual.p", d.p)?,
    })
}

/// Snapshots for the dual problem: `dual.snapshots = coupled` pairs two runs
/// whose initial densities differ by the `perturb` field; `synthetic` uses
/// seeded closed-form histories.
fn dual_snapshots(cfg: &Config, plan: &SpectralPlan) -> Result<Snapshots> {
    let grid = plan.grid();
    let tg = cfg.time_grid("dual.time", 0.0, 0.1, 32)?;
    match cfg.str_or("dual.snapshots", "coupled") {
        "coupled" => {
            let (params, first, _) = ks_setup(cfg, grid)?;
            let mut second = first.clone();
            second.eta = first.eta.add(&cfg.field("perturb", grid, random_descriptor(cfg, "perturb", 0.05)?)?);
            let a = kssim::run_simulation(plan, &params, &first, &tg)?;
            let b = kssim::run_simulation(plan, &params, &second, &tg)?;
            Snapshots::from_simulations(plan, &a, &b, params.phi.clone())
        }
        "synthetic" => Snapshots::synthetic(plan, cfg.u64_or("dual.seed", cfg.u64_or("seed", 0)?)?, tg.times()),
        other => Err(Error::Config(format!("`dual.snapshots` must be coupled or synthetic, got `{other}`"))),
    }
}

fn dual_problem<'a>(cfg: &Config, plan: &SpectralPlan, snaps: &'a Snapshots) -> Result<DualProblem<'a>> {
    let grid = plan.grid();
    let psi0 = cfg.field(
        "psi0",
        grid,
        FieldDescriptor::Random { seed: cfg.u64_or("seed", 0)? ^ prefix_salt("psi0"), max_mode: 3, amplitude: 1.0 },
    )?;
    DualProblem::new(plan, snaps, cfg.f64_or("dual.delta", 0.01)?, cfg.f64_or("dual.mu", 1.0)?, cfg.f64_or("ks.alpha", 0.5)?, psi0)
}

fn picard_criteria(report: &mut Report, rep: &dual::PicardReport, suffix: &str) {
    let peak = rep.norms.iter().copied().fold(0.0, f64::max);
    report.check(Criterion::at_most(&format!("max_ratio{suffix}"), rep.max_ratio, 0.9, BOUND));
    report.check(Criterion::at_most(&format!("norm_over_first{suffix}"), peak / rep.first_norm.max(1e-300), 2.0, BOUND));
}

/// Picard solve of the regularized dual problem plus its energy budget.
pub fn run_dual(cfg: &Config, out: Option<&Path>) -> Result<Report> {
    timed(cfg, || {
        let grid = cfg.grid("grid", 2, 1.0, 32)?;
        let plan = SpectralPlan::new(grid);
        let snaps = dual_snapshots(cfg, &plan)?;
        let prob = dual_problem(cfg, &plan, &snaps)?;
        let (psi, rep) = dual::picard_solve(&plan, &prob, &picard_options(cfg)?)?;
        let mut report = Report::new("dual", cfg);
        picard_criteria(&mut report, &rep, "");
        report.check(Criterion::at_most("max_ratio_target", rep.max_ratio, cfg.f64_or("dual.ratio_target", 0.6)?, BOUND));
        report.measure("mu", rep.mu);
        report.measure("iterations", rep.iterations as f64);
        let solved = prob.clone().with_mu(rep.mu);
        let budget = dual::energy_budget(&plan, &psi, &solved, cfg.f64_or("dual.embedding_constant", 1.0)?)?;
        let excess = budget
            .growth
            .iter()
            .zip(&budget.bound)
            .zip(&budget.slack)
            .map(|((g, b), s)| (g - b - s) / (b.abs() + s).max(1e-300))
            .fold(f64::NEG_INFINITY, f64::max);
        report.check(Criterion::at_most("energy_growth_excess", excess.max(0.0), 0.0, BOUND));
        report.measure("gronwall_majorant", budget.majorant);
        if let Some(dir) = out {
            let picard = serde_json::to_value(&rep).map_err(|e| Error::Config(e.to_string()))?;
            write_artifact(dir, "picard.json", |w| std::io::Write::write_all(w, to_json_string(&picard).as_bytes()))?;
            let energy = serde_json::to_value(&budget).map_err(|e| Error::Config(e.to_string()))?;
            write_artifact(dir, "energy.json", |w| std::io::Write::write_all(w, to_json_string(&energy).as_bytes()))?;
        }
        Ok(report)
    })
}

/// Vanishing-viscosity sweep over `sweep.deltas`.
pub fn run_sweep(cfg: &Config, out: Option<&Path>) -> Result<Report> {
    timed(cfg, || {
        let grid = cfg.grid("grid", 2, 1.0, 32)?;
        let plan = SpectralPlan::new(grid);
        let snaps = dual_snapshots(cfg, &plan)?;
        let prob = dual_problem(cfg, &plan, &snaps)?;
        let deltas = cfg.f64_list_or("sweep.deltas", &[1e-1, 1e-2, 1e-3, 1e-4])?;
        let chi_field = cfg.field("chi", grid, random_descriptor(cfg, "chi", 1.0)?)?;
        let chi = vec![chi_field; snaps.len()];
        let result = dual::viscosity_sweep(&plan, &prob, &deltas, &chi, &picard_options(cfg)?)?;
        let mut report = Report::new("sweep", cfg);
        report.check(Criterion::at_most("bound_ratio", result.bound_ratio.unwrap_or(f64::NAN), 3.0, BOUND));
        report.check(Criterion::at_least("decay_exponent", result.decay_exponent.unwrap_or(f64::NAN), 0.4, REFINEMENT));
        let worst = result.records.iter().map(|r| r.max_ratio).fold(0.0, f64::max);
        report.check(Criterion::at_most("max_ratio", worst, 0.9, BOUND));
        let grad0 = plan.gradient(&prob.psi0);
        report.measure("grad_psi0_sq", grad0.dot(&grad0));
        report.measure(
            "max_delta_l2_dpsi_sq",
            result.records.iter().map(|r| r.delta_l2_dpsi_sq).fold(0.0, f64::max),
        );
        if let Some(dir) = out {
            write_artifact(dir, "sweep.csv", |w| dual::write_sweep_csv(&result, w))?;
        }
        Ok(report)
    })
}

fn duality_level(cfg: &Config, points: usize) -> Result<dual::DualityReport> {
    let grid = Grid::new(2, cfg.f64_or("grid.length", 1.0)?, points)?;
    let plan = SpectralPlan::new(grid);
    let horizon = cfg.f64_or("duality.horizon", 0.1)?;
    let tg = TimeGrid::new(0.0, horizon, (points / 2).max(2))?;
    let snaps = Snapshots::synthetic(&plan, cfg.u64_or("duality.seed", cfg.u64_or("seed", 0)?)?, tg.times())?;
    let prob = DualProblem::new(&plan, &snaps, cfg.f64_or("dual.delta", 0.01)?, 1.0, cfg.f64_or("ks.alpha", 0.5)?, ScalarField::zeros(grid))?;
    let bump = cfg.field("test", grid, random_descriptor(cfg, "test", 1.0)?)?;
    let phi: Vec<ScalarField> = tg.times().iter().map(|t| bump.scale(1.0 + t)).collect();
    dual::duality_identity_residual(&plan, &prob, &phi)
}

/// Duality-identity residual under joint refinement of `h` and `dt`.
pub fn run_duality(cfg: &Config, _out: Option<&Path>) -> Result<Report> {
    timed(cfg, || {
        let levels: Vec<usize> = cfg
            .f64_list_or("duality.levels", &[16.0, 32.0, 64.0])?
            .iter()
            .map(|&p| p as usize)
            .collect();
        if levels.len() < 2 {
            return Err(Error::Config("`duality.levels` needs at least two resolutions".into()));
        }
        let residuals = levels.iter().map(|&p| Ok(duality_level(cfg, p)?.residual)).collect::<Result<Vec<f64>>>()?;
        let log_n: Vec<f64> = levels.iter().map(|&p| (p as f64).ln()).collect();
        let log_r: Vec<f64> = residuals.iter().map(|r| r.ln()).collect();
        let order = -spectral::linear_fit(&log_n, &log_r).0;
        let mut report = Report::new("duality", cfg);
        report.check(Criterion::at_least("order", order, 1.0, REFINEMENT));
        let finest = *residuals.last().unwrap_or(&f64::NAN);
        report.check(Criterion::at_most("finest_residual", finest, cfg.f64_or("duality.tol", 1e-3)?, CONSISTENCY));
        report.details.insert("levels".into(), json!(levels));
        report.details.insert("residuals".into(), json!(residuals));
        Ok(report)
    })
}

/// Injection of a fine field onto every `factor`-th node.
fn restrict(f: &ScalarField, coarse: Grid) -> Result<ScalarField> {
    let fine = f.grid;
    if fine.dim != coarse.dim || fine.points % coarse.points != 0 || (fine.length - coarse.length).abs() > 1e-12 {
        return Err(Error::arg("restriction needs nested grids on the same box"));
    }
    let k = fine.points / coarse.points;
    Ok(ScalarField::from_raw(
        coarse,
        (0..coarse.len())
            .map(|i| {
                let mut idx = coarse.multi_index(i);
                for d in idx.iter_mut().take(coarse.dim) {
                    *d *= k;
                }
                f.values[fine.flat_index(idx)]
            })
            .collect(),
    ))
}

fn l2(f: &ScalarField) -> f64 {
    crate::field::lp_norm(f, crate::field::NormSpec::l2())
}

fn l2_vector(u: &VectorField) -> f64 {
    l2(&u.magnitude())
}

/// Relative L² differences `(η, c, v)` of two states, the second restricted
/// onto the grid of the first.
fn state_difference(a: &KSState, b: &KSState) -> Result<[f64; 3]> {
    let g = a.grid();
    let eta = restrict(&b.eta, g)?;
    let c = restrict(&b.c, g)?;
    let v = VectorField { components: b.v.components.iter().map(|x| restrict(x, g)).collect::<Result<_>>()? };
    let rel = |num: f64, den: f64| if den > 0.0 { num / den } else { num };
    Ok([
        rel(l2(&a.eta.sub(&eta)), l2(&a.eta)),
        rel(l2(&a.c.sub(&c)), l2(&a.c)),
        rel(l2_vector(&a.v.sub(&v)), l2_vector(&a.v).max(l2_vector(&v))),
    ])
}

/// Self-convergence, linear response and duality residual of the coupled
/// system on nested grids (`uniqueness.levels`).
pub fn uniqueness_experiment(cfg: &Config) -> Result<Report> {
    timed(cfg, || {
        let levels: Vec<usize> = cfg
            .f64_list_or("uniqueness.levels", &[16.0, 32.0, 64.0])?
            .iter()
            .map(|&p| p as usize)
            .collect();
        if levels.len() < 3 {
            return Err(Error::Config("`uniqueness.levels` needs three nested resolutions".into()));
        }
        let length = cfg.f64_or("grid.length", 1.0)?;
        let dim = cfg.usize_or("grid.dim", 2)?;
        let tg = cfg.time_grid("time", 0.0, 0.1, 10)?;
        let mut report = Report::new("uniqueness", cfg);
        let mut finals = Vec::new();
        for &p in &levels {
            let grid = Grid::new(dim, length, p)?;
            let plan = SpectralPlan::new(grid);
            let (params, state, _) = ks_setup(cfg, grid)?;
            let sim = kssim::run_simulation(&plan, &params, &state, &tg)?;
            if finals.is_empty() {
                let again = kssim::run_simulation(&plan, &params, &state, &tg)?;
                let worst = sim
                    .states
                    .iter()
                    .zip(&again.states)
                    .map(|(a, b)| state_difference(a, b).map(|d| d.iter().copied().fold(0.0, f64::max)))
                    .collect::<Result<Vec<f64>>>()?
                    .into_iter()
                    .fold(0.0, f64::max);
                report.check(Criterion::at_most("identical_variant_difference", worst, 0.0, CONSISTENCY));
            }
            finals.push(sim.final_state().clone());
        }
        let diffs = finals
            .windows(2)
            .map(|w| state_difference(&w[0], &w[1]))
            .collect::<Result<Vec<[f64; 3]>>>()?;
        for (k, d) in diffs.iter().enumerate() {
            for (name, v) in ["eta", "c", "v"].iter().zip(d) {
                report.measure(&format!("difference_{name}_{}_{}", levels[k], levels[k + 1]), *v);
            }
        }
        let decay = diffs
            .windows(2)
            .map(|w| w[0][0] / w[1][0])
            .fold(f64::INFINITY, f64::min);
        report.check(Criterion::at_least("refinement_decay", decay, 2.0, REFINEMENT));

        let grid = Grid::new(dim, length, cfg.usize_or("uniqueness.response_points", levels[1])?)?;
        let plan = SpectralPlan::new(grid);
        let (params, base, _) = ks_setup(cfg, grid)?;
        let amp = cfg.f64_or("uniqueness.amplitude", 0.01)?;
        let shape = cfg.field("perturb", grid, random_descriptor(cfg, "perturb", 1.0)?)?;
        let shape = shape.scale(1.0 / shape.max_abs().max(1e-300));
        let fine = TimeGrid::new(tg.t0, tg.t1, cfg.usize_or("uniqueness.response_steps", 128)?)?;
        let reference = kssim::run_simulation(&plan, &params, &base, &fine)?;
        let mut response = Vec::new();
        let mut perturbed = None;
        for a in [amp, 2.0 * amp] {
            let mut st = base.clone();
            st.eta = base.eta.add(&shape.scale(a));
            let sim = kssim::run_simulation(&plan, &params, &st, &fine)?;
            response.push(l2(&sim.final_state().eta.sub(&reference.final_state().eta)));
            perturbed.get_or_insert(sim);
        }
        let ratio = response[1] / response[0];
        report.check(Criterion::within("linear_response_ratio", ratio, 2.0, 0.5, CONSISTENCY));

        let pert = perturbed.expect("two perturbed runs");
        let snaps = Snapshots::from_simulations(&plan, &pert, &reference, params.phi.clone())?;
        let prob = DualProblem::new(&plan, &snaps, cfg.f64_or("dual.delta", 0.01)?, 1.0, params.alpha, ScalarField::zeros(grid))?;
        let bump = cfg.field("test", grid, random_descriptor(cfg, "test", 1.0)?)?;
        let phi: Vec<ScalarField> = fine.times().iter().map(|t| bump.scale(1.0 + t)).collect();
        let duality = dual::duality_identity_residual(&plan, &prob, &phi)?;
        report.check(Criterion::at_most(
            "duality_residual",
            duality.residual,
            cfg.f64_or("uniqueness.duality_tol", 1e-2)?,
            CONSISTENCY,
        ));
        Ok(report)
    })
}

fn with_overrides(cfg: &Config, pairs: &[(&str, &str)]) -> Config {
    let mut c = cfg.clone();
    for (k, v) in pairs {
        c.set(k, v);
    }
    c
}

/// Quick small-grid pass over every experiment except the viscosity sweep.
pub fn run_verify(cfg: &Config, _out: Option<&Path>) -> Result<Report> {
    timed(cfg, || {
        let parts: Vec<(&str, Report)> = vec![
            ("green", run_green(&with_overrides(cfg, &[("grid.dim", "2"), ("grid.points", "64"), ("coeffs.kind", "zero")]), None)?),
            ("envelope", run_envelope(&with_overrides(cfg, &[("grid.dim", "1"), ("grid.length", "8"), ("grid.points", "256"), ("coeffs.kind", "zero")]), None)?),
            (
                "envelope_bounded",
                run_envelope(
                    &with_overrides(cfg, &[("grid.dim", "1"), ("grid.length", "8"), ("grid.points", "256"), ("coeffs.kind", "synthetic")]),
                    None,
                )?,
            ),
            ("smoothing", run_smoothing(&with_overrides(cfg, &[("grid.dim", "1"), ("grid.length", "1"), ("grid.points", "1024")]), None)?),
            (
                "chapman_kolmogorov",
                chapman_kolmogorov_experiment(&with_overrides(cfg, &[("grid.dim", "1"), ("grid.length", "4"), ("grid.points", "128")]))?,
            ),
            (
                "simulate",
                run_simulate(&with_overrides(cfg, &[("grid.dim", "2"), ("grid.length", "1"), ("grid.points", "16"), ("time.t1", "0.05")]), None)?,
            ),
            ("barenblatt", barenblatt_experiment(&with_overrides(cfg, &[("grid.dim", "1"), ("grid.length", "10"), ("grid.points", "128"), ("time.t0", "0.1"), ("time.t1", "0.5")]))?),
            ("dual", run_dual(&with_overrides(cfg, &[("grid.dim", "2"), ("grid.length", "1"), ("grid.points", "16")]), None)?),
            ("duality", run_duality(&with_overrides(cfg, &[("grid.length", "1"), ("duality.levels", "16, 32")]), None)?),
            (
                "uniqueness",
                uniqueness_experiment(&with_overrides(
                    cfg,
                    &[("grid.dim", "2"), ("grid.length", "1"), ("uniqueness.levels", "8, 16, 32"), ("time.t0", "0"), ("time.t1", "0.1")],
                ))?,
            ),
        ];
        let mut report = Report::new("verify", cfg);
        for (name, part) in parts {
            for mut c in part.criteria {
                c.name = format!("{name}.{}", c.name);
                report.check(c);
            }
            for (k, v) in part.measurements {
                report.measure(&format!("{name}.{k}"), v);
            }
        }
        Ok(report)
    })
}

// ---------------------------------------------------------------------------
// Command line

type Runner = fn(&Config, Option<&Path>) -> Result<Report>;

const SUBCOMMANDS: [(&str, &str, Runner); 8] = [
    ("green", "Tabulate a fundamental solution and compare with the heat kernel", run_green),
    ("envelope", "Fit Gaussian and derivative envelopes of a fundamental solution", run_envelope),
    ("smoothing", "Fit heat-semigroup smoothing rates", run_smoothing),
    ("simulate", "Run the coupled system and check its invariants", run_simulate),
    ("dual", "Solve the regularized dual problem by Picard iteration", run_dual),
    ("sweep", "Sweep the dual viscosity and write sweep.csv", run_sweep),
    ("duality", "Measure the duality-identity residual under refinement", run_duality),
    ("verify", "Run the quick verification suite", run_verify),
];

fn command() -> clap::Command {
    use clap::{Arg, Command};
    let common = [
        Arg::new("config").long("config").value_name("PATH").help("Configuration file (key = value lines)"),
        Arg::new("out").long("out").value_name("DIR").help("Output directory [default: out/<subcommand>]"),
        Arg::new("seed")
            .long("seed")
            .value_name("N")
            .value_parser(clap::value_parser!(u64))
            .help("Overrides the `seed` key"),
    ];
    let mut cmd = Command::new("parakernel")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Fundamental solutions, coupled Keller-Segel-Stokes runs and dual-problem checks")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about, _) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(name).about(about).args(common.clone()));
    }
    cmd
}

fn execute(name: &str, m: &clap::ArgMatches, run: Runner) -> Result<Report> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => Config::load(Path::new(p))?,
        None => Config::default(),
    };
    if let Some(seed) = m.get_one::<u64>("seed") {
        cfg.set("seed", seed);
    }
    let out = m
        .get_one::<String>("out")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new("out").join(name));
    let report = crate::with_pool(|| run(&cfg, Some(&out)))?;
    write_report(&report, &out)?;
    for c in &report.criteria {
        println!(
            "{} {}: measured {} expected {} {} tolerance {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            json_float(c.measured),
            json_float(c.expected),
            c.comparison.as_str(),
            json_float(c.tolerance)
        );
    }
    println!("report written to {}", out.join("report.json").display());
    Ok(report)
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit code: 0 success, 1 configuration or runtime failure, 2 usage error.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let run = SUBCOMMANDS.iter().find(|s| s.0 == name).map(|s| s.2).expect("registered subcommand");
    match execute(name, sub, run) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
