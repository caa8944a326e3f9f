//! Configuration files, experiment presets and artifact serialization.
//!
//! Configuration files are flat `key = value` lists grouped into the
//! sections `[grid]`, `[species]`, `[fluid]`, `[init]` and `[run]`. Blank
//! lines and lines starting with `#` are ignored. Every key except
//! `grid.nx` has a default, and the defaults reproduce
//! [`SimConfig::reference`].
//!
//! ```text
//! [grid]      nx (required), ny = nx, lx = 1, ly = 1
//! [species]   chi = 1, eps = 1e-3, delta = min c_0, f = power(2)
//!             f is power(p), linear, or table with f_table = "s:f:df; ..."
//! [fluid]     mode = navier_stokes | stokes | none, phi_x = 0, phi_y = 0.1,
//!             poisson_tol = 1e-10
//! [init]      n = cosine | constant | random, n_mean = 1, n_amp = 0.5,
//!             n_modes = 2
//!             c = constant | bump, c_value = 1, c_amp = 0, c_width = 0.1
//!             u = vortex | taylor_green | zero, u_amp = 0.1
//! [run]       t_end = 50, dt_max = 5e-4, cfl_safety = 0.5,
//!             report_every = 100, seed = 0, scheme = implicit | explicit,
//!             solver_tol = 1e-12, conditional = false, grace = none
//! ```

use crate::diagnostics::FunctionalReport;
use crate::driver::{
    DensityInit, DriverError, OxygenInit, SimConfig, TimeScheme, VelocityInit,
};
use crate::fluid::FluidMode;
use crate::grid::{GridSpec, ScalarField};
use crate::sensitivity::{HermiteTable, SensitivitySpec};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: cannot parse {text:?}; expected `[section]` or `key = value`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: key {key:?} outside of any section")]
    NoSection { line: usize, key: String },
    #[error("line {line}: unknown key {section}.{key}")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: duplicate key {section}.{key} (first set on line {first})")]
    DuplicateKey {
        line: usize,
        first: usize,
        section: String,
        key: String,
    },
    #[error("missing required key {section}.{key}")]
    MissingKey { section: String, key: String },
    #[error("line {line}: invalid value {value:?} for {key}: {reason}")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("delta must be positive, got {0}: the hypothesis is c_0 \\ge \\delta for some \\delta > 0")]
    DeltaNotPositive(f64),
    #[error("initial oxygen dips to {c_min} below delta = {delta} (c_0 \\ge \\delta for some \\delta > 0)")]
    OxygenBelowDelta { c_min: f64, delta: f64 },
    #[error("f'(0) = 0 required: a conditional-functional experiment cannot use {0}")]
    LinearConditional(String),
    #[error("unknown preset {name:?}; valid presets: {}", PRESETS.join(", "))]
    UnknownPreset { name: String },
    #[error(transparent)]
    Invalid(#[from] DriverError),
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

const KEYS: &[(&str, &[&str])] = &[
    ("grid", &["nx", "ny", "lx", "ly"]),
    ("species", &["chi", "eps", "delta", "f", "f_table"]),
    ("fluid", &["mode", "phi_x", "phi_y", "poisson_tol"]),
    ("init", &["n", "n_mean", "n_amp", "n_modes", "c", "c_value", "c_amp", "c_width", "u", "u_amp"]),
    (
        "run",
        &[
            "t_end",
            "dt_max",
            "cfl_safety",
            "report_every",
            "seed",
            "scheme",
            "solver_tol",
            "conditional",
            "grace",
        ],
    ),
];

struct Entries {
    map: BTreeMap<(String, String), (usize, String)>,
}

impl Entries {
    fn raw(&self, section: &str, key: &str) -> Option<(usize, &str)> {
        self.map
            .get(&(section.to_string(), key.to_string()))
            .map(|(l, v)| (*l, v.as_str()))
    }

    fn get<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(default),
            Some((line, v)) => v.parse::<T>().map_err(|e| ConfigError::InvalidValue {
                line,
                key: format!("{section}.{key}"),
                value: v.to_string(),
                reason: e.to_string(),
            }),
        }
    }

    fn invalid(&self, section: &str, key: &str, reason: &str) -> ConfigError {
        let (line, v) = self.raw(section, key).unwrap_or((0, ""));
        ConfigError::InvalidValue {
            line,
            key: format!("{section}.{key}"),
            value: v.to_string(),
            reason: reason.to_string(),
        }
    }
}

fn tokenize(text: &str) -> Result<Entries, ConfigError> {
    let mut map: BTreeMap<(String, String), (usize, String)> = BTreeMap::new();
    let mut section: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            let name = name.trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(ConfigError::UnknownSection {
                    line,
                    name: name.to_string(),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((k, v)) = t.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                text: raw.to_string(),
            });
        };
        let (k, v) = (k.trim(), v.trim().trim_matches('"'));
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                text: raw.to_string(),
            });
        }
        let Some(sec) = section.clone() else {
            return Err(ConfigError::NoSection { line, key: k.to_string() });
        };
        let known = KEYS.iter().find(|(s, _)| *s == sec).map(|(_, ks)| ks.contains(&k)).unwrap_or(false);
        if !known {
            return Err(ConfigError::UnknownKey {
                line,
                section: sec,
                key: k.to_string(),
            });
        }
        if let Some((first, _)) = map.get(&(sec.clone(), k.to_string())) {
            return Err(ConfigError::DuplicateKey {
                line,
                first: *first,
                section: sec,
                key: k.to_string(),
            });
        }
        map.insert((sec, k.to_string()), (line, v.to_string()));
    }
    Ok(Entries { map })
}

fn parse_sensitivity(e: &Entries) -> Result<SensitivitySpec, ConfigError> {
    let f = e.raw("species", "f").map(|(_, v)| v.to_string()).unwrap_or_else(|| "power(2)".into());
    let f = f.replace(' ', "");
    if f == "linear" {
        return Ok(SensitivitySpec::linear());
    }
    if let Some(p) = f.strip_prefix("power(").and_then(|r| r.strip_suffix(')')) {
        let p: f64 = p.parse().map_err(|_| e.invalid("species", "f", "exponent is not a number"))?;
        return SensitivitySpec::power(p).map_err(|err| e.invalid("species", "f", &err.to_string()));
    }
    if f == "table" {
        let Some((_, t)) = e.raw("species", "f_table") else {
            return Err(ConfigError::MissingKey {
                section: "species".into(),
                key: "f_table".into(),
            });
        };
        let (mut s, mut fv, mut df) = (Vec::new(), Vec::new(), Vec::new());
        for node in t.split(';').map(str::trim).filter(|n| !n.is_empty()) {
            let parts: Vec<f64> = node
                .split(':')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| e.invalid("species", "f_table", "nodes are `s:f:df` triples of numbers"))?;
            if parts.len() != 3 {
                return Err(e.invalid("species", "f_table", "nodes are `s:f:df` triples"));
            }
            s.push(parts[0]);
            fv.push(parts[1]);
            df.push(parts[2]);
        }
        let table = HermiteTable::new(s, fv, df).map_err(|err| e.invalid("species", "f_table", &err.to_string()))?;
        return Ok(SensitivitySpec::table(table));
    }
    Err(e.invalid("species", "f", "expected power(p), linear or table"))
}

/// Parse and validate a configuration file.
pub fn parse_config(text: &str) -> Result<SimConfig, ConfigError> {
    let e = tokenize(text)?;
    let d = SimConfig::reference();
    let Some(_) = e.raw("grid", "nx") else {
        return Err(ConfigError::MissingKey {
            section: "grid".into(),
            key: "nx".into(),
        });
    };
    let nx: usize = e.get("grid", "nx", 0)?;
    let ny: usize = e.get("grid", "ny", nx)?;
    let lx: f64 = e.get("grid", "lx", 1.0)?;
    let ly: f64 = e.get("grid", "ly", 1.0)?;
    let grid = GridSpec::new(nx, ny, lx, ly).map_err(|err| e.invalid("grid", "nx", &err.to_string()))?;

    let n = match e.raw("init", "n").map(|(_, v)| v).unwrap_or("cosine") {
        "cosine" => DensityInit::Cosine {
            mean: e.get("init", "n_mean", 1.0)?,
            amp: e.get("init", "n_amp", 0.5)?,
            modes: e.get("init", "n_modes", 2)?,
        },
        "constant" => DensityInit::Constant {
            mean: e.get("init", "n_mean", 1.0)?,
        },
        "random" => DensityInit::Random {
            mean: e.get("init", "n_mean", 1.0)?,
            amp: e.get("init", "n_amp", 0.5)?,
        },
        _ => return Err(e.invalid("init", "n", "expected cosine, constant or random")),
    };
    let c = match e.raw("init", "c").map(|(_, v)| v).unwrap_or("constant") {
        "constant" => OxygenInit::Constant {
            value: e.get("init", "c_value", 1.0)?,
        },
        "bump" => OxygenInit::Bump {
            base: e.get("init", "c_value", 1.0)?,
            amp: e.get("init", "c_amp", 0.0)?,
            width: e.get("init", "c_width", 0.1)?,
        },
        _ => return Err(e.invalid("init", "c", "expected constant or bump")),
    };
    let u_amp: f64 = e.get("init", "u_amp", 0.1)?;
    let u = match e.raw("init", "u").map(|(_, v)| v).unwrap_or("vortex") {
        "vortex" => VelocityInit::Vortex { amp: u_amp },
        "taylor_green" => VelocityInit::TaylorGreen { amp: u_amp },
        "zero" => VelocityInit::Zero,
        _ => return Err(e.invalid("init", "u", "expected vortex, taylor_green or zero")),
    };
    let mut cfg = d.clone();
    cfg.grid = grid;
    cfg.init.n = n;
    cfg.init.c = c;
    cfg.init.u = u;

    let c_min = cfg.init.c_inf();
    let delta: f64 = e.get("species", "delta", c_min)?;
    if !(delta > 0.0) {
        return Err(ConfigError::DeltaNotPositive(delta));
    }
    if c_min < delta {
        return Err(ConfigError::OxygenBelowDelta { c_min, delta });
    }
    cfg.species.chi = e.get("species", "chi", d.species.chi)?;
    cfg.species.eps = e.get("species", "eps", d.species.eps)?;
    cfg.species.delta = delta;
    cfg.species.c0_inf = cfg.init.c_sup();
    cfg.sensitivity = parse_sensitivity(&e)?;

    cfg.fluid.mode = match e.raw("fluid", "mode").map(|(_, v)| v).unwrap_or("navier_stokes") {
        "navier_stokes" => FluidMode::NavierStokes,
        "stokes" => FluidMode::Stokes,
        "none" => FluidMode::None,
        _ => return Err(e.invalid("fluid", "mode", "expected navier_stokes, stokes or none")),
    };
    cfg.fluid.phi_x = e.get("fluid", "phi_x", d.fluid.phi_x)?;
    cfg.fluid.phi_y = e.get("fluid", "phi_y", d.fluid.phi_y)?;
    cfg.fluid.poisson_tol = e.get("fluid", "poisson_tol", d.fluid.poisson_tol)?;

    cfg.t_end = e.get("run", "t_end", d.t_end)?;
    cfg.dt_max = e.get("run", "dt_max", d.dt_max)?;
    cfg.cfl_safety = e.get("run", "cfl_safety", d.cfl_safety)?;
    cfg.report_every = e.get("run", "report_every", d.report_every)?;
    cfg.seed = e.get("run", "seed", d.seed)?;
    let tol: f64 = e.get("run", "solver_tol", 1e-12)?;
    cfg.scheme = match e.raw("run", "scheme").map(|(_, v)| v).unwrap_or("implicit") {
        "implicit" => TimeScheme::Implicit { tol },
        "explicit" => TimeScheme::Explicit,
        _ => return Err(e.invalid("run", "scheme", "expected implicit or explicit")),
    };
    cfg.conditional = e.get("run", "conditional", false)?;
    cfg.grace = match e.raw("run", "grace") {
        None | Some((_, "none")) => None,
        Some(_) => Some(e.get("run", "grace", 0.0)?),
    };
    if cfg.conditional && !cfg.sensitivity.has_flat_origin() {
        return Err(ConfigError::LinearConditional(cfg.sensitivity.label()));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub const PRESETS: [&str; 6] = [
    "quasi-energy",
    "uniform-integrability",
    "conditional-energy",
    "stabilization",
    "epsilon-family",
    "fluid-free-3d-proxy",
];

/// A named experiment: a configuration and, for the epsilon family, the
/// list of regularization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub config: SimConfig,
    pub eps_list: Option<Vec<f64>>,
}

/// The documented experiment behind each acceptance criterion.
///
/// * `stabilization`: the reference configuration.
/// * `quasi-energy`: reference data to `t = 5`, reporting every step.
/// * `uniform-integrability`: reference data to `t = 10`.
/// * `conditional-energy`: reference data with `c_0 = delta = 0.1` and the
///   conditional functional enabled.
/// * `epsilon-family`: reference data to `t = 5` for
///   `eps in {1e-1, 1e-2, 1e-3, 1e-4}`.
/// * `fluid-free-3d-proxy`: reference data without fluid, `u_0 = 0`,
///   `phi = 0`.
pub fn preset(name: &str) -> Result<Preset, ConfigError> {
    let mut cfg = SimConfig::reference();
    let mut eps_list = None;
    let name = match PRESETS.iter().find(|&&p| p == name) {
        Some(p) => *p,
        None => return Err(ConfigError::UnknownPreset { name: name.to_string() }),
    };
    match name {
        "stabilization" => {}
        "quasi-energy" => {
            cfg.t_end = 5.0;
            cfg.report_every = 1;
        }
        "uniform-integrability" => cfg.t_end = 10.0,
        "conditional-energy" => {
            cfg.init.c = OxygenInit::Constant { value: 0.1 };
            cfg.species.c0_inf = 0.1;
            cfg.species.delta = 0.1;
            cfg.conditional = true;
        }
        "epsilon-family" => {
            cfg.t_end = 5.0;
            cfg.report_every = 10;
            eps_list = Some(vec![1e-1, 1e-2, 1e-3, 1e-4]);
        }
        "fluid-free-3d-proxy" => {
            cfg.fluid.mode = FluidMode::None;
            cfg.fluid.phi_y = 0.0;
            cfg.init.u = VelocityInit::Zero;
        }
        _ => unreachable!("name checked against PRESETS"),
    }
    cfg.validate()?;
    Ok(Preset {
        name,
        config: cfg,
        eps_list,
    })
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, source: csv::Error) -> IoError {
    IoError::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// Write one CSV row per report, with 17 significant digits.
pub fn emit_timeseries(reports: &[FunctionalReport], path: &Path) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(FunctionalReport::COLUMNS).map_err(|e| csv_err(path, e))?;
    for r in reports {
        let row: Vec<String> = r.to_row().iter().map(|v| format!("{v:.16e}")).collect();
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Read a time series written by [`emit_timeseries`].
pub fn read_timeseries(path: &Path) -> Result<Vec<FunctionalReport>, IoError> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rd.headers().map_err(|e| csv_err(path, e))?.clone();
    let fmt = |reason: String| IoError::Format {
        path: path.display().to_string(),
        reason,
    };
    if header.len() != FunctionalReport::COLUMNS.len()
        || header.iter().zip(FunctionalReport::COLUMNS).any(|(a, b)| a != b)
    {
        return Err(fmt(format!("header does not match the report columns: {header:?}")));
    }
    let mut out = Vec::new();
    for (k, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let mut row = [0.0; 24];
        for (slot, field) in row.iter_mut().zip(rec.iter()) {
            *slot = field
                .parse()
                .map_err(|_| fmt(format!("row {}: {field:?} is not a number", k + 1)))?;
        }
        out.push(FunctionalReport::from_row(&row));
    }
    Ok(out)
}

/// Write a 16-bit binary PGM. Pixel rows run from the top of the domain
/// (`j = ny - 1`) down; values map linearly from `[lo, hi]` onto
/// `[0, 65535]` with clamping.
pub fn emit_heatmap(field: &ScalarField, path: &Path, range: (f64, f64)) -> Result<(), IoError> {
    let (lo, hi) = range;
    if !(lo < hi) {
        return Err(IoError::Format {
            path: path.display().to_string(),
            reason: format!("heatmap range needs lo < hi, got ({lo}, {hi})"),
        });
    }
    let g = field.grid();
    let file = File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n65535\n", g.nx, g.ny).map_err(|e| file_err(path, e))?;
    for j in (0..g.ny).rev() {
        for i in 0..g.nx {
            let s = ((field.get(i, j) - lo) / (hi - lo)).clamp(0.0, 1.0);
            let px = (s * 65535.0).round() as u16;
            w.write_all(&px.to_be_bytes()).map_err(|e| file_err(path, e))?;
        }
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Outcome of one re-validated claim.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Re-validate every margin stored in a time series: mass, maximum
/// principle relative to the first row, the quasi-energy margin of each
/// step, the Csiszar-Kullback margin, and monotonicity of the conditional
/// functional after it first drops below `0.9 eta0`.
pub fn validate_series(reports: &[FunctionalReport]) -> Vec<CheckLine> {
    let mut out = Vec::new();
    let Some(first) = reports.first() else {
        return out;
    };
    let drift = reports
        .iter()
        .map(|r| (r.mass_n - first.mass_n).abs() / first.mass_n)
        .fold(0.0, f64::max);
    out.push(CheckLine {
        name: "mass",
        passed: drift <= 1e-8,
        detail: format!("max relative drift {drift:.3e} (limit 1e-8)"),
    });
    let sup = reports.iter().map(|r| r.sup_c).fold(f64::NEG_INFINITY, f64::max);
    out.push(CheckLine {
        name: "max-principle",
        passed: sup <= first.sup_c * (1.0 + 1e-12),
        detail: format!("sup c = {sup:.17e}, initial {:.17e}", first.sup_c),
    });
    let stepped: Vec<&FunctionalReport> = reports.iter().filter(|r| r.step_dt > 0.0).collect();
    let bad = stepped.iter().filter(|r| r.qe_margin < -r.qe_slack).count();
    let worst = stepped
        .iter()
        .map(|r| r.qe_margin + r.qe_slack)
        .fold(f64::INFINITY, f64::min);
    out.push(CheckLine {
        name: "quasi-energy",
        passed: bad == 0,
        detail: format!("{bad} of {} steps below -slack, worst margin+slack {worst:.3e}", stepped.len()),
    });
    let ck_bad = reports
        .iter()
        .filter(|r| r.ck_margin < -1e-10 * r.mass_n * r.mass_n)
        .count();
    out.push(CheckLine {
        name: "csiszar-kullback",
        passed: ck_bad == 0,
        detail: format!("{ck_bad} states below -1e-10 scale"),
    });
    if let Some(eta0) = reports.iter().map(|r| r.eta0).find(|&e| e > 0.0) {
        match reports.iter().position(|r| r.cond_f < 0.9 * eta0) {
            None => out.push(CheckLine {
                name: "conditional-energy",
                passed: true,
                detail: format!("cond_F never below 0.9 eta0 = {:.4e}", 0.9 * eta0),
            }),
            Some(k) => {
                let f0 = reports[k].cond_f;
                let excess = reports[k..].iter().map(|r| r.cond_f - f0).fold(0.0, f64::max);
                out.push(CheckLine {
                    name: "conditional-energy",
                    passed: excess <= 1e-3 * eta0,
                    detail: format!("t0 = {:.4}, max excess {excess:.3e} (limit {:.3e})", reports[k].t, 1e-3 * eta0),
                });
            }
        }
    }
    out
}
