//! Configuration ingestion, run orchestration and data emission.
//!
//! A configuration is a TOML document whose leaves are addressed by dotted
//! keys (`params.b`, `stepper.dtau`, ...). Presets provide a base document;
//! `--set key=value` overrides are layered on top before validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use toml::Value;

use crate::diagnostics::{
    min_exp_weight, entropy_report, estimate_control_epsilon, fit_decay_rate, poincare_constant_fn,
    poincare_constant_profile, EntropyChoice,
};
use crate::error::{Error, Result};
use crate::freeboundary::cross_check_transform;
use crate::grid::{build_grid_with, gaussian, project_function, DensityProfile, Grid, GridSettings};
use crate::model::{DilationParams, ModelParams};
use crate::solver::{interp, run_limit_equation, run_tau, FluxScheme, StepperConfig, TauTrajectory};
use crate::steady::{steady_excitatory, steady_inhibitory, steady_state};
use crate::timescale::{detect_blowups, forward_time, lifespan, t_series_csv, verify_jump, LifespanStatus};

/// Flattened configuration document.
pub type ConfigDoc = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Steady,
    Jump,
    Entropy,
    FbCheck,
    Poincare,
    Sweep,
}

impl Command {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "simulate" => Command::Simulate,
            "steady" => Command::Steady,
            "jump" => Command::Jump,
            "entropy" => Command::Entropy,
            "fb-check" => Command::FbCheck,
            "poincare" => Command::Poincare,
            "sweep" => Command::Sweep,
            other => return Err(Error::Configuration(format!("unknown subcommand `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Steady => "steady",
            Command::Jump => "jump",
            Command::Entropy => "entropy",
            Command::FbCheck => "fb-check",
            Command::Poincare => "poincare",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialData {
    Gaussian { center: f64, variance: f64 },
    SteadyExcitatory,
    SteadyInhibitory,
    FromCsv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PoincareWeight {
    /// Constant weight on `[a, b]`.
    Constant { a: f64, b: f64 },
    /// `min(x, e^{-x})` on `[0, b]`.
    MinExp { b: f64 },
    /// The steady state of the configured parameters on the run grid.
    Steady,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub params: ModelParams,
    pub dil: DilationParams,
    pub grid: GridSettings,
    pub stepper: StepperConfig,
    /// Integrate the limit equation instead of the dilated one.
    pub limit: bool,
    pub initial: InitialData,
    pub out: Option<PathBuf>,
    /// Profile files written by `simulate`, spread evenly over the snapshots.
    pub profiles: usize,
    pub entropy: Option<EntropyChoice>,
    pub poincare: PoincareWeight,
    pub poincare_n: usize,
    pub fb_stride: usize,
    pub sweep_command: Command,
    pub sweep_axes: Vec<(String, Vec<Value>)>,
    /// The validated document, kept so sweeps can derive per-run configs.
    pub doc: ConfigDoc,
}

const KNOWN_KEYS: &[&str] = &[
    "params.v_f",
    "params.v_r",
    "params.b",
    "params.a0",
    "params.a1",
    "params.b0",
    "params.v_l",
    "params.mu0",
    "dilation.c",
    "grid.n",
    "grid.tail_tolerance",
    "grid.v_min",
    "grid.inhibitory_widen",
    "stepper.dtau",
    "stepper.horizon",
    "stepper.snapshot_stride",
    "stepper.blowup_epsilon",
    "stepper.scheme",
    "stepper.limit",
    "initial.kind",
    "initial.center",
    "initial.variance",
    "initial.path",
    "output.dir",
    "output.profiles",
    "entropy.g",
    "poincare.weight",
    "poincare.n",
    "poincare.a",
    "poincare.b",
    "fb.stride",
    "sweep.command",
];

const FIG_JUMP: &str = r#"
[params]
v_f = 1.0
v_r = 0.0
b = 0.9
a0 = 0.5
a1 = 1.0
b0 = 0.0

[stepper]
dtau = 1e-4
horizon = 10.0

[grid]
n = 1024

[initial]
kind = "gaussian"
center = 0.2
variance = 0.01
"#;

const FIG_ETERNAL: &str = r#"
[params]
v_f = 1.0
v_r = 0.0
b = 1.5
a0 = 1.0
a1 = 1.0
b0 = 0.0

[stepper]
dtau = 1e-4
horizon = 5.0

[grid]
n = 1024

[initial]
kind = "gaussian"
center = -1.0
variance = 0.17
"#;

pub const PRESETS: &[&str] = &["fig-eternal", "fig-jump"];

fn flatten_into(prefix: &str, table: &toml::Table, out: &mut ConfigDoc) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten_into(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Parses a TOML document into dotted keys without validating it.
pub fn parse_doc(text: &str) -> Result<ConfigDoc> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Configuration(format!("malformed configuration: {}", e.message())))?;
    let mut doc = ConfigDoc::new();
    flatten_into("", &table, &mut doc);
    Ok(doc)
}

pub fn preset(name: &str) -> Result<ConfigDoc> {
    match name {
        "fig-jump" => parse_doc(FIG_JUMP),
        "fig-eternal" => parse_doc(FIG_ETERNAL),
        other => Err(Error::Configuration(format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")))),
    }
}

/// Applies `key=value`; the value is read as a TOML literal, or as a bare
/// string when it does not parse as one.
pub fn apply_override(doc: &mut ConfigDoc, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Configuration(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Configuration(format!("override `{assignment}` has an empty key")));
    }
    let raw = raw.trim();
    let value = match format!("x = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").unwrap(),
        Err(_) => Value::String(raw.to_string()),
    };
    doc.insert(key.to_string(), value);
    Ok(())
}

struct Reader<'a> {
    doc: &'a ConfigDoc,
}

impl Reader<'_> {
    fn f64_opt(&self, key: &str) -> Result<Option<f64>> {
        match self.doc.get(key) {
            None => Ok(None),
            Some(Value::Float(x)) => Ok(Some(*x)),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(other) => Err(type_error(key, "a number", other)),
        }
    }

    fn f64_req(&self, key: &str) -> Result<f64> {
        self.f64_opt(key)?.ok_or_else(|| Error::Configuration(format!("missing required key `{key}`")))
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.f64_opt(key)?.unwrap_or(default))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.doc.get(key) {
            None => Ok(default),
            Some(Value::Integer(i)) if *i >= 0 => Ok(*i as usize),
            Some(other) => Err(type_error(key, "a nonnegative integer", other)),
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.doc.get(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(other) => Err(type_error(key, "a boolean", other)),
        }
    }

    fn str_opt(&self, key: &str) -> Result<Option<String>> {
        match self.doc.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => Err(type_error(key, "a string", other)),
        }
    }
}

fn type_error(key: &str, expected: &str, got: &Value) -> Error {
    Error::Configuration(format!("key `{key}` must be {expected}, got {}", got.type_str()))
}

/// Re-labels a module error with the config key it came from.
fn at_key(key: &str, e: Error) -> Error {
    if e.to_string().contains(key) {
        return e;
    }
    Error::Configuration(format!("`{key}`: {e}"))
}

/// Validates a document and applies defaults.
pub fn config_from_doc(doc: &ConfigDoc) -> Result<RunConfig> {
    for key in doc.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) && !key.starts_with("sweep.axes.") {
            return Err(Error::Configuration(format!("unknown key `{key}`")));
        }
    }
    let r = Reader { doc };
    let v_f = r.f64_req("params.v_f")?;
    let v_r = r.f64_req("params.v_r")?;
    let b = r.f64_req("params.b")?;
    let a0 = r.f64_req("params.a0")?;
    let a1 = r.f64_req("params.a1")?;
    let params = match (r.f64_opt("params.b0")?, r.f64_opt("params.v_l")?, r.f64_opt("params.mu0")?) {
        (Some(b0), None, None) => ModelParams::with_b0(v_r, v_f, b0, b, a0, a1),
        (None, Some(v_l), Some(mu0)) => ModelParams::new(v_l, v_r, v_f, mu0, b, a0, a1),
        (None, None, None) => return Err(Error::Configuration("missing required key `params.b0`".into())),
        _ => {
            return Err(Error::Configuration(
                "give either `params.b0` or both `params.v_l` and `params.mu0`".into(),
            ))
        }
    }
    .map_err(|e| at_key("params", e))?;

    let dil = match doc.get("dilation.c") {
        Some(Value::String(s)) if s == "natural" => DilationParams::natural(&params),
        _ => DilationParams::new(&params, r.f64_or("dilation.c", 1.0)?).map_err(|e| at_key("dilation.c", e))?,
    };

    let mut grid = GridSettings::new(r.usize_or("grid.n", 1024)?, r.f64_or("grid.tail_tolerance", 1e-9)?);
    grid.v_min = r.f64_opt("grid.v_min")?;
    grid.inhibitory_widen = r.f64_or("grid.inhibitory_widen", 1.0)?;
    if !(grid.tail_tolerance > 0.0 && grid.tail_tolerance < 1.0) {
        return Err(Error::Configuration("`grid.tail_tolerance` must lie in (0, 1)".into()));
    }
    if !(grid.inhibitory_widen >= 1.0) {
        return Err(Error::Configuration("`grid.inhibitory_widen` must be at least 1".into()));
    }

    let mut stepper = StepperConfig::new(r.f64_or("stepper.dtau", 1e-4)?, r.f64_or("stepper.horizon", 10.0)?);
    stepper.snapshot_stride = r.usize_or("stepper.snapshot_stride", 100)?;
    stepper.blowup_epsilon = r.f64_or("stepper.blowup_epsilon", 1e-8)?;
    stepper.scheme = match r.str_opt("stepper.scheme")?.as_deref() {
        None | Some("exponential-fitting") => FluxScheme::ExponentialFitting,
        Some("upwind") => FluxScheme::Upwind,
        Some(other) => {
            return Err(Error::Configuration(format!(
                "`stepper.scheme` = `{other}` (expected exponential-fitting or upwind)"
            )))
        }
    };
    stepper.validate()?;
    let limit = r.bool_or("stepper.limit", false)?;

    let initial = match r.str_opt("initial.kind")?.as_deref() {
        None | Some("gaussian") => InitialData::Gaussian {
            center: r.f64_req("initial.center")?,
            variance: r.f64_req("initial.variance")?,
        },
        Some("steady-excitatory") => InitialData::SteadyExcitatory,
        Some("steady-inhibitory") => InitialData::SteadyInhibitory,
        Some("csv") => InitialData::FromCsv {
            path: PathBuf::from(
                r.str_opt("initial.path")?
                    .ok_or_else(|| Error::Configuration("missing required key `initial.path`".into()))?,
            ),
        },
        Some(other) => return Err(Error::Configuration(format!("`initial.kind` = `{other}` is not recognized"))),
    };
    if let InitialData::Gaussian { variance, .. } = initial {
        if !(variance > 0.0) {
            return Err(Error::Configuration("`initial.variance` must be positive".into()));
        }
    }

    let entropy = match r.str_opt("entropy.g")?.as_deref() {
        None | Some("auto") => None,
        Some("quadratic-centered") => Some(EntropyChoice::QuadraticCentered),
        Some("quadratic") => Some(EntropyChoice::Quadratic),
        Some(other) => return Err(Error::Configuration(format!("`entropy.g` = `{other}` is not recognized"))),
    };
    let poincare = match r.str_opt("poincare.weight")?.as_deref() {
        None | Some("constant") => PoincareWeight::Constant { a: r.f64_or("poincare.a", 0.0)?, b: r.f64_or("poincare.b", 1.0)? },
        Some("min-exp") => PoincareWeight::MinExp { b: r.f64_or("poincare.b", 20.0)? },
        Some("steady") => PoincareWeight::Steady,
        Some(other) => return Err(Error::Configuration(format!("`poincare.weight` = `{other}` is not recognized"))),
    };
    if let PoincareWeight::Constant { a, b } = poincare {
        if !(b > a) {
            return Err(Error::Configuration("`poincare.b` must exceed `poincare.a`".into()));
        }
    }

    let sweep_command = Command::parse(r.str_opt("sweep.command")?.as_deref().unwrap_or("simulate"))
        .map_err(|e| at_key("sweep.command", e))?;
    if sweep_command == Command::Sweep {
        return Err(Error::Configuration("`sweep.command` cannot be sweep".into()));
    }
    let mut sweep_axes = Vec::new();
    for (k, v) in doc.range("sweep.axes.".to_string()..) {
        let Some(target) = k.strip_prefix("sweep.axes.") else { break };
        let Value::Array(values) = v else { return Err(type_error(k, "an array", v)) };
        if values.is_empty() {
            return Err(Error::Configuration(format!("`{k}` has no values")));
        }
        if !KNOWN_KEYS.contains(&target) || target.starts_with("sweep.") {
            return Err(Error::Configuration(format!("`{k}` sweeps the unknown key `{target}`")));
        }
        sweep_axes.push((target.to_string(), values.clone()));
    }

    Ok(RunConfig {
        params,
        dil,
        grid,
        stepper,
        limit,
        initial,
        out: r.str_opt("output.dir")?.map(PathBuf::from),
        profiles: r.usize_or("output.profiles", 20)?,
        entropy,
        poincare,
        poincare_n: r.usize_or("poincare.n", 512)?,
        fb_stride: r.usize_or("fb.stride", 10)?.max(1),
        sweep_command,
        sweep_axes,
        doc: doc.clone(),
    })
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    config_from_doc(&parse_doc(text)?)
}

fn read_csv_profile(path: &Path, grid: &Grid) -> Result<DensityProfile> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut vs = Vec::new();
    let mut ps = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (k == 0 && line.starts_with(|c: char| c.is_ascii_alphabetic())) {
            continue;
        }
        let mut cells = line.split(',').map(|c| c.trim().parse::<f64>());
        match (cells.next(), cells.next()) {
            (Some(Ok(v)), Some(Ok(p))) => {
                vs.push(v);
                ps.push(p);
            }
            _ => return Err(Error::Configuration(format!("`initial.path`: line {} is not `v,p`", k + 1))),
        }
    }
    if vs.len() < 2 || vs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Configuration("`initial.path`: need at least two rows with increasing v".into()));
    }
    let (lo, hi) = (vs[0], *vs.last().unwrap());
    project_function(|v| if v < lo || v > hi { 0.0 } else { interp(&vs, &ps, v) }, grid, true)
}

pub fn initial_profile(cfg: &RunConfig, grid: &Grid) -> Result<DensityProfile> {
    match &cfg.initial {
        InitialData::Gaussian { center, variance } => project_function(gaussian(*center, *variance), grid, true),
        InitialData::SteadyExcitatory => Ok(steady_excitatory(&cfg.params, grid)?.profile),
        InitialData::SteadyInhibitory => {
            let p = steady_inhibitory(&cfg.params, grid)?.profile;
            let m = p.mass();
            Ok(p.scaled(1.0 / m))
        }
        InitialData::FromCsv { path } => read_csv_profile(path, grid),
    }
}

fn run_trajectory(cfg: &RunConfig) -> Result<TauTrajectory> {
    let grid = build_grid_with(&cfg.params, &cfg.grid)?;
    let p0 = initial_profile(cfg, &grid)?;
    if cfg.limit {
        run_limit_equation(&p0, &cfg.params, &cfg.stepper)
    } else {
        run_tau(&p0, &cfg.params, &cfg.dil, &cfg.stepper)
    }
}

/// Collects emitted files relative to the output directory.
struct Emitter {
    dir: PathBuf,
    files: Vec<String>,
}

impl Emitter {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        Ok(Emitter { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::Io(format!("{}: {e}", parent.display())))?;
        }
        fs::write(&path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        text.push('\n');
        self.write(rel, &text)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::Io(e.to_string()))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            if rel != "manifest.json" {
                out.push(rel);
            }
        }
    }
    Ok(())
}

/// Writes `manifest.json` listing every file under `dir` with its SHA-256.
pub fn write_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut entries = Vec::with_capacity(files.len());
    for rel in files {
        let bytes = fs::read(dir.join(&rel)).map_err(|e| Error::Io(format!("{rel}: {e}")))?;
        entries.push(ManifestEntry { sha256: format!("{:x}", Sha256::digest(&bytes)), bytes: bytes.len() as u64, path: rel });
    }
    let mut text = serde_json::to_string_pretty(&json!({ "files": entries })).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text).map_err(|e| Error::Io(format!("manifest: {e}")))?;
    Ok(entries)
}

fn grid_json(grid: &Grid) -> serde_json::Value {
    json!({ "v_min": grid.v_min, "v_r": grid.v_r, "v_f": grid.v_f, "h": grid.h, "cells": grid.n })
}

fn trajectory_summary(traj: &TauTrajectory) -> serde_json::Value {
    let mass_dev = traj.mass.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    json!({
        "grid": grid_json(&traj.grid),
        "c": traj.dil.c,
        "limit_equation": traj.limit,
        "steps": traj.len() - 1,
        "max_mass_deviation": mass_dev,
        "clamped_mass": traj.clamped_mass,
        "min_value": traj.min_value,
        "leaked_mass": traj.leaked_mass,
    })
}

fn simulate(cfg: &RunConfig, em: &mut Emitter) -> Result<()> {
    let traj = run_trajectory(cfg)?;
    em.write("tau_series.csv", &traj.series_csv())?;
    let map = forward_time(&traj)?;
    em.write("t_series.csv", &t_series_csv(&traj, &map)?)?;
    let snaps = &traj.snapshots;
    let want = cfg.profiles.max(1).min(snaps.len());
    let mut picked: Vec<usize> = (0..want).map(|j| j * (snaps.len() - 1) / want.max(2).saturating_sub(1).max(1)).collect();
    picked.push(snaps.len() - 1);
    picked.sort_unstable();
    picked.dedup();
    let mut index = String::from("file,tau,t\n");
    for &j in &picked {
        let s = &snaps[j];
        let name = format!("profiles/profile_{:09}.csv", s.index);
        em.write(&name, &s.profile.to_csv())?;
        index.push_str(&format!("{name},{},{}\n", crate::fmt_f64(s.tau), crate::fmt_f64(map.ts[s.index])));
    }
    em.write("profiles/index.csv", &index)?;
    let events = detect_blowups(&traj, cfg.stepper.blowup_epsilon)?;
    let (total, status) = lifespan(&map);
    let mut summary = trajectory_summary(&traj);
    summary["t_final"] = json!(total);
    summary["lifespan_status"] = json!(match status {
        LifespanStatus::FiniteConverged => "finite_converged",
        LifespanStatus::GrowingUndetermined => "growing_undetermined",
    });
    summary["events"] = json!(events);
    em.json("summary.json", &summary)
}

fn steady(cfg: &RunConfig, em: &mut Emitter) -> Result<()> {
    let grid = build_grid_with(&cfg.params, &cfg.grid)?;
    let s = steady_state(&cfg.params, &grid)?;
    em.write("steady_profile.csv", &s.profile.to_csv())?;
    em.json("steady.json", &s.summary())
}

fn jump(cfg: &RunConfig, em: &mut Emitter) -> Result<()> {
    let traj = run_trajectory(cfg)?;
    let map = forward_time(&traj)?;
    em.write("t_series.csv", &t_series_csv(&traj, &map)?)?;
    em.write("tau_series.csv", &traj.series_csv())?;
    let events = detect_blowups(&traj, cfg.stepper.blowup_epsilon)?;
    let mut lines = String::new();
    for (k, ev) in events.iter().enumerate() {
        let check = if ev.terminated && !traj.limit { Some(verify_jump(&traj, ev)?) } else { None };
        let line = json!({
            "tau1": ev.tau1,
            "tau2": ev.tau2,
            "t_star": ev.t_star,
            "delta_tau": ev.delta_tau,
            "l1_gap": check.map(|c| c.l1_gap),
            "delta_tau_independent": check.and_then(|c| c.delta_tau_independent),
            "terminated": ev.terminated,
        });
        lines.push_str(&serde_json::to_string(&line).map_err(|e| Error::Io(e.to_string()))?);
        lines.push('\n');
        if let (Some(before), Some(after)) = (traj.snapshot_index(ev.i1), traj.snapshot_index(ev.i2)) {
            em.write(&format!("jump_{k}_before.csv"), &before.profile.to_csv())?;
            em.write(&format!("jump_{k}_after.csv"), &after.profile.to_csv())?;
        }
    }
    em.write("events.jsonl", &lines)
}

fn entropy(cfg: &RunConfig, em: &mut Emitter) -> Result<()> {
    let traj = run_trajectory(cfg)?;
    let s = steady_state(&cfg.params, &traj.grid)?;
    let g = cfg.entropy.unwrap_or_else(|| EntropyChoice::for_params(&cfg.params));
    let rep = entropy_report(&traj, &s, g)?;
    em.write("entropy.csv", &rep.to_csv())?;
    let alpha = fit_decay_rate(&rep.tau, &rep.s).ok();
    em.json(
        "entropy.json",
        &json!({
            "entropy": format!("{g:?}"),
            "decay_rate": alpha,
            "control_epsilon": estimate_control_epsilon(&rep, s.m_inf),
            "M_inf": s.m_inf,
            "snapshots": rep.tau.len(),
        }),
    )
}

fn fb_check(cfg: &RunConfig, em: &mut Emitter) -> Result<()> {
    let traj = run_trajectory(cfg)?;
    let check = cross_check_transform(&traj)?;
    em.write("fb.csv", &check.to_csv(cfg.fb_stride))?;
    em.json(
        "fb.json",
        &json!({
            "beta_gap": check.beta_gap,
            "lipschitz_max": check.path.lipschitz_max,
            "lipschitz_bound": check.path.lipschitz_bound,
            "bounds_ok": check.bounds_ok,
            "voltage_shift": -cfg.params.v_f,
        }),
    )
}

fn poincare(cfg: &RunConfig, em: &mut Emitter) -> Result<()> {
    let n = cfg.poincare_n;
    let (alpha, id, n_used) = match cfg.poincare {
        PoincareWeight::Constant { a, b } => (poincare_constant_fn(|_| 1.0, a, b, n)?, "constant", n),
        PoincareWeight::MinExp { b } => (poincare_constant_fn(min_exp_weight, 0.0, b, n)?, "min-exp", n),
        PoincareWeight::Steady => {
            let grid = build_grid_with(&cfg.params, &cfg.grid)?;
            let s = steady_state(&cfg.params, &grid)?;
            // the weight vanishes at the threshold; drop that node
            let trimmed = DensityProfile::new(
                Grid::from_cells(grid.v_r, grid.node(grid.n - 1), grid.i_reset, grid.n - grid.i_reset - 1)?,
                s.profile.values[..grid.n].to_vec(),
            )?;
            (poincare_constant_profile(&trimmed)?, "steady", trimmed.grid.n)
        }
    };
    em.json("poincare.json", &json!({ "alpha": alpha, "n": n_used, "weight_id": id }))
}

fn sweep_docs(cfg: &RunConfig) -> Vec<ConfigDoc> {
    let mut docs = vec![cfg.doc.clone()];
    for (key, values) in &cfg.sweep_axes {
        let mut next = Vec::with_capacity(docs.len() * values.len());
        for d in &docs {
            for v in values {
                let mut d = d.clone();
                d.insert(key.clone(), v.clone());
                next.push(d);
            }
        }
        docs = next;
    }
    for d in &mut docs {
        d.retain(|k, _| !k.starts_with("sweep."));
    }
    docs
}

/// Worker count for sweeps: `NNLIF_THREADS` when set, otherwise the machine's parallelism.
pub fn sweep_threads(jobs: usize) -> usize {
    let cap = std::env::var("NNLIF_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    cap.min(jobs).max(1)
}

fn sweep(cfg: &RunConfig, em: &mut Emitter) -> Result<()> {
    if cfg.sweep_axes.is_empty() {
        return Err(Error::Configuration("sweep needs at least one `sweep.axes.<key>` array".into()));
    }
    let docs = sweep_docs(cfg);
    let configs: Vec<RunConfig> = docs.iter().map(config_from_doc).collect::<Result<_>>()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<std::result::Result<(), String>>>> = Mutex::new(vec![None; configs.len()]);
    let worst_numerical = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..sweep_threads(configs.len()) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                if j >= configs.len() {
                    break;
                }
                let dir = em.dir.join(format!("run_{j:04}"));
                let outcome = run_in_dir(&configs[j], cfg.sweep_command, &dir).map(|_| ());
                if let Err(e) = &outcome {
                    if e.is_numerical() {
                        worst_numerical.store(1, Ordering::SeqCst);
                    }
                }
                results.lock().unwrap()[j] = Some(outcome.map_err(|e| e.to_string()));
            });
        }
    });
    let results = results.into_inner().unwrap();
    let runs: Vec<serde_json::Value> = docs
        .iter()
        .zip(&results)
        .enumerate()
        .map(|(j, (d, r))| {
            let overrides: BTreeMap<&String, String> = cfg.sweep_axes.iter().map(|(k, _)| (k, d[k].to_string())).collect();
            let error = match r {
                Some(Err(e)) => Some(e.clone()),
                _ => None,
            };
            json!({ "dir": format!("run_{j:04}"), "overrides": overrides, "ok": error.is_none(), "error": error })
        })
        .collect();
    em.json("sweep.json", &json!({ "command": cfg.sweep_command.name(), "runs": runs }))?;
    let failed: Vec<&serde_json::Value> = runs.iter().filter(|r| r["ok"] == json!(false)).collect();
    if !failed.is_empty() {
        let msg = format!("{} of {} sweep runs failed", failed.len(), runs.len());
        return Err(if worst_numerical.load(Ordering::SeqCst) == 1 { Error::Numerical(msg) } else { Error::Configuration(msg) });
    }
    Ok(())
}

/// Runs one subcommand into `dir`, then writes the manifest. On failure a
/// `FAILED` marker holding the error is written next to any partial output.
pub fn run_in_dir(cfg: &RunConfig, cmd: Command, dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mut em = Emitter::new(dir)?;
    let _ = fs::remove_file(dir.join("FAILED"));
    let outcome = match cmd {
        Command::Simulate => simulate(cfg, &mut em),
        Command::Steady => steady(cfg, &mut em),
        Command::Jump => jump(cfg, &mut em),
        Command::Entropy => entropy(cfg, &mut em),
        Command::FbCheck => fb_check(cfg, &mut em),
        Command::Poincare => poincare(cfg, &mut em),
        Command::Sweep => sweep(cfg, &mut em),
    };
    if let Err(e) = outcome {
        let _ = fs::write(dir.join("FAILED"), format!("{} failed: {e}\n", cmd.name()));
        let _ = write_manifest(dir);
        return Err(e);
    }
    write_manifest(dir)
}

/// Runs a subcommand into `out`, or into `output.dir` when `out` is `None`.
pub fn run_scenario(cfg: &RunConfig, cmd: Command, out: Option<&Path>) -> Result<Vec<ManifestEntry>> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Configuration("no output directory (use --out or `output.dir`)".into()))?;
    run_in_dir(cfg, cmd, &dir)
}

/// Exit status for an error: 2 for numerical failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for name in PRESETS {
            let cfg = config_from_doc(&preset(name).unwrap()).unwrap();
            assert_eq!(cfg.params.v_f, 1.0);
            assert_eq!(cfg.dil.c, 1.0);
            assert_eq!(cfg.stepper.snapshot_stride, 100);
            assert_eq!(cfg.stepper.blowup_epsilon, 1e-8);
        }
        let jump = config_from_doc(&preset("fig-jump").unwrap()).unwrap();
        assert_eq!((jump.params.b, jump.params.a0, jump.params.a1, jump.params.b0()), (0.9, 0.5, 1.0, 0.0));
        assert!(preset("nope").is_err());
    }

    #[test]
    fn missing_key_named() {
        let text = FIG_JUMP.replace("a0 = 0.5\n", "");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("params.a0"), "{err}");
        let err = parse_config(&format!("{FIG_JUMP}\n[bogus]\nx = 1\n")).unwrap_err().to_string();
        assert!(err.contains("bogus.x"), "{err}");
        let err = parse_config(&FIG_JUMP.replace("n = 1024", "n = \"many\"")).unwrap_err().to_string();
        assert!(err.contains("grid.n"), "{err}");
    }

    #[test]
    fn overrides() {
        let mut doc = preset("fig-jump").unwrap();
        apply_override(&mut doc, "params.b=0.5").unwrap();
        apply_override(&mut doc, "stepper.scheme=upwind").unwrap();
        apply_override(&mut doc, "dilation.c = natural").unwrap();
        let cfg = config_from_doc(&doc).unwrap();
        assert_eq!(cfg.params.b, 0.5);
        assert_eq!(cfg.stepper.scheme, FluxScheme::Upwind);
        assert_eq!(cfg.dil.c, 0.5);
        assert!(apply_override(&mut doc, "no-equals").is_err());
    }

    #[test]
    fn sweep_product() {
        let mut doc = preset("fig-jump").unwrap();
        apply_override(&mut doc, "sweep.axes.params.b=[0.3, 0.5]").unwrap();
        apply_override(&mut doc, "sweep.axes.grid.n=[64, 128, 256]").unwrap();
        let cfg = config_from_doc(&doc).unwrap();
        let docs = sweep_docs(&cfg);
        assert_eq!(docs.len(), 6);
        assert!(docs.iter().all(|d| d.keys().all(|k| !k.starts_with("sweep."))));
    }
}
