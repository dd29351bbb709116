//! Run configuration, task orchestration, file output and the verification
//! suite behind the command-line tool.
//!
//! A run reads one TOML file (unknown keys are rejected), executes the
//! requested tasks in a fixed order and writes its tables plus a
//! `manifest.json` that lists every emitted file with its SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::filament_field::FieldSource;
use crate::frame_flow::{reconstruct_many, AnchoredConstruction, CurveState, Frame, FrameConfig};
use crate::nls_coeffs::{evolve, CoefficientTrajectory, SolverConfig};
use crate::polyline_codec::{
    build_polyline, decode_coefficients, design_coefficients, extract_spec_from_tangents,
    reversed_spec, CoefficientDesign, PhaseCoupling, PolylineSpec,
};
use crate::self_similar::{angle_from_alpha, PhiTable, ProfileConfig, SelfSimilarProfile};
use crate::talbot::{gauss_sum, nonlinear_talbot_scan};
use crate::{Complex64 as C, Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Evolve,
    Reconstruct,
    Talbot,
    Selfsimilar,
    Verify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config(format!("unknown format {s:?} (expected csv or json)"))),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    /// Polyline specification file.
    pub polyline: Option<PathBuf>,
    /// Inline coefficients `[x, re, im]`.
    pub coefficients: Option<Vec<[f64; 3]>>,
    /// Coefficient table `(location, re, im)` as written by `design`.
    pub coefficients_file: Option<PathBuf>,
    /// Cached `(a, phi)` table; computed on demand when absent.
    pub phi_table: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { lo: -2.0, hi: 3.0, n: 501 }
    }
}

impl GridSection {
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.hi > self.lo) || self.n < 2 {
            return Err(Error::Config("grid needs hi > lo and n ≥ 2".into()));
        }
        Ok((0..self.n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.n - 1) as f64).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameSection {
    pub t0: f64,
    #[serde(rename = "P")]
    pub p: [f64; 3],
    /// Rows `T, e1, e2`.
    pub base_frame: [[f64; 3]; 3],
    /// Reconstruction times; negative entries use time reversal.
    pub times: Vec<f64>,
    pub grid: GridSection,
    pub integrator: FrameConfig,
}

impl Default for FrameSection {
    fn default() -> Self {
        FrameSection {
            t0: 1.0,
            p: [0.0; 3],
            base_frame: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            times: vec![0.05, 0.0125],
            grid: GridSection::default(),
            integrator: FrameConfig::default(),
        }
    }
}

impl FrameSection {
    fn frame(&self) -> Frame {
        let r = |i: usize| Vec3::new(self.base_frame[i][0], self.base_frame[i][1], self.base_frame[i][2]);
        Frame { t: r(0), e1: r(1), e2: r(2) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { directory: PathBuf::from("out"), formats: vec![Format::Csv] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfSimilarSection {
    pub amplitudes: Vec<f64>,
    pub x_max: f64,
    pub profile: ProfileConfig,
}

impl Default for SelfSimilarSection {
    fn default() -> Self {
        SelfSimilarSection { amplitudes: Vec::new(), x_max: 200.0, profile: ProfileConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TalbotSection {
    pub p: u64,
    pub q: u64,
    pub eta: f64,
    pub window: GridSection,
}

impl Default for TalbotSection {
    fn default() -> Self {
        TalbotSection { p: 1, q: 3, eta: 0.25, window: GridSection { lo: -1.0, hi: 1.0, n: 2001 } }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub input: InputSection,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub frame: FrameSection,
    #[serde(default)]
    pub outputs: OutputSection,
    #[serde(default)]
    pub tasks: Vec<Task>,
    #[serde(default)]
    pub selfsimilar: SelfSimilarSection,
    #[serde(default)]
    pub talbot: TalbotSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads a file; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut cfg.input.polyline);
        fix(&mut cfg.input.coefficients_file);
        fix(&mut cfg.input.phi_table);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        let inputs = [
            self.input.polyline.is_some(),
            self.input.coefficients.is_some(),
            self.input.coefficients_file.is_some(),
        ];
        let needs_input = self.tasks.iter().any(|t| matches!(t, Task::Evolve | Task::Reconstruct | Task::Talbot));
        if inputs.iter().filter(|&&b| b).count() > 1 {
            return Err(Error::Config("give exactly one of polyline, coefficients, coefficients_file".into()));
        }
        if needs_input && !inputs.iter().any(|&b| b) {
            return Err(Error::Config("tasks need an input (polyline or coefficients)".into()));
        }
        for p in [&self.input.polyline, &self.input.coefficients_file, &self.input.phi_table].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        if self.tasks.contains(&Task::Reconstruct) {
            let (lo, hi) = (self.solver.t_min, self.solver.t_max);
            if !(lo < self.frame.t0 && self.frame.t0 <= hi) {
                return Err(Error::Config(format!("need t_min < t0 ≤ t_max, got {lo}, {}, {hi}", self.frame.t0)));
            }
            for &t in &self.frame.times {
                if t == 0.0 || t.abs() < lo || t.abs() > hi {
                    return Err(Error::Config(format!("reconstruction time {t} outside ±[t_min, t_max]")));
                }
            }
            self.frame.grid.points()?;
        }
        if self.outputs.formats.is_empty() {
            return Err(Error::Config("outputs.formats must not be empty".into()));
        }
        Ok(())
    }
}

/// Per-invocation output options.
#[derive(Debug, Clone)]
pub struct OutputOptions {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
    pub quiet: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskError {
    pub task: String,
    pub message: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config: Value,
    pub tool_version: String,
    pub timings: BTreeMap<String, f64>,
    pub diagnostics: BTreeMap<String, Value>,
    pub files: Vec<FileRecord>,
    pub warnings: Vec<String>,
    pub errors: Vec<TaskError>,
}

impl RunManifest {
    fn new(config: Value) -> Self {
        RunManifest {
            config,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timings: BTreeMap::new(),
            diagnostics: BTreeMap::new(),
            files: Vec::new(),
            warnings: Vec::new(),
            errors: Vec::new(),
        }
    }

    /// Exit code of the run: the first task error decides.
    pub fn exit_code(&self) -> i32 {
        self.errors.first().map_or(0, |e| e.exit_code)
    }
}

/// Writes a numeric table in every requested format and records checksums.
struct Writer<'a> {
    opts: &'a OutputOptions,
    manifest: &'a mut RunManifest,
}

impl Writer<'_> {
    fn table(&mut self, stem: &str, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        fs::create_dir_all(&self.opts.directory)?;
        for f in &self.opts.formats {
            let (name, bytes) = match f {
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    w.write_record(columns).map_err(csv_err)?;
                    for r in rows {
                        w.write_record(r.iter().map(|v| format!("{v:?}"))).map_err(csv_err)?;
                    }
                    (format!("{stem}.csv"), w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
                }
                Format::Json => {
                    let v = json!({ "columns": columns, "rows": rows });
                    (format!("{stem}.json"), serde_json::to_vec_pretty(&v).map_err(json_err)?)
                }
            };
            self.file(&name, &bytes)?;
        }
        Ok(())
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        fs::create_dir_all(&self.opts.directory)?;
        self.file(name, &serde_json::to_vec_pretty(value).map_err(json_err)?)
    }

    fn file(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.opts.directory.join(name), bytes)?;
        self.manifest.files.push(FileRecord { path: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_manifest(opts: &OutputOptions, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(&opts.directory)?;
    let bytes = serde_json::to_vec_pretty(manifest).map_err(json_err)?;
    fs::write(opts.directory.join("manifest.json"), bytes)?;
    Ok(())
}

/// Reads a polyline specification (TOML with `[[corners]]` entries).
pub fn read_polyline(path: &Path) -> Result<PolylineSpec> {
    let spec: PolylineSpec = toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

/// Reads a `(location, re, im)` table.
pub fn read_coefficients(path: &Path) -> Result<Vec<(f64, C)>> {
    read_rows(path, 3).map(|rows| rows.into_iter().map(|r| (r[0], C::new(r[1], r[2]))).collect())
}

/// Reads an `(a, phi)` table.
pub fn read_phi_table(path: &Path) -> Result<PhiTable> {
    let entries = read_rows(path, 2)?.into_iter().map(|r| (r[0], r[1])).collect();
    Ok(PhiTable { entries, x_max: f64::NAN })
}

fn read_rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != width {
            return Err(Error::Config(format!("{}: row {} has {} fields, expected {width}", path.display(), i + 1, rec.len())));
        }
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("{}: row {}: {e}", path.display(), i + 1))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn phi_table_for(amps: &[f64], cached: Option<&Path>, x_max: f64, cfg: &ProfileConfig) -> Result<PhiTable> {
    if let Some(p) = cached {
        return read_phi_table(p);
    }
    PhiTable::compute(amps, x_max, cfg)
}

fn design_rows(d: &CoefficientDesign) -> Vec<Vec<f64>> {
    d.alphas.iter().map(|(x, a)| vec![*x, a.re, a.im]).collect()
}

/// `design`: polyline specification → coefficient table.
pub fn cmd_design(spec_path: &Path, phi_table: Option<&Path>, opts: &OutputOptions) -> Result<RunManifest> {
    let spec = read_polyline(spec_path)?;
    let mut manifest = RunManifest::new(json!({ "spec": spec_path.display().to_string() }));
    let clock = Instant::now();
    let d = design_spec(&spec, phi_table, &SelfSimilarSection::default())?;
    manifest.timings.insert("design".into(), clock.elapsed().as_secs_f64());
    manifest.warnings.extend(d.warnings.iter().cloned());
    manifest.diagnostics.insert("design".into(), design_diagnostics(&d));
    let mut w = Writer { opts, manifest: &mut manifest };
    w.table("coefficients", &["location", "re", "im"], &design_rows(&d))?;
    write_manifest(opts, &manifest)?;
    Ok(manifest)
}

fn design_spec(spec: &PolylineSpec, phi_table: Option<&Path>, ss: &SelfSimilarSection) -> Result<CoefficientDesign> {
    spec.validate()?;
    let amps: Vec<f64> = spec
        .corners
        .iter()
        .map(|c| crate::self_similar::alpha_from_angle(c.theta))
        .collect::<Result<_>>()?;
    let table = if spec.corners.len() > 1 {
        phi_table_for(&amps, phi_table, ss.x_max, &ss.profile)?
    } else {
        PhiTable::default()
    };
    design_coefficients(spec, &table, PhaseCoupling::AllCorners)
}

fn design_diagnostics(d: &CoefficientDesign) -> Value {
    json!({
        "beta": d.beta,
        "phi_used": d.phi_used,
        "phi_interpolation_error": d.phi_error,
        "phase_steps": d.phase_steps,
    })
}

/// `selfsimilar`: profiles and the `(a, phi)` table.
pub fn cmd_selfsimilar(amplitudes: &[f64], x_max: f64, cfg: &ProfileConfig, opts: &OutputOptions) -> Result<RunManifest> {
    let mut manifest = RunManifest::new(json!({ "amplitudes": amplitudes, "x_max": x_max }));
    let clock = Instant::now();
    selfsimilar_task(amplitudes, x_max, cfg, opts, &mut manifest)?;
    manifest.timings.insert("selfsimilar".into(), clock.elapsed().as_secs_f64());
    write_manifest(opts, &manifest)?;
    Ok(manifest)
}

fn selfsimilar_task(
    amplitudes: &[f64],
    x_max: f64,
    cfg: &ProfileConfig,
    opts: &OutputOptions,
    manifest: &mut RunManifest,
) -> Result<()> {
    if amplitudes.is_empty() {
        return Err(Error::Config("selfsimilar needs at least one amplitude".into()));
    }
    let mut phi_rows = Vec::new();
    let mut diag = Vec::new();
    for (i, &a) in amplitudes.iter().enumerate() {
        let p = SelfSimilarProfile::compute(a, x_max, cfg)?;
        let asy = p.asymptotics.clone().ok_or_else(|| Error::InvalidState("no asymptotics".into()))?;
        let rows: Vec<Vec<f64>> = p
            .samples
            .iter()
            .map(|s| {
                let f = &s.frame;
                vec![s.x, f.t[0], f.t[1], f.t[2], f.e1[0], f.e1[1], f.e1[2], f.e2[0], f.e2[1], f.e2[2]]
            })
            .collect();
        Writer { opts, manifest }.table(
            &format!("profile_{i}"),
            &["x", "T1", "T2", "T3", "ReN1", "ReN2", "ReN3", "ImN1", "ImN2", "ImN3"],
            &rows,
        )?;
        manifest.warnings.extend(asy.warnings.iter().map(|w| format!("a = {a}: {w}")));
        let par = asy.parity();
        diag.push(json!({
            "a": a,
            "corner_angle": asy.corner_angle(),
            "closed_form": angle_from_alpha(a)?,
            "frame_defect": asy.frame_defect,
            "consistency": asy.consistency,
            "parity_tangent": par.tangent,
            "parity_normal": par.normal_reflected,
            "phi": p.phi,
        }));
        if let Some(phi) = p.phi {
            phi_rows.push(vec![a, phi]);
        }
    }
    Writer { opts, manifest }.table("phi_table", &["a", "phi"], &phi_rows)?;
    manifest.diagnostics.insert("selfsimilar".into(), Value::Array(diag));
    Ok(())
}

/// Pipeline state shared by the tasks of one run.
struct Pipeline {
    data: Vec<(f64, C)>,
    spec: Option<PolylineSpec>,
    forward: Option<CoefficientTrajectory>,
    reversed: Option<CoefficientTrajectory>,
}

fn load_input(cfg: &RunConfig, manifest: &mut RunManifest) -> Result<Pipeline> {
    let (data, spec) = if let Some(p) = &cfg.input.polyline {
        let spec = read_polyline(p)?;
        let d = design_spec(&spec, cfg.input.phi_table.as_deref(), &cfg.selfsimilar)?;
        manifest.warnings.extend(d.warnings.iter().cloned());
        manifest.diagnostics.insert("design".into(), design_diagnostics(&d));
        (d.alphas, Some(spec))
    } else if let Some(c) = &cfg.input.coefficients {
        (c.iter().map(|r| (r[0], C::new(r[1], r[2]))).collect(), None)
    } else if let Some(p) = &cfg.input.coefficients_file {
        (read_coefficients(p)?, None)
    } else {
        (Vec::new(), None)
    };
    Ok(Pipeline { data, spec, forward: None, reversed: None })
}

fn solver_for(cfg: &RunConfig) -> SolverConfig {
    let mut s = cfg.solver.clone();
    if cfg.tasks.iter().any(|t| matches!(t, Task::Reconstruct | Task::Talbot | Task::Verify)) {
        s.keep_dense = true;
    }
    s
}

fn evolve_task(cfg: &RunConfig, pipe: &mut Pipeline, opts: &OutputOptions, manifest: &mut RunManifest) -> Result<()> {
    let s = solver_for(cfg);
    let traj = evolve(&pipe.data, s.t_min, s.t_max, &s)?;
    let d = &traj.diagnostics;
    manifest.warnings.extend(d.warnings.iter().cloned());
    manifest.diagnostics.insert(
        "evolve".into(),
        json!({
            "max_mass_drift": d.max_mass_drift,
            "max_momentum_drift": d.max_momentum_drift,
            "accepted_steps": d.accepted_steps,
            "rejected_steps": d.rejected_steps,
            "nonresonant_terms": d.nonresonant_terms,
            "omega_max": d.omega_max,
        }),
    );
    let mut rows = Vec::new();
    for (i, st) in traj.states.iter().enumerate() {
        for (x, a) in st.locations.iter().zip(&st.values) {
            rows.push(vec![st.t, *x, a.re, a.im, d.mass[i], d.momentum[i]]);
        }
    }
    Writer { opts, manifest }.table("trajectory", &["t", "location", "re", "im", "mass", "momentum"], &rows)?;
    pipe.forward = Some(traj);
    Ok(())
}

fn ensure_forward(cfg: &RunConfig, pipe: &mut Pipeline) -> Result<()> {
    if pipe.forward.is_none() {
        let s = solver_for(cfg);
        pipe.forward = Some(evolve(&pipe.data, s.t_min, s.t_max, &s)?);
    }
    Ok(())
}

/// Coefficients of the reversed-orientation curve `x ↦ χ0(−x)`.
fn reversed_data(cfg: &RunConfig, pipe: &Pipeline) -> Result<Vec<(f64, C)>> {
    let amps: Vec<f64> = pipe.data.iter().map(|d| d.1.norm()).filter(|a| *a > 0.0).collect();
    let spec = match &pipe.spec {
        Some(s) => s.clone(),
        None => {
            let table = phi_table_for(&amps, cfg.input.phi_table.as_deref(), cfg.selfsimilar.x_max, &cfg.selfsimilar.profile)?;
            decode_coefficients(&pipe.data, &table)?
        }
    };
    let d = design_spec(&reversed_spec(&spec), cfg.input.phi_table.as_deref(), &cfg.selfsimilar)?;
    Ok(d.alphas)
}

fn curve_rows(c: &CurveState, t_out: f64, flip: bool) -> Vec<Vec<f64>> {
    let n = c.xs.len();
    (0..n)
        .map(|j| {
            // Under reversal χ(−t, x) = χ̃(t, −x): T = −T̃, e1 = ẽ1, e2 = −ẽ2.
            let i = if flip { n - 1 - j } else { j };
            let f = &c.frames[i];
            let p = c.points[i];
            let (x, t, e1, e2) = if flip { (-c.xs[i], -f.t, f.e1, -f.e2) } else { (c.xs[i], f.t, f.e1, f.e2) };
            vec![
                t_out, x, p[0], p[1], p[2], t[0], t[1], t[2], e1[0], e1[1], e1[2], e2[0], e2[1], e2[2],
            ]
        })
        .collect()
}

fn reconstruct_task(cfg: &RunConfig, pipe: &mut Pipeline, opts: &OutputOptions, manifest: &mut RunManifest) -> Result<()> {
    ensure_forward(cfg, pipe)?;
    let fs = &cfg.frame;
    let xs = fs.grid.points()?;
    let anchor = AnchoredConstruction::new(Vec3::from(fs.p), fs.t0, fs.frame())?;
    let pos: Vec<f64> = fs.times.iter().copied().filter(|t| *t > 0.0).collect();
    let neg: Vec<f64> = fs.times.iter().copied().filter(|t| *t < 0.0).map(|t| -t).collect();
    let mut rows = Vec::new();
    let mut drift: f64 = 0.0;
    if !pos.is_empty() {
        let traj = pipe.forward.as_ref().unwrap();
        for c in reconstruct_many(&anchor, traj, &pos, &xs, &fs.integrator)? {
            drift = drift.max(c.max_drift);
            rows.extend(curve_rows(&c, c.t, false));
        }
    }
    if !neg.is_empty() {
        if pipe.reversed.is_none() {
            let data = reversed_data(cfg, pipe)?;
            let s = solver_for(cfg);
            pipe.reversed = Some(evolve(&data, s.t_min, s.t_max, &{
                let mut s = s;
                s.keep_dense = true;
                s
            })?);
        }
        let traj = pipe.reversed.as_ref().unwrap();
        let base = fs.frame();
        let rev_anchor = AnchoredConstruction::new(
            Vec3::from(fs.p),
            fs.t0,
            Frame { t: -base.t, e1: base.e1, e2: -base.e2 },
        )?;
        let rev_xs: Vec<f64> = xs.iter().rev().map(|x| 0.0 - x).collect();
        for c in reconstruct_many(&rev_anchor, traj, &neg, &rev_xs, &fs.integrator)? {
            drift = drift.max(c.max_drift);
            rows.extend(curve_rows(&c, -c.t, true));
        }
    }
    manifest.diagnostics.insert("reconstruct".into(), json!({ "max_frame_drift_rate": drift }));
    Writer { opts, manifest }.table(
        "curve",
        &["t", "x", "chi1", "chi2", "chi3", "T1", "T2", "T3", "e11", "e12", "e13", "e21", "e22", "e23"],
        &rows,
    )
}

fn talbot_task(cfg: &RunConfig, pipe: &mut Pipeline, opts: &OutputOptions, manifest: &mut RunManifest) -> Result<()> {
    ensure_forward(cfg, pipe)?;
    let ts = &cfg.talbot;
    let w = &ts.window;
    let scan = nonlinear_talbot_scan(pipe.forward.as_ref().unwrap(), ts.p, ts.q, ts.eta, (w.lo, w.hi, w.n))?;
    manifest.diagnostics.insert(
        "talbot".into(),
        json!({ "t": scan.t, "max_off_lattice": scan.max_off_lattice, "contrast": scan.contrast }),
    );
    let rows: Vec<Vec<f64>> = (0..scan.xs.len())
        .map(|i| vec![scan.xs[i], scan.dist[i], scan.abs_u[i], if scan.near[i] { 1.0 } else { 0.0 }])
        .collect();
    Writer { opts, manifest }.table("talbot_scan", &["x", "dist", "abs_u", "near"], &rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, tolerance: f64) -> Check {
        Check { name: name.into(), value, tolerance, pass: value <= tolerance }
    }
}

/// Invariant checks reachable from the configuration.
fn verify_checks(cfg: &RunConfig, pipe: &mut Pipeline) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    if !pipe.data.is_empty() {
        ensure_forward(cfg, pipe)?;
        let traj = pipe.forward.as_ref().unwrap();
        let d = &traj.diagnostics;
        checks.push(Check::at_most("mass drift", d.max_mass_drift, 1e-8));
        checks.push(Check::at_most("momentum drift", d.max_momentum_drift, 1e-8));
        let nonzero = pipe.data.iter().filter(|a| a.1.norm() > 0.0).count();
        if nonzero == 1 && cfg.solver.halo == 0 {
            let a0 = pipe.data[0].1.norm();
            let dev = traj.states.iter().map(|s| (s.values[0].norm() - a0).abs()).fold(0.0, f64::max);
            checks.push(Check::at_most("single mass: |A_0(t)| constant", dev, 1e-10));
        }
        if let Some(spec) = &pipe.spec {
            let mut worst: f64 = 0.0;
            for (c, (_, a)) in spec.corners.iter().zip(&pipe.data) {
                worst = worst.max((angle_from_alpha(a.norm())? - c.theta).abs());
            }
            checks.push(Check::at_most("modulus law", worst, 1e-12));
            let poly = build_polyline(spec, &Frame::canonical(), Vec3::zeros())?;
            let ex = extract_spec_from_tangents(&poly.xs, &poly.tangents)?;
            let mut rt: f64 = 0.0;
            for (a, b) in spec.corners.iter().zip(&ex.spec.corners) {
                rt = rt.max((a.theta - b.theta).abs()).max((a.tau - b.tau).abs());
                if a.delta != b.delta && !ex.planar_joints.is_empty() {
                    continue;
                }
                if a.delta != b.delta {
                    rt = f64::INFINITY;
                }
            }
            checks.push(Check::at_most("build/extract roundtrip", rt, 1e-8));
        }
        if traj.convention() == crate::nls_coeffs::Convention::Geometric && traj.sign() == 1 {
            let fs = &cfg.frame;
            let t = traj.window().0.max(fs.t0 * 0.5);
            let anchor = AnchoredConstruction::new(Vec3::from(fs.p), fs.t0, fs.frame())?;
            let c = crate::frame_flow::reconstruct_curve(&anchor, traj, t, &fs.grid.points()?, &fs.integrator)?;
            checks.push(Check::at_most("frame drift per unit step", c.max_drift, 1e-6));
        }
    }
    let ss = &cfg.selfsimilar;
    for &a in &ss.amplitudes {
        let p = SelfSimilarProfile::compute(a, ss.x_max, &ss.profile)?;
        if let Some(asy) = &p.asymptotics {
            let law = (asy.corner_angle() - angle_from_alpha(a)?).abs();
            checks.push(Check::at_most(&format!("angle law a = {a}"), law, 5e-3));
            let par = asy.parity();
            checks.push(Check::at_most(&format!("parity a = {a}"), par.tangent.max(par.normal_reflected), 1e-6));
        }
    }
    let q = cfg.talbot.q as i64;
    let p = cfg.talbot.p as i64;
    if q % 2 == 1 && q > 0 {
        let mut worst: f64 = 0.0;
        for m in 0..q {
            worst = worst.max((gauss_sum(p, m, q)?.norm() - (q as f64).sqrt()).abs());
        }
        checks.push(Check::at_most(&format!("|G(−{p}, m, {q})| = √{q}"), worst, 1e-10));
    }
    Ok(checks)
}

/// Runs every task of the configuration (or only `only`) and writes the
/// manifest, even when a task fails.
pub fn run(cfg: &RunConfig, only: Option<Task>, opts: &OutputOptions) -> Result<RunManifest> {
    let mut tasks: Vec<Task> = match only {
        Some(t) => vec![t],
        None => cfg.tasks.clone(),
    };
    tasks.sort();
    tasks.dedup();
    let cfg = &RunConfig { tasks: tasks.clone(), ..cfg.clone() };
    cfg.validate()?;
    let echo = serde_json::to_value(cfg).map_err(json_err)?;
    let mut manifest = RunManifest::new(echo);
    let needs_data = tasks.iter().any(|t| !matches!(t, Task::Selfsimilar));
    let mut pipe = if needs_data {
        match load_input(cfg, &mut manifest) {
            Ok(p) => p,
            Err(e) => {
                record(&mut manifest, "input", &e);
                write_manifest(opts, &manifest)?;
                return Ok(manifest);
            }
        }
    } else {
        Pipeline { data: Vec::new(), spec: None, forward: None, reversed: None }
    };
    for task in tasks {
        let name = serde_json::to_value(task).map_err(json_err)?.as_str().unwrap_or("task").to_string();
        let clock = Instant::now();
        let res = match task {
            Task::Evolve => evolve_task(cfg, &mut pipe, opts, &mut manifest),
            Task::Reconstruct => reconstruct_task(cfg, &mut pipe, opts, &mut manifest),
            Task::Talbot => talbot_task(cfg, &mut pipe, opts, &mut manifest),
            Task::Selfsimilar => selfsimilar_task(
                &cfg.selfsimilar.amplitudes,
                cfg.selfsimilar.x_max,
                &cfg.selfsimilar.profile,
                opts,
                &mut manifest,
            ),
            Task::Verify => verify_checks(cfg, &mut pipe).and_then(|checks| {
                let failed = checks.iter().filter(|c| !c.pass).count();
                manifest.diagnostics.insert("verify".into(), json!({ "checks": checks, "failed": failed }));
                Writer { opts, manifest: &mut manifest }.json("verify_report.json", &json!(checks))?;
                if failed > 0 {
                    Err(Error::Integration(format!("{failed} verification checks failed")))
                } else {
                    Ok(())
                }
            }),
        };
        manifest.timings.insert(name.clone(), clock.elapsed().as_secs_f64());
        if let Err(e) = res {
            record(&mut manifest, &name, &e);
        }
    }
    write_manifest(opts, &manifest)?;
    Ok(manifest)
}

fn record(manifest: &mut RunManifest, task: &str, e: &Error) {
    manifest.errors.push(TaskError { task: task.into(), message: e.to_string(), exit_code: e.exit_code() });
}

/// Output options from the configuration, overridden by command-line flags.
pub fn output_options(cfg: &RunConfig, out: Option<&Path>, format: Option<Format>, quiet: bool) -> OutputOptions {
    OutputOptions {
        directory: out.map(Path::to_path_buf).unwrap_or_else(|| cfg.outputs.directory.clone()),
        formats: format.map(|f| vec![f]).unwrap_or_else(|| cfg.outputs.formats.clone()),
        quiet,
    }
}
