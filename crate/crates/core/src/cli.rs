//! Run orchestration: JSON configuration, the six subcommands, and the
//! `frames.csv` / `summary.json` artifacts of each run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};
use thiserror::Error;

use crate::flow::{
    default_dt_safety, default_frame_stride, rescale_trajectory, run, BoundaryMode, FlowConfig, FlowError,
    InitialGenerator, Scenario, Trajectory,
};
use crate::geomgrid::{FrameGeometry, GraphState, GridError, GridSpec, ScalarField};
use crate::mss::{
    korevaar_report, relax_to_minimal, subharmonic_residual, subharmonic_study, MssError, MssProblem,
};
use crate::smallalg::{area_decreasing_report, singular_spectrum};
use crate::verify::{
    for_each_residual_at, gradient_bound_report, maxpoint_report, refinement_study, weighted_sup_monitor,
    MaxPointStatus, Quantity, RefinementReport, ResidualOptions, VerifyError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid config field {field}: {message}")]
    Field { field: String, message: String },
    #[error("unknown scenario {name:?}; valid options: {valid}, or a path to a .json scenario file")]
    UnknownScenario { name: String, valid: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Mss(#[from] MssError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Process exit status of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    CheckFailed,
    ConfigError,
    BlowUp,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::CheckFailed => 1,
            Status::ConfigError => 2,
            Status::BlowUp => 3,
        }
    }
}

impl CliError {
    pub fn status(&self) -> Status {
        match self {
            CliError::Parse { .. }
            | CliError::Field { .. }
            | CliError::UnknownScenario { .. }
            | CliError::Io { .. }
            | CliError::Grid(_) => Status::ConfigError,
            CliError::Flow(e) | CliError::Verify(VerifyError::Flow(e)) | CliError::Mss(MssError::Flow(e)) => {
                flow_status(e)
            }
            CliError::Verify(VerifyError::Grid(_))
            | CliError::Verify(VerifyError::Levels(_))
            | CliError::Verify(VerifyError::NotNested(_))
            | CliError::Verify(VerifyError::NoFrameAtTime { .. })
            | CliError::Verify(VerifyError::UnknownQuantity(_))
            | CliError::Verify(VerifyError::PairIndex { .. })
            | CliError::Verify(VerifyError::TooFewFrames(_)) => Status::ConfigError,
            CliError::Verify(_) => Status::CheckFailed,
            CliError::Mss(MssError::NonFinite { .. }) | CliError::Mss(MssError::Diverged { .. }) => Status::BlowUp,
            CliError::Mss(MssError::Grid(_))
            | CliError::Mss(MssError::Parameter { .. })
            | CliError::Mss(MssError::Levels(_)) => Status::ConfigError,
            CliError::Mss(_) => Status::CheckFailed,
        }
    }
}

fn flow_status(e: &FlowError) -> Status {
    match e {
        FlowError::BlowUp { .. } => Status::BlowUp,
        _ => Status::ConfigError,
    }
}

#[derive(Parser, Debug)]
#[command(name = "gmcf", version, about = "Graphical mean curvature flow laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CommandKind,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Parent directory of the run directories.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the seed of a fourier scenario.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated points per axis, coarse to fine.
    #[arg(long, global = true)]
    pub levels: Option<String>,
    /// Comma-separated quantity ids, e.g. `w,phi,pair(1,2)`.
    #[arg(long, global = true)]
    pub quantities: Option<String>,
}

#[derive(Subcommand, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    /// Run the flow and dump the frames.
    Simulate,
    /// Residuals of the heat inequalities at the grid and at half resolution.
    Verify,
    /// Max point of the Gaussian cutoff in the rescaled gauge.
    Maxpoint,
    /// Measured gradient at the origin against the explicit bound.
    BoundReport,
    /// Minimal surface system pipeline.
    Mss,
    /// Refinement study over `levels`.
    Refine,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Simulate => "simulate",
            CommandKind::Verify => "verify",
            CommandKind::Maxpoint => "maxpoint",
            CommandKind::BoundReport => "bound-report",
            CommandKind::Mss => "mss",
            CommandKind::Refine => "refine",
        }
    }
}

/// Named scenarios accepted in place of an inline definition.
pub const PRESETS: [&str; 6] = ["zero", "linear", "grim_reaper", "fourier", "fourier_m1", "fourier_mss"];

pub fn preset(name: &str) -> Option<Scenario> {
    Some(match name {
        "zero" => Scenario::zero(2, 2),
        "linear" => Scenario::new(
            "linear",
            2,
            2,
            InitialGenerator::Linear {
                slopes: vec![vec![0.5, 0.25], vec![-0.25, 0.125]],
                offsets: vec![0.5, -1.0],
            },
        ),
        "grim_reaper" => Scenario::grim_reaper(),
        "fourier" => Scenario::fourier(2, 2, 7, 1.0, 3),
        "fourier_m1" => Scenario {
            name: "fourier_m1".into(),
            ..Scenario::fourier(2, 1, 7, 1.0, 3)
        },
        "fourier_mss" => Scenario::new(
            "fourier_mss",
            2,
            2,
            InitialGenerator::Fourier {
                seed: 11,
                amplitude: 1.0,
                max_freq: 3,
                window: false,
            },
        ),
        _ => return None,
    })
}

/// A preset name, a path to a scenario file, or an inline scenario.
#[derive(Clone, Debug, PartialEq)]
pub enum ScenarioSpec {
    Preset(String),
    File(String),
    Inline(Scenario),
}

impl Serialize for ScenarioSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ScenarioSpec::Preset(name) | ScenarioSpec::File(name) => s.serialize_str(name),
            ScenarioSpec::Inline(sc) => sc.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for ScenarioSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        match Value::deserialize(d)? {
            Value::String(name) if PRESETS.contains(&name.as_str()) => Ok(ScenarioSpec::Preset(name)),
            Value::String(path) if path.ends_with(".json") => Ok(ScenarioSpec::File(path)),
            Value::String(name) => Err(D::Error::custom(format!(
                "unknown scenario {name:?}; valid options: {}, or a path to a .json scenario file",
                PRESETS.join(", ")
            ))),
            v @ Value::Object(_) => serde_json::from_value(v)
                .map(ScenarioSpec::Inline)
                .map_err(|e| D::Error::custom(format!("scenario: {e}"))),
            other => Err(D::Error::custom(format!(
                "scenario must be a name, a file path or an object, got {other}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_points")]
    pub points: usize,
    /// Half-width `L` of the cube `[−L, L]ⁿ`.
    #[serde(default = "default_extent")]
    pub extent: f64,
}

fn default_points() -> usize {
    65
}

fn default_extent() -> f64 {
    1.0
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            points: default_points(),
            extent: default_extent(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSettings {
    #[serde(default = "default_dt_safety")]
    pub dt_safety: f64,
    /// `None` runs to `1/(4n)`.
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default = "default_frame_stride")]
    pub frame_stride: usize,
    #[serde(default = "default_boundary")]
    pub boundary: BoundaryMode,
}

fn default_boundary() -> BoundaryMode {
    BoundaryMode::DirichletFrozen
}

impl Default for FlowSettings {
    fn default() -> Self {
        Self {
            dt_safety: default_dt_safety(),
            t_end: None,
            frame_stride: default_frame_stride(),
            boundary: default_boundary(),
        }
    }
}

impl FlowSettings {
    pub fn flow_config(&self, n: usize) -> FlowConfig {
        FlowConfig {
            dt_safety: self.dt_safety,
            t_end: self.t_end.unwrap_or(1.0 / (4.0 * n as f64)),
            frame_stride: self.frame_stride,
            boundary: self.boundary,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default)]
    pub residual: ResidualOptions,
    /// Evaluate residuals in the gauge with heights in `[1, 2]`.
    #[serde(default)]
    pub rescaled: bool,
    /// Gaussian cutoff weight of the max-point check; `None` uses `4m`.
    #[serde(default)]
    pub maxpoint_a: Option<f64>,
    /// `None` uses `1/(1+2Λ)`.
    #[serde(default)]
    pub radius_const: Option<f64>,
    /// `Δ⁺ ≤ factor·(h² + dt)·sup φ⁴Φ(0)`.
    #[serde(default = "default_weighted_sup_factor")]
    pub weighted_sup_factor: f64,
    /// Smallest accepted area-decreasing coverage of the cutoff support.
    #[serde(default = "default_coverage_min")]
    pub coverage_min: f64,
    #[serde(default = "default_mss_tol")]
    pub mss_tol: f64,
    #[serde(default = "default_mss_max_steps")]
    pub mss_max_steps: usize,
}

fn default_weighted_sup_factor() -> f64 {
    10.0
}

fn default_coverage_min() -> f64 {
    0.95
}

fn default_mss_tol() -> f64 {
    1e-8
}

fn default_mss_max_steps() -> usize {
    100_000
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            residual: ResidualOptions::default(),
            rescaled: false,
            maxpoint_a: None,
            radius_const: None,
            weighted_sup_factor: default_weighted_sup_factor(),
            coverage_min: default_coverage_min(),
            mss_tol: default_mss_tol(),
            mss_max_steps: default_mss_max_steps(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSettings {
    /// Frames written to `frames.csv`, evenly spaced and including both ends.
    #[serde(default = "default_csv_frames")]
    pub csv_frames: usize,
}

fn default_csv_frames() -> usize {
    5
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self {
            csv_frames: default_csv_frames(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub command: Option<CommandKind>,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub flow: FlowSettings,
    #[serde(default)]
    pub levels: Option<Vec<usize>>,
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub quantities: Option<Vec<Quantity>>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputSettings,
}

impl RunConfig {
    pub fn new(scenario: ScenarioSpec) -> Self {
        Self {
            command: None,
            scenario,
            grid: GridConfig::default(),
            flow: FlowSettings::default(),
            levels: None,
            out: None,
            seed: None,
            quantities: None,
            tolerances: Tolerances::default(),
            output: OutputSettings::default(),
        }
    }

    /// What a command runs without `--config`.
    pub fn default_for(command: CommandKind) -> Self {
        let name = if command == CommandKind::Mss { "fourier_mss" } else { "fourier" };
        Self {
            command: Some(command),
            ..Self::new(ScenarioSpec::Preset(name.into()))
        }
    }

    /// Loads a file scenario (relative to `base`) and applies the seed override.
    pub fn resolve_scenario(&self, base: &Path) -> Result<Scenario, CliError> {
        let mut scenario = match &self.scenario {
            ScenarioSpec::Preset(name) => preset(name).ok_or_else(|| CliError::UnknownScenario {
                name: name.clone(),
                valid: PRESETS.join(", "),
            })?,
            ScenarioSpec::File(path) => {
                let full = base.join(path);
                let text = fs::read_to_string(&full).map_err(|e| CliError::Io {
                    path: full.display().to_string(),
                    message: e.to_string(),
                })?;
                serde_json::from_str(&text).map_err(|e| CliError::Parse {
                    line: e.line(),
                    column: e.column(),
                    message: format!("{}: {e}", full.display()),
                })?
            }
            ScenarioSpec::Inline(s) => s.clone(),
        };
        if let (Some(seed), InitialGenerator::Fourier { seed: s, .. }) = (self.seed, &mut scenario.generator) {
            *s = seed;
        }
        Ok(scenario)
    }

    /// Schema checks that need the scenario dimension.
    pub fn validate(&self, scenario: &Scenario) -> Result<(), CliError> {
        let field = |field: &str, message: String| CliError::Field {
            field: field.into(),
            message,
        };
        GridSpec::new(scenario.n, self.grid.extent, self.grid.points).map_err(|e| field("grid", e.to_string()))?;
        self.flow
            .flow_config(scenario.n)
            .validate()
            .map_err(|e| field("flow", e.to_string()))?;
        if let Some(levels) = &self.levels {
            if levels.len() < 2 || levels.windows(2).any(|w| w[1] < 2 || w[1] - 1 != 2 * (w[0] - 1)) {
                return Err(field(
                    "levels",
                    format!("need at least two nested levels (N_next = 2N − 1), got {levels:?}"),
                ));
            }
            for &p in levels {
                GridSpec::new(scenario.n, self.grid.extent, p).map_err(|e| field("levels", e.to_string()))?;
            }
        }
        if let Some(qs) = &self.quantities {
            for q in qs {
                q.validate(scenario.n).map_err(|e| field("quantities", e.to_string()))?;
            }
        }
        if self.output.csv_frames == 0 {
            return Err(field("output.csv_frames", "must be at least 1".into()));
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("tolerances.weighted_sup_factor", t.weighted_sup_factor),
            ("tolerances.mss_tol", t.mss_tol),
        ] {
            if !(v > 0.0) {
                return Err(field(name, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&t.coverage_min) {
            return Err(field("tolerances.coverage_min", format!("must lie in [0, 1], got {}", t.coverage_min)));
        }
        Ok(())
    }

    pub fn quantities_for(&self, n: usize) -> Vec<Quantity> {
        self.quantities.clone().unwrap_or_else(|| Quantity::defaults(n))
    }
}

/// Parses a JSON run configuration; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Pretty-printed JSON with every default spelled out, newline-terminated.
pub fn canonical(config: &RunConfig) -> String {
    let mut s = serde_json::to_string_pretty(config).expect("config serializes");
    s.push('\n');
    s
}

/// Splits on commas outside parentheses: `w,pair(1,2)` → `["w", "pair(1,2)"]`.
pub fn split_list(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in text.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur).trim().to_string());
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_levels(text: &str) -> Result<Vec<usize>, CliError> {
    split_list(text)
        .iter()
        .map(|s| {
            s.parse().map_err(|_| CliError::Field {
                field: "levels".into(),
                message: format!("{s:?} is not a point count"),
            })
        })
        .collect()
}

fn parse_quantities(text: &str) -> Result<Vec<Quantity>, CliError> {
    split_list(text)
        .iter()
        .map(|s| s.parse().map_err(CliError::Verify))
        .collect()
}

/// Applies the command-line flags on top of the file configuration.
pub fn apply_overrides(config: &mut RunConfig, cli: &Cli) -> Result<(), CliError> {
    config.command = Some(cli.command);
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(levels) = &cli.levels {
        config.levels = Some(parse_levels(levels)?);
    }
    if let Some(q) = &cli.quantities {
        config.quantities = Some(parse_quantities(q)?);
    }
    if let Some(out) = &cli.out {
        config.out = Some(out.display().to_string());
    }
    Ok(())
}

/// A fresh `run-<unix seconds>-seed<seed>` directory under `out`.
pub fn create_run_dir(out: &Path, seed: u64) -> Result<PathBuf, CliError> {
    let io = |p: &Path, e: std::io::Error| CliError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let stem = format!("run-{secs}-seed{seed}");
    for suffix in 0.. {
        let name = if suffix == 0 {
            stem.clone()
        } else {
            format!("{stem}-{suffix}")
        };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io(&dir, e)),
        }
    }
    unreachable!("suffixes are unbounded")
}

/// One pass/fail check of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: Value,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: Value) -> Self {
        Self {
            name: name.into(),
            pass,
            detail,
        }
    }
}

/// What a command produced, before it is written out.
#[derive(Debug, Default)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub results: Value,
    /// Extra files: `(name, contents)`.
    pub files: Vec<(String, String)>,
}

fn fmt_opt(out: &mut String, v: Option<f64>) {
    match v {
        Some(x) if x.is_finite() => write!(out, ",{x}").expect("string write"),
        _ => out.push_str(",NA"),
    }
}

/// Per-node diagnostics of selected frames. `slack(frame_pos, column, node)`
/// supplies the residual columns.
pub fn frames_csv(
    frames: &[&GraphState],
    slack_columns: &[String],
    slack: impl Fn(usize, usize, usize) -> Option<f64>,
) -> String {
    let Some(first) = frames.first() else {
        return String::new();
    };
    let n = first.grid.dim();
    let m = first.codim();
    let mut out = String::from("t");
    for i in 1..=n {
        write!(out, ",x{i}").expect("string write");
    }
    for a in 1..=m {
        write!(out, ",u{a}").expect("string write");
    }
    for i in 1..=n {
        write!(out, ",lambda{i}").expect("string write");
    }
    out.push_str(",v,w,Phi,margin");
    for c in slack_columns {
        write!(out, ",slack_{c}").expect("string write");
    }
    out.push('\n');
    for (fp, state) in frames.iter().enumerate() {
        let grid = state.grid;
        let geometry = FrameGeometry::new(state);
        for k in 0..grid.node_count() {
            write!(out, "{}", state.t).expect("string write");
            for x in &grid.coords(k)[..n] {
                write!(out, ",{x}").expect("string write");
            }
            for comp in &state.u {
                write!(out, ",{}", comp[k]).expect("string write");
            }
            match geometry.jacobians.get(k) {
                Some(j) => {
                    let spec = singular_spectrum(j);
                    for &l in spec.lambdas() {
                        write!(out, ",{l}").expect("string write");
                    }
                    let report = area_decreasing_report(&spec);
                    let v = geometry.v[k];
                    write!(out, ",{v},{}", v.powf(1.0 / n as f64)).expect("string write");
                    fmt_opt(&mut out, report.phi);
                    fmt_opt(&mut out, Some(report.margin));
                }
                None => out.push_str(&",NA".repeat(n + 4)),
            }
            for c in 0..slack_columns.len() {
                fmt_opt(&mut out, slack(fp, c, k));
            }
            out.push('\n');
        }
    }
    out
}

/// Evenly spaced frame indices including the first and last.
pub fn csv_frame_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    if count == 1 {
        return vec![len - 1];
    }
    let mut idx: Vec<usize> = (0..count).map(|i| i * (len - 1) / (count - 1)).collect();
    idx.dedup();
    idx
}

fn trajectory_csv(traj: &Trajectory, quantities: &[Quantity], opts: &ResidualOptions, count: usize) -> Result<String, CliError> {
    let picks = csv_frame_indices(traj.frames.len(), count);
    let mut fields: Vec<Vec<Option<ScalarField>>> = vec![vec![None; quantities.len()]; picks.len()];
    if !quantities.is_empty() && traj.frames.len() >= 3 {
        let centers: Vec<usize> = picks
            .iter()
            .copied()
            .filter(|&c| c > 0 && c + 1 < traj.frames.len())
            .collect();
        let res = for_each_residual_at(traj, quantities, opts, &centers, |r| {
            let pos = picks.iter().position(|&p| p == r.frame).expect("picked frame");
            let qi = quantities.iter().position(|&q| q == r.quantity).expect("requested");
            fields[pos][qi] = Some(r.slack);
        });
        match res {
            Ok(()) | Err(VerifyError::EmptyMask(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let frames: Vec<&GraphState> = picks.iter().map(|&i| &traj.frames[i]).collect();
    let columns: Vec<String> = quantities.iter().map(|q| q.id()).collect();
    Ok(frames_csv(&frames, &columns, |fp, c, k| {
        fields[fp][c].as_ref().and_then(|f| f.get(k))
    }))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn trajectory_value(traj: &Trajectory) -> Value {
    json!({
        "points_per_axis": traj.grid().points_per_axis(),
        "h": traj.grid().h(),
        "dt": traj.dt_step,
        "steps": traj.steps,
        "frames": traj.frames.len(),
        "t_end": traj.last().t,
        "sup_norm": traj.sup_norm,
        "amplitude": traj.initial.amplitude,
        "halvings": traj.initial.halvings,
        "min_margin": traj.min_margin.iter().copied().fold(f64::INFINITY, f64::min),
        "max_principle_violation": traj.max_principle_violation,
        "code_version": traj.code_version,
    })
}

fn max_principle_check(traj: &Trajectory) -> Check {
    let tol = 1e-12 * (1.0 + traj.sup_norm) * traj.steps.max(1) as f64;
    Check::new(
        "max_principle",
        traj.max_principle_violation <= tol,
        json!({ "violation": traj.max_principle_violation, "tolerance": tol }),
    )
}

fn refinement_checks(report: &RefinementReport, coverage_min: Option<f64>) -> Vec<Check> {
    let mut checks: Vec<Check> = report
        .verdicts
        .iter()
        .map(|v| Check::new(format!("contraction_{}", v.quantity.id()), v.pass, to_value(v)))
        .collect();
    if let Some(sol) = &report.solution {
        checks.push(Check::new("solution_order", sol.pass, to_value(sol)));
    }
    if let Some(min) = coverage_min {
        let worst = report.levels.iter().map(|l| l.min_coverage).fold(1.0, f64::min);
        checks.push(Check::new(
            "area_decreasing_coverage",
            worst >= min,
            json!({ "min_coverage": worst, "required": min }),
        ));
    }
    checks
}

fn orders_csv(report: &RefinementReport) -> String {
    let mut out = String::from("quantity,points_coarse,points_fine,value_coarse,value_fine,ratio,order,at_floor\n");
    let mut rows = |name: &str, c: &crate::verify::Contraction| {
        for i in 0..c.ratios.len() {
            write!(
                out,
                "{name},{},{},{},{}",
                report.levels[i].points_per_axis,
                report.levels[i + 1].points_per_axis,
                c.values[i],
                c.values[i + 1]
            )
            .expect("string write");
            fmt_opt(&mut out, c.ratios[i]);
            fmt_opt(&mut out, c.orders[i]);
            writeln!(out, ",{}", c.at_floor[i + 1]).expect("string write");
        }
    };
    for v in &report.verdicts {
        rows(&v.quantity.id(), &v.violation);
        if let Some(e) = &v.exact {
            rows(&format!("{}_exact", v.quantity.id()), e);
        }
    }
    if let Some(s) = &report.solution {
        rows("solution", s);
    }
    out
}

/// Runs one command on a validated configuration.
pub fn execute(command: CommandKind, config: &RunConfig, scenario: &Scenario) -> Result<Outcome, CliError> {
    let grid = GridSpec::new(scenario.n, config.grid.extent, config.grid.points)?;
    let flow = config.flow.flow_config(scenario.n);
    let tol = &config.tolerances;
    let quantities = config.quantities_for(scenario.n);
    let mut outcome = Outcome::default();
    match command {
        CommandKind::Simulate => {
            let traj = run(scenario, &grid, &flow)?;
            outcome.checks.push(max_principle_check(&traj));
            outcome.results = json!({ "trajectory": trajectory_value(&traj) });
            outcome.files.push((
                "frames.csv".into(),
                trajectory_csv(&traj, &[], &tol.residual, config.output.csv_frames)?,
            ));
        }
        CommandKind::Verify => {
            let half = (grid.points_per_axis() - 1) / 2 + 1;
            let levels = [half, grid.points_per_axis()];
            let report = refinement_study(
                scenario,
                grid.extent(),
                &levels,
                &flow,
                &quantities,
                &tol.residual,
                tol.rescaled,
            )?;
            outcome.checks.extend(refinement_checks(&report, Some(tol.coverage_min)));
            let traj = run(scenario, &grid, &flow)?;
            outcome.checks.push(max_principle_check(&traj));
            let ws = weighted_sup_monitor(&traj, tol.residual.radius)?;
            let h = grid.h();
            let allowed = tol.weighted_sup_factor * (h * h + traj.dt_step) * ws.full[0];
            outcome.checks.push(Check::new(
                "weighted_sup_monotone",
                ws.delta_plus <= allowed,
                json!({
                    "delta_plus": ws.delta_plus,
                    "delta_plus_interior": ws.delta_plus_interior,
                    "allowed": allowed,
                    "initial": ws.full[0],
                }),
            ));
            let shown = if tol.rescaled { rescale_trajectory(&traj)? } else { traj.clone() };
            outcome.results = json!({
                "trajectory": trajectory_value(&traj),
                "refinement": to_value(&report),
                "weighted_sup": to_value(&ws),
            });
            outcome.files.push((
                "frames.csv".into(),
                trajectory_csv(&shown, &quantities, &tol.residual, config.output.csv_frames)?,
            ));
        }
        CommandKind::Refine => {
            let levels = config.levels.clone().unwrap_or_else(|| vec![33, 65, 129]);
            let report = refinement_study(
                scenario,
                grid.extent(),
                &levels,
                &flow,
                &quantities,
                &tol.residual,
                tol.rescaled,
            )?;
            outcome.checks.extend(refinement_checks(&report, None));
            outcome.files.push(("orders.csv".into(), orders_csv(&report)));
            outcome.results = json!({ "refinement": to_value(&report) });
        }
        CommandKind::Maxpoint => {
            let traj = run(scenario, &grid, &flow)?;
            let rescaled = rescale_trajectory(&traj)?;
            let a = tol.maxpoint_a.unwrap_or(4.0 * scenario.m as f64);
            let rc = tol.radius_const.unwrap_or(1.0 / (1.0 + 2.0 * traj.sup_norm));
            let report = maxpoint_report(&rescaled, a, rc)?;
            outcome.checks.push(Check::new(
                "maxpoint_product",
                report.status != MaxPointStatus::Fail,
                json!({ "status": report.status, "product": report.product, "bound": report.product_bound }),
            ));
            outcome.results = json!({ "trajectory": trajectory_value(&traj), "maxpoint": to_value(&report) });
            outcome.files.push((
                "frames.csv".into(),
                trajectory_csv(&rescaled, &[], &tol.residual, config.output.csv_frames)?,
            ));
        }
        CommandKind::BoundReport => {
            let traj = run(scenario, &grid, &flow)?;
            let report = gradient_bound_report(&traj, traj.sup_norm)?;
            outcome.checks.push(Check::new(
                "gradient_bound",
                report.pass,
                json!({ "measured": report.measured, "ln_bound": report.bound.ln_bound }),
            ));
            outcome.checks.push(Check::new(
                "phi_defined_at_origin",
                report.phi_at_origin.is_some(),
                json!({ "phi": report.phi_at_origin, "margin": report.margin_at_origin }),
            ));
            if let Some(mp) = &report.maxpoint {
                outcome.checks.push(Check::new(
                    "maxpoint_product",
                    mp.status != MaxPointStatus::Fail,
                    json!({ "status": mp.status, "product": mp.product, "bound": mp.product_bound }),
                ));
            }
            outcome.results = json!({ "trajectory": trajectory_value(&traj), "bound_report": to_value(&report) });
            outcome.files.push((
                "frames.csv".into(),
                trajectory_csv(&traj, &[], &tol.residual, config.output.csv_frames)?,
            ));
        }
        CommandKind::Mss => {
            let problem = MssProblem::from_generator(&scenario.generator, grid, scenario.m, scenario.margin)?;
            let relaxed = relax_to_minimal(&problem, tol.mss_tol, tol.mss_max_steps)?;
            outcome.checks.push(Check::new(
                "relaxation_converged",
                relaxed.converged,
                json!({ "steps": relaxed.steps, "residual": relaxed.residual, "tol": tol.mss_tol }),
            ));
            let field = subharmonic_residual(&relaxed.state)?;
            let kor = korevaar_report(&relaxed.state, None)?;
            outcome.checks.push(Check::new(
                "phi_tilde_origin_half",
                kor.phi_tilde_origin == 0.5,
                json!({ "phi_tilde_origin": kor.phi_tilde_origin }),
            ));
            outcome.checks.push(Check::new(
                "lambda1_at_argmax",
                kor.lambda1_ok,
                json!({ "lambda1": kor.lambda1, "bound": kor.lambda1_bound }),
            ));
            outcome.checks.push(Check::new(
                "korevaar_bound",
                kor.pass,
                json!({ "ln_w_origin": kor.w_origin.ln(), "ln_w_bound": kor.ln_w_bound }),
            ));
            let p = grid.points_per_axis();
            let levels = config
                .levels
                .clone()
                .unwrap_or_else(|| vec![(p - 1) / 4 + 1, (p - 1) / 2 + 1, p]);
            let study = subharmonic_study(
                &scenario.generator,
                scenario.m,
                scenario.n,
                grid.extent(),
                &levels,
                tol.mss_tol,
                tol.mss_max_steps,
            )?;
            outcome.checks.push(Check::new(
                "subharmonic_contraction",
                study.pass,
                json!({ "log_v": to_value(&study.log_v), "w_form": to_value(&study.w_form) }),
            ));
            let history: Vec<Value> = relaxed.history.iter().map(|(s, r)| json!([s, r])).collect();
            outcome.results = json!({
                "offsets": problem.offsets,
                "relaxation": {
                    "dt": relaxed.dt,
                    "steps": relaxed.steps,
                    "residual": relaxed.residual,
                    "history": history,
                },
                "subharmonic": {
                    "log_v": to_value(&field.log_v_summary),
                    "w_form": to_value(&field.w_summary),
                    "excluded_by_hypothesis": field.excluded_by_hypothesis,
                },
                "korevaar": to_value(&kor),
                "study": to_value(&study),
            });
            let columns = vec!["subharmonic_log_v".to_string(), "subharmonic_w".to_string()];
            outcome.files.push((
                "frames.csv".into(),
                frames_csv(&[&relaxed.state], &columns, |_, c, k| {
                    if c == 0 {
                        field.log_v.get(k)
                    } else {
                        field.w_form.get(k)
                    }
                }),
            ));
        }
    }
    Ok(outcome)
}

/// The `summary.json` document.
pub fn summary_json(
    command: CommandKind,
    config: Option<&RunConfig>,
    scenario: Option<&Scenario>,
    result: &Result<Outcome, CliError>,
) -> (Status, String) {
    let (status, reason, checks, results) = match result {
        Ok(o) => {
            let pass = o.checks.iter().all(|c| c.pass);
            let failed: Vec<&str> = o.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
            (
                if pass { Status::Pass } else { Status::CheckFailed },
                (!pass).then(|| format!("failed checks: {}", failed.join(", "))),
                to_value(&o.checks),
                o.results.clone(),
            )
        }
        Err(e) => (e.status(), Some(e.to_string()), json!([]), Value::Null),
    };
    let doc = json!({
        "command": command.name(),
        "status": status,
        "exit_code": status.exit_code(),
        "reason": reason,
        "config": config.map(to_value),
        "scenario": scenario.map(to_value),
        "checks": checks,
        "results": results,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("summary serializes");
    text.push('\n');
    (status, text)
}

fn load(cli: &Cli) -> Result<(RunConfig, Scenario), CliError> {
    let (mut config, base) = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (parse_config(&text)?, base)
        }
        None => (RunConfig::default_for(cli.command), PathBuf::new()),
    };
    apply_overrides(&mut config, cli)?;
    let scenario = config.resolve_scenario(&base)?;
    config.validate(&scenario)?;
    Ok((config, scenario))
}

/// Runs the parsed command line and returns the process exit code.
pub fn run_cli(cli: &Cli) -> i32 {
    let loaded = load(cli);
    let out = cli
        .out
        .clone()
        .or_else(|| loaded.as_ref().ok().and_then(|(c, _)| c.out.clone()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let seed = cli
        .seed
        .or_else(|| loaded.as_ref().ok().and_then(|(c, _)| c.seed))
        .or_else(|| {
            loaded.as_ref().ok().and_then(|(_, s)| match s.generator {
                InitialGenerator::Fourier { seed, .. } => Some(seed),
                _ => None,
            })
        })
        .unwrap_or(0);
    let dir = match create_run_dir(&out, seed) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return Status::ConfigError.exit_code();
        }
    };
    let (config, scenario, result) = match loaded {
        Ok((c, s)) => {
            let r = execute(cli.command, &c, &s);
            (Some(c), Some(s), r)
        }
        Err(e) => (None, None, Err(e)),
    };
    let (status, summary) = summary_json(cli.command, config.as_ref(), scenario.as_ref(), &result);
    let mut files = vec![("summary.json".to_string(), summary)];
    if let Ok(o) = result {
        files.extend(o.files);
    }
    for (name, contents) in &files {
        let path = dir.join(name);
        if let Err(e) = fs::write(&path, contents) {
            eprintln!("error: {}: {e}", path.display());
            return Status::ConfigError.exit_code();
        }
    }
    println!("{} {}: {:?} -> {}", cli.command.name(), dir.display(), status, status.exit_code());
    status.exit_code()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_respects_parentheses() {
        assert_eq!(split_list("w, pair(1,2),varphi"), vec!["w", "pair(1,2)", "varphi"]);
        assert!(split_list("").is_empty());
    }

    #[test]
    fn frame_picks_include_both_ends() {
        assert_eq!(csv_frame_indices(3, 5), vec![0, 1, 2]);
        assert_eq!(csv_frame_indices(17, 5), vec![0, 4, 8, 12, 16]);
        assert_eq!(csv_frame_indices(10, 1), vec![9]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Flow(FlowError::BlowUp { t: 0.1, step: 3 }).status().exit_code(), 3);
        assert_eq!(CliError::Flow(FlowError::Config("x".into())).status().exit_code(), 2);
        assert_eq!(CliError::Verify(VerifyError::DegenerateSupport).status().exit_code(), 1);
    }
}
