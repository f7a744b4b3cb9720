//! Explicit time integration of graphical mean curvature flow in the
//! nonparametric gauge, `∂_t u^α = gⁱʲ ∂²ᵢⱼ u^α`, together with scenario
//! generation and the parabolic rescaling that normalizes heights into `[1, 2]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geomgrid::{jacobian_field, GraphState, GridError, GridSpec};
use crate::smallalg::{metric_inverse, singular_spectrum, Jacobian, MAX_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("non-finite heights at t = {t} (step {step})")]
    BlowUp { t: f64, step: usize },
    #[error("time step {dt} exceeds the stability limit {limit}")]
    TimeStep { dt: f64, limit: f64 },
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("generator {generator} does not support n = {n}, m = {m}")]
    Unsupported {
        generator: &'static str,
        n: usize,
        m: usize,
    },
    #[error("initial data violates the area-decreasing margin: max λ₁λ₂ = {max_pair} > {limit}")]
    InitialMargin { max_pair: f64, limit: f64 },
    #[error("could not reach the area-decreasing margin within {0} amplitude halvings")]
    MarginUnreachable(usize),
}

/// Initial-data generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialGenerator {
    Zero,
    /// `u^α(x) = Σᵢ slopes[α][i] xⁱ + offsets[α]`.
    Linear {
        slopes: Vec<Vec<f64>>,
        #[serde(default)]
        offsets: Vec<f64>,
    },
    /// `u(x) = −ln cos x` (n = m = 1), the translating soliton at t = 0.
    GrimReaper,
    /// Seeded trigonometric series, optionally multiplied by the window
    /// `Πᵢ cos⁴(π xⁱ / 2L)` so that the data and its first three derivatives
    /// vanish on the boundary of the cube.
    Fourier {
        seed: u64,
        amplitude: f64,
        max_freq: u32,
        #[serde(default = "default_true")]
        window: bool,
    },
}

fn default_true() -> bool {
    true
}

impl InitialGenerator {
    pub fn name(&self) -> &'static str {
        match self {
            InitialGenerator::Zero => "zero",
            InitialGenerator::Linear { .. } => "linear",
            InitialGenerator::GrimReaper => "grim_reaper",
            InitialGenerator::Fourier { .. } => "fourier",
        }
    }
}

/// A named initial-value problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub generator: InitialGenerator,
    /// Required area-decreasing margin δ: `max λ₁λ₂ ≤ 1 − δ` at every node.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

pub fn default_margin() -> f64 {
    0.05
}

impl Scenario {
    pub fn new(name: &str, n: usize, m: usize, generator: InitialGenerator) -> Self {
        Self {
            name: name.to_string(),
            n,
            m,
            generator,
            margin: default_margin(),
        }
    }

    pub fn zero(n: usize, m: usize) -> Self {
        Self::new("zero", n, m, InitialGenerator::Zero)
    }

    pub fn grim_reaper() -> Self {
        Self::new("grim_reaper", 1, 1, InitialGenerator::GrimReaper)
    }

    pub fn fourier(n: usize, m: usize, seed: u64, amplitude: f64, max_freq: u32) -> Self {
        Self::new(
            "fourier",
            n,
            m,
            InitialGenerator::Fourier {
                seed,
                amplitude,
                max_freq,
                window: true,
            },
        )
    }

    /// Exact solution of the flow, when one is known in closed form.
    pub fn exact_solution(&self, x: &[f64], t: f64) -> Option<Vec<f64>> {
        match &self.generator {
            InitialGenerator::Zero => Some(vec![0.0; self.m]),
            InitialGenerator::Linear { slopes, offsets } => Some(linear_value(slopes, offsets, x)),
            InitialGenerator::GrimReaper => Some(vec![t - x[0].cos().ln()]),
            InitialGenerator::Fourier { .. } => None,
        }
    }

    pub fn has_exact_solution(&self) -> bool {
        !matches!(self.generator, InitialGenerator::Fourier { .. })
    }
}

fn linear_value(slopes: &[Vec<f64>], offsets: &[f64], x: &[f64]) -> Vec<f64> {
    slopes
        .iter()
        .enumerate()
        .map(|(a, row)| {
            row.iter().zip(x).map(|(c, xi)| c * xi).sum::<f64>()
                + offsets.get(a).copied().unwrap_or(0.0)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Boundary nodes keep their initial values.
    DirichletFrozen,
    /// Boundary nodes follow the scenario's exact solution.
    DirichletExact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Safety factor σ in `dt = σ h²/(2n)`.
    #[serde(default = "default_dt_safety")]
    pub dt_safety: f64,
    pub t_end: f64,
    /// Solver steps between kept frames.
    #[serde(default = "default_frame_stride")]
    pub frame_stride: usize,
    #[serde(default = "default_boundary")]
    pub boundary: BoundaryMode,
}

pub fn default_dt_safety() -> f64 {
    0.25
}

pub fn default_frame_stride() -> usize {
    16
}

fn default_boundary() -> BoundaryMode {
    BoundaryMode::DirichletFrozen
}

impl FlowConfig {
    pub fn new(t_end: f64) -> Self {
        Self {
            dt_safety: default_dt_safety(),
            t_end,
            frame_stride: default_frame_stride(),
            boundary: default_boundary(),
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.dt_safety > 0.0 && self.dt_safety <= 1.0) {
            return Err(FlowError::Config(format!(
                "dt_safety must lie in (0, 1], got {}",
                self.dt_safety
            )));
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(FlowError::Config(format!(
                "t_end must be positive, got {}",
                self.t_end
            )));
        }
        if self.frame_stride == 0 {
            return Err(FlowError::Config("frame_stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Generated initial heights and what the margin search did to them.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialData {
    pub u: Vec<Vec<f64>>,
    /// `Λ = max_α sup |u^α(·, 0)|` over the grid nodes.
    pub sup_norm: f64,
    pub amplitude: Option<f64>,
    pub halvings: usize,
}

/// Largest supported number of amplitude halvings in the margin search.
pub const MAX_HALVINGS: usize = 50;

struct FourierSeries {
    n: usize,
    extent: f64,
    window: bool,
    // per component: (coefficient, integer wave numbers, phases)
    modes: Vec<Vec<(f64, [u32; MAX_DIM], [f64; MAX_DIM])>>,
}

impl FourierSeries {
    fn new(n: usize, m: usize, extent: f64, seed: u64, max_freq: u32, window: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_axis = max_freq as usize + 1;
        let count = per_axis.pow(n as u32);
        let modes = (0..m)
            .map(|_| {
                let mut comp = Vec::with_capacity(count);
                for c in 1..count {
                    let mut k = [0u32; MAX_DIM];
                    let mut rem = c;
                    for ki in k.iter_mut().take(n) {
                        *ki = (rem % per_axis) as u32;
                        rem /= per_axis;
                    }
                    let k2: u32 = k.iter().map(|x| x * x).sum();
                    let coef = rng.gen_range(-1.0..1.0) / (1.0 + k2 as f64);
                    let mut phase = [0.0; MAX_DIM];
                    for p in phase.iter_mut().take(n) {
                        *p = rng.gen_range(0.0..std::f64::consts::TAU);
                    }
                    comp.push((coef, k, phase));
                }
                let norm: f64 = comp.iter().map(|(c, _, _)| c.abs()).sum();
                if norm > 0.0 {
                    comp.iter_mut().for_each(|(c, _, _)| *c /= norm);
                }
                comp
            })
            .collect();
        Self {
            n,
            extent,
            window,
            modes,
        }
    }

    /// Value and gradient of component `a` at `x`, unit amplitude.
    fn eval(&self, a: usize, x: &[f64]) -> (f64, [f64; MAX_DIM]) {
        let n = self.n;
        let half_pi = std::f64::consts::FRAC_PI_2;
        let mut s = 0.0;
        let mut ds = [0.0; MAX_DIM];
        for (coef, k, phase) in &self.modes[a] {
            let mut f = [0.0; MAX_DIM];
            let mut df = [0.0; MAX_DIM];
            for i in 0..n {
                let w = half_pi * k[i] as f64;
                let arg = w * x[i] + phase[i];
                f[i] = arg.cos();
                df[i] = -w * arg.sin();
            }
            s += coef * f[..n].iter().product::<f64>();
            for i in 0..n {
                let mut p = coef * df[i];
                for j in (0..n).filter(|&j| j != i) {
                    p *= f[j];
                }
                ds[i] += p;
            }
        }
        if !self.window {
            return (s, ds);
        }
        let mut wv = [0.0; MAX_DIM];
        let mut dwv = [0.0; MAX_DIM];
        for i in 0..n {
            let arg = half_pi * x[i] / self.extent;
            let c = arg.cos();
            wv[i] = c.powi(4);
            dwv[i] = -4.0 * c.powi(3) * arg.sin() * half_pi / self.extent;
        }
        let window: f64 = wv[..n].iter().product();
        let mut grad = [0.0; MAX_DIM];
        for i in 0..n {
            let mut dw = dwv[i];
            for j in (0..n).filter(|&j| j != i) {
                dw *= wv[j];
            }
            grad[i] = ds[i] * window + s * dw;
        }
        (s * window, grad)
    }
}

fn max_pair_product_analytic(series: &FourierSeries, m: usize, amplitude: f64) -> f64 {
    let n = series.n;
    if n < 2 {
        return 0.0;
    }
    // fixed reference lattice so the amplitude decision does not depend on the simulation grid
    let per_axis: usize = match n {
        2 => 129,
        3 => 33,
        _ => 17,
    };
    let count = per_axis.pow(n as u32);
    let mut worst = 0.0_f64;
    let mut x = [0.0; MAX_DIM];
    for c in 0..count {
        let mut rem = c;
        for xi in x.iter_mut().take(n) {
            let k = rem % per_axis;
            rem /= per_axis;
            *xi = series.extent * (2.0 * k as f64 / (per_axis - 1) as f64 - 1.0);
        }
        let grads: Vec<[f64; MAX_DIM]> = (0..m).map(|a| series.eval(a, &x[..n]).1).collect();
        let jac = Jacobian::from_fn(m, n, |a, i| amplitude * grads[a][i]).expect("dimensions validated");
        worst = worst.max(singular_spectrum(&jac).max_pair_product());
    }
    worst
}

/// Generates initial heights on `grid`.
pub fn generate_initial(
    generator: &InitialGenerator,
    grid: &GridSpec,
    m: usize,
    margin: f64,
) -> Result<InitialData, FlowError> {
    let n = grid.dim();
    let nodes = grid.node_count();
    let sample = |f: &dyn Fn(usize, &[f64]) -> f64| -> Vec<Vec<f64>> {
        (0..m)
            .map(|a| (0..nodes).map(|k| f(a, &grid.coords(k)[..n])).collect())
            .collect()
    };
    let (u, amplitude, halvings) = match generator {
        InitialGenerator::Zero => (vec![vec![0.0; nodes]; m], None, 0),
        InitialGenerator::Linear { slopes, offsets } => {
            if slopes.len() != m || slopes.iter().any(|r| r.len() != n) {
                return Err(FlowError::Config(format!(
                    "linear slopes must be an {m} x {n} matrix"
                )));
            }
            if !offsets.is_empty() && offsets.len() != m {
                return Err(FlowError::Config(format!("linear offsets must have {m} entries")));
            }
            (sample(&|a, x| linear_value(slopes, offsets, x)[a]), None, 0)
        }
        InitialGenerator::GrimReaper => {
            if n != 1 || m != 1 {
                return Err(FlowError::Unsupported {
                    generator: "grim_reaper",
                    n,
                    m,
                });
            }
            if grid.extent() >= std::f64::consts::FRAC_PI_2 {
                return Err(FlowError::Config(
                    "grim reaper needs an extent below π/2".into(),
                ));
            }
            (sample(&|_, x| -x[0].cos().ln()), None, 0)
        }
        InitialGenerator::Fourier {
            seed,
            amplitude,
            max_freq,
            window,
        } => {
            if !(*amplitude > 0.0) || !amplitude.is_finite() {
                return Err(FlowError::Config(format!(
                    "fourier amplitude must be positive, got {amplitude}"
                )));
            }
            let series = FourierSeries::new(n, m, grid.extent(), *seed, *max_freq, *window);
            let limit = 1.0 - margin;
            let mut amp = *amplitude;
            let mut halvings = 0;
            while max_pair_product_analytic(&series, m, amp) > limit {
                if halvings == MAX_HALVINGS {
                    return Err(FlowError::MarginUnreachable(MAX_HALVINGS));
                }
                amp *= 0.5;
                halvings += 1;
            }
            (
                sample(&|a, x| amp * series.eval(a, x).0),
                Some(amp),
                halvings,
            )
        }
    };
    let sup_norm = u.iter().flatten().fold(0.0_f64, |acc, x| acc.max(x.abs()));
    Ok(InitialData {
        u,
        sup_norm,
        amplitude,
        halvings,
    })
}

/// Largest `λ₁λ₂` over nodes with a central-difference Jacobian.
pub fn max_pair_product(state: &GraphState) -> f64 {
    let jf = jacobian_field(state);
    (0..state.grid.node_count())
        .filter_map(|k| jf.get(k).map(|j| singular_spectrum(j).max_pair_product()))
        .fold(0.0, f64::max)
}

/// `σ h² / (2n)`: every eigenvalue of `g⁻¹` lies in `(0, 1]`, so the diffusion
/// tensor is bounded by the identity.
pub fn cfl_dt(state: &GraphState, sigma: f64) -> Result<f64, FlowError> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(FlowError::Config(format!("σ must lie in (0, 1], got {sigma}")));
    }
    let h = state.grid.h();
    Ok(sigma * h * h / (2.0 * state.grid.dim() as f64))
}

/// `gⁱʲ ∂²ᵢⱼ u^α` at interior node `k`, for every α.
///
/// Mixed derivatives use the seven-point stencil oriented by the sign of
/// `gⁱʲ`, which keeps the explicit update monotone whenever `g⁻¹` is
/// diagonally dominant.
pub fn nonparametric_velocity_at(state: &GraphState, k: usize, out: &mut [f64]) {
    let grid = &state.grid;
    let n = grid.dim();
    let m = state.codim();
    let h = grid.h();
    let h2 = h * h;
    let mut strides = [0usize; MAX_DIM];
    for (i, s) in strides.iter_mut().enumerate().take(n) {
        *s = grid.stride(i);
    }
    let mut du = [[0.0; MAX_DIM]; MAX_DIM];
    for a in 0..m {
        let u = &state.u[a];
        for i in 0..n {
            du[a][i] = (u[k + strides[i]] - u[k - strides[i]]) * (0.5 / h);
        }
    }
    let g_inv = inverse_metric_raw(&du, m, n);
    for (a, slot) in out.iter_mut().enumerate().take(m) {
        let u = &state.u[a];
        let c = u[k];
        let mut acc = 0.0;
        for i in 0..n {
            let si = strides[i];
            acc += g_inv[i][i] * (u[k + si] - 2.0 * c + u[k - si]) / h2;
            for j in (i + 1)..n {
                let sj = strides[j];
                let gij = g_inv[i][j];
                if gij == 0.0 {
                    continue;
                }
                let axial = u[k + si] + u[k - si] + u[k + sj] + u[k - sj];
                let uij = if gij > 0.0 {
                    (u[k + si + sj] + u[k - si - sj] + 2.0 * c - axial) / (2.0 * h2)
                } else {
                    (axial - u[k + si - sj] - u[k - si + sj] - 2.0 * c) / (2.0 * h2)
                };
                acc += 2.0 * gij * uij;
            }
        }
        *slot = acc;
    }
}

fn inverse_metric_raw(du: &[[f64; MAX_DIM]; MAX_DIM], m: usize, n: usize) -> [[f64; MAX_DIM]; MAX_DIM] {
    let mut g = [[0.0; MAX_DIM]; MAX_DIM];
    for i in 0..n {
        for j in i..n {
            let mut acc = if i == j { 1.0 } else { 0.0 };
            for row in du.iter().take(m) {
                acc += row[i] * row[j];
            }
            g[i][j] = acc;
            g[j][i] = acc;
        }
    }
    let mut inv = [[0.0; MAX_DIM]; MAX_DIM];
    match n {
        1 => inv[0][0] = 1.0 / g[0][0],
        2 => {
            let det = g[0][0] * g[1][1] - g[0][1] * g[0][1];
            inv[0][0] = g[1][1] / det;
            inv[1][1] = g[0][0] / det;
            inv[0][1] = -g[0][1] / det;
            inv[1][0] = inv[0][1];
        }
        _ => {
            let jac = Jacobian::from_fn(m, n, |a, i| du[a][i]).expect("finite Jacobian");
            let (gi, _) = metric_inverse(&jac.gram());
            for (i, row) in inv.iter_mut().enumerate().take(n) {
                for (j, x) in row.iter_mut().enumerate().take(n) {
                    *x = gi[(i, j)];
                }
            }
        }
    }
    inv
}

/// Max over interior nodes and components of `|gⁱʲ ∂²ᵢⱼ u^α|`.
pub fn max_velocity(state: &GraphState) -> f64 {
    let mut buf = [0.0; MAX_DIM];
    let m = state.codim();
    (0..state.grid.node_count())
        .filter(|&k| !state.grid.is_boundary(k))
        .map(|k| {
            nonparametric_velocity_at(state, k, &mut buf);
            buf[..m].iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
        })
        .fold(0.0, f64::max)
}

struct NodeSets {
    interior: Vec<usize>,
    boundary: Vec<usize>,
}

impl NodeSets {
    fn new(grid: &GridSpec) -> Self {
        let (boundary, interior) = (0..grid.node_count()).partition(|&k| grid.is_boundary(k));
        Self { interior, boundary }
    }
}

fn advance_into(
    state: &GraphState,
    dt: f64,
    nodes: &NodeSets,
    boundary: &dyn Fn(usize, usize, f64) -> Option<f64>,
    next: &mut GraphState,
) {
    let m = state.codim();
    let t_new = state.t + dt;
    next.t = t_new;
    let mut vel = [0.0; MAX_DIM];
    for &k in &nodes.boundary {
        for a in 0..m {
            next.u[a][k] = boundary(a, k, t_new).unwrap_or(state.u[a][k]);
        }
    }
    for &k in &nodes.interior {
        nonparametric_velocity_at(state, k, &mut vel);
        for a in 0..m {
            next.u[a][k] = state.u[a][k] + dt * vel[a];
        }
    }
}

/// One forward-Euler step with frozen boundary values.
pub fn step(state: &GraphState, dt: f64) -> Result<GraphState, FlowError> {
    let limit = cfl_dt(state, 1.0)?;
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(FlowError::TimeStep { dt, limit });
    }
    if !state.is_finite() {
        return Err(FlowError::BlowUp { t: state.t, step: 0 });
    }
    let mut next = state.clone();
    advance_into(state, dt, &NodeSets::new(&state.grid), &|_, _, _| None, &mut next);
    if !next.is_finite() {
        return Err(FlowError::BlowUp { t: next.t, step: 1 });
    }
    Ok(next)
}

/// A run of the flow: uniformly spaced frames starting at `t = 0`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub scenario: Scenario,
    pub config: FlowConfig,
    pub frames: Vec<GraphState>,
    pub dt_step: f64,
    pub steps: usize,
    /// `Λ = ‖u(·, 0)‖_∞`.
    pub sup_norm: f64,
    pub initial: InitialData,
    /// `min_{nodes} (1 − λ₁λ₂)` per frame.
    pub min_margin: Vec<f64>,
    /// Largest per-step increase of any `max u^α` or decrease of any `min u^α`.
    pub max_principle_violation: f64,
    /// True once the frames are in the parabolically rescaled gauge.
    pub rescaled: bool,
    pub code_version: &'static str,
}

impl Trajectory {
    pub fn grid(&self) -> &GridSpec {
        &self.frames[0].grid
    }

    pub fn frame_dt(&self) -> f64 {
        self.dt_step * self.config.frame_stride as f64
    }

    pub fn last(&self) -> &GraphState {
        self.frames.last().expect("trajectories are never empty")
    }

    /// Keeps only the first `count` frames.
    pub fn truncated(&self, count: usize) -> Self {
        let mut out = self.clone();
        out.frames.truncate(count.max(1));
        out.min_margin.truncate(count.max(1));
        out
    }
}

fn frame_margin(state: &GraphState) -> f64 {
    1.0 - max_pair_product(state)
}

fn height_extrema(state: &GraphState) -> Vec<(f64, f64)> {
    state
        .u
        .iter()
        .map(|f| {
            f.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                })
        })
        .collect()
}

/// Initial state of a scenario on a grid, with the margin check applied.
pub fn initial_state(
    scenario: &Scenario,
    grid: &GridSpec,
) -> Result<(GraphState, InitialData), FlowError> {
    if grid.dim() != scenario.n {
        return Err(FlowError::Config(format!(
            "grid dimension {} does not match scenario n = {}",
            grid.dim(),
            scenario.n
        )));
    }
    if !(scenario.margin >= 0.0 && scenario.margin < 1.0) {
        return Err(FlowError::Config(format!(
            "margin must lie in [0, 1), got {}",
            scenario.margin
        )));
    }
    let data = generate_initial(&scenario.generator, grid, scenario.m, scenario.margin)?;
    let state = GraphState::new(*grid, data.u.clone(), 0.0)?;
    let limit = 1.0 - scenario.margin;
    let max_pair = max_pair_product(&state);
    if max_pair > limit {
        return Err(FlowError::InitialMargin { max_pair, limit });
    }
    Ok((state, data))
}

/// Runs a scenario to `config.t_end`.
///
/// The step is fixed from the initial frame and snapped down so that
/// `t_end` is an exact multiple of the frame spacing.
pub fn run(scenario: &Scenario, grid: &GridSpec, config: &FlowConfig) -> Result<Trajectory, FlowError> {
    run_with_frames(scenario, grid, config, None)
}

/// As [`run`], optionally forcing the number of frame intervals; the implied
/// step must still respect `config.dt_safety`.
pub fn run_with_frames(
    scenario: &Scenario,
    grid: &GridSpec,
    config: &FlowConfig,
    frame_count: Option<usize>,
) -> Result<Trajectory, FlowError> {
    config.validate()?;
    if config.boundary == BoundaryMode::DirichletExact && !scenario.has_exact_solution() {
        return Err(FlowError::Config(format!(
            "scenario {} has no exact solution for exact boundary data",
            scenario.name
        )));
    }
    let (state0, initial) = initial_state(scenario, grid)?;
    let dt_max = cfl_dt(&state0, config.dt_safety)?;
    let stride = config.frame_stride;
    let natural = ((config.t_end / (dt_max * stride as f64) * (1.0 - 1e-12)).ceil() as usize).max(1);
    let frame_count = frame_count.unwrap_or(natural);
    if frame_count < natural {
        return Err(FlowError::TimeStep {
            dt: config.t_end / (frame_count * stride) as f64,
            limit: dt_max,
        });
    }
    let steps = frame_count * stride;
    let dt = config.t_end / steps as f64;

    let n = grid.dim();
    let boundary = |a: usize, k: usize, t: f64| -> Option<f64> {
        match config.boundary {
            BoundaryMode::DirichletFrozen => None,
            BoundaryMode::DirichletExact => scenario
                .exact_solution(&grid.coords(k)[..n], t)
                .map(|v| v[a]),
        }
    };

    let nodes = NodeSets::new(grid);
    let mut frames = Vec::with_capacity(frame_count + 1);
    let mut min_margin = Vec::with_capacity(frame_count + 1);
    min_margin.push(frame_margin(&state0));
    frames.push(state0.clone());
    let mut state = state0.clone();
    let mut next = state0;
    let mut extrema = height_extrema(&state);
    let mut violation = 0.0_f64;
    for s in 1..=steps {
        advance_into(&state, dt, &nodes, &boundary, &mut next);
        next.t = s as f64 * dt;
        std::mem::swap(&mut state, &mut next);
        if !state.is_finite() {
            return Err(FlowError::BlowUp { t: state.t, step: s });
        }
        let ext = height_extrema(&state);
        for ((lo0, hi0), (lo1, hi1)) in extrema.iter().zip(&ext) {
            violation = violation.max(hi1 - hi0).max(lo0 - lo1);
        }
        extrema = ext;
        if s % stride == 0 {
            min_margin.push(frame_margin(&state));
            frames.push(state.clone());
        }
    }
    Ok(Trajectory {
        scenario: scenario.clone(),
        config: *config,
        frames,
        dt_step: dt,
        steps,
        sup_norm: initial.sup_norm,
        initial,
        min_margin,
        max_principle_violation: violation,
        rescaled: false,
        code_version: env!("CARGO_PKG_VERSION"),
    })
}

/// Parabolic rescaling with translation:
/// `ū(x̄, t̄) = u((1+2Λ)x̄, (1+2Λ)²t̄)/(1+2Λ) + (1+3Λ)/(1+2Λ)` on the grid shrunk by `1 + 2Λ`.
pub fn parabolic_rescale(state: &GraphState, sup_norm: f64) -> Result<GraphState, FlowError> {
    if !(sup_norm >= 0.0) || !sup_norm.is_finite() {
        return Err(FlowError::Config(format!("Λ must be nonnegative, got {sup_norm}")));
    }
    let s = 1.0 + 2.0 * sup_norm;
    let shift = (1.0 + 3.0 * sup_norm) / s;
    let grid = state.grid.scaled(s)?;
    let u = state
        .u
        .iter()
        .map(|f| f.iter().map(|x| x / s + shift).collect())
        .collect();
    Ok(GraphState::new(grid, u, state.t / (s * s))?)
}

/// Rescales every frame of a trajectory with its own `Λ`.
pub fn rescale_trajectory(traj: &Trajectory) -> Result<Trajectory, FlowError> {
    rescale_trajectory_with(traj, traj.sup_norm)
}

/// Rescales with a given `Λ' ≥ Λ`; heights still land in `[1, 2]`, and a
/// common `Λ'` keeps nested grids nested across refinement levels.
pub fn rescale_trajectory_with(traj: &Trajectory, sup_norm: f64) -> Result<Trajectory, FlowError> {
    if sup_norm < traj.sup_norm {
        return Err(FlowError::Config(format!(
            "rescaling with Λ' = {sup_norm} below the data's Λ = {}",
            traj.sup_norm
        )));
    }
    let frames = traj
        .frames
        .iter()
        .map(|f| parabolic_rescale(f, sup_norm))
        .collect::<Result<Vec<_>, _>>()?;
    let s = 1.0 + 2.0 * sup_norm;
    let mut out = traj.clone();
    out.frames = frames;
    out.sup_norm = sup_norm;
    out.rescaled = true;
    out.dt_step /= s * s;
    out.config.t_end /= s * s;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cfl_examples() {
        let g = GridSpec::new(2, 0.16, 17).unwrap(); // h = 0.02
        let s = GraphState::zeros(g, 1).unwrap();
        assert!((cfl_dt(&s, 0.8).unwrap() - 8.0e-5).abs() < 1e-18);
        let g = GridSpec::new(1, 0.8, 17).unwrap(); // h = 0.1
        let s = GraphState::zeros(g, 1).unwrap();
        assert!((cfl_dt(&s, 1.0).unwrap() - 0.005).abs() < 1e-15);
        assert!(cfl_dt(&s, 0.0).is_err());
        assert!(cfl_dt(&s, 1.5).is_err());
    }

    #[test]
    fn constant_and_linear_states_are_fixed_points() {
        let g = GridSpec::unit(2, 33).unwrap();
        let c = GraphState::new(g, vec![vec![0.7; g.node_count()]], 0.0).unwrap();
        let dt = cfl_dt(&c, 0.5).unwrap();
        assert_eq!(step(&c, dt).unwrap().u, c.u);
        let lin = GraphState::from_fn(g, 2, 0.0, |a, x| if a == 0 { x[0] } else { 0.5 * x[1] - x[0] })
            .unwrap();
        let next = step(&lin, dt).unwrap();
        assert_eq!(next.u, lin.u);
        assert_eq!(next.t, dt);
    }

    #[test]
    fn step_rejects_unstable_dt() {
        let g = GridSpec::unit(2, 17).unwrap();
        let s = GraphState::zeros(g, 1).unwrap();
        let limit = cfl_dt(&s, 1.0).unwrap();
        assert!(matches!(step(&s, 2.0 * limit), Err(FlowError::TimeStep { .. })));
    }

    #[test]
    fn blow_up_is_detected() {
        let g = GridSpec::unit(1, 17).unwrap();
        let mut s = GraphState::zeros(g, 1).unwrap();
        s.u[0][5] = f64::INFINITY;
        assert!(matches!(step(&s, 1e-4), Err(FlowError::BlowUp { .. })));
    }

    #[test]
    fn generators() {
        let g = GridSpec::unit(2, 17).unwrap();
        let z = generate_initial(&InitialGenerator::Zero, &g, 2, 0.05).unwrap();
        assert_eq!(z.sup_norm, 0.0);
        assert!(z.u.iter().flatten().all(|&x| x == 0.0));

        let lin = InitialGenerator::Linear {
            slopes: vec![vec![1.0, 0.0], vec![0.0, 0.5]],
            offsets: vec![],
        };
        let d = generate_initial(&lin, &g, 2, 0.05).unwrap();
        let s = GraphState::new(g, d.u, 0.0).unwrap();
        let jf = jacobian_field(&s);
        for k in 0..g.node_count() {
            if let Some(j) = jf.get(k) {
                assert_eq!(j.matrix().entries(), &[1.0, 0.0, 0.0, 0.5]);
            }
        }
        assert!(generate_initial(&InitialGenerator::GrimReaper, &g, 1, 0.05).is_err());
    }

    #[test]
    fn fourier_generator_is_deterministic_and_windowed() {
        let g = GridSpec::unit(2, 33).unwrap();
        let gen = InitialGenerator::Fourier {
            seed: 7,
            amplitude: 0.5,
            max_freq: 3,
            window: true,
        };
        let a = generate_initial(&gen, &g, 2, 0.05).unwrap();
        let b = generate_initial(&gen, &g, 2, 0.05).unwrap();
        assert_eq!(a, b);
        for k in 0..g.node_count() {
            if g.is_boundary(k) {
                assert!(a.u[0][k].abs() < 1e-15 && a.u[1][k].abs() < 1e-15);
            }
        }
        let s = GraphState::new(g, a.u, 0.0).unwrap();
        assert!(1.0 - max_pair_product(&s) >= 0.05);
    }

    #[test]
    fn fourier_gradient_matches_finite_differences() {
        let series = FourierSeries::new(2, 2, 1.0, 3, 3, true);
        let x = [0.31, -0.47];
        let eps = 1e-6;
        for a in 0..2 {
            let (_, grad) = series.eval(a, &x);
            for i in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += eps;
                xm[i] -= eps;
                let fd = (series.eval(a, &xp).0 - series.eval(a, &xm).0) / (2.0 * eps);
                assert!((fd - grad[i]).abs() < 1e-8, "{fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn unreachable_margin_is_reported() {
        let g = GridSpec::unit(2, 17).unwrap();
        let gen = InitialGenerator::Fourier {
            seed: 1,
            amplitude: 1e30,
            max_freq: 2,
            window: true,
        };
        assert_eq!(
            generate_initial(&gen, &g, 2, 0.05),
            Err(FlowError::MarginUnreachable(MAX_HALVINGS))
        );
    }

    #[test]
    fn rescale_with_zero_sup_norm_shifts_by_one() {
        let g = GridSpec::unit(2, 17).unwrap();
        let s = GraphState::from_fn(g, 1, 0.25, |_, x| 0.1 * x[0] * x[1]).unwrap();
        let r = parabolic_rescale(&s, 0.0).unwrap();
        assert_eq!(r.grid, g);
        assert_eq!(r.t, 0.25);
        for k in 0..g.node_count() {
            assert!((r.u[0][k] - s.u[0][k] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_scenario_run_stays_zero() {
        let g = GridSpec::unit(2, 17).unwrap();
        let traj = run(&Scenario::zero(2, 2), &g, &FlowConfig::new(0.25)).unwrap();
        assert!((traj.last().t - 0.25).abs() < 1e-15);
        for f in &traj.frames {
            assert!(f.u.iter().flatten().all(|&x| x == 0.0));
        }
        let dts: Vec<f64> = traj.frames.windows(2).map(|w| w[1].t - w[0].t).collect();
        assert!(dts.iter().all(|d| (d - traj.frame_dt()).abs() < 1e-15));
    }

    #[test]
    fn exact_boundary_requires_exact_solution() {
        let g = GridSpec::unit(2, 17).unwrap();
        let mut cfg = FlowConfig::new(0.01);
        cfg.boundary = BoundaryMode::DirichletExact;
        assert!(run(&Scenario::fourier(2, 1, 1, 0.1, 2), &g, &cfg).is_err());
    }
}
