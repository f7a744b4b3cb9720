//! The elliptic side: minimal graphs `gⁱʲ ∂²ᵢⱼ u^α = 0` obtained as the
//! long-time limit of the flow stepper, the subharmonicity of `log v` on
//! area non-increasing minimal graphs, and the Korevaar-type cutoff argument
//! with its explicit constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{cfl_dt, generate_initial, nonparametric_velocity_at, FlowError, InitialGenerator};
use crate::geomgrid::{FrameGeometry, GraphState, GridError, GridSpec, ScalarField};
use crate::smallalg::{singular_spectrum, MAX_DIM};
use crate::verify::{contraction, Contraction, ResidualSummary, ONE_SIDED_RATIO};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MssError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("non-finite heights after {step} relaxation steps")]
    NonFinite { step: usize },
    #[error("relaxation diverged: residual rose for {run} consecutive steps (step {step}, residual {residual})")]
    Diverged { step: usize, residual: f64, run: usize },
    #[error("heights must be ≤ -1, found {max}")]
    HeightsAboveLimit { max: f64 },
    #[error("no node satisfies the area non-increasing hypothesis")]
    EmptyMask,
    #[error("cutoff vanishes on every node")]
    EmptySupport,
    #[error("invalid parameter {name} = {value}")]
    Parameter { name: &'static str, value: f64 },
    #[error("refinement needs nested levels with N_(l+1) - 1 = 2(N_l - 1), got {0:?}")]
    Levels(Vec<usize>),
}

/// Dirichlet problem for the minimal surface system. The stored state holds
/// the boundary data on boundary nodes and the starting guess inside, both
/// already translated so that every height is at most `-1`.
#[derive(Clone, Debug)]
pub struct MssProblem {
    pub state: GraphState,
    /// `‖u^α‖_∞ + 1`, subtracted from component α.
    pub offsets: Vec<f64>,
}

impl MssProblem {
    /// Translates `u^α ↦ u^α − ‖u^α‖_∞ − 1`.
    pub fn new(mut state: GraphState) -> Result<Self, MssError> {
        if !state.is_finite() {
            return Err(MssError::NonFinite { step: 0 });
        }
        state.t = 0.0;
        let mut offsets = Vec::with_capacity(state.codim());
        for comp in &mut state.u {
            let off = comp.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())) + 1.0;
            comp.iter_mut().for_each(|x| *x -= off);
            offsets.push(off);
        }
        Ok(Self { state, offsets })
    }

    /// Boundary data (and starting guess) from a generator; the amplitude
    /// is halved until `λ₁λ₂ ≤ 1 − margin`.
    pub fn from_generator(
        generator: &InitialGenerator,
        grid: GridSpec,
        m: usize,
        margin: f64,
    ) -> Result<Self, MssError> {
        let data = generate_initial(generator, &grid, m, margin)?;
        Self::new(GraphState::new(grid, data.u, 0.0)?)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.state.grid
    }
}

/// Result of [`relax_to_minimal`].
#[derive(Clone, Debug)]
pub struct Relaxation {
    pub state: GraphState,
    /// `(step, residual)` samples, always including the first and the last step.
    pub history: Vec<(usize, f64)>,
    pub steps: usize,
    /// Max-node `|gⁱʲ∂²ᵢⱼu^α|` of the returned state.
    pub residual: f64,
    pub converged: bool,
    pub dt: f64,
}

/// Residual increases in a row that count as divergence.
pub const DIVERGENCE_RUN: usize = 1000;
/// Default time-step fraction of the stability limit.
pub const RELAX_SIGMA: f64 = 0.9;
const HISTORY_EVERY: usize = 100;

pub fn relax_to_minimal(problem: &MssProblem, tol: f64, max_steps: usize) -> Result<Relaxation, MssError> {
    relax_with(problem, tol, max_steps, RELAX_SIGMA)
}

/// Forward-Euler relaxation of the flow with frozen boundary data until the
/// strong-form residual drops to `tol`.
pub fn relax_with(problem: &MssProblem, tol: f64, max_steps: usize, sigma: f64) -> Result<Relaxation, MssError> {
    if !(tol >= 0.0) {
        return Err(MssError::Parameter { name: "tol", value: tol });
    }
    let dt = cfl_dt(&problem.state, sigma)?;
    let grid = problem.state.grid;
    let m = problem.state.codim();
    let interior: Vec<usize> = (0..grid.node_count()).filter(|&k| !grid.is_boundary(k)).collect();
    let mut cur = problem.state.clone();
    let mut next = cur.clone();
    let mut vel = [0.0; MAX_DIM];
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    let mut rising = 0usize;
    let mut step = 0usize;
    loop {
        // one sweep both measures the residual of `cur` and builds `next`
        let mut residual = 0.0_f64;
        for &k in &interior {
            nonparametric_velocity_at(&cur, k, &mut vel);
            for a in 0..m {
                residual = residual.max(vel[a].abs());
                next.u[a][k] = cur.u[a][k] + dt * vel[a];
            }
        }
        if !residual.is_finite() {
            return Err(MssError::NonFinite { step });
        }
        let done = residual <= tol || step == max_steps;
        if step % HISTORY_EVERY == 0 || done {
            history.push((step, residual));
        }
        if done {
            cur.t = 0.0;
            return Ok(Relaxation {
                state: cur,
                history,
                steps: step,
                residual,
                converged: residual <= tol,
                dt,
            });
        }
        rising = if residual > prev { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_RUN {
            return Err(MssError::Diverged {
                step,
                residual,
                run: rising,
            });
        }
        prev = residual;
        std::mem::swap(&mut cur, &mut next);
        step += 1;
    }
}

/// Max-node `|gⁱʲ∂²ᵢⱼu^α|` over interior nodes.
pub fn mss_residual(state: &GraphState) -> f64 {
    crate::flow::max_velocity(state)
}

/// Slack of `Δ log v ≥ (1/n)|∇log v|²` and of the equivalent `Δw ≥ 2|∇w|²/w`.
#[derive(Clone, Debug)]
pub struct SubharmonicField {
    /// `(1/n)|∇log v|² − Δlog v`.
    pub log_v: ScalarField,
    /// `2|∇w|²/w − Δw` with `w = v^{1/n}`.
    pub w_form: ScalarField,
    pub log_v_summary: ResidualSummary,
    pub w_summary: ResidualSummary,
    /// Nodes where both operators were defined but `λᵢλⱼ > 1` for some pair.
    pub excluded_by_hypothesis: usize,
}

pub fn subharmonic_residual(state: &GraphState) -> Result<SubharmonicField, MssError> {
    let grid = state.grid;
    let n = grid.dim() as f64;
    let geometry = FrameGeometry::new(state);
    let nodes = grid.node_count();
    let log_v = ScalarField::from_fn(nodes, |k| geometry.jacobians.get(k).map(|_| geometry.v[k].ln()));
    let w = ScalarField::from_fn(nodes, |k| geometry.jacobians.get(k).map(|_| geometry.v[k].powf(1.0 / n)));
    let mut excluded = 0usize;
    let mut hyp = vec![false; nodes];
    let mut raw_log = vec![None; nodes];
    let mut raw_w = vec![None; nodes];
    for k in 0..nodes {
        let (Some(lap_l), Some(grad_l), Some(lap_w), Some(grad_w)) = (
            geometry.laplacian_at(&log_v, k),
            geometry.gradient(&log_v, k),
            geometry.laplacian_at(&w, k),
            geometry.gradient(&w, k),
        ) else {
            continue;
        };
        let jac = geometry.jacobians.get(k).expect("gradient implies a Jacobian");
        if singular_spectrum(jac).max_pair_product() > 1.0 {
            excluded += 1;
            continue;
        }
        hyp[k] = true;
        let gl = geometry.metric_dot(k, &grad_l, &grad_l).max(0.0);
        let gw = geometry.metric_dot(k, &grad_w, &grad_w).max(0.0);
        raw_log[k] = Some(gl / n - lap_l);
        raw_w[k] = Some(2.0 * gw / w.values[k] - lap_w);
    }
    if !hyp.iter().any(|&b| b) {
        return Err(MssError::EmptyMask);
    }
    let log_v = ScalarField::from_fn(nodes, |k| raw_log[k]);
    let w_form = ScalarField::from_fn(nodes, |k| raw_w[k]);
    Ok(SubharmonicField {
        log_v_summary: ResidualSummary::of(&log_v),
        w_summary: ResidualSummary::of(&w_form),
        log_v,
        w_form,
        excluded_by_hypothesis: excluded,
    })
}

/// `ln(eˣ − 1)` for `x > 0` without overflow.
pub fn log_expm1(x: f64) -> f64 {
    if x > 1.0 {
        x + (-(-x).exp_m1()).ln()
    } else {
        x.exp_m1().ln()
    }
}

/// `η = f∘φ̃`, `f(t) = e^{C₁t} − 1`, `φ̃ = (Σ_α y^α/(2u₀) + 1 − |x|²)₊`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KorevaarParams {
    pub u0: f64,
    pub c1: f64,
}

impl KorevaarParams {
    /// `C₁ = 300 n u₀²`.
    pub fn new(n: usize, u0: f64) -> Result<Self, MssError> {
        if !(u0 >= 1.0) || !u0.is_finite() {
            return Err(MssError::Parameter { name: "u0", value: u0 });
        }
        Ok(Self {
            u0,
            c1: 300.0 * n as f64 * u0 * u0,
        })
    }

    /// `u₀ = −Σ_α u^α(0)`.
    pub fn for_state(state: &GraphState) -> Result<Self, MssError> {
        let o = state.grid.origin();
        let sum: f64 = state.u.iter().map(|f| f[o]).sum();
        Self::new(state.grid.dim(), -sum)
    }

    pub fn phi_tilde(&self, state: &GraphState, k: usize) -> f64 {
        let sum: f64 = state.u.iter().map(|f| f[k]).sum();
        (sum / (2.0 * self.u0) + 1.0 - state.grid.norm_sq(k)).max(0.0)
    }

    pub fn f(&self, t: f64) -> f64 {
        (self.c1 * t).exp_m1()
    }

    /// `ln f(t)`; `-∞` at `t = 0`.
    pub fn ln_f(&self, t: f64) -> f64 {
        if t <= 0.0 {
            f64::NEG_INFINITY
        } else {
            log_expm1(self.c1 * t)
        }
    }
}

/// `C₂ = 2^{(n−1)/(2n)} (1 + 64u₀²)^{1/(2n)}`, the bound on `w(p)` once `λ₁(p) ≤ 8u₀`.
pub fn korevaar_c2(n: usize, u0: f64) -> f64 {
    let nf = n as f64;
    2f64.powf((nf - 1.0) / (2.0 * nf)) * (1.0 + 64.0 * u0 * u0).powf(1.0 / (2.0 * nf))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KorevaarReport {
    pub params: KorevaarParams,
    pub c2: f64,
    /// `φ̃(0, u(0))`.
    pub phi_tilde_origin: f64,
    /// `ln η(0)`.
    pub ln_eta_origin: f64,
    pub w_origin: f64,
    /// `|du|(0)`, Frobenius norm.
    pub grad_origin: f64,
    pub node: usize,
    pub x: Vec<f64>,
    /// `ln(ηw)` at the argmax `p`.
    pub ln_eta_w: f64,
    pub lambda1: f64,
    /// `8u₀`.
    pub lambda1_bound: f64,
    pub lambda1_ok: bool,
    pub w_at_p: f64,
    /// `w(p) ≤ C₂`.
    pub w_at_p_ok: bool,
    /// The argmax has a radius-1 box outside the support or the grid.
    pub boundary_attained: bool,
    /// `ln C₂ + C₁ − ln η(0)`: the resulting bound on `ln w(0)`.
    pub ln_w_bound: f64,
    /// `(e^{C₁/2} − 1) w(0) ≤ C₂ e^{C₁}`, compared in logs.
    pub pass: bool,
}

const HEIGHT_TOL: f64 = 1e-12;

pub fn korevaar_report(state: &GraphState, params: Option<KorevaarParams>) -> Result<KorevaarReport, MssError> {
    let max = state
        .u
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
    if max > -1.0 + HEIGHT_TOL {
        return Err(MssError::HeightsAboveLimit { max });
    }
    let params = match params {
        Some(p) => KorevaarParams::new(state.grid.dim(), p.u0).map(|q| KorevaarParams { c1: p.c1, ..q })?,
        None => KorevaarParams::for_state(state)?,
    };
    if !(params.c1 > 0.0) {
        return Err(MssError::Parameter {
            name: "C1",
            value: params.c1,
        });
    }
    let grid = state.grid;
    let n = grid.dim();
    let geometry = FrameGeometry::new(state);
    let logs: Vec<Option<f64>> = (0..grid.node_count())
        .map(|k| {
            geometry.jacobians.get(k)?;
            let phi = params.phi_tilde(state, k);
            (phi > 0.0).then(|| params.ln_f(phi) + geometry.v[k].ln() / n as f64)
        })
        .collect();
    let (node, ln_eta_w) = logs
        .iter()
        .enumerate()
        .filter_map(|(k, l)| l.map(|l| (k, l)))
        .fold(None, |best: Option<(usize, f64)>, (k, l)| match best {
            Some((_, b)) if b >= l => best,
            _ => Some((k, l)),
        })
        .ok_or(MssError::EmptySupport)?;
    let boundary_attained = grid
        .box_around(node, 1)
        .is_none_or(|b| b.iter().any(|&j| logs[j].is_none()));
    let jac = geometry.jacobians.get(node).expect("argmax has a Jacobian");
    let lambda1 = singular_spectrum(jac).largest();
    let w_at_p = geometry.v[node].powf(1.0 / n as f64);
    let c2 = korevaar_c2(n, params.u0);
    let origin = grid.origin();
    let jac0 = geometry
        .jacobians
        .get(origin)
        .ok_or(GridError::PointCount(grid.points_per_axis()))?;
    let w_origin = geometry.v[origin].powf(1.0 / n as f64);
    let phi_tilde_origin = params.phi_tilde(state, origin);
    let ln_eta_origin = params.ln_f(phi_tilde_origin);
    let ln_w_bound = c2.ln() + params.c1 - ln_eta_origin;
    Ok(KorevaarReport {
        params,
        c2,
        phi_tilde_origin,
        ln_eta_origin,
        w_origin,
        grad_origin: jac0.norm(),
        node,
        x: grid.coords(node)[..n].to_vec(),
        ln_eta_w,
        lambda1,
        lambda1_bound: 8.0 * params.u0,
        lambda1_ok: lambda1 <= 8.0 * params.u0,
        w_at_p,
        w_at_p_ok: w_at_p <= c2,
        boundary_attained,
        ln_w_bound,
        pass: w_origin.ln() <= ln_w_bound,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MssLevel {
    pub points_per_axis: usize,
    pub h: f64,
    pub steps: usize,
    pub residual: f64,
    pub converged: bool,
    /// Summaries over the coarse-level evaluation set.
    pub log_v: ResidualSummary,
    pub w_form: ResidualSummary,
    pub excluded_by_hypothesis: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubharmonicStudy {
    pub levels: Vec<MssLevel>,
    pub log_v: Contraction,
    pub w_form: Contraction,
    pub pass: bool,
}

/// Relaxes the same boundary data on nested grids and checks that the
/// positive subharmonic slack contracts. Finer levels are evaluated at the
/// coarse nodes where the coarse level evaluated a slack.
pub fn subharmonic_study(
    generator: &InitialGenerator,
    m: usize,
    n: usize,
    extent: f64,
    levels: &[usize],
    tol: f64,
    max_steps: usize,
) -> Result<SubharmonicStudy, MssError> {
    if levels.len() < 2
        || levels
            .windows(2)
            .any(|w| w[1] < 2 || w[1] - 1 != 2 * (w[0] - 1))
    {
        return Err(MssError::Levels(levels.to_vec()));
    }
    let coarse_grid = GridSpec::new(n, extent, levels[0])?;
    let mut coarse_mask: Vec<bool> = Vec::new();
    let mut out = Vec::with_capacity(levels.len());
    for (l, &points) in levels.iter().enumerate() {
        let grid = GridSpec::new(n, extent, points)?;
        let problem = MssProblem::from_generator(generator, grid, m, crate::flow::default_margin())?;
        let relaxed = relax_to_minimal(&problem, tol, max_steps)?;
        let mut field = subharmonic_residual(&relaxed.state)?;
        let refine = 1usize << l;
        if l == 0 {
            coarse_mask = field.log_v.mask.clone();
        } else {
            let keep = |k: usize| -> bool {
                let idx = grid.multi_index(k);
                if idx[..n].iter().any(|i| i % refine != 0) {
                    return false;
                }
                let mut c = [0usize; MAX_DIM];
                for (ci, i) in c.iter_mut().zip(&idx).take(n) {
                    *ci = i / refine;
                }
                coarse_mask[coarse_grid.flat_index(&c)]
            };
            field.log_v.restrict(keep);
            field.w_form.restrict(keep);
        }
        out.push(MssLevel {
            points_per_axis: points,
            h: grid.h(),
            steps: relaxed.steps,
            residual: relaxed.residual,
            converged: relaxed.converged,
            log_v: ResidualSummary::of(&field.log_v),
            w_form: ResidualSummary::of(&field.w_form),
            excluded_by_hypothesis: field.excluded_by_hypothesis,
        });
    }
    let verdict = |pick: fn(&MssLevel) -> &ResidualSummary| {
        let vals: Vec<f64> = out.iter().map(|l| pick(l).violation(false)).collect();
        let scale = out.iter().map(|l| pick(l).max_abs.unwrap_or(0.0)).fold(0.0, f64::max);
        contraction(&vals, scale, ONE_SIDED_RATIO)
    };
    let log_v = verdict(|l| &l.log_v);
    let w_form = verdict(|l| &l.w_form);
    let pass = log_v.pass && w_form.pass && out.iter().all(|l| l.converged);
    Ok(SubharmonicStudy {
        levels: out,
        log_v,
        w_form,
        pass,
    })
}
