//! Numerical residuals for the evolution inequalities along a trajectory,
//! refinement studies, and the max-point and gradient-bound reports.
//!
//! Every slack is signed so that the continuum claim reads `slack ≤ 0`; the
//! `varphi` identity is two-sided.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{
    initial_state, rescale_trajectory, rescale_trajectory_with, run, run_with_frames, FlowConfig, FlowError, Scenario, Trajectory};
use crate::geomgrid::{
    cutoff_base, cutoff_field, heat_operator_with, support_mask, CutoffParams, FrameGeometry,
    GraphState, GridError, GridSpec, ScalarField,
};
use crate::smallalg::{
    area_decreasing_report, index_pairs, singular_decomposition, AreaDecreasingReport,
    SingularDecomposition, MAX_DIM,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("trajectory has {0} frames, at least 3 are needed")]
    TooFewFrames(usize),
    #[error("no node satisfies the hypotheses of {0}; nothing to verify")]
    EmptyMask(String),
    #[error("Φ is undefined at {0} nodes of the initial cutoff support")]
    PhiUndefinedAtStart(usize),
    #[error("no frame at t = {t}; the run ends at {t_end}")]
    NoFrameAtTime { t: f64, t_end: f64 },
    #[error("φw vanishes on every node and frame")]
    DegenerateSupport,
    #[error("unknown quantity {0:?}; expected w, phi, logdetS2, pair_i_j, varphi or cm_cutoff")]
    UnknownQuantity(String),
    #[error("pair indices ({i}, {j}) invalid for n = {n}")]
    PairIndex { i: usize, j: usize, n: usize },
    #[error("refinement needs at least two levels, got {0}")]
    Levels(usize),
    #[error("refinement levels {0:?} are not nested (each must have 2(N−1)+1 points)")]
    NotNested(Vec<usize>),
}

/// Quantities with a residual along the flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quantity {
    W,
    Phi,
    LogDetS2,
    /// Zero-based indices `i < j`.
    Pair(usize, usize),
    Varphi,
    CmCutoff,
}

impl Quantity {
    pub fn id(&self) -> String {
        match self {
            Quantity::W => "w".into(),
            Quantity::Phi => "phi".into(),
            Quantity::LogDetS2 => "logdetS2".into(),
            Quantity::Pair(i, j) => format!("pair_{}_{}", i + 1, j + 1),
            Quantity::Varphi => "varphi".into(),
            Quantity::CmCutoff => "cm_cutoff".into(),
        }
    }

    /// True for identities, where the residual is `|slack|`.
    pub fn two_sided(&self) -> bool {
        matches!(self, Quantity::Varphi)
    }

    pub fn validate(&self, n: usize) -> Result<(), VerifyError> {
        match *self {
            Quantity::Pair(i, j) if !(i < j && j < n) => Err(VerifyError::PairIndex { i, j, n }),
            _ => Ok(()),
        }
    }

    /// Default set for a dimension: all aggregate quantities and every pair.
    pub fn defaults(n: usize) -> Vec<Quantity> {
        let mut out = vec![Quantity::W, Quantity::Phi, Quantity::LogDetS2];
        out.extend(index_pairs(n).map(|(i, j)| Quantity::Pair(i, j)));
        out.push(Quantity::Varphi);
        out
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for Quantity {
    type Err = VerifyError;

    /// Accepts `pair_1_2` and `pair(1,2)` (one-based) for pairs.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || VerifyError::UnknownQuantity(s.to_string());
        match s.trim() {
            "w" => Ok(Quantity::W),
            "phi" => Ok(Quantity::Phi),
            "logdetS2" => Ok(Quantity::LogDetS2),
            "varphi" => Ok(Quantity::Varphi),
            "cm_cutoff" => Ok(Quantity::CmCutoff),
            other => {
                let body = other
                    .strip_prefix("pair_")
                    .map(|r| r.replacen('_', ",", 1))
                    .or_else(|| {
                        other
                            .strip_prefix("pair(")
                            .and_then(|r| r.strip_suffix(')'))
                            .map(str::to_string)
                    })
                    .ok_or_else(bad)?;
                let (i, j) = body.split_once(',').ok_or_else(bad)?;
                let i: usize = i.trim().parse().map_err(|_| bad())?;
                let j: usize = j.trim().parse().map_err(|_| bad())?;
                if i == 0 || j == 0 {
                    return Err(bad());
                }
                Ok(Quantity::Pair(i - 1, j - 1))
            }
        }
    }
}

impl Serialize for Quantity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.id())
    }
}

impl<'de> Deserialize<'de> for Quantity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Tunables for residual evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualOptions {
    /// Cutoff radius `R` of the region; `None` uses `R² = 1 + Σ_α ‖u^α(·,0)‖²_∞`.
    #[serde(default)]
    pub radius: Option<f64>,
    /// Exponent weight `a` of the Gaussian cutoff.
    #[serde(default = "default_cm_a")]
    pub cm_a: f64,
    /// Radius constant of the Gaussian cutoff; `None` uses `1/(1+2Λ)`.
    #[serde(default)]
    pub cm_radius_const: Option<f64>,
    /// Relative eigenvalue gap below which pair residuals are skipped.
    #[serde(default = "default_gap_tol_rel")]
    pub gap_tol_rel: f64,
    /// Smallest admissible `S_kk + S_ll` for pair residuals.
    #[serde(default = "default_pair_floor")]
    pub pair_floor: f64,
}

fn default_cm_a() -> f64 {
    1.0
}

fn default_gap_tol_rel() -> f64 {
    1e-6
}

fn default_pair_floor() -> f64 {
    1e-6
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self {
            radius: None,
            cm_a: default_cm_a(),
            cm_radius_const: None,
            gap_tol_rel: default_gap_tol_rel(),
            pair_floor: default_pair_floor(),
        }
    }
}

/// `R² = 1 + Σ_α ‖u^α(·,0)‖²_∞`.
pub fn default_radius(initial: &GraphState) -> f64 {
    let sum: f64 = initial
        .u
        .iter()
        .map(|f| f.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())).powi(2))
        .sum();
    (1.0 + sum).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    /// Largest slack over masked nodes; `None` for an empty mask.
    pub max_slack: Option<f64>,
    pub max_abs: Option<f64>,
    pub quantile_99: Option<f64>,
    pub count: usize,
}

impl ResidualSummary {
    pub fn of(field: &ScalarField) -> Self {
        let mut vals: Vec<f64> = field.masked().map(|(_, v)| v).collect();
        let count = vals.len();
        let quantile_99 = (count > 0).then(|| {
            let idx = ((0.99 * (count - 1) as f64).round() as usize).min(count - 1);
            *vals.select_nth_unstable_by(idx, f64::total_cmp).1
        });
        Self {
            max_slack: field.max(),
            max_abs: field.max_abs(),
            quantile_99,
            count,
        }
    }

    /// The residual the claim controls: positive part, or magnitude for identities.
    pub fn violation(&self, two_sided: bool) -> f64 {
        if two_sided {
            self.max_abs.unwrap_or(0.0)
        } else {
            self.max_slack.unwrap_or(0.0).max(0.0)
        }
    }
}

/// Slack of one quantity at one interior frame.
#[derive(Clone, Debug)]
pub struct ResidualField {
    pub quantity: Quantity,
    pub frame: usize,
    pub t: f64,
    pub slack: ScalarField,
    /// Region nodes dropped because a pointwise hypothesis failed there.
    pub excluded_by_hypothesis: usize,
    /// Region nodes where the slack could be evaluated or was excluded.
    pub region_count: usize,
    pub summary: ResidualSummary,
}

/// Round-off allowance on the `[1, 2]` height range of the rescaled gauge.
const HEIGHT_TOL: f64 = 1e-12;

struct FrameData {
    geometry: FrameGeometry,
    decomps: Vec<Option<SingularDecomposition>>,
    reports: Vec<Option<AreaDecreasingReport>>,
    region: Vec<bool>,
    fields: Vec<ScalarField>,
    cm_base: Option<Vec<f64>>,
}

struct Context {
    quantities: Vec<Quantity>,
    region_radius: f64,
    cm: CutoffParams,
    opts: ResidualOptions,
}

impl Context {
    fn new(traj: &Trajectory, quantities: &[Quantity], opts: &ResidualOptions) -> Result<Self, VerifyError> {
        let n = traj.grid().dim();
        for q in quantities {
            q.validate(n)?;
        }
        let region_radius = opts.radius.unwrap_or_else(|| default_radius(&traj.frames[0]));
        let cm = CutoffParams::Gaussian {
            a: opts.cm_a,
            radius_const: opts
                .cm_radius_const
                .unwrap_or(1.0 / (1.0 + 2.0 * traj.sup_norm)),
        };
        CutoffParams::VarphiSq { radius: region_radius }.validate()?;
        if quantities.contains(&Quantity::CmCutoff) {
            cm.validate()?;
        }
        Ok(Self {
            quantities: quantities.to_vec(),
            region_radius,
            cm,
            opts: *opts,
        })
    }
}

fn pair_index(n: usize, i: usize, j: usize) -> usize {
    index_pairs(n).position(|p| p == (i, j)).expect("validated pair")
}

impl FrameData {
    fn new(state: &GraphState, ctx: &Context) -> Result<Self, VerifyError> {
        let grid = state.grid;
        let n = grid.dim();
        let geometry = FrameGeometry::new(state);
        let decomps: Vec<Option<SingularDecomposition>> = (0..grid.node_count())
            .map(|k| geometry.jacobians.get(k).map(singular_decomposition))
            .collect();
        let reports: Vec<Option<AreaDecreasingReport>> = decomps
            .iter()
            .map(|d| d.as_ref().map(|d| area_decreasing_report(&d.spectrum)))
            .collect();
        let varphi = cutoff_field(state, &CutoffParams::VarphiSq { radius: ctx.region_radius })?;
        let region = varphi.mask.clone();
        let cm_base = (state.t > 0.0 && ctx.quantities.contains(&Quantity::CmCutoff))
            .then(|| cutoff_base(state, &ctx.cm));
        let len = grid.node_count();
        let fields = ctx
            .quantities
            .iter()
            .map(|q| match *q {
                Quantity::W => ScalarField::from_fn(len, |k| {
                    geometry.jacobians.get(k).map(|_| geometry.v[k].powf(1.0 / n as f64))
                }),
                Quantity::Phi => ScalarField::from_fn(len, |k| reports[k].as_ref().and_then(|r| r.phi)),
                Quantity::LogDetS2 => {
                    ScalarField::from_fn(len, |k| reports[k].as_ref().and_then(|r| r.log_det_s2()))
                }
                Quantity::Pair(i, j) => {
                    let idx = pair_index(n, i, j);
                    ScalarField::from_fn(len, |k| {
                        reports[k]
                            .as_ref()
                            .map(|r| r.s2_eigs[idx])
                            .filter(|&p| p > crate::smallalg::PAIR_SUM_FLOOR)
                    })
                }
                Quantity::Varphi => varphi.clone(),
                Quantity::CmCutoff => match &cm_base {
                    None => ScalarField::empty(len),
                    Some(base) => {
                        let a = match ctx.cm {
                            CutoffParams::Gaussian { a, .. } => a,
                            _ => unreachable!(),
                        };
                        let mask = support_mask(&grid, base);
                        ScalarField::from_fn(len, |k| {
                            mask[k].then(|| base[k].ln() - a * state.height_sq(k) / state.t)
                        })
                    }
                },
            })
            .collect();
        Ok(Self {
            geometry,
            decomps,
            reports,
            region,
            fields,
            cm_base,
        })
    }
}

/// Right-hand side of the Gaussian-cutoff inequality divided by `e^{−a|u|²/t}/t²`.
fn cm_rhs(state: &GraphState, k: usize, eta: f64, a: f64, decomp: &SingularDecomposition, jac: &crate::smallalg::Jacobian) -> f64 {
    let m = state.codim();
    let u2 = state.height_sq(k);
    let mut rhs = a * eta * u2;
    for (i, &l) in decomp.spectrum.lambdas().iter().enumerate() {
        if l <= 0.0 {
            continue;
        }
        let e = decomp.left_vector(jac, i).expect("positive singular value");
        let c = (0..m).map(|al| state.u[al][k] * e[al]).sum::<f64>().abs();
        let d = 1.0 + l * l;
        rhs += -2.0 * a * a * eta * c * c * l * l / d + 8.0 * a * l * c / d;
    }
    rhs
}

fn slack_for(
    qi: usize,
    frames: [&GraphState; 3],
    data: [&FrameData; 3],
    ctx: &Context,
) -> Result<(ScalarField, usize, usize), VerifyError> {
    let q = ctx.quantities[qi];
    let [_, mid, _] = frames;
    let d = data[1];
    let grid = mid.grid;
    let fields = [&data[0].fields[qi], &data[1].fields[qi], &data[2].fields[qi]];
    let heat = heat_operator_with(frames, &d.geometry, fields)?;
    let f_mid = fields[1];
    let grad_source = if q == Quantity::Varphi {
        // |∇√φ|² is better conditioned than |∇φ|²/φ near the free boundary
        ScalarField {
            values: f_mid.values.iter().map(|v| v.max(0.0).sqrt()).collect(),
            mask: f_mid.mask.clone(),
        }
    } else {
        f_mid.clone()
    };
    let gsq = d.geometry.grad_sq(&grad_source);
    let mut excluded = 0;
    let mut region_count = 0;
    let mut out = ScalarField::empty(grid.node_count());
    for k in 0..grid.node_count() {
        let in_region = match q {
            Quantity::Varphi | Quantity::CmCutoff => f_mid.mask[k],
            _ => d.region[k],
        };
        if !in_region {
            continue;
        }
        let (Some(h), Some(g2)) = (heat.get(k), gsq.get(k)) else {
            continue;
        };
        region_count += 1;
        let report = d.reports[k].as_ref().expect("Jacobian defined where the heat operator is");
        let hypothesis = match q {
            Quantity::W | Quantity::Phi | Quantity::LogDetS2 => report.margin > 0.0,
            Quantity::Pair(i, j) => {
                let lam = d.decomps[k].as_ref().expect("defined").spectrum.lambdas();
                report.margin > 0.0
                    && lam[i] - lam[j] >= ctx.opts.gap_tol_rel * (1.0 + lam[0])
                    && report.s2_eigs.iter().all(|&s| s >= ctx.opts.pair_floor)
            }
            Quantity::Varphi => true,
            // the lemma's setting: heights in [1, 2], 0 < t ≤ 1, |xⁱ| ≤ 1
            Quantity::CmCutoff => {
                mid.t <= 1.0
                    && grid.coords(k)[..grid.dim()].iter().all(|x| x.abs() <= 1.0)
                    && mid.u.iter().all(|f| (1.0 - HEIGHT_TOL..=2.0 + HEIGHT_TOL).contains(&f[k]))
            }
        };
        if !hypothesis {
            excluded += 1;
            continue;
        }
        let f = f_mid.values[k];
        let slack = match q {
            Quantity::W => h + 2.0 * g2 / f,
            Quantity::Phi => h + g2 / (2.0 * f),
            Quantity::LogDetS2 => 0.5 * g2 - h,
            Quantity::Pair(..) => -(h / f + 0.5 * g2 / (f * f)),
            Quantity::Varphi => h + 2.0 * g2,
            Quantity::CmCutoff => {
                let (a, _) = match ctx.cm {
                    CutoffParams::Gaussian { a, radius_const } => (a, radius_const),
                    _ => unreachable!(),
                };
                let eta = d.cm_base.as_ref().expect("t > 0")[k];
                let jac = d.geometry.jacobians.get(k).expect("defined");
                let decomp = d.decomps[k].as_ref().expect("defined");
                eta * mid.t * mid.t * (h - g2) - cm_rhs(mid, k, eta, a, decomp, jac)
            }
        };
        out.values[k] = slack;
        out.mask[k] = true;
    }
    Ok((out, excluded, region_count))
}

/// Visits the residual of every requested quantity at every interior frame, in frame order.
pub fn for_each_residual(
    traj: &Trajectory,
    quantities: &[Quantity],
    opts: &ResidualOptions,
    visit: impl FnMut(ResidualField),
) -> Result<(), VerifyError> {
    let all: Vec<usize> = (1..traj.frames.len().saturating_sub(1)).collect();
    for_each_residual_at(traj, quantities, opts, &all, visit)
}

/// As [`for_each_residual`], restricted to the given interior frames (ascending).
pub fn for_each_residual_at(
    traj: &Trajectory,
    quantities: &[Quantity],
    opts: &ResidualOptions,
    centers: &[usize],
    visit: impl FnMut(ResidualField),
) -> Result<(), VerifyError> {
    let totals = visit_residuals(traj, quantities, opts, centers, visit)?;
    if let Some(qi) = totals.iter().position(|&t| t == 0) {
        return Err(VerifyError::EmptyMask(quantities[qi].id()));
    }
    Ok(())
}

/// Returns the number of evaluated nodes per quantity.
fn visit_residuals(
    traj: &Trajectory,
    quantities: &[Quantity],
    opts: &ResidualOptions,
    centers: &[usize],
    mut visit: impl FnMut(ResidualField),
) -> Result<Vec<usize>, VerifyError> {
    let frames = &traj.frames;
    if frames.len() < 3 {
        return Err(VerifyError::TooFewFrames(frames.len()));
    }
    let ctx = Context::new(traj, quantities, opts)?;
    let mut cache: Vec<(usize, FrameData)> = Vec::new();
    let mut totals = vec![0usize; quantities.len()];
    for &c in centers {
        if c == 0 || c + 1 >= frames.len() {
            continue;
        }
        cache.retain(|(i, _)| *i + 1 >= c);
        for i in c - 1..=c + 1 {
            if !cache.iter().any(|(j, _)| *j == i) {
                cache.push((i, FrameData::new(&frames[i], &ctx)?));
            }
        }
        let get = |i: usize| &cache.iter().find(|(j, _)| *j == i).expect("cached").1;
        let data = [get(c - 1), get(c), get(c + 1)];
        let trio = [&frames[c - 1], &frames[c], &frames[c + 1]];
        for (qi, q) in quantities.iter().enumerate() {
            let (slack, excluded, region_count) = slack_for(qi, trio, data, &ctx)?;
            totals[qi] += slack.count();
            visit(ResidualField {
                quantity: *q,
                frame: c,
                t: frames[c].t,
                summary: ResidualSummary::of(&slack),
                slack,
                excluded_by_hypothesis: excluded,
                region_count,
            });
        }
    }
    Ok(totals)
}

/// One residual field per interior frame.
pub fn heat_residual(
    traj: &Trajectory,
    quantity: Quantity,
    opts: &ResidualOptions,
) -> Result<Vec<ResidualField>, VerifyError> {
    let mut out = Vec::new();
    for_each_residual(traj, &[quantity], opts, |r| out.push(r))?;
    Ok(out)
}

/// Aggregate of one quantity over all interior frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantityStats {
    pub quantity: Quantity,
    pub max_slack: Option<f64>,
    pub max_abs: f64,
    /// Positive part (one-sided) or magnitude (identities).
    pub violation: f64,
    /// `max |slack − exact slack|` when the scenario has a closed-form solution.
    pub exact_error: Option<f64>,
    pub evaluated: usize,
    pub excluded_by_hypothesis: usize,
    pub region_nodes: usize,
    pub frames: usize,
}

impl QuantityStats {
    fn new(quantity: Quantity) -> Self {
        Self {
            quantity,
            max_slack: None,
            max_abs: 0.0,
            violation: 0.0,
            exact_error: None,
            evaluated: 0,
            excluded_by_hypothesis: 0,
            region_nodes: 0,
            frames: 0,
        }
    }

    fn absorb(&mut self, r: &ResidualField, exact: Option<f64>) {
        let s = &r.summary;
        self.max_slack = match (self.max_slack, s.max_slack) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        self.max_abs = self.max_abs.max(s.max_abs.unwrap_or(0.0));
        self.violation = self.violation.max(s.violation(self.quantity.two_sided()));
        if let Some(e) = exact {
            self.exact_error = Some(self.exact_error.unwrap_or(0.0).max(e));
        }
        self.evaluated += s.count;
        self.excluded_by_hypothesis += r.excluded_by_hypothesis;
        self.region_nodes += r.region_count;
        self.frames += 1;
    }

    /// Fraction of region nodes dropped by the pointwise hypothesis.
    pub fn excluded_fraction(&self) -> f64 {
        if self.region_nodes == 0 {
            0.0
        } else {
            self.excluded_by_hypothesis as f64 / self.region_nodes as f64
        }
    }
}

/// Exact continuum slack on closed-form trajectories.
pub fn exact_slack(scenario: &Scenario, quantity: Quantity, x: &[f64], _t: f64) -> Option<f64> {
    use crate::flow::InitialGenerator as G;
    match (&scenario.generator, quantity) {
        (_, Quantity::CmCutoff) => None,
        (G::Zero | G::Linear { .. }, _) => Some(0.0),
        // w = sec x and |A|² = cos² x, so (D_t − Δ)w + 2|∇w|²/w = −|A|²w
        (G::GrimReaper, Quantity::W) => Some(-x[0].cos()),
        (G::GrimReaper, _) => Some(0.0),
        (G::Fourier { .. }, _) => None,
    }
}

/// `max_k |u(x_k, t) − u_exact(x_k, t)|` at the last frame.
pub fn solution_error(traj: &Trajectory) -> Option<f64> {
    if traj.rescaled || !traj.scenario.has_exact_solution() {
        return None;
    }
    let state = traj.last();
    let grid = state.grid;
    let n = grid.dim();
    let mut err = 0.0_f64;
    for k in 0..grid.node_count() {
        let exact = traj.scenario.exact_solution(&grid.coords(k)[..n], state.t)?;
        for (a, e) in exact.iter().enumerate() {
            err = err.max((state.u[a][k] - e).abs());
        }
    }
    Some(err)
}

/// Per-quantity statistics over a whole trajectory.
pub fn residual_stats(
    traj: &Trajectory,
    quantities: &[Quantity],
    opts: &ResidualOptions,
) -> Result<Vec<QuantityStats>, VerifyError> {
    let all: Vec<usize> = (1..traj.frames.len().saturating_sub(1)).collect();
    collect_stats(traj, quantities, opts, &all, None, |_, _, _| {})
}

/// Node filter `(frame, quantity index, node) -> keep`.
type NodeFilter<'a> = &'a dyn Fn(usize, usize, usize) -> bool;

fn collect_stats(
    traj: &Trajectory,
    quantities: &[Quantity],
    opts: &ResidualOptions,
    centers: &[usize],
    keep: Option<NodeFilter<'_>>,
    mut on_field: impl FnMut(usize, usize, &ScalarField),
) -> Result<Vec<QuantityStats>, VerifyError> {
    let mut stats: Vec<QuantityStats> = quantities.iter().map(|&q| QuantityStats::new(q)).collect();
    let grid = *traj.grid();
    let n = grid.dim();
    visit_residuals(traj, quantities, opts, centers, |mut r| {
        let qi = quantities.iter().position(|&q| q == r.quantity).expect("requested");
        if let Some(keep) = keep {
            let frame = r.frame;
            r.slack.restrict(|k| keep(frame, qi, k));
            r.summary = ResidualSummary::of(&r.slack);
        }
        on_field(r.frame, qi, &r.slack);
        let has_exact = !traj.rescaled
            && exact_slack(&traj.scenario, r.quantity, &[0.0; MAX_DIM][..n], r.t).is_some();
        let exact = has_exact.then(|| {
            r.slack
                .masked()
                .filter_map(|(k, s)| {
                    exact_slack(&traj.scenario, r.quantity, &grid.coords(k)[..n], r.t)
                        .map(|e| (s - e).abs())
                })
                .fold(0.0, f64::max)
        });
        stats[qi].absorb(&r, exact);
    })?;
    Ok(stats)
}

/// Outcome of a refinement sequence for one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contraction {
    pub values: Vec<f64>,
    /// `values[i] / values[i+1]`, `None` when the finer value is at the floor.
    pub ratios: Vec<Option<f64>>,
    /// Observed orders `log2` of the ratios.
    pub orders: Vec<Option<f64>>,
    pub at_floor: Vec<bool>,
    pub floor: f64,
    pub min_ratio: f64,
    pub pass: bool,
}

/// Checks that `values` (one per level, coarse to fine, each level halving `h`)
/// shrink by at least `min_ratio` per halving; a level at the round-off floor
/// `1e-9·(1 + scale)` counts as contracted.
pub fn contraction(values: &[f64], scale: f64, min_ratio: f64) -> Contraction {
    let floor = 1e-9 * (1.0 + scale.abs());
    let at_floor: Vec<bool> = values.iter().map(|&v| v.abs() <= floor).collect();
    let mut ratios = Vec::new();
    let mut orders = Vec::new();
    let mut pass = values.len() >= 2;
    for i in 0..values.len().saturating_sub(1) {
        if at_floor[i + 1] {
            ratios.push(None);
            orders.push(None);
            continue;
        }
        let r = values[i] / values[i + 1];
        ratios.push(Some(r));
        orders.push(Some(r.log2()));
        pass &= r >= min_ratio;
    }
    Contraction {
        values: values.to_vec(),
        ratios,
        orders,
        at_floor,
        floor,
        min_ratio,
        pass,
    }
}

/// Required contraction per halving for one-sided claims.
pub const ONE_SIDED_RATIO: f64 = 2.5;
/// Required contraction per halving for identities.
pub const IDENTITY_RATIO: f64 = 3.0;
/// Smallest observed order accepted against a closed-form solution.
pub const EXACT_ORDER: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub points_per_axis: usize,
    pub h: f64,
    pub dt: f64,
    pub frames: usize,
    pub stats: Vec<QuantityStats>,
    /// Smallest area-decreasing coverage of the cutoff support over frames.
    pub min_coverage: f64,
    /// Sup error against the closed-form solution at the final frame.
    pub solution_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantityVerdict {
    pub quantity: Quantity,
    pub violation: Contraction,
    pub exact: Option<Contraction>,
    pub max_excluded_fraction: f64,
    /// No node met the hypotheses at any level, so there was nothing to test.
    pub vacuous: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub scenario: String,
    pub rescaled: bool,
    pub levels: Vec<LevelInfo>,
    pub verdicts: Vec<QuantityVerdict>,
    /// Order check of the heights themselves, when a closed form exists.
    pub solution: Option<Contraction>,
    pub pass: bool,
}

/// Fraction of cutoff-supported nodes where `λ₁λ₂ < 1`.
pub fn area_decreasing_coverage(state: &GraphState, radius: f64) -> Result<f64, VerifyError> {
    let field = cutoff_field(state, &CutoffParams::VarphiSq { radius })?;
    let geometry = FrameGeometry::new(state);
    let mut total = 0usize;
    let mut good = 0usize;
    for (k, _) in field.masked() {
        let Some(j) = geometry.jacobians.get(k) else {
            continue;
        };
        total += 1;
        if crate::smallalg::singular_spectrum(j).max_pair_product() < 1.0 {
            good += 1;
        }
    }
    Ok(if total == 0 { 1.0 } else { good as f64 / total as f64 })
}

/// Runs the scenario on nested grids (coarse to fine, each halving `h`) with
/// the same solver stride, so the frame spacing shrinks with `h²`, and checks
/// contraction. Finer levels are compared at the coarse nodes and frame times
/// where the coarse level evaluated a residual, so every level measures the
/// error on the same space-time point set. With `rescaled`, every level is
/// moved to the gauge with heights in `[1, 2]` using one common `Λ`.
pub fn refinement_study(
    scenario: &Scenario,
    extent: f64,
    levels: &[usize],
    config: &FlowConfig,
    quantities: &[Quantity],
    opts: &ResidualOptions,
    rescaled: bool,
) -> Result<RefinementReport, VerifyError> {
    if levels.len() < 2 {
        return Err(VerifyError::Levels(levels.len()));
    }
    if levels
        .windows(2)
        .any(|w| w[1] < 2 || w[1] - 1 != 2 * (w[0] - 1))
    {
        return Err(VerifyError::NotNested(levels.to_vec()));
    }
    let coarse_grid = GridSpec::new(scenario.n, extent, levels[0])?;
    let mut common_sup = 0.0_f64;
    if rescaled {
        for &points in levels {
            let grid = GridSpec::new(scenario.n, extent, points)?;
            common_sup = common_sup.max(initial_state(scenario, &grid)?.1.sup_norm);
        }
    }
    // coarse residual masks, indexed [quantity][frame] -> node mask
    let mut coarse_masks: Vec<Vec<Option<Vec<bool>>>> = vec![Vec::new(); quantities.len()];
    let mut coarse_frames = 0usize;
    let mut infos = Vec::with_capacity(levels.len());
    for (l, &points) in levels.iter().enumerate() {
        let grid = GridSpec::new(scenario.n, extent, points)?;
        let refine = 1usize << l;
        let time_refine = refine * refine;
        let mut traj = if l == 0 {
            let t = run(scenario, &grid, config)?;
            coarse_frames = t.frames.len() - 1;
            t
        } else {
            run_with_frames(scenario, &grid, config, Some(coarse_frames * time_refine))?
        };
        if rescaled {
            traj = rescale_trajectory_with(&traj, common_sup)?;
        }
        let centers: Vec<usize> = (1..coarse_frames).map(|c| c * time_refine).collect();
        let stats = if l == 0 {
            collect_stats(&traj, quantities, opts, &centers, None, |frame, qi, field| {
                let slot = &mut coarse_masks[qi];
                if slot.len() <= frame {
                    slot.resize(frame + 1, None);
                }
                slot[frame] = Some(field.mask.clone());
            })?
        } else {
            let n = grid.dim();
            let keep = |frame: usize, qi: usize, k: usize| -> bool {
                let idx = grid.multi_index(k);
                if idx[..n].iter().any(|i| i % refine != 0) {
                    return false;
                }
                let mut coarse_idx = [0usize; MAX_DIM];
                for (c, i) in coarse_idx.iter_mut().zip(&idx).take(n) {
                    *c = i / refine;
                }
                let ck = coarse_grid.flat_index(&coarse_idx);
                coarse_masks[qi]
                    .get(frame / time_refine)
                    .and_then(|m| m.as_ref())
                    .is_some_and(|m| m[ck])
            };
            collect_stats(&traj, quantities, opts, &centers, Some(&keep), |_, _, _| {})?
        };
        let radius = opts.radius.unwrap_or_else(|| default_radius(&traj.frames[0]));
        let mut min_coverage = 1.0_f64;
        for &c in &centers {
            min_coverage = min_coverage.min(area_decreasing_coverage(&traj.frames[c], radius)?);
        }
        infos.push(LevelInfo {
            points_per_axis: points,
            h: grid.h(),
            dt: traj.dt_step,
            frames: traj.frames.len(),
            stats,
            min_coverage,
            solution_error: if rescaled { None } else { solution_error(&traj) },
        });
    }
    let verdicts: Vec<QuantityVerdict> = quantities
        .iter()
        .enumerate()
        .map(|(qi, &q)| {
            let stats: Vec<&QuantityStats> = infos.iter().map(|l| &l.stats[qi]).collect();
            let scale = stats.iter().map(|s| s.max_abs).fold(0.0, f64::max);
            let ratio = if q.two_sided() { IDENTITY_RATIO } else { ONE_SIDED_RATIO };
            let violation = contraction(&stats.iter().map(|s| s.violation).collect::<Vec<_>>(), scale, ratio);
            let exact = stats
                .iter()
                .map(|s| s.exact_error)
                .collect::<Option<Vec<f64>>>()
                .map(|errs| contraction(&errs, scale, 2f64.powf(EXACT_ORDER)));
            let pass = violation.pass && exact.as_ref().is_none_or(|c| c.pass);
            QuantityVerdict {
                quantity: q,
                violation,
                exact,
                max_excluded_fraction: stats.iter().map(|s| s.excluded_fraction()).fold(0.0, f64::max),
                vacuous: stats.iter().all(|s| s.evaluated == 0),
                pass,
            }
        })
        .collect();
    let solution = infos
        .iter()
        .map(|l| l.solution_error)
        .collect::<Option<Vec<f64>>>()
        .map(|errs| contraction(&errs, errs.iter().fold(0.0, |a: f64, &b| a.max(b)), 2f64.powf(EXACT_ORDER)));
    let pass = verdicts.iter().all(|v| v.pass) && solution.as_ref().is_none_or(|c| c.pass);
    Ok(RefinementReport {
        scenario: scenario.name.clone(),
        rescaled,
        levels: infos,
        verdicts,
        solution,
        pass,
    })
}

/// `sup φ⁴Φ` along a trajectory with `φ = ((R² − |z|² − 2nt)₊)²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedSupSeries {
    pub radius: f64,
    pub times: Vec<f64>,
    /// Over every node with a Jacobian and `φ > 0`.
    pub full: Vec<f64>,
    /// Over the stencil-interior support only.
    pub interior: Vec<f64>,
    /// `sup (R² − |z|² − 2nt)₊ Φ^{1/8}` over the full set.
    pub root: Vec<f64>,
    /// Largest frame-to-frame increase of `full` (zero for a single frame).
    pub delta_plus: f64,
    pub delta_plus_interior: f64,
    /// Nodes with `φ > 0` where `Φ` was undefined, per frame.
    pub undefined: Vec<usize>,
}

fn max_increase(series: &[f64]) -> f64 {
    series
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max)
}

pub fn weighted_sup_monitor(traj: &Trajectory, radius: Option<f64>) -> Result<WeightedSupSeries, VerifyError> {
    let radius = radius.unwrap_or_else(|| default_radius(&traj.frames[0]));
    let params = CutoffParams::VarphiSq { radius };
    params.validate()?;
    let mut out = WeightedSupSeries {
        radius,
        times: Vec::new(),
        full: Vec::new(),
        interior: Vec::new(),
        root: Vec::new(),
        delta_plus: 0.0,
        delta_plus_interior: 0.0,
        undefined: Vec::new(),
    };
    for (fi, state) in traj.frames.iter().enumerate() {
        let grid = state.grid;
        let base = cutoff_base(state, &params);
        let inner = support_mask(&grid, &base);
        let geometry = FrameGeometry::new(state);
        let (mut full, mut interior, mut root, mut undefined) = (0.0_f64, 0.0_f64, 0.0_f64, 0usize);
        for k in 0..grid.node_count() {
            let psi = base[k];
            let Some(j) = geometry.jacobians.get(k) else {
                continue;
            };
            if psi <= 0.0 {
                continue;
            }
            let spec = crate::smallalg::singular_spectrum(j);
            let Some(phi) = area_decreasing_report(&spec).phi else {
                undefined += 1;
                continue;
            };
            let val = psi.powi(8) * phi;
            full = full.max(val);
            root = root.max(psi * phi.powf(0.125));
            if inner[k] {
                interior = interior.max(val);
            }
        }
        if fi == 0 && undefined > 0 {
            return Err(VerifyError::PhiUndefinedAtStart(undefined));
        }
        out.times.push(state.t);
        out.full.push(full);
        out.interior.push(interior);
        out.root.push(root);
        out.undefined.push(undefined);
    }
    out.delta_plus = max_increase(&out.full);
    out.delta_plus_interior = max_increase(&out.interior);
    Ok(out)
}

/// Where `φw` peaks over nodes × frames in the rescaled gauge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxPointReport {
    pub a: f64,
    pub radius_const: f64,
    pub frame: usize,
    pub t: f64,
    pub node: usize,
    pub x: Vec<f64>,
    /// `ln(φw)` at the argmax.
    pub log_phi_w: f64,
    pub eta: f64,
    pub lambda1: f64,
    pub product: f64,
    /// `8m`.
    pub product_bound: f64,
    pub product_ok: bool,
    /// `|∇_h(φw)| / (φw)(p)`.
    pub grad_norm: f64,
    /// Largest `|D²ᵢᵢ(φw)| / (φw)(p)` at `p`.
    pub second_diff_scale: f64,
    pub certificate_ok: bool,
    pub local_max: bool,
    pub boundary_attained: bool,
    pub area_decreasing: bool,
    pub status: MaxPointStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxPointStatus {
    /// Interior argmax with `ηλ₁ ≤ 8m` and the first-order certificate.
    Pass,
    Fail,
    /// Argmax on the edge of the support or grid; not judged.
    BoundaryAttained,
}

/// `rescaled` must already be in the gauge with heights in `[1, 2]`.
pub fn maxpoint_report(rescaled: &Trajectory, a: f64, radius_const: f64) -> Result<MaxPointReport, VerifyError> {
    let params = CutoffParams::Gaussian { a, radius_const };
    params.validate()?;
    let m = rescaled.frames[0].codim();
    let mut best: Option<(f64, usize, usize)> = None;
    let mut logs: Vec<Vec<Option<f64>>> = Vec::with_capacity(rescaled.frames.len());
    for (fi, state) in rescaled.frames.iter().enumerate() {
        let grid = state.grid;
        if state.t <= 0.0 {
            logs.push(vec![None; grid.node_count()]);
            continue;
        }
        let n = grid.dim() as f64;
        let base = cutoff_base(state, &params);
        let geometry = FrameGeometry::new(state);
        let frame_logs: Vec<Option<f64>> = (0..grid.node_count())
            .map(|k| {
                geometry.jacobians.get(k)?;
                (base[k] > 0.0).then(|| {
                    base[k].ln() - a * state.height_sq(k) / state.t + geometry.v[k].ln() / n
                })
            })
            .collect();
        for (k, l) in frame_logs.iter().enumerate() {
            if let Some(l) = *l {
                if best.is_none_or(|(b, _, _)| l > b) {
                    best = Some((l, fi, k));
                }
            }
        }
        logs.push(frame_logs);
    }
    let (log_phi_w, fi, k) = best.ok_or(VerifyError::DegenerateSupport)?;
    let state = &rescaled.frames[fi];
    let grid = state.grid;
    let n = grid.dim();
    let base = cutoff_base(state, &params);
    let frame_logs = &logs[fi];
    // the first-order check needs φw > 0 on the whole radius-1 box
    let boundary_attained = grid
        .box_around(k, 1)
        .is_none_or(|b| b.iter().any(|&j| frame_logs[j].is_none()));
    let h = grid.h();
    let (mut grad_sq, mut second, mut local_max) = (0.0, 0.0_f64, true);
    if !boundary_attained {
        let rel = |j: usize| (frame_logs[j].expect("inside the box") - log_phi_w).exp();
        for i in 0..n {
            let s = grid.stride(i);
            let (p, q) = (rel(k + s), rel(k - s));
            grad_sq += ((p - q) / (2.0 * h)).powi(2);
            second = second.max(((p - 2.0 + q) / (h * h)).abs());
        }
        local_max = grid
            .box_around(k, 1)
            .expect("interior")
            .iter()
            .all(|&j| frame_logs[j].expect("inside the box") <= log_phi_w);
    }
    let grad_norm = grad_sq.sqrt();
    let jac = FrameGeometry::new(state).jacobians.get(k).copied().expect("has Jacobian");
    let spec = crate::smallalg::singular_spectrum(&jac);
    let lambda1 = spec.largest();
    let eta = base[k];
    let product = eta * lambda1;
    let product_bound = 8.0 * m as f64;
    let certificate_ok = !boundary_attained && grad_norm <= 5.0 * h * second + 1e-12;
    let product_ok = product <= product_bound;
    Ok(MaxPointReport {
        a,
        radius_const,
        frame: fi,
        t: state.t,
        node: k,
        x: grid.coords(k)[..n].to_vec(),
        log_phi_w,
        eta,
        lambda1,
        product,
        product_bound,
        product_ok,
        grad_norm,
        second_diff_scale: second,
        certificate_ok,
        local_max,
        boundary_attained,
        area_decreasing: spec.max_pair_product() < 1.0,
        status: if boundary_attained {
            MaxPointStatus::BoundaryAttained
        } else if product_ok && certificate_ok {
            MaxPointStatus::Pass
        } else {
            MaxPointStatus::Fail
        },
    })
}

/// The explicit interior gradient bound `(32m)ⁿ(1+2Λ)ⁿ e^{64n²m²(1+2Λ)²}` in log form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub ln_bound: f64,
    /// `None` when the value overflows `f64`.
    pub bound: Option<f64>,
    /// `ln K₁` with `K₁ = (32m)ⁿ eⁿ e^{128n²m²}`.
    pub ln_k1: f64,
    /// `K₂ = 512n²m² + n`, so that the bound is at most `K₁ e^{K₂Λ²}`.
    pub k2: f64,
}

pub fn gradient_bound(n: usize, m: usize, sup_norm: f64) -> BoundValue {
    let (nf, mf) = (n as f64, m as f64);
    let s = 1.0 + 2.0 * sup_norm;
    let ln_bound = nf * (32.0 * mf).ln() + nf * s.ln() + 64.0 * nf * nf * mf * mf * s * s;
    let bound = Some(ln_bound.exp()).filter(|b| b.is_finite());
    BoundValue {
        ln_bound,
        bound,
        ln_k1: nf * (32.0 * mf).ln() + nf + 128.0 * nf * nf * mf * mf,
        k2: 512.0 * nf * nf * mf * mf + nf,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    pub m: usize,
    pub sup_norm: f64,
    pub t: f64,
    /// `|du|(0, 1/(4n))` (Frobenius norm).
    pub measured: f64,
    pub bound: BoundValue,
    pub pass: bool,
    pub phi_at_origin: Option<f64>,
    pub margin_at_origin: f64,
    pub maxpoint: Option<MaxPointReport>,
}

pub fn gradient_bound_report(traj: &Trajectory, sup_norm: f64) -> Result<BoundReport, VerifyError> {
    let grid = *traj.grid();
    let (n, m) = (grid.dim(), traj.frames[0].codim());
    let target = 1.0 / (4.0 * n as f64);
    let frame = traj
        .frames
        .iter()
        .find(|f| (f.t - target).abs() <= 1e-9 * target)
        .ok_or(VerifyError::NoFrameAtTime {
            t: target,
            t_end: traj.last().t,
        })?;
    let geometry = FrameGeometry::new(frame);
    let jac = geometry
        .jacobians
        .get(grid.origin())
        .copied()
        .ok_or(VerifyError::Grid(GridError::PointCount(grid.points_per_axis())))?;
    let measured = jac.norm();
    let report = area_decreasing_report(&crate::smallalg::singular_spectrum(&jac));
    let bound = gradient_bound(n, m, sup_norm);
    let rescaled = rescale_trajectory(traj)?;
    let maxpoint = maxpoint_report(&rescaled, 4.0 * m as f64, 1.0 / (1.0 + 2.0 * sup_norm)).ok();
    Ok(BoundReport {
        n,
        m,
        sup_norm,
        t: frame.t,
        measured,
        pass: measured.ln() <= bound.ln_bound,
        bound,
        phi_at_origin: report.phi,
        margin_at_origin: report.margin,
        maxpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantity_ids_round_trip() {
        for q in [
            Quantity::W,
            Quantity::Phi,
            Quantity::LogDetS2,
            Quantity::Pair(0, 2),
            Quantity::Varphi,
            Quantity::CmCutoff,
        ] {
            assert_eq!(q.id().parse::<Quantity>().unwrap(), q);
        }
        assert_eq!("pair(1,2)".parse::<Quantity>().unwrap(), Quantity::Pair(0, 1));
        assert!("pair_0_1".parse::<Quantity>().is_err());
        assert!("nope".parse::<Quantity>().is_err());
        assert!(Quantity::Pair(1, 1).validate(3).is_err());
        assert!(Quantity::Pair(0, 2).validate(2).is_err());
    }

    #[test]
    fn bound_value_for_n2_m1() {
        let b = gradient_bound(2, 1, 0.0);
        assert!((b.ln_bound - 262.931471805599453).abs() < 1e-11);
        let v = b.bound.unwrap();
        assert!((v / 1.54770192896420e114 - 1.0).abs() < 1e-12);
        // increasing in Λ
        for l in [0.1, 0.5, 1.0, 3.0] {
            assert!(gradient_bound(2, 2, l).ln_bound > gradient_bound(2, 2, l - 0.05).ln_bound);
        }
        // bound ≤ K₁ e^{K₂Λ²}
        for l in [0.0, 0.3, 1.0, 2.5] {
            let b = gradient_bound(3, 2, l);
            assert!(b.ln_bound <= b.ln_k1 + b.k2 * l * l);
        }
        assert!(gradient_bound(4, 4, 10.0).bound.is_none());
    }

    #[test]
    fn contraction_rules() {
        let c = contraction(&[1e-2, 2.5e-3, 6e-4], 1.0, 2.5);
        assert!(c.pass);
        assert!((c.orders[0].unwrap() - 2.0).abs() < 1e-12);
        let c = contraction(&[1e-2, 6e-3, 1e-3], 1.0, 2.5);
        assert!(!c.pass);
        let c = contraction(&[0.0, 0.0, 0.0], 1.0, 2.5);
        assert!(c.pass && c.at_floor.iter().all(|&b| b));
        let c = contraction(&[1e-3, 1e-12], 1.0, 2.5);
        assert!(c.pass && c.ratios[0].is_none());
        assert!(!contraction(&[1.0], 1.0, 2.5).pass);
    }

    #[test]
    fn summary_quantile_and_max() {
        let f = ScalarField::from_fn(200, |k| (k % 2 == 0).then_some(k as f64));
        let s = ResidualSummary::of(&f);
        assert_eq!(s.count, 100);
        assert_eq!(s.max_slack, Some(198.0));
        assert_eq!(s.quantile_99, Some(196.0));
        assert_eq!(s.violation(false), 198.0);
        let e = ResidualSummary::of(&ScalarField::empty(4));
        assert_eq!(e.max_slack, None);
        assert_eq!(e.violation(true), 0.0);
    }
}
