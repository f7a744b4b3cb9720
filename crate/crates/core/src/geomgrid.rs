//! Discrete differential geometry of a graph `y = u(x)` sampled on a
//! tensor grid over `[-L, L]ⁿ`.
//!
//! Operators follow the induced metric `g = I + (du)ᵀdu`: the
//! Laplace–Beltrami operator in divergence form `(1/v) ∂ᵢ(v gⁱʲ ∂ⱼF)` with
//! face-averaged coefficients, the metric gradient norm `gⁱʲ ∂ᵢF ∂ⱼF`, and
//! the heat operator `(D_t − Δ)` along the parametric flow `∂_t z = Δ z`,
//! where `D_t` adds the tangential drift of the nonparametric gauge.

use thiserror::Error;

use crate::smallalg::{metric_inverse, Jacobian, SmallMatrix, MAX_DIM};

/// Cutoff values below this are treated as outside the support.
pub const SUPPORT_FLOOR: f64 = 1e-8;

/// Spatial radius (in nodes) by which support masks shrink away from a zero set.
pub const STENCIL_RADIUS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("points per axis must be odd and at least 17, got {0}")]
    PointCount(usize),
    #[error("domain dimension {0} outside 1..={max}", max = MAX_DIM)]
    Dimension(usize),
    #[error("codimension {0} outside 1..={max}", max = MAX_DIM)]
    Codimension(usize),
    #[error("extent must be positive and finite, got {0}")]
    Extent(f64),
    #[error("height field has {got} values, grid has {expected} nodes")]
    Shape { expected: usize, got: usize },
    #[error("frames are not equally spaced in time: {0:?}")]
    UnequalSpacing([f64; 3]),
    #[error("frames live on different grids")]
    GridMismatch,
    #[error("the Gaussian cutoff is undefined at t = 0")]
    CutoffAtInitialTime,
    #[error("invalid cutoff parameter {name} = {value}")]
    CutoffParameter { name: &'static str, value: f64 },
}

/// Regular grid on `[-extent, extent]ⁿ` with an odd number of points per axis,
/// so the origin is always a node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    n: usize,
    extent: f64,
    points: usize,
    h: f64,
}

impl GridSpec {
    pub fn new(n: usize, extent: f64, points_per_axis: usize) -> Result<Self, GridError> {
        if n == 0 || n > MAX_DIM {
            return Err(GridError::Dimension(n));
        }
        if points_per_axis < 17 || points_per_axis % 2 == 0 {
            return Err(GridError::PointCount(points_per_axis));
        }
        if !(extent > 0.0) || !extent.is_finite() {
            return Err(GridError::Extent(extent));
        }
        Ok(Self {
            n,
            extent,
            points: points_per_axis,
            h: 2.0 * extent / (points_per_axis - 1) as f64,
        })
    }

    /// Unit cube `[-1, 1]ⁿ`.
    pub fn unit(n: usize, points_per_axis: usize) -> Result<Self, GridError> {
        Self::new(n, 1.0, points_per_axis)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn points_per_axis(&self) -> usize {
        self.points
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn node_count(&self) -> usize {
        self.points.pow(self.n as u32)
    }

    /// Flat-index offset of a unit step along `axis` (axis 0 varies slowest).
    pub fn stride(&self, axis: usize) -> usize {
        self.points.pow((self.n - 1 - axis) as u32)
    }

    pub fn multi_index(&self, mut flat: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        for axis in (0..self.n).rev() {
            idx[axis] = flat % self.points;
            flat /= self.points;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx[..self.n]
            .iter()
            .fold(0, |acc, &k| acc * self.points + k)
    }

    /// Coordinate of index `k` along any axis.
    pub fn coord(&self, k: usize) -> f64 {
        // symmetric evaluation so that x(k) = -x(N-1-k) exactly
        let half = (self.points - 1) / 2;
        if k >= half {
            (k - half) as f64 * self.h
        } else {
            -((half - k) as f64 * self.h)
        }
    }

    pub fn coords(&self, flat: usize) -> [f64; MAX_DIM] {
        let idx = self.multi_index(flat);
        let mut x = [0.0; MAX_DIM];
        for axis in 0..self.n {
            x[axis] = self.coord(idx[axis]);
        }
        x
    }

    pub fn norm_sq(&self, flat: usize) -> f64 {
        self.coords(flat)[..self.n].iter().map(|x| x * x).sum()
    }

    /// Number of nodes between `flat` and the nearest face of the cube.
    pub fn boundary_distance(&self, flat: usize) -> usize {
        let idx = self.multi_index(flat);
        idx[..self.n]
            .iter()
            .map(|&k| k.min(self.points - 1 - k))
            .min()
            .unwrap_or(0)
    }

    pub fn is_boundary(&self, flat: usize) -> bool {
        self.boundary_distance(flat) == 0
    }

    pub fn origin(&self) -> usize {
        let half = (self.points - 1) / 2;
        self.flat_index(&[half; MAX_DIM])
    }

    /// Flat indices of the Chebyshev box of the given radius around `flat`,
    /// or `None` if the box leaves the grid.
    pub fn box_around(&self, flat: usize, radius: usize) -> Option<Vec<usize>> {
        if self.boundary_distance(flat) < radius {
            return None;
        }
        let width = 2 * radius + 1;
        let count = width.pow(self.n as u32);
        let mut out = Vec::with_capacity(count);
        for c in 0..count {
            let mut rem = c;
            let mut offset: isize = 0;
            for axis in (0..self.n).rev() {
                let d = (rem % width) as isize - radius as isize;
                rem /= width;
                offset += d * self.stride(axis) as isize;
            }
            out.push((flat as isize + offset) as usize);
        }
        Some(out)
    }

    /// Same node layout with every coordinate divided by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, GridError> {
        Self::new(self.n, self.extent / factor, self.points)
    }
}

/// Height functions `u^α(x)` of the graph at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphState {
    pub grid: GridSpec,
    pub u: Vec<Vec<f64>>,
    pub t: f64,
}

impl GraphState {
    pub fn new(grid: GridSpec, u: Vec<Vec<f64>>, t: f64) -> Result<Self, GridError> {
        let m = u.len();
        if m == 0 || m > MAX_DIM {
            return Err(GridError::Codimension(m));
        }
        for field in &u {
            if field.len() != grid.node_count() {
                return Err(GridError::Shape {
                    expected: grid.node_count(),
                    got: field.len(),
                });
            }
        }
        Ok(Self { grid, u, t })
    }

    pub fn from_fn(
        grid: GridSpec,
        m: usize,
        t: f64,
        f: impl Fn(usize, &[f64]) -> f64,
    ) -> Result<Self, GridError> {
        let u = (0..m)
            .map(|a| {
                (0..grid.node_count())
                    .map(|k| f(a, &grid.coords(k)[..grid.dim()]))
                    .collect()
            })
            .collect();
        Self::new(grid, u, t)
    }

    pub fn zeros(grid: GridSpec, m: usize) -> Result<Self, GridError> {
        Self::new(grid, vec![vec![0.0; grid.node_count()]; m], 0.0)
    }

    pub fn codim(&self) -> usize {
        self.u.len()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().flatten().all(|x| x.is_finite())
    }

    /// `|y|² = Σ_α (u^α)²` at a node.
    pub fn height_sq(&self, k: usize) -> f64 {
        self.u.iter().map(|f| f[k] * f[k]).sum()
    }

    /// `|z|² = |x|² + |y|²` at a node.
    pub fn position_sq(&self, k: usize) -> f64 {
        self.grid.norm_sq(k) + self.height_sq(k)
    }

    /// `max_α sup |u^α|`.
    pub fn sup_norm(&self) -> f64 {
        self.u
            .iter()
            .flatten()
            .fold(0.0_f64, |acc, x| acc.max(x.abs()))
    }
}

/// Node values with a support mask; masked-out nodes never enter reductions.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ScalarField {
    pub fn full(values: Vec<f64>) -> Self {
        let mask = vec![true; values.len()];
        Self { values, mask }
    }

    pub fn empty(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
            mask: vec![false; len],
        }
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> Option<f64>) -> Self {
        let mut out = Self::empty(len);
        for k in 0..len {
            if let Some(x) = f(k) {
                out.values[k] = x;
                out.mask[k] = true;
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, k: usize) -> Option<f64> {
        self.mask[k].then(|| self.values[k])
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn masked(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter_map(|(k, (&v, &m))| m.then_some((k, v)))
    }

    pub fn max(&self) -> Option<f64> {
        self.masked().map(|(_, v)| v).reduce(f64::max)
    }

    pub fn max_abs(&self) -> Option<f64> {
        self.masked().map(|(_, v)| v.abs()).reduce(f64::max)
    }

    /// Restricts the mask to nodes where `keep` holds.
    pub fn restrict(&mut self, keep: impl Fn(usize) -> bool) {
        for (k, m) in self.mask.iter_mut().enumerate() {
            *m = *m && keep(k);
        }
    }

    /// True if every node of the radius box around `k` is masked in.
    pub fn box_masked(&self, grid: &GridSpec, k: usize, radius: usize) -> bool {
        grid.box_around(k, radius)
            .is_some_and(|b| b.iter().all(|&j| self.mask[j]))
    }
}

/// Central-difference Jacobians; the boundary ring is masked out.
#[derive(Clone, Debug)]
pub struct JacobianField {
    pub jac: Vec<Jacobian>,
    pub mask: Vec<bool>,
}

impl JacobianField {
    pub fn get(&self, k: usize) -> Option<&Jacobian> {
        self.mask[k].then(|| &self.jac[k])
    }
}

pub fn jacobian_at(state: &GraphState, k: usize) -> Jacobian {
    let grid = &state.grid;
    let n = grid.dim();
    let inv2h = 0.5 / grid.h();
    Jacobian::from_fn(state.codim(), n, |a, i| {
        let s = grid.stride(i);
        (state.u[a][k + s] - state.u[a][k - s]) * inv2h
    })
    .expect("dimensions validated by GraphState")
}

pub fn jacobian_field(state: &GraphState) -> JacobianField {
    let grid = &state.grid;
    let zero = Jacobian::zeros(state.codim(), grid.dim()).expect("validated");
    let mut jac = vec![zero; grid.node_count()];
    let mut mask = vec![false; grid.node_count()];
    for k in 0..grid.node_count() {
        if grid.boundary_distance(k) >= 1 {
            jac[k] = jacobian_at(state, k);
            mask[k] = true;
        }
    }
    JacobianField { jac, mask }
}

/// Per-frame geometry shared by the discrete operators: Jacobians, inverse
/// metric, volume element and the diffusion coefficients `v gⁱʲ`.
#[derive(Clone, Debug)]
pub struct FrameGeometry {
    pub grid: GridSpec,
    pub jacobians: JacobianField,
    pub g_inv: Vec<SmallMatrix>,
    pub v: Vec<f64>,
    coeff: Vec<SmallMatrix>,
}

impl FrameGeometry {
    pub fn new(state: &GraphState) -> Self {
        let grid = state.grid;
        let jacobians = jacobian_field(state);
        let n = grid.dim();
        let eye = SmallMatrix::identity(n).expect("validated");
        let mut g_inv = vec![eye; grid.node_count()];
        let mut v = vec![1.0; grid.node_count()];
        let mut coeff = vec![eye; grid.node_count()];
        for k in 0..grid.node_count() {
            if let Some(j) = jacobians.get(k) {
                let (inv, vol) = metric_inverse(&j.gram());
                g_inv[k] = inv;
                v[k] = vol;
                coeff[k] = inv.scaled(vol);
            }
        }
        Self {
            grid,
            jacobians,
            g_inv,
            v,
            coeff,
        }
    }

    /// Central-difference gradient of `f` at `k`; `None` unless the radius-1 box is masked in.
    pub fn gradient(&self, f: &ScalarField, k: usize) -> Option<[f64; MAX_DIM]> {
        if !self.jacobians.mask[k] || !f.box_masked(&self.grid, k, 1) {
            return None;
        }
        let inv2h = 0.5 / self.grid.h();
        let mut d = [0.0; MAX_DIM];
        for (i, di) in d.iter_mut().enumerate().take(self.grid.dim()) {
            let s = self.grid.stride(i);
            *di = (f.values[k + s] - f.values[k - s]) * inv2h;
        }
        Some(d)
    }

    /// `gⁱʲ aᵢ bⱼ` at node `k`.
    pub fn metric_dot(&self, k: usize, a: &[f64], b: &[f64]) -> f64 {
        let gi = &self.g_inv[k];
        let n = self.grid.dim();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += gi[(i, j)] * a[i] * b[j];
            }
        }
        acc
    }

    pub fn grad_sq(&self, f: &ScalarField) -> ScalarField {
        ScalarField::from_fn(f.len(), |k| {
            self.gradient(f, k).map(|d| self.metric_dot(k, &d, &d).max(0.0))
        })
    }

    /// Laplace–Beltrami of `f` at `k`; requires two nodes of margin and `f` on the radius-1 box.
    pub fn laplacian_at(&self, f: &ScalarField, k: usize) -> Option<f64> {
        let grid = &self.grid;
        if grid.boundary_distance(k) < 2 || !f.box_masked(grid, k, 1) {
            return None;
        }
        let n = grid.dim();
        let h2 = grid.h() * grid.h();
        let fv = &f.values;
        let a = &self.coeff;
        let mut sum = 0.0;
        for i in 0..n {
            let si = grid.stride(i);
            let face_p = 0.5 * (a[k][(i, i)] + a[k + si][(i, i)]);
            let face_m = 0.5 * (a[k][(i, i)] + a[k - si][(i, i)]);
            sum += (face_p * (fv[k + si] - fv[k]) - face_m * (fv[k] - fv[k - si])) / h2;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let sj = grid.stride(j);
                let flux_p = a[k + si][(i, j)] * (fv[k + si + sj] - fv[k + si - sj]);
                let flux_m = a[k - si][(i, j)] * (fv[k - si + sj] - fv[k - si - sj]);
                sum += (flux_p - flux_m) / (4.0 * h2);
            }
        }
        Some(sum / self.v[k])
    }

    pub fn laplacian(&self, f: &ScalarField) -> ScalarField {
        ScalarField::from_fn(f.len(), |k| self.laplacian_at(f, k))
    }
}

pub fn mt_laplacian(state: &GraphState, f: &ScalarField) -> ScalarField {
    FrameGeometry::new(state).laplacian(f)
}

pub fn mt_grad_sq(state: &GraphState, f: &ScalarField) -> ScalarField {
    FrameGeometry::new(state).grad_sq(f)
}

/// Checks that three frames share a grid and are equally spaced; returns the spacing.
pub fn frame_spacing(frames: [&GraphState; 3]) -> Result<f64, GridError> {
    let [a, b, c] = frames;
    if a.grid != b.grid || b.grid != c.grid || a.codim() != b.codim() || b.codim() != c.codim() {
        return Err(GridError::GridMismatch);
    }
    let (d1, d2) = (b.t - a.t, c.t - b.t);
    let tol = 1e-9 * (c.t - a.t).abs().max(f64::MIN_POSITIVE);
    if !(d1 > 0.0) || !(d2 > 0.0) || (d1 - d2).abs() > tol {
        return Err(GridError::UnequalSpacing([a.t, b.t, c.t]));
    }
    Ok(0.5 * (c.t - a.t))
}

/// `(D_t − Δ_{M_t}) F` at the middle frame, with `geometry` built from `frames[1]`.
///
/// `D_t F = ∂_t|_x F − gᵏˡ (∂_t u^α)(∂_l u^α) ∂_k F` is the time derivative
/// following the normal motion of the graph.
pub fn heat_operator_with(
    frames: [&GraphState; 3],
    geometry: &FrameGeometry,
    fields: [&ScalarField; 3],
) -> Result<ScalarField, GridError> {
    let dt = frame_spacing(frames)?;
    let [prev, mid, next] = frames;
    let grid = mid.grid;
    let n = grid.dim();
    let m = mid.codim();
    let [f_prev, f_mid, f_next] = fields;
    Ok(ScalarField::from_fn(grid.node_count(), |k| {
        if !(f_prev.mask[k] && f_next.mask[k]) {
            return None;
        }
        let lap = geometry.laplacian_at(f_mid, k)?;
        let grad_f = geometry.gradient(f_mid, k)?;
        let jac = geometry.jacobians.get(k)?;
        let dfdt = (f_next.values[k] - f_prev.values[k]) / (2.0 * dt);
        // drift covector: (∂_t u^α)(∂_l u^α)
        let mut drift = [0.0; MAX_DIM];
        for a in 0..m {
            let ut = (next.u[a][k] - prev.u[a][k]) / (2.0 * dt);
            for (l, d) in drift.iter_mut().enumerate().take(n) {
                *d += ut * jac.get(a, l);
            }
        }
        let correction = geometry.metric_dot(k, &drift, &grad_f);
        Some(dfdt - correction - lap)
    }))
}

pub fn heat_operator(
    frames: [&GraphState; 3],
    fields: [&ScalarField; 3],
) -> Result<ScalarField, GridError> {
    let geometry = FrameGeometry::new(frames[1]);
    heat_operator_with(frames, &geometry, fields)
}

/// The three cutoff families.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CutoffParams {
    /// `φ = ((R² − |z|² − 2nt)₊)²`.
    VarphiSq { radius: f64 },
    /// `φ = η e^{−a|y|²/t}` with `η = (r₀ − |x|² − 2nt)₊`.
    Gaussian { a: f64, radius_const: f64 },
    /// `η = e^{C₁ φ̃} − 1` with `φ̃ = (Σ_α y^α/(2u₀) + 1 − |x|²)₊`.
    Korevaar { u0: f64, c1: f64 },
}

impl CutoffParams {
    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |name, value: f64| Err(GridError::CutoffParameter { name, value });
        match *self {
            CutoffParams::VarphiSq { radius } if !(radius > 0.0) => bad("R", radius),
            CutoffParams::Gaussian { a, .. } if !(a >= 1.0) => bad("a", a),
            CutoffParams::Gaussian { radius_const, .. } if !(radius_const > 0.0) => {
                bad("radius_const", radius_const)
            }
            CutoffParams::Korevaar { u0, .. } if !(u0 >= 1.0) => bad("u0", u0),
            CutoffParams::Korevaar { c1, .. } if !(c1 > 0.0) => bad("C1", c1),
            _ => Ok(()),
        }
    }
}

/// The signed quantity whose positive part defines the cutoff support.
pub fn cutoff_base(state: &GraphState, params: &CutoffParams) -> Vec<f64> {
    let grid = &state.grid;
    let n = grid.dim() as f64;
    (0..grid.node_count())
        .map(|k| match *params {
            CutoffParams::VarphiSq { radius } => {
                radius * radius - state.position_sq(k) - 2.0 * n * state.t
            }
            CutoffParams::Gaussian { radius_const, .. } => {
                radius_const - grid.norm_sq(k) - 2.0 * n * state.t
            }
            CutoffParams::Korevaar { u0, .. } => {
                let sum: f64 = state.u.iter().map(|f| f[k]).sum();
                sum / (2.0 * u0) + 1.0 - grid.norm_sq(k)
            }
        })
        .collect()
}

/// Support mask: base above [`SUPPORT_FLOOR`] and the whole stencil box inside the positive set.
pub fn support_mask(grid: &GridSpec, base: &[f64]) -> Vec<bool> {
    (0..grid.node_count())
        .map(|k| {
            base[k] > SUPPORT_FLOOR
                && grid
                    .box_around(k, STENCIL_RADIUS)
                    .is_some_and(|b| b.iter().all(|&j| base[j] > 0.0))
        })
        .collect()
}

pub fn cutoff_field(state: &GraphState, params: &CutoffParams) -> Result<ScalarField, GridError> {
    params.validate()?;
    if matches!(params, CutoffParams::Gaussian { .. }) && state.t <= 0.0 {
        return Err(GridError::CutoffAtInitialTime);
    }
    let base = cutoff_base(state, params);
    let mask = support_mask(&state.grid, &base);
    let values = base
        .iter()
        .enumerate()
        .map(|(k, &b)| {
            let p = b.max(0.0);
            match *params {
                CutoffParams::VarphiSq { .. } => p * p,
                CutoffParams::Gaussian { a, .. } => p * (-a * state.height_sq(k) / state.t).exp(),
                CutoffParams::Korevaar { c1, .. } => (c1 * p).exp_m1(),
            }
        })
        .collect();
    Ok(ScalarField { values, mask })
}
