//! Pointwise linear algebra on the differential of a graph map.
//!
//! Everything here acts on a single grid node: the `m × n` Jacobian `du`,
//! its singular values, the induced metric `g = I + (du)ᵀdu`, and the closed
//! form spectral functions built from the singular values (`S`, `S^[2]`,
//! `Φ`). No grids and no time.

use thiserror::Error;

/// Largest supported domain dimension and codimension.
pub const MAX_DIM: usize = 4;

const CAP: usize = MAX_DIM * MAX_DIM;

/// Pair sums `S_ii + S_jj` at or below this are treated as outside the area-decreasing set.
pub const PAIR_SUM_FLOOR: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgebraError {
    #[error("dimension {rows}x{cols} outside 1..={max}", max = MAX_DIM)]
    Dimension { rows: usize, cols: usize },
    #[error("non-finite entry in matrix")]
    NonFinite,
    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
}

/// Dense row-major matrix with at most `MAX_DIM` rows and columns, stored inline.
#[derive(Clone, Copy, PartialEq)]
pub struct SmallMatrix {
    rows: usize,
    cols: usize,
    data: [f64; CAP],
}

impl std::fmt::Debug for SmallMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let rows: Vec<Vec<f64>> = (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self[(r, c)]).collect())
            .collect();
        f.debug_struct("SmallMatrix").field("rows", &rows).finish()
    }
}

impl SmallMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self, AlgebraError> {
        if rows == 0 || cols == 0 || rows > MAX_DIM || cols > MAX_DIM {
            return Err(AlgebraError::Dimension { rows, cols });
        }
        Ok(Self {
            rows,
            cols,
            data: [0.0; CAP],
        })
    }

    pub fn identity(n: usize) -> Result<Self, AlgebraError> {
        let mut out = Self::zeros(n, n)?;
        for i in 0..n {
            out[(i, i)] = 1.0;
        }
        Ok(out)
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, AlgebraError> {
        let mut out = Self::zeros(rows, cols)?;
        for r in 0..rows {
            for c in 0..cols {
                out[(r, c)] = f(r, c);
            }
        }
        Ok(out)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AlgebraError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(AlgebraError::Dimension { rows: r, cols: c });
        }
        Self::from_fn(r, c, |i, j| rows[i][j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn transpose(&self) -> Self {
        let mut out = *self;
        out.rows = self.cols;
        out.cols = self.rows;
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }

    /// Matrix product; panics on a shape mismatch (internal use only).
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Self {
            rows: self.rows,
            cols: rhs.cols,
            data: [0.0; CAP],
        };
        for r in 0..self.rows {
            for c in 0..rhs.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self[(r, k)] * rhs[(k, c)];
                }
                out[(r, c)] = acc;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn entries(&self) -> &[f64] {
        &self.data[..self.rows * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = *self;
        out.data[..self.rows * self.cols]
            .iter_mut()
            .for_each(|x| *x *= c);
        out
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let mut out = *self;
        for (a, b) in out.data.iter_mut().zip(rhs.data.iter()) {
            *a -= b;
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for SmallMatrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for SmallMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// The differential `du` at one node: `m` rows (codomain index α) by `n`
/// columns (domain index i), entry `(α, i) = ∂u^α/∂x^i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jacobian(SmallMatrix);

impl Jacobian {
    pub fn new(entries: SmallMatrix) -> Result<Self, AlgebraError> {
        if !entries.is_finite() {
            return Err(AlgebraError::NonFinite);
        }
        Ok(Self(entries))
    }

    pub fn zeros(m: usize, n: usize) -> Result<Self, AlgebraError> {
        SmallMatrix::zeros(m, n).map(Self)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AlgebraError> {
        Self::new(SmallMatrix::from_rows(rows)?)
    }

    pub fn from_fn(
        m: usize,
        n: usize,
        f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, AlgebraError> {
        Self::new(SmallMatrix::from_fn(m, n, f)?)
    }

    /// Codimension `m`.
    pub fn codim(&self) -> usize {
        self.0.rows
    }

    /// Domain dimension `n`.
    pub fn dim(&self) -> usize {
        self.0.cols
    }

    pub fn matrix(&self) -> &SmallMatrix {
        &self.0
    }

    pub fn get(&self, alpha: usize, i: usize) -> f64 {
        self.0[(alpha, i)]
    }

    /// `(du)ᵀ du`, an `n × n` symmetric matrix.
    pub fn gram(&self) -> SmallMatrix {
        let n = self.dim();
        let mut out = SmallMatrix {
            rows: n,
            cols: n,
            data: [0.0; CAP],
        };
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for a in 0..self.codim() {
                    acc += self.0[(a, i)] * self.0[(a, j)];
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }

    /// `|du| = sqrt(tr((du)ᵀ du))`.
    pub fn norm(&self) -> f64 {
        self.0.frobenius_norm()
    }
}

/// Eigen-decomposition of a small symmetric matrix: `A = Q diag(values) Qᵀ`,
/// eigenvectors stored as the columns of `vectors`.
#[derive(Clone, Copy, Debug)]
pub struct SymmetricEigen {
    pub values: [f64; MAX_DIM],
    pub vectors: SmallMatrix,
    pub sweeps: usize,
}

/// Cyclic Jacobi rotations on a symmetric `n × n` matrix.
///
/// Iterates until the off-diagonal Frobenius norm drops to `1e-14 · ‖A‖_F`
/// (or to zero). Eigenvalues come back sorted in descending order together
/// with their eigenvectors.
pub fn symmetric_eigen(a: &SmallMatrix) -> SymmetricEigen {
    const MAX_SWEEPS: usize = 60;
    let n = a.rows;
    debug_assert_eq!(n, a.cols);
    let mut m = *a;
    let mut q = SmallMatrix::identity(n).expect("n already validated");
    let scale = a.frobenius_norm();
    let threshold = 1e-14 * scale;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= threshold || off == 0.0 {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = m[(p, r)];
                if apr == 0.0 {
                    continue;
                }
                let theta = (m[(r, r)] - m[(p, p)]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkr = m[(k, r)];
                    m[(k, p)] = c * mkp - s * mkr;
                    m[(k, r)] = s * mkp + c * mkr;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mrk = m[(r, k)];
                    m[(p, k)] = c * mpk - s * mrk;
                    m[(r, k)] = s * mpk + c * mrk;
                }
                for k in 0..n {
                    let qkp = q[(k, p)];
                    let qkr = q[(k, r)];
                    q[(k, p)] = c * qkp - s * qkr;
                    q[(k, r)] = s * qkp + c * qkr;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps ties in index order
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let mut values = [0.0; MAX_DIM];
    let mut vectors = q;
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = m[(src, src)];
        for k in 0..n {
            vectors[(k, dst)] = q[(k, src)];
        }
    }
    SymmetricEigen {
        values,
        vectors,
        sweeps,
    }
}

/// Singular values `λ₁ ≥ … ≥ λₙ ≥ 0` of `du`.
#[derive(Clone, Debug, PartialEq)]
pub struct SingularSpectrum {
    lambdas: Vec<f64>,
}

impl SingularSpectrum {
    /// Builds a spectrum from arbitrary nonnegative values, sorting them descending.
    pub fn from_values(mut lambdas: Vec<f64>) -> Result<Self, AlgebraError> {
        if lambdas.is_empty() || lambdas.len() > MAX_DIM {
            return Err(AlgebraError::Dimension {
                rows: 1,
                cols: lambdas.len(),
            });
        }
        if let Some(&bad) = lambdas.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(AlgebraError::InvalidParameter {
                name: "lambda",
                value: bad,
                reason: "singular values must be finite and nonnegative",
            });
        }
        lambdas.sort_by(|a, b| b.total_cmp(a));
        Ok(Self { lambdas })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    pub fn largest(&self) -> f64 {
        self.lambdas[0]
    }

    /// Largest pairwise product `λᵢλⱼ`, `i < j`; zero when `n = 1`.
    pub fn max_pair_product(&self) -> f64 {
        if self.lambdas.len() < 2 {
            0.0
        } else {
            self.lambdas[0] * self.lambdas[1]
        }
    }
}

/// Full singular decomposition data used by the cutoff residuals.
#[derive(Clone, Debug)]
pub struct SingularDecomposition {
    pub spectrum: SingularSpectrum,
    /// Right singular vectors as columns (`n × n`), matching `spectrum` order.
    pub right: SmallMatrix,
    /// `‖JᵀJ − Q diag(λ²) Qᵀ‖_F`.
    pub reconstruction_error: f64,
}

impl SingularDecomposition {
    /// Unit left singular vector for `λ_i > 0`, i.e. `du·qᵢ / λᵢ`.
    pub fn left_vector(&self, jac: &Jacobian, i: usize) -> Option<Vec<f64>> {
        let lambda = self.spectrum.lambdas[i];
        if lambda <= 0.0 {
            return None;
        }
        let m = jac.codim();
        let n = jac.dim();
        Some(
            (0..m)
                .map(|a| (0..n).map(|k| jac.get(a, k) * self.right[(k, i)]).sum::<f64>() / lambda)
                .collect(),
        )
    }
}

/// One-sided Jacobi on the columns of `du`: rotations `V` are applied until
/// the columns of `du·V` are mutually orthogonal, so `λₖ = ‖(du·V)ₖ‖` is
/// accurate to `ε‖du‖` even for zero singular values, which the square root
/// of a Gram eigenvalue only resolves to `√ε‖du‖`.
pub fn singular_decomposition(jac: &Jacobian) -> SingularDecomposition {
    const MAX_SWEEPS: usize = 60;
    let (m, n) = (jac.codim(), jac.dim());
    let mut a = [[0.0; MAX_DIM]; MAX_DIM];
    for (k, col) in a.iter_mut().enumerate().take(n) {
        for (alpha, x) in col.iter_mut().enumerate().take(m) {
            *x = jac.get(alpha, k);
        }
    }
    let mut v = SmallMatrix::identity(n).expect("validated");
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..m {
                    alpha += a[p][r] * a[p][r];
                    beta += a[q][r] * a[q][r];
                    gamma += a[p][r] * a[q][r];
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let (ap, aq) = (a[p][r], a[q][r]);
                    a[p][r] = c * ap - s * aq;
                    a[q][r] = s * ap + c * aq;
                }
                for k in 0..n {
                    let (vp, vq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vp - s * vq;
                    v[(k, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n)
        .map(|k| a[k][..m].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let lambdas: Vec<f64> = order.iter().map(|&k| norms[k]).collect();
    let mut right = v;
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            right[(k, dst)] = v[(k, src)];
        }
    }
    let gram = jac.gram();
    let mut recon = SmallMatrix::zeros(n, n).expect("validated");
    for i in 0..n {
        for j in 0..n {
            recon[(i, j)] = (0..n)
                .map(|k| right[(i, k)] * lambdas[k] * lambdas[k] * right[(j, k)])
                .sum();
        }
    }
    SingularDecomposition {
        spectrum: SingularSpectrum { lambdas },
        right,
        reconstruction_error: gram.sub(&recon).frobenius_norm(),
    }
}

pub fn singular_spectrum(jac: &Jacobian) -> SingularSpectrum {
    singular_decomposition(jac).spectrum
}

/// Induced metric data at a node.
#[derive(Clone, Copy, Debug)]
pub struct PointGeometry {
    pub g: SmallMatrix,
    pub g_inv: SmallMatrix,
    /// Volume element `sqrt(det g)`.
    pub v: f64,
    /// `v^{1/n}`.
    pub w: f64,
    pub du_norm: f64,
}

/// Cholesky factor of an SPD matrix; `None` if a pivot is not positive.
fn cholesky(a: &SmallMatrix) -> Option<SmallMatrix> {
    let n = a.rows;
    let mut l = SmallMatrix::zeros(n, n).ok()?;
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Inverse of `I + (du)ᵀdu` and its determinant, via Cholesky.
pub(crate) fn metric_inverse(gram: &SmallMatrix) -> (SmallMatrix, f64) {
    let n = gram.rows;
    let mut g = *gram;
    for i in 0..n {
        g[(i, i)] += 1.0;
    }
    if n == 1 {
        let mut inv = g;
        inv[(0, 0)] = 1.0 / g[(0, 0)];
        return (inv, g[(0, 0)].sqrt());
    }
    if n == 2 {
        let (a, b, d) = (g[(0, 0)], g[(0, 1)], g[(1, 1)]);
        let det = a * d - b * b;
        let mut inv = g;
        inv[(0, 0)] = d / det;
        inv[(1, 1)] = a / det;
        inv[(0, 1)] = -b / det;
        inv[(1, 0)] = -b / det;
        return (inv, det.sqrt());
    }
    let l = cholesky(&g).expect("I + JᵀJ is always positive definite");
    let mut det_sqrt = 1.0;
    for i in 0..n {
        det_sqrt *= l[(i, i)];
    }
    let mut inv = SmallMatrix::zeros(n, n).expect("validated");
    for col in 0..n {
        // forward then backward substitution on the unit vector e_col
        let mut y = [0.0; MAX_DIM];
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        let mut x = [0.0; MAX_DIM];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        for i in 0..n {
            inv[(i, col)] = x[i];
        }
    }
    // symmetrize away rounding asymmetry
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = s;
            inv[(j, i)] = s;
        }
    }
    (inv, det_sqrt)
}

pub fn point_geometry(jac: &Jacobian) -> PointGeometry {
    let n = jac.dim();
    let gram = jac.gram();
    let (g_inv, v) = metric_inverse(&gram);
    let mut g = gram;
    for i in 0..n {
        g[(i, i)] += 1.0;
    }
    PointGeometry {
        g,
        g_inv,
        v,
        w: v.powf(1.0 / n as f64),
        du_norm: jac.norm(),
    }
}

/// Eigenvalues of `S` and `S^[2]` together with the potential `Φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaDecreasingReport {
    /// `S_ii = (1 − λᵢ²)/(1 + λᵢ²)`.
    pub s_eigs: Vec<f64>,
    /// `S_ii + S_jj` for `i < j` in lexicographic pair order.
    pub s2_eigs: Vec<f64>,
    /// `None` when some pair sum is at or below [`PAIR_SUM_FLOOR`].
    pub phi: Option<f64>,
    /// `min_{i<j} (1 − λᵢλⱼ)`; `1` when there are no pairs.
    pub margin: f64,
}

impl AreaDecreasingReport {
    pub fn log_det_s2(&self) -> Option<f64> {
        self.phi
            .map(|_| self.s2_eigs.iter().map(|s| s.ln()).sum::<f64>())
    }
}

/// Index pairs `(i, j)` with `i < j < n`, lexicographic.
pub fn index_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| ((i + 1)..n).map(move |j| (i, j)))
}

pub fn area_decreasing_report(spec: &SingularSpectrum) -> AreaDecreasingReport {
    let lam = spec.lambdas();
    let n = lam.len();
    let s_eigs: Vec<f64> = lam
        .iter()
        .map(|l| {
            let l2 = l * l;
            (1.0 - l2) / (1.0 + l2)
        })
        .collect();
    let mut s2_eigs = Vec::with_capacity(n * (n - 1) / 2);
    let mut margin = 1.0_f64;
    let mut phi_sum = 0.0;
    let mut defined = true;
    for (i, j) in index_pairs(n) {
        let (a, b) = (lam[i] * lam[i], lam[j] * lam[j]);
        // product form is accurate near the boundary where S_ii + S_jj cancels
        let s2 = 2.0 * (1.0 - a * b) / ((1.0 + a) * (1.0 + b));
        s2_eigs.push(s2);
        margin = margin.min(1.0 - lam[i] * lam[j]);
        if s2 <= PAIR_SUM_FLOOR {
            defined = false;
        } else {
            phi_sum += a.ln_1p() + b.ln_1p() - (-a * b).ln_1p();
        }
    }
    AreaDecreasingReport {
        s_eigs,
        s2_eigs,
        phi: defined.then_some(1.0 + phi_sum),
        margin,
    }
}

/// Upper bound on `λᵢ²λⱼ²` implied by `Φ ≤ c0`: `1 − e^{1 − c0}`.
pub fn phi_bound_to_pair_bound(c0: f64) -> Result<f64, AlgebraError> {
    if !(c0 >= 1.0) || !c0.is_finite() {
        return Err(AlgebraError::InvalidParameter {
            name: "C0",
            value: c0,
            reason: "Φ ≥ 1 always, so the bound needs C0 ≥ 1",
        });
    }
    Ok((-(1.0 - c0).exp_m1()).max(0.0))
}

/// `h(s) = (mκs² − 4s − κ)/(1 + s²)` and its unique critical point `s_*`.
pub fn calc_lemma_main(s: f64, kappa: f64, m: u32) -> Result<(f64, f64), AlgebraError> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(AlgebraError::InvalidParameter {
            name: "kappa",
            value: kappa,
            reason: "must lie in (0, 1]",
        });
    }
    if m == 0 {
        return Err(AlgebraError::InvalidParameter {
            name: "m",
            value: 0.0,
            reason: "must be a positive integer",
        });
    }
    if !(s >= 0.0) || !s.is_finite() {
        return Err(AlgebraError::InvalidParameter {
            name: "s",
            value: s,
            reason: "must be finite and nonnegative",
        });
    }
    let mf = m as f64;
    let h = (mf * kappa * s * s - 4.0 * s - kappa) / (1.0 + s * s);
    let k1 = kappa * (mf + 1.0);
    let s_star = ((k1 * k1 + 16.0).sqrt() - k1) / 4.0;
    Ok((h, s_star))
}

/// `h(s) = (s − c)²/(1 + s²)`, nondecreasing on `[c, ∞)`.
pub fn calc_lemma_mss(s: f64, c: f64) -> Result<f64, AlgebraError> {
    if !(c >= 0.0) || !c.is_finite() {
        return Err(AlgebraError::InvalidParameter {
            name: "c",
            value: c,
            reason: "must be finite and nonnegative",
        });
    }
    if !(s >= 0.0) || !s.is_finite() {
        return Err(AlgebraError::InvalidParameter {
            name: "s",
            value: s,
            reason: "must be finite and nonnegative",
        });
    }
    Ok((s - c) * (s - c) / (1.0 + s * s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(a: f64, b: f64) -> Jacobian {
        Jacobian::from_rows(&[vec![a, 0.0], vec![0.0, b]]).unwrap()
    }

    /// Independent oracle: roots of the 2x2 characteristic polynomial by bisection.
    fn char_poly_roots_2x2(a: &SmallMatrix) -> (f64, f64) {
        let tr = a[(0, 0)] + a[(1, 1)];
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        let p = |x: f64| x * x - tr * x + det;
        let mid = tr / 2.0;
        let hi_end = tr.abs() + 1.0;
        let bisect = |mut lo: f64, mut hi: f64| {
            let rising = p(hi) > p(lo);
            for _ in 0..200 {
                let c = 0.5 * (lo + hi);
                if (p(c) > 0.0) == rising {
                    hi = c;
                } else {
                    lo = c;
                }
            }
            0.5 * (lo + hi)
        };
        (bisect(mid, hi_end), bisect(-hi_end.abs() - 1.0, mid))
    }

    #[test]
    fn zero_map_has_zero_spectrum() {
        let s = singular_spectrum(&Jacobian::zeros(2, 2).unwrap());
        assert_eq!(s.lambdas(), &[0.0, 0.0]);
    }

    #[test]
    fn diagonal_spectrum() {
        let s = singular_spectrum(&diag(1.0, 0.5));
        assert_eq!(s.lambdas(), &[1.0, 0.5]);
        let s = singular_spectrum(&diag(0.5, 1.0));
        assert_eq!(s.lambdas(), &[1.0, 0.5]);
    }

    #[test]
    fn spectrum_matches_characteristic_polynomial_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let j = Jacobian::from_fn(3, 2, |_, _| rng.gen_range(-2.0..2.0)).unwrap();
            let dec = singular_decomposition(&j);
            let (r1, r2) = char_poly_roots_2x2(&j.gram());
            assert!((dec.spectrum.lambdas()[0] - r1.max(0.0).sqrt()).abs() < 1e-10);
            assert!((dec.spectrum.lambdas()[1] - r2.max(0.0).sqrt()).abs() < 1e-10);
            let scale = 1.0 + j.gram().frobenius_norm();
            assert!(dec.reconstruction_error <= 1e-12 * scale);
        }
    }

    #[test]
    fn jacobi_handles_4x4_and_ties() {
        let j = Jacobian::from_fn(4, 4, |a, i| if a == i { 2.0 } else { 0.0 }).unwrap();
        assert_eq!(singular_spectrum(&j).lambdas(), &[2.0, 2.0, 2.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let j = Jacobian::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0)).unwrap();
        let dec = singular_decomposition(&j);
        assert!(dec.reconstruction_error <= 1e-12 * (1.0 + j.gram().frobenius_norm()));
        let l = dec.spectrum.lambdas();
        assert!(l.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn left_vectors_are_unit() {
        let j = Jacobian::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![0.0, 0.3]]).unwrap();
        let dec = singular_decomposition(&j);
        for i in 0..2 {
            let u = dec.left_vector(&j, i).unwrap();
            let norm: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn geometry_examples() {
        let geo = point_geometry(&Jacobian::zeros(2, 2).unwrap());
        assert_eq!(geo.v, 1.0);
        assert_eq!(geo.w, 1.0);
        assert_eq!(geo.du_norm, 0.0);
        assert_eq!(geo.g, SmallMatrix::identity(2).unwrap());

        // det [[2, 0], [0, 1.25]] = 2.5 by the 2x2 determinant formula
        let geo = point_geometry(&diag(1.0, 0.5));
        let g = geo.g;
        let det_oracle = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
        assert!((det_oracle - 2.5).abs() < 1e-15);
        assert!((geo.v - 2.5f64.sqrt()).abs() < 1e-14);
        assert!((geo.v - 1.58113883008419).abs() < 1e-12);
        assert!((geo.w - 1.2574334296829355).abs() < 1e-12);

        let geo = point_geometry(&diag(1.0, 1.0));
        assert!((geo.du_norm - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn metric_inverse_is_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let j = Jacobian::from_fn(3, 3, |_, _| rng.gen_range(-3.0..3.0)).unwrap();
            let geo = point_geometry(&j);
            let prod = geo.g_inv.matmul(&geo.g);
            let err = prod.sub(&SmallMatrix::identity(3).unwrap()).frobenius_norm();
            assert!(err < 1e-12, "err = {err}");
        }
    }

    #[test]
    fn area_decreasing_examples() {
        let r = area_decreasing_report(&SingularSpectrum::from_values(vec![0.0, 0.0]).unwrap());
        assert_eq!(r.s_eigs, vec![1.0, 1.0]);
        assert_eq!(r.s2_eigs, vec![2.0]);
        assert_eq!(r.phi, Some(1.0));

        let r = area_decreasing_report(&SingularSpectrum::from_values(vec![1.0, 1.0]).unwrap());
        assert_eq!(r.s2_eigs, vec![0.0]);
        assert_eq!(r.phi, None);
        assert_eq!(r.margin, 0.0);

        let r = area_decreasing_report(&SingularSpectrum::from_values(vec![1.0, 0.5]).unwrap());
        assert_eq!(r.s_eigs[0], 0.0);
        assert!((r.s_eigs[1] - 0.6).abs() < 1e-15);
        assert!((r.s2_eigs[0] - 0.6).abs() < 1e-15);
        // 1 + ln 2 - ln 0.6, evaluated with 30-digit arithmetic
        assert!((r.phi.unwrap() - 2.203972804325936).abs() < 1e-12);
    }

    #[test]
    fn single_column_phi_is_one() {
        let r = area_decreasing_report(&SingularSpectrum::from_values(vec![7.0]).unwrap());
        assert_eq!(r.phi, Some(1.0));
        assert!(r.s2_eigs.is_empty());
        assert_eq!(r.margin, 1.0);
    }

    #[test]
    fn lemma_pair_bound_examples() {
        assert_eq!(phi_bound_to_pair_bound(1.0).unwrap(), 0.0);
        assert!((phi_bound_to_pair_bound(2.0).unwrap() - 0.6321205588285577).abs() < 1e-15);
        let c0 = 1.0 + 100f64.ln();
        assert!((phi_bound_to_pair_bound(c0).unwrap() - 0.99).abs() < 1e-14);
        assert!(phi_bound_to_pair_bound(0.5).is_err());
        assert!(phi_bound_to_pair_bound(f64::NAN).is_err());
    }

    #[test]
    fn calc_lemma_main_examples() {
        let (_, s_star) = calc_lemma_main(0.0, 1.0, 1).unwrap();
        assert!((s_star - (20f64.sqrt() - 2.0) / 4.0).abs() < 1e-15);
        assert!((s_star - 0.6180339887498949).abs() < 1e-15);
        let (h, _) = calc_lemma_main(0.0, 0.3, 4).unwrap();
        assert_eq!(h, -0.3);
        assert!(calc_lemma_main(1.0, 0.0, 1).is_err());
        assert!(calc_lemma_main(1.0, 1.5, 1).is_err());
        assert!(calc_lemma_main(1.0, 0.5, 0).is_err());
    }

    #[test]
    fn calc_lemma_main_slope_sign_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        for _ in 0..10_000 {
            let kappa: f64 = rng.gen_range(1e-3..=1.0);
            let m: u32 = rng.gen_range(1..=6);
            let s: f64 = rng.gen_range(0.0..20.0);
            let (_, s_star) = calc_lemma_main(s, kappa, m).unwrap();
            let eps = 1e-6;
            if (s - s_star).abs() < 1e-3 || s < eps {
                continue;
            }
            let hp = calc_lemma_main(s + eps, kappa, m).unwrap().0;
            let hm = calc_lemma_main(s - eps, kappa, m).unwrap().0;
            let slope = (hp - hm) / (2.0 * eps);
            if s < s_star {
                assert!(slope < 0.0, "s={s} κ={kappa} m={m} slope={slope}");
            } else {
                assert!(slope > 0.0, "s={s} κ={kappa} m={m} slope={slope}");
            }
            checked += 1;
        }
        assert!(checked > 9_000);
    }

    #[test]
    fn calc_lemma_mss_examples() {
        assert_eq!(calc_lemma_mss(1.0, 0.0).unwrap(), 0.5);
        assert_eq!(calc_lemma_mss(2.5, 2.5).unwrap(), 0.0);
        assert!(calc_lemma_mss(1.0, -0.1).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let c: f64 = rng.gen_range(0.0..10.0);
            let s: f64 = c + rng.gen_range(1e-4..10.0);
            let eps = 1e-7;
            let slope = (calc_lemma_mss(s + eps, c).unwrap()
                - calc_lemma_mss(s - eps, c).unwrap())
                / (2.0 * eps);
            assert!(slope >= -1e-8, "c={c} s={s} slope={slope}");
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(Jacobian::zeros(5, 1).is_err());
        assert!(Jacobian::zeros(1, 0).is_err());
        assert!(Jacobian::from_rows(&[vec![f64::NAN]]).is_err());
    }
}
