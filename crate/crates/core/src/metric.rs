//! Inner-product geometry induced by the inverse uncentered covariance of
//! text encodings.
//!
//! Every similarity, energy, and orthogonal projection used by the rank-1
//! edits is taken in this metric: `sim(a, b) = aᵀ (C⁻¹)ᵀ b`. The Cholesky
//! factor `L` of `C⁻¹ = L Lᵀ` maps encoder-space vectors into a space where
//! the metric is the ordinary dot product (`ã = Lᵀ a`), which is where the
//! multi-concept basis is orthonormalized.

use crate::error::{ensure, Error, Result};
use crate::{Matrix, Vector};

/// Relative tolerance below which a pivoted column is treated as dependent.
pub const BASIS_DROP_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSpace {
    dim: usize,
    cov: Matrix,
    c_inv: Matrix,
    chol: Matrix,
    fingerprint: u64,
}

impl MetricSpace {
    /// Builds the metric from a covariance `C`, inverting it through its
    /// Cholesky factor.
    pub fn from_covariance(cov: Matrix) -> Result<Self> {
        ensure(cov.is_square() && cov.nrows() > 0, || {
            format!("covariance must be square and nonempty, got {}x{}", cov.nrows(), cov.ncols())
        })?;
        check_finite(&cov, "covariance")?;
        let cov = symmetrized(&cov);
        let c_inv = spd_inverse(&cov)?;
        let chol = cholesky(&c_inv)?;
        Ok(Self::assemble(cov, c_inv, chol))
    }

    /// Builds the metric directly from `C⁻¹`.
    pub fn from_inverse(c_inv: Matrix) -> Result<Self> {
        ensure(c_inv.is_square() && c_inv.nrows() > 0, || {
            format!("inverse covariance must be square and nonempty, got {}x{}", c_inv.nrows(), c_inv.ncols())
        })?;
        check_finite(&c_inv, "inverse covariance")?;
        let c_inv = symmetrized(&c_inv);
        let chol = cholesky(&c_inv)?;
        let cov = spd_inverse(&c_inv)?;
        Ok(Self::assemble(cov, c_inv, chol))
    }

    /// Rebuilds a metric from a cached `(C⁻¹, L)` pair without refactoring.
    pub fn from_parts(c_inv: Matrix, chol: Matrix) -> Result<Self> {
        ensure(
            c_inv.is_square() && chol.shape() == c_inv.shape() && c_inv.nrows() > 0,
            || "cached metric factors have inconsistent shapes".to_string(),
        )?;
        check_finite(&c_inv, "inverse covariance")?;
        check_finite(&chol, "cholesky factor")?;
        let cov = spd_inverse(&c_inv)?;
        Ok(Self::assemble(cov, c_inv, chol))
    }

    fn assemble(cov: Matrix, c_inv: Matrix, chol: Matrix) -> Self {
        let fingerprint = fingerprint(&c_inv);
        Self {
            dim: c_inv.nrows(),
            cov,
            c_inv,
            chol,
            fingerprint,
        }
    }

    /// Identity metric of the given dimension (`C = C⁻¹ = I`).
    pub fn identity(dim: usize) -> Self {
        let eye = Matrix::identity(dim, dim);
        Self::assemble(eye.clone(), eye.clone(), eye)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn covariance(&self) -> &Matrix {
        &self.cov
    }

    pub fn c_inv(&self) -> &Matrix {
        &self.c_inv
    }

    /// Lower-triangular `L` with `C⁻¹ = L Lᵀ`.
    pub fn chol(&self) -> &Matrix {
        &self.chol
    }

    /// Hash of the `C⁻¹` bit pattern; bases remember which metric built them.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn check_dim(&self, v: &Vector, what: &str) -> Result<()> {
        ensure(v.len() == self.dim, || {
            format!("{what} has dimension {}, metric has {}", v.len(), self.dim)
        })
    }

    /// `C⁻¹ v`, the covector used by `sim(v, ·)`.
    pub fn apply(&self, v: &Vector) -> Result<Vector> {
        self.check_dim(v, "vector")?;
        Ok(&self.c_inv * v)
    }

    /// Similarity `iᵀ (C⁻¹)ᵀ e`.
    pub fn sim(&self, i: &Vector, e: &Vector) -> Result<f64> {
        self.check_dim(i, "first argument")?;
        self.check_dim(e, "second argument")?;
        Ok(self.c_inv.tr_mul(i).dot(e))
    }

    /// Energy `‖i‖²_{C⁻¹} = sim(i, i)`; rejects the zero vector.
    pub fn energy(&self, i: &Vector) -> Result<f64> {
        self.check_dim(i, "vector")?;
        if i.iter().all(|&x| x == 0.0) {
            return Err(Error::Degenerate("energy of the zero vector".into()));
        }
        let energy = self.sim(i, i)?;
        if energy.is_nan() || energy <= 0.0 {
            return Err(Error::Degenerate(format!("non-positive energy {energy:e}")));
        }
        Ok(energy)
    }

    /// `Lᵀ v`: coordinates in which the metric is Euclidean.
    pub fn to_metric_coords(&self, v: &Vector) -> Result<Vector> {
        self.check_dim(v, "vector")?;
        Ok(self.chol.tr_mul(v))
    }

    /// `(Lᵀ)⁻¹ ṽ`: back from metric coordinates to encoder space.
    pub fn from_metric_coords(&self, v: &Vector) -> Result<Vector> {
        self.check_dim(v, "vector")?;
        self.chol
            .tr_solve_lower_triangular(v)
            .ok_or_else(|| Error::Degenerate("singular cholesky factor".into()))
    }

    /// `e⊥ = e − i*·sim(i*, e)/‖i*‖²`, the part of `e` orthogonal to `i*`.
    pub fn project_orthogonal_single(&self, e: &Vector, i_star: &Vector) -> Result<Vector> {
        self.check_dim(e, "encoding")?;
        let energy = self.energy(i_star)?;
        let ratio = self.sim(i_star, e)? / energy;
        Ok(e - i_star * ratio)
    }

    /// Orthonormal basis (in metric coordinates) spanning `{Lᵀ i*_j}`, via
    /// column-pivoted Gram-Schmidt. Directions whose residual falls below
    /// `BASIS_DROP_TOLERANCE` times the largest column norm are dropped and
    /// listed in [`ConceptBasis::dropped`].
    pub fn orthonormal_basis(&self, targets: &[Vector]) -> Result<ConceptBasis> {
        ensure(!targets.is_empty(), || "at least one target-input is required".into())?;
        ensure(targets.len() <= self.dim, || {
            format!("{} targets exceed encoding dimension {}", targets.len(), self.dim)
        })?;
        for (j, t) in targets.iter().enumerate() {
            self.check_dim(t, "target-input")?;
            if t.iter().all(|&x| x == 0.0) {
                return Err(Error::Degenerate(format!("target-input {j} is the zero vector")));
            }
        }

        let mapped: Vec<Vector> = targets.iter().map(|t| self.chol.tr_mul(t)).collect();
        let largest = mapped.iter().map(|t| t.norm()).fold(0.0, f64::max);
        let tol = BASIS_DROP_TOLERANCE * largest;

        let mut u_tilde: Vec<Vector> = Vec::with_capacity(targets.len());
        let mut kept = Vec::with_capacity(targets.len());
        let mut remaining: Vec<usize> = (0..targets.len()).collect();
        while !remaining.is_empty() {
            let mut best: Option<(usize, Vector, f64)> = None;
            for (slot, &j) in remaining.iter().enumerate() {
                let r = reorthogonalize(&mapped[j], &u_tilde);
                let norm = r.norm();
                if best.as_ref().is_none_or(|(_, _, n)| norm > *n) {
                    best = Some((slot, r, norm));
                }
            }
            let (slot, r, norm) = best.expect("remaining is nonempty");
            if norm <= tol {
                break;
            }
            u_tilde.push(r / norm);
            kept.push(remaining.remove(slot));
        }
        let mut dropped = remaining;
        dropped.sort_unstable();

        let u = u_tilde
            .iter()
            .map(|ut| self.from_metric_coords(ut))
            .collect::<Result<Vec<_>>>()?;
        Ok(ConceptBasis {
            u_tilde,
            u,
            kept,
            dropped,
            metric: self.fingerprint,
        })
    }

    /// `e⊥J = e − Σ_j u_j·sim(u_j, e)`: the part of `e` orthogonal to every
    /// target-input the basis spans.
    pub fn project_orthogonal_multi(&self, e: &Vector, basis: &ConceptBasis) -> Result<Vector> {
        self.check_dim(e, "encoding")?;
        basis.check_metric(self)?;
        let mut out = e.clone();
        for u in &basis.u {
            let s = self.sim(u, e)?;
            out.axpy(-s, u, 1.0);
        }
        Ok(out)
    }

    /// Eigenvalues of `C`, ascending.
    pub fn covariance_eigenvalues(&self) -> Vec<f64> {
        let mut values: Vec<f64> = self.cov.clone().symmetric_eigenvalues().iter().copied().collect();
        values.sort_by(f64::total_cmp);
        values
    }

    /// `λ_max / λ_min` of `C`.
    pub fn condition_number(&self) -> f64 {
        let values = self.covariance_eigenvalues();
        values[values.len() - 1] / values[0]
    }
}

/// Orthonormal span of a set of target-inputs in metric coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBasis {
    u_tilde: Vec<Vector>,
    u: Vec<Vector>,
    kept: Vec<usize>,
    dropped: Vec<usize>,
    metric: u64,
}

impl ConceptBasis {
    /// Number of independent directions retained.
    pub fn count(&self) -> usize {
        self.u.len()
    }

    /// Basis vectors `ũ_j` in metric coordinates.
    pub fn u_tilde(&self) -> &[Vector] {
        &self.u_tilde
    }

    /// Basis vectors `u_j = (Lᵀ)⁻¹ ũ_j` in encoder space.
    pub fn u(&self) -> &[Vector] {
        &self.u
    }

    /// Original target indices in pivot order.
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    /// Target indices dropped as linearly dependent.
    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn metric_fingerprint(&self) -> u64 {
        self.metric
    }

    pub(crate) fn check_metric(&self, metric: &MetricSpace) -> Result<()> {
        ensure(self.metric == metric.fingerprint(), || {
            "concept basis was built over a different metric".into()
        })
    }
}

/// Uncentered covariance `C = (1/N) Σ e eᵀ + ridge·I` and its metric.
///
/// Samples are accumulated in a canonical (lexicographic) order so the result
/// does not depend on the order they were supplied in.
pub fn estimate_covariance(samples: &[Vector], ridge: f64) -> Result<MetricSpace> {
    let cov = uncentered_covariance(samples, ridge)?;
    MetricSpace::from_covariance(cov)
}

/// The covariance matrix itself, before inversion.
pub fn uncentered_covariance(samples: &[Vector], ridge: f64) -> Result<Matrix> {
    ensure(!samples.is_empty(), || "no covariance samples".into())?;
    ensure(ridge >= 0.0 && ridge.is_finite(), || format!("ridge must be finite and nonnegative, got {ridge}"))?;
    let dim = samples[0].len();
    ensure(dim > 0, || "samples have dimension zero".into())?;
    ensure(samples.len() >= dim || ridge > 0.0, || {
        format!("{} samples for dimension {dim} require a positive ridge", samples.len())
    })?;
    for s in samples {
        ensure(s.len() == dim, || format!("sample dimension {} differs from {dim}", s.len()))?;
        ensure(s.iter().all(|x| x.is_finite()), || "non-finite covariance sample".into())?;
    }

    let mut order: Vec<&Vector> = samples.iter().collect();
    order.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut acc = Matrix::zeros(dim, dim);
    for s in order {
        acc.ger(1.0, s, s, 1.0);
    }
    let mut cov = acc / samples.len() as f64;
    for k in 0..dim {
        cov[(k, k)] += ridge;
    }
    Ok(cov)
}

/// Ridge used when none is given: `1e-6 · trace(C) / d_e` of the unregularized
/// covariance.
pub fn default_ridge(samples: &[Vector]) -> Result<f64> {
    ensure(!samples.is_empty(), || "no covariance samples".into())?;
    let dim = samples[0].len();
    let trace: f64 = samples.iter().map(|s| s.norm_squared()).sum::<f64>() / samples.len() as f64;
    Ok(1e-6 * trace / dim as f64)
}

/// Lower Cholesky factor; fails with the first non-positive pivot.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    ensure(a.is_square(), || "cholesky of a non-square matrix".into())?;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if pivot.is_nan() || pivot <= 0.0 || pivot.is_infinite() {
            return Err(Error::Factorization { index: j, value: pivot });
        }
        let diag = pivot.sqrt();
        l[(j, j)] = diag;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / diag;
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let l = cholesky(a)?;
    let n = a.nrows();
    let l_inv = l
        .solve_lower_triangular(&Matrix::identity(n, n))
        .ok_or(Error::Factorization { index: 0, value: 0.0 })?;
    Ok(symmetrized(&l_inv.tr_mul(&l_inv)))
}

/// Copies the lower triangle onto the upper one so the result is exactly symmetric.
fn symmetrized(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            out[(i, j)] = a[(j, i)];
        }
    }
    out
}

fn check_finite(a: &Matrix, what: &str) -> Result<()> {
    ensure(a.iter().all(|x| x.is_finite()), || format!("{what} has non-finite entries"))
}

/// Two passes of classical Gram-Schmidt against an orthonormal set.
fn reorthogonalize(v: &Vector, basis: &[Vector]) -> Vector {
    let mut r = v.clone();
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(&r);
            r.axpy(-c, q, 1.0);
        }
    }
    r
}

fn fingerprint(m: &Matrix) -> u64 {
    // FNV-1a over the row-major bit patterns.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            for b in m[(i, j)].to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}
