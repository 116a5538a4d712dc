//! Class scatter matrices and the symmetric-definite generalized eigensolver
//! that seeds the projection fit.

use crate::error::{Error, Result};
use crate::tensor::{LabeledMatrix, Matrix};

/// Relative ridge added to the within-class scatter before it is factored.
pub const WITHIN_RIDGE: f64 = 1e-6;

/// Within-class (`s_w`) and between-class (`s_b`) scatter, both `d × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPair {
    pub s_w: Matrix,
    pub s_b: Matrix,
}

impl ScatterPair {
    pub fn new(s_w: Matrix, s_b: Matrix) -> Result<Self> {
        let d = s_w.rows();
        if s_w.shape() != (d, d) || s_b.shape() != (d, d) {
            return Err(Error::Dimension(format!(
                "scatter pair needs square matrices of equal size, got {:?} and {:?}",
                s_w.shape(),
                s_b.shape()
            )));
        }
        Ok(Self { s_w, s_b })
    }

    pub fn dim(&self) -> usize {
        self.s_w.rows()
    }

    /// `s_w + ε·mean(diag(s_w))·I`. A zero-trace `s_w` gets an absolute
    /// ridge of `ε`.
    pub fn regularized_within(&self) -> Matrix {
        let d = self.dim();
        let mean_diag = if d == 0 {
            0.0
        } else {
            self.s_w.trace().unwrap_or(0.0) / d as f64
        };
        let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        let mut out = self.s_w.clone();
        for i in 0..d {
            out.set(i, i, out.get(i, i) + WITHIN_RIDGE * scale);
        }
        out
    }
}

/// Builds the unweighted scatter sums
/// `S_w = Σ_j Σ_{x∈C_j} (x−μ_j)(x−μ_j)ᵀ` and `S_b = Σ_j (μ_j−μ̄)(μ_j−μ̄)ᵀ`,
/// with `μ̄` the mean over all rows. Both are symmetrized.
pub fn compute_scatters(data: &LabeledMatrix) -> Result<ScatterPair> {
    let x = &data.matrix;
    let d = x.cols();
    let sizes = data.class_sizes();
    let c = sizes.len();
    if c < 2 {
        return Err(Error::DegenerateLabels(format!(
            "scatter needs at least 2 classes, got {c}"
        )));
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::DegenerateLabels(format!(
            "class {empty} has no rows"
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("scatter input".into()));
    }

    let mut means = vec![vec![0.0; d]; c];
    let mut global = vec![0.0; d];
    for (i, &l) in data.labels.iter().enumerate() {
        for (j, v) in x.row(i).iter().enumerate() {
            means[l][j] += v;
            global[j] += v;
        }
    }
    for (m, &s) in means.iter_mut().zip(&sizes) {
        m.iter_mut().for_each(|v| *v /= s as f64);
    }
    global.iter_mut().for_each(|v| *v /= x.rows() as f64);

    // Center rows on their class mean, then S_w = Zᵀ Z.
    let mut centered = Matrix::zeros(x.rows(), d);
    for (i, &l) in data.labels.iter().enumerate() {
        for j in 0..d {
            centered.set(i, j, x.get(i, j) - means[l][j]);
        }
    }
    let s_w = centered.t_matmul(&centered)?.symmetrized()?;

    let mut s_b = Matrix::zeros(d, d);
    for m in &means {
        let diff: Vec<f64> = m.iter().zip(&global).map(|(a, b)| a - b).collect();
        for p in 0..d {
            for q in 0..d {
                s_b.set(p, q, s_b.get(p, q) + diff[p] * diff[q]);
            }
        }
    }
    let s_b = s_b.symmetrized()?;
    ScatterPair::new(s_w, s_b)
}

/// Leading generalized eigenpairs of `S_b a = λ S_w a`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    /// Descending eigenvalues.
    pub values: Vec<f64>,
    /// `d × k`, column `i` pairs with `values[i]`; unit norm, largest-magnitude
    /// entry positive.
    pub vectors: Matrix,
}

/// Top-`k` eigenpairs of `S_b a = λ S̃_w a` where `S̃_w` is the ridge-regularized
/// within scatter ([`ScatterPair::regularized_within`]).
///
/// Reduces to a standard symmetric problem through the Cholesky factor
/// `S̃_w = L Lᵀ`, solves `L⁻¹ S_b L⁻ᵀ y = λ y` with cyclic Jacobi, and maps
/// back with `a = L⁻ᵀ y`.
pub fn generalized_eigen(pair: &ScatterPair, k: usize) -> Result<EigenResult> {
    let d = pair.dim();
    if k > d {
        return Err(Error::Dimension(format!(
            "requested {k} eigenpairs of a {d}-dimensional problem"
        )));
    }
    if !pair.s_w.is_finite() || !pair.s_b.is_finite() {
        return Err(Error::NonFinite("scatter pair".into()));
    }
    let l = cholesky(&pair.regularized_within())?;
    // C = L⁻¹ S_b L⁻ᵀ, built column by column via two triangular solves.
    let mut tmp = Matrix::zeros(d, d);
    for j in 0..d {
        let col = forward_substitute(&l, &pair.s_b.column(j));
        for i in 0..d {
            tmp.set(i, j, col[i]);
        }
    }
    // tmp = L⁻¹ S_b; C = tmp L⁻ᵀ = (L⁻¹ tmpᵀ)ᵀ.
    let tmp_t = tmp.transpose();
    let mut c = Matrix::zeros(d, d);
    for j in 0..d {
        let col = forward_substitute(&l, &tmp_t.column(j));
        for i in 0..d {
            c.set(j, i, col[i]);
        }
    }
    let c = c.symmetrized()?;
    let (values, y) = symmetric_eigen(&c);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));

    let mut vectors = Matrix::zeros(d, k);
    let mut out_values = Vec::with_capacity(k);
    for (slot, &idx) in order.iter().take(k).enumerate() {
        let mut a = backward_substitute_transposed(&l, &y.column(idx));
        normalize_with_sign(&mut a);
        for i in 0..d {
            vectors.set(i, slot, a[i]);
        }
        out_values.push(values[idx]);
    }
    Ok(EigenResult {
        values: out_values,
        vectors,
    })
}

/// Scales `v` to unit length and flips it so its largest-magnitude entry is
/// positive (first such entry on ties).
pub(crate) fn normalize_with_sign(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Dimension("cholesky of non-square matrix".into()));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if !(diag > 0.0) {
            return Err(Error::NonFinite(format!(
                "matrix is not positive definite (pivot {j} = {diag:e})"
            )));
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
fn forward_substitute(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
fn backward_substitute_transposed(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns unsorted eigenvalues and the matrix whose columns are the
/// matching orthonormal eigenvectors.
pub fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    if n < 2 || scale == 0.0 {
        return ((0..n).map(|i| m.get(i, i)).collect(), v);
    }
    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m.get(p, q) * m.get(p, q);
            }
        }
        if off.sqrt() <= f64::EPSILON * 1e-2 * scale {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, cs * mkp - sn * mkq);
                    m.set(k, q, sn * mkp + cs * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, cs * mpk - sn * mqk);
                    m.set(q, k, sn * mpk + cs * mqk);
                }
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, cs * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + cs * vkq);
                }
            }
        }
    }
    ((0..n).map(|i| m.get(i, i)).collect(), v)
}
