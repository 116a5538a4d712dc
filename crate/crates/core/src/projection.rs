//! Supervised projection fitted by minimizing a quotient-of-trace Fisher
//! objective with an orthogonality penalty.
//!
//! `A` is stored `d × c` so that the projected set is `P = X·A`. With that
//! layout the objective reads
//!
//! ```text
//! Q(A) = tr(Aᵀ S_w A) / tr(Aᵀ S_b A) + λ·‖I_c − AᵀA‖_F
//! ```
//!
//! and its gradient is
//!
//! ```text
//! ∂Q/∂A = 2 S_w A / D − 2 N S_b A / D² − 2λ A E / ‖E‖_F
//! ```
//!
//! with `N`, `D` the two traces and `E = I_c − AᵀA`. The penalty gradient is
//! taken as zero when `‖E‖_F = 0`.

use log::warn;

use crate::error::{Error, Result};
use crate::linalg::{compute_scatters, generalized_eigen, normalize_with_sign, ScatterPair};
use crate::numdiff;
use crate::tensor::{LabeledMatrix, Matrix};

/// Smallest between-class trace accepted by [`objective`].
pub const MIN_BETWEEN_TRACE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub lambda_reg: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Compare the analytic gradient at the initializer against central
    /// differences and record the result in [`FitMeta::fd_max_rel_error`].
    pub fd_check: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 1.0,
            learning_rate: 1e-3,
            max_iters: 500,
            grad_tol: 1e-6,
            fd_check: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("grad_tol", self.grad_tol)?;
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda_reg must be nonnegative, got {}",
                self.lambda_reg
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitMeta {
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub initial_orthogonality: f64,
    pub final_orthogonality: f64,
    /// Objective after every accepted step, starting with the initializer.
    pub objective_trace: Vec<f64>,
    pub fd_max_rel_error: Option<f64>,
}

/// A fitted `d × c` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub a: Matrix,
    pub lambda_reg: f64,
    pub fit_meta: FitMeta,
}

impl Projection {
    /// Wraps an explicit matrix, e.g. one read back from an artifact.
    pub fn from_matrix(a: Matrix, lambda_reg: f64) -> Self {
        Self {
            a,
            lambda_reg,
            fit_meta: FitMeta::default(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.a.cols()
    }
}

struct Terms {
    within: f64,
    between: f64,
    s_w_a: Matrix,
    s_b_a: Matrix,
    ortho: Matrix,
    ortho_norm: f64,
}

fn terms(a: &Matrix, pair: &ScatterPair) -> Result<Terms> {
    if a.rows() != pair.dim() {
        return Err(Error::Dimension(format!(
            "projection has {} rows, scatter is {}x{}",
            a.rows(),
            pair.dim(),
            pair.dim()
        )));
    }
    let s_w_a = pair.s_w.matmul(a)?;
    let s_b_a = pair.s_b.matmul(a)?;
    // tr(Aᵀ M A) = Σ_ij A_ij (M A)_ij
    let dot = |x: &Matrix, y: &Matrix| {
        x.data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| p * q)
            .sum::<f64>()
    };
    let within = dot(a, &s_w_a);
    let between = dot(a, &s_b_a);
    if !(between >= MIN_BETWEEN_TRACE) {
        return Err(Error::DegenerateProjection(between));
    }
    let ortho = Matrix::identity(a.cols()).sub(&a.t_matmul(a)?)?;
    let ortho_norm = ortho.frobenius_norm();
    Ok(Terms {
        within,
        between,
        s_w_a,
        s_b_a,
        ortho,
        ortho_norm,
    })
}

/// `‖I_c − AᵀA‖_F`.
pub fn orthogonality_residual(a: &Matrix) -> f64 {
    let gram = a.t_matmul(a).expect("square gram");
    Matrix::identity(a.cols())
        .sub(&gram)
        .expect("same shape")
        .frobenius_norm()
}

/// Quotient-of-trace objective plus `lambda_reg` times the orthogonality
/// residual.
pub fn objective(a: &Matrix, pair: &ScatterPair, lambda_reg: f64) -> Result<f64> {
    let t = terms(a, pair)?;
    Ok(t.within / t.between + lambda_reg * t.ortho_norm)
}

/// Gradient of [`objective`] with respect to every entry of `a`.
pub fn gradient(a: &Matrix, pair: &ScatterPair, lambda_reg: f64) -> Result<Matrix> {
    let t = terms(a, pair)?;
    let mut g = t
        .s_w_a
        .scale(2.0 / t.between)
        .sub(&t.s_b_a.scale(2.0 * t.within / (t.between * t.between)))?;
    if lambda_reg != 0.0 && t.ortho_norm > 0.0 {
        let pen = a.matmul(&t.ortho)?.scale(-2.0 * lambda_reg / t.ortho_norm);
        g = g.add(&pen)?;
    }
    Ok(g)
}

/// Largest central-difference disagreement of [`gradient`] at `a`.
pub fn gradient_fd_error(
    a: &Matrix,
    pair: &ScatterPair,
    lambda_reg: f64,
    step: f64,
) -> Result<f64> {
    let analytic = gradient(a, pair, lambda_reg)?;
    let (d, c) = a.shape();
    let numeric = numdiff::central_difference(
        |x| {
            let probe = Matrix::new(d, c, x.to_vec()).expect("same shape");
            objective(&probe, pair, lambda_reg).unwrap_or(f64::NAN)
        },
        a.data(),
        step,
    );
    Ok(numdiff::max_relative_error(analytic.data(), &numeric, 1e-6))
}

/// Initial `d × c` projection: the leading generalized eigenvectors of
/// `(S_b, S_w)` as unit columns. When `c > d` only `d` directions exist and
/// the remaining columns start at zero.
pub fn eigen_initializer(pair: &ScatterPair, c: usize) -> Result<Matrix> {
    let d = pair.dim();
    let k = c.min(d);
    let eig = generalized_eigen(pair, k)?;
    let mut a = Matrix::zeros(d, c);
    for j in 0..k {
        let mut col = eig.vectors.column(j);
        normalize_with_sign(&mut col);
        for i in 0..d {
            a.set(i, j, col[i]);
        }
    }
    Ok(a)
}

/// Fits the projection: eigen initializer followed by full-batch gradient
/// descent with step halving whenever a trial step would raise the
/// objective.
pub fn fit_projection(data: &LabeledMatrix, config: &FitConfig) -> Result<Projection> {
    config.validate()?;
    if !data.matrix.is_finite() {
        return Err(Error::NonFinite("projection training data".into()));
    }
    let pair = compute_scatters(data)?;
    let c = data.class_count();
    if data.matrix.cols() < c {
        warn!(
            "projecting {} features onto {c} class axes; {} columns start at zero",
            data.matrix.cols(),
            c - data.matrix.cols()
        );
    }
    fit_from_scatters(&pair, c, config)
}

/// Same as [`fit_projection`] for precomputed scatter matrices.
pub fn fit_from_scatters(pair: &ScatterPair, c: usize, config: &FitConfig) -> Result<Projection> {
    config.validate()?;
    let lambda = config.lambda_reg;
    let mut a = eigen_initializer(pair, c)?;
    let mut obj = objective(&a, pair, lambda)?;
    let mut meta = FitMeta {
        initial_objective: obj,
        initial_orthogonality: orthogonality_residual(&a),
        objective_trace: vec![obj],
        ..FitMeta::default()
    };
    if config.fd_check {
        meta.fd_max_rel_error = Some(gradient_fd_error(&a, pair, lambda, 1e-6)?);
    }

    const MAX_HALVINGS: usize = 60;
    let mut step = config.learning_rate;
    for _ in 0..config.max_iters {
        let g = gradient(&a, pair, lambda)?;
        if g.frobenius_norm() < config.grad_tol {
            break;
        }
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial = a.sub(&g.scale(step))?;
            match objective(&trial, pair, lambda) {
                Ok(v) if v <= obj => {
                    a = trial;
                    obj = v;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
        meta.iterations += 1;
        meta.objective_trace.push(obj);
        step = (step * 2.0).min(config.learning_rate);
    }
    meta.final_objective = obj;
    meta.final_orthogonality = orthogonality_residual(&a);
    Ok(Projection {
        a,
        lambda_reg: lambda,
        fit_meta: meta,
    })
}

/// `P = X·A`.
pub fn project(data: &Matrix, proj: &Projection) -> Result<Matrix> {
    if data.cols() != proj.input_dim() {
        return Err(Error::Dimension(format!(
            "data has {} columns, projection expects {}",
            data.cols(),
            proj.input_dim()
        )));
    }
    data.matmul(&proj.a)
}
