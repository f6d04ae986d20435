//! Dense Gaussian numerics at the small sizes the filters need.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FilterError, Result};
use crate::model::StateEnsemble;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative diagonal jitter for the first retry of a failed factorisation.
pub const JITTER_EPS: f64 = 1e-8;
/// Number of ×10 jitter escalations after the first retry.
pub const JITTER_ESCALATIONS: usize = 3;

/// `log N(y; mu, sigma)` via a Cholesky factorisation of `sigma`.
pub fn gaussian_logpdf(y: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let d = y.len();
    check_dims(d, mu.len(), sigma)?;
    let chol = Cholesky::new(sigma.clone()).ok_or(FilterError::SingularCovariance { dim: d })?;
    Ok(gaussian_logpdf_chol(y, mu, &chol))
}

/// `log N(y; mu, L L')` given an existing factorisation.
pub fn gaussian_logpdf_chol(y: &DVector<f64>, mu: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let d = y.len();
    let diff = y - mu;
    let l = chol.l_dirty();
    let z = l
        .solve_lower_triangular(&diff)
        .expect("cholesky factor has a nonzero diagonal");
    let log_det: f64 = (0..d).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    -0.5 * (d as f64 * LN_2PI + log_det + z.norm_squared())
}

/// Scalar normal log density with variance `var`.
#[inline]
pub fn normal_logpdf(y: f64, mu: f64, var: f64) -> f64 {
    let r = y - mu;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

fn check_dims(d: usize, mu_len: usize, sigma: &DMatrix<f64>) -> Result<()> {
    if mu_len != d {
        return Err(FilterError::DimensionMismatch {
            what: "mean vector",
            expected: d,
            got: mu_len,
        });
    }
    if sigma.nrows() != d || sigma.ncols() != d {
        return Err(FilterError::DimensionMismatch {
            what: "covariance matrix",
            expected: d,
            got: sigma.nrows(),
        });
    }
    Ok(())
}

/// Cholesky factorisation with the diagonal-jitter fallback: on failure add
/// `eps * trace(sigma) / d` to the diagonal, with `eps = 1e-8` escalated ×10
/// up to three times. A zero-trace matrix gets an absolute jitter instead so
/// that the all-zero case is still reported as singular rather than looping.
pub fn cholesky_jittered(sigma: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let d = sigma.nrows();
    if sigma.ncols() != d {
        return Err(FilterError::DimensionMismatch {
            what: "square matrix",
            expected: d,
            got: sigma.ncols(),
        });
    }
    if sigma.iter().any(|v| v.is_nan()) {
        return Err(FilterError::NotANumber("covariance matrix"));
    }
    if let Some(c) = Cholesky::new(sigma.clone()) {
        return Ok(c);
    }
    let scale = sigma.trace() / d as f64;
    if !(scale > 0.0) {
        return Err(FilterError::SingularCovariance { dim: d });
    }
    let mut eps = JITTER_EPS;
    for _ in 0..=JITTER_ESCALATIONS {
        let mut m = sigma.clone();
        for i in 0..d {
            m[(i, i)] += eps * scale;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok(c);
        }
        eps *= 10.0;
    }
    Err(FilterError::SingularCovariance { dim: d })
}

/// Lower-triangular square root of a PSD matrix. The zero matrix maps to the
/// zero matrix.
pub fn psd_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if sigma.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(sigma.nrows(), sigma.ncols()));
    }
    Ok(cholesky_jittered(sigma)?.l())
}

/// One draw from `N(mu, sigma)`.
pub fn mvn_sample<R: Rng + ?Sized>(mu: &DVector<f64>, sigma: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    check_dims(mu.len(), mu.len(), sigma)?;
    let l = psd_sqrt(sigma)?;
    Ok(mvn_sample_sqrt(mu, &l, rng))
}

/// One draw from `N(mu, L L')` for a precomputed square root `L`.
pub fn mvn_sample_sqrt<R: Rng + ?Sized>(mu: &DVector<f64>, l: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(mu.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mu + l * z
}

/// Sample mean and covariance (divisor N−1) of an ensemble.
pub fn ensemble_moments(ensemble: &StateEnsemble) -> Result<(DVector<f64>, DMatrix<f64>)> {
    column_moments(ensemble.matrix())
}

/// Sample mean and covariance (divisor N−1) of the columns of `m`.
pub fn column_moments(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (d, n) = m.shape();
    if n < 2 {
        return Err(FilterError::precondition(format!(
            "ensemble moments need at least 2 members, got {n}"
        )));
    }
    let mean = m.column_mean();
    let mut cov = DMatrix::zeros(d, d);
    let mut centred = DVector::zeros(d);
    for j in 0..n {
        for i in 0..d {
            centred[i] = m[(i, j)] - mean[i];
        }
        cov.ger(1.0, &centred, &centred, 1.0);
    }
    cov /= (n - 1) as f64;
    symmetrise(&mut cov);
    Ok((mean, cov))
}

pub(crate) fn symmetrise(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `log Σ exp(x_i)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log (1/n Σ exp(x_i))`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

/// Normalised weights from log-weights. `None` when every weight is zero.
pub fn normalise_log_weights(log_w: &[f64]) -> Option<Vec<f64>> {
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        return None;
    }
    Some(log_w.iter().map(|w| (w - lse).exp()).collect())
}
