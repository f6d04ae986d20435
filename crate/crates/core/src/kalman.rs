//! Exact Kalman filter for linear-Gaussian state-space models.

use nalgebra::{DMatrix, DVector};

use crate::error::{FilterError, Result};
use crate::linalg::{cholesky_jittered, gaussian_logpdf, symmetrise};
use crate::model::{LinearGaussianSsm, Model, Observation};

/// Log-likelihood and filtering moments of an exact Kalman filter pass.
#[derive(Debug, Clone)]
pub struct KalmanOutput {
    pub loglik: f64,
    /// `log p(y_t | y_{0:t-1})` for each observation.
    pub increments: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

/// Runs the exact Kalman filter for `model` at natural-scale `theta`.
pub fn kalman_filter_exact(model: &dyn Model, theta: &[f64], data: &[Observation]) -> Result<KalmanOutput> {
    let ssm = model.linear_gaussian(theta).ok_or_else(|| {
        FilterError::Unsupported(format!("{} has no exact linear-Gaussian transition", model.name()))
    })?;
    kalman_filter(&ssm, data)
}

/// Kalman filter on an explicit linear-Gaussian system. Consecutive
/// observations are one transition apart.
pub fn kalman_filter(ssm: &LinearGaussianSsm, data: &[Observation]) -> Result<KalmanOutput> {
    let d = ssm.init_mean.len();
    let h = &ssm.obs.h;
    let r = &ssm.obs.r;
    if h.ncols() != d {
        return Err(FilterError::DimensionMismatch {
            what: "observation matrix columns",
            expected: d,
            got: h.ncols(),
        });
    }
    let mut mean = ssm.init_mean.clone();
    let mut cov = ssm.init_cov.clone();
    let mut out = KalmanOutput {
        loglik: 0.0,
        increments: Vec::with_capacity(data.len()),
        means: Vec::with_capacity(data.len()),
        covs: Vec::with_capacity(data.len()),
    };
    for (k, obs) in data.iter().enumerate() {
        if obs.values.len() != h.nrows() {
            return Err(FilterError::DimensionMismatch {
                what: "observation",
                expected: h.nrows(),
                got: obs.values.len(),
            });
        }
        if k > 0 {
            mean = &ssm.transition * &mean + &ssm.offset;
            cov = &ssm.transition * &cov * ssm.transition.transpose() + &ssm.noise;
            symmetrise(&mut cov);
        }
        let pred_y = h * &mean;
        let ph_t = &cov * h.transpose();
        let mut s = h * &ph_t + r;
        symmetrise(&mut s);
        let inc = gaussian_logpdf(&obs.values, &pred_y, &s)?;
        let chol = cholesky_jittered(&s)?;
        // K = P H' S^{-1}, solved as S K' = H P
        let gain = chol.solve(&ph_t.transpose()).transpose();
        mean += &gain * (&obs.values - pred_y);
        cov -= &gain * ph_t.transpose();
        symmetrise(&mut cov);
        out.loglik += inc;
        out.increments.push(inc);
        out.means.push(mean.clone());
        out.covs.push(cov.clone());
    }
    Ok(out)
}
