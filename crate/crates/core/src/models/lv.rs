//! Stochastic Lotka-Volterra predator-prey model observed through a
//! Gaussian approximation to Poisson counts of prey, `y ~ N(x1, x1)`.

use nalgebra::{dmatrix, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::sde::{substep_transition, Diffusion, Sde};
use super::{OBS_VAR_FLOOR, STATE_FLOOR};
use crate::dist::GammaPrior;
use crate::error::Result;
use crate::linalg::normal_logpdf;
use crate::model::{GaussianObs, Model};
use crate::rng::StreamRng;

#[derive(Debug, Clone)]
pub struct LvModel {
    pub x0: [f64; 2],
    pub dt: f64,
    pub substeps: usize,
    prior: GammaPrior,
}

impl LvModel {
    pub fn new(x0: [f64; 2], dt: f64, substeps: usize) -> Self {
        Self {
            x0,
            dt,
            substeps,
            prior: GammaPrior::new(vec![(2.0, 4.0), (20.0, 1e4), (2.0, 4.0)]).expect("valid prior"),
        }
    }

    /// Inference discretisation: inter-observation time 2 split into 10 steps of 0.2.
    pub fn inference() -> Self {
        Self::new([50.0, 50.0], 0.2, 10)
    }

    /// Data-generating discretisation: steps of 1e-3 thinned by 2000.
    pub fn data_generating() -> Self {
        Self::new([50.0, 50.0], 1e-3, 2000)
    }

    pub fn true_theta() -> [f64; 3] {
        [0.5, 0.0025, 0.3]
    }
}

/// Drift `a(x, θ)`.
pub fn lv_drift(theta: &[f64], x: &[f64]) -> [f64; 2] {
    let inter = theta[1] * x[0] * x[1];
    [theta[0] * x[0] - inter, inter - theta[2] * x[1]]
}

/// Diffusion `b(x, θ)`.
pub fn lv_diffusion(theta: &[f64], x: &[f64]) -> DMatrix<f64> {
    let inter = theta[1] * x[0] * x[1];
    dmatrix![theta[0] * x[0] + inter, -inter; -inter, inter + theta[2] * x[1]]
}

impl Sde for LvModel {
    fn dim(&self) -> usize {
        2
    }
    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&lv_drift(theta, x));
    }
    fn diffusion(&self, theta: &[f64], x: &[f64]) -> Diffusion {
        Diffusion::Dense(lv_diffusion(theta, x))
    }
    fn floor(&self, x: &mut [f64]) {
        for v in x {
            *v = v.max(STATE_FLOOR);
        }
    }
}

impl Model for LvModel {
    fn name(&self) -> &str {
        "lv"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn param_names(&self) -> Vec<String> {
        vec!["theta1".into(), "theta2".into(), "theta3".into()]
    }
    fn prior(&self) -> &GammaPrior {
        &self.prior
    }
    fn sample_initial(&self, _theta: &[f64], _rng: &mut StreamRng, out: &mut [f64]) {
        out.copy_from_slice(&self.x0);
    }
    fn sample_transition(&self, theta: &[f64], x: &mut [f64], rng: &mut StreamRng) -> Result<()> {
        substep_transition(self, theta, x, self.substeps, self.dt, rng)
    }
    fn obs_logpdf(&self, _theta: &[f64], y: &[f64], x: &[f64]) -> f64 {
        normal_logpdf(y[0], x[0], x[0].max(OBS_VAR_FLOOR))
    }
    fn sample_obs(&self, _theta: &[f64], x: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        let z: f64 = rng.sample(StandardNormal);
        vec![x[0] + x[0].max(OBS_VAR_FLOOR).sqrt() * z]
    }
    fn gaussian_obs(&self, _theta: &[f64], forecast_mean: &DVector<f64>) -> Option<GaussianObs> {
        Some(GaussianObs {
            h: dmatrix![1.0, 0.0],
            r: DMatrix::from_element(1, 1, forecast_mean[0].max(OBS_VAR_FLOOR)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn drift_at_fifty_fifty() {
        let a = lv_drift(&LvModel::true_theta(), &[50.0, 50.0]);
        assert_relative_eq!(a[0], 18.75, epsilon = 1e-12);
        assert_relative_eq!(a[1], -8.75, epsilon = 1e-12);
    }

    #[test]
    fn obs_density_at_mean() {
        let m = LvModel::inference();
        let v = m.obs_logpdf(&LvModel::true_theta(), &[100.0], &[100.0, 40.0]);
        assert_relative_eq!(v, -0.5 * (200.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn plug_in_approximation() {
        let m = LvModel::inference();
        let g = m.gaussian_obs(&LvModel::true_theta(), &DVector::from_vec(vec![100.0, 40.0])).unwrap();
        assert_eq!((&g.h * DVector::from_vec(vec![100.0, 40.0]))[0], 100.0);
        assert_eq!(g.r[(0, 0)], 100.0);
        let g = m.gaussian_obs(&LvModel::true_theta(), &DVector::from_vec(vec![-3.0, 40.0])).unwrap();
        assert_eq!(g.r[(0, 0)], OBS_VAR_FLOOR);
    }

    #[test]
    fn inference_grid_has_ten_substeps() {
        let m = LvModel::inference();
        assert_eq!(m.substeps, 10);
        assert_relative_eq!(m.dt * m.substeps as f64, 2.0, epsilon = 1e-12);
    }
}
