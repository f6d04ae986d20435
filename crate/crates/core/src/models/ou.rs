//! Ornstein-Uhlenbeck process `dX = θ1(θ2 − X)dt + θ3 dW` with its exact
//! transition, observed with additive Gaussian noise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dist::GammaPrior;
use crate::error::Result;
use crate::linalg::normal_logpdf;
use crate::model::{GaussianObs, LinearGaussianSsm, Model};
use crate::rng::StreamRng;

/// Mean and variance of `X_{t+Δt} | X_t = x`.
pub fn ou_moments(x: f64, theta: &[f64], dt: f64) -> (f64, f64) {
    let (t1, t2, t3) = (theta[0], theta[1], theta[2]);
    let e = (-t1 * dt).exp();
    let mean = x * e + t2 * (1.0 - e);
    let var = t3 * t3 * (-(-2.0 * t1 * dt).exp_m1()) / (2.0 * t1);
    (mean, var)
}

pub fn ou_transition_sample(x: f64, theta: &[f64], dt: f64, rng: &mut StreamRng) -> f64 {
    let (m, v) = ou_moments(x, theta, dt);
    let z: f64 = rng.sample(StandardNormal);
    m + v.sqrt() * z
}

pub fn ou_transition_logpdf(x_new: f64, x: f64, theta: &[f64], dt: f64) -> f64 {
    let (m, v) = ou_moments(x, theta, dt);
    normal_logpdf(x_new, m, v)
}

#[derive(Debug, Clone)]
pub struct OuModel {
    pub x0: f64,
    pub dt: f64,
    pub obs_var: f64,
    prior: GammaPrior,
}

impl OuModel {
    pub fn new(x0: f64, dt: f64, obs_var: f64) -> Self {
        Self {
            x0,
            dt,
            obs_var,
            prior: GammaPrior::new(vec![(2.0, 2.0), (5.0, 3.0), (2.0, 5.0)]).expect("valid prior"),
        }
    }

    pub fn with_prior(mut self, prior: GammaPrior) -> Self {
        self.prior = prior;
        self
    }

    pub fn true_theta() -> [f64; 3] {
        [1.0, 2.0, 1.0]
    }

    fn obs(&self) -> GaussianObs {
        GaussianObs {
            h: DMatrix::from_element(1, 1, 1.0),
            r: DMatrix::from_element(1, 1, self.obs_var),
        }
    }
}

impl Default for OuModel {
    fn default() -> Self {
        Self::new(10.0, 1.0, 0.1)
    }
}

impl Model for OuModel {
    fn name(&self) -> &str {
        "ou"
    }
    fn state_dim(&self) -> usize {
        1
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
        out[0] = self.x0;
    }
    fn sample_transition(&self, theta: &[f64], x: &mut [f64], rng: &mut StreamRng) -> Result<()> {
        x[0] = ou_transition_sample(x[0], theta, self.dt, rng);
        Ok(())
    }
    fn obs_logpdf(&self, _theta: &[f64], y: &[f64], x: &[f64]) -> f64 {
        normal_logpdf(y[0], x[0], self.obs_var)
    }
    fn sample_obs(&self, _theta: &[f64], x: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        let z: f64 = rng.sample(StandardNormal);
        vec![x[0] + self.obs_var.sqrt() * z]
    }
    fn gaussian_obs(&self, _theta: &[f64], _forecast_mean: &DVector<f64>) -> Option<GaussianObs> {
        Some(self.obs())
    }
    fn transition_logpdf(&self, theta: &[f64], x_new: &[f64], x_prev: &[f64]) -> Option<f64> {
        Some(ou_transition_logpdf(x_new[0], x_prev[0], theta, self.dt))
    }
    fn linear_gaussian(&self, theta: &[f64]) -> Option<LinearGaussianSsm> {
        let (_, var) = ou_moments(0.0, theta, self.dt);
        let e = (-theta[0] * self.dt).exp();
        Some(LinearGaussianSsm {
            transition: DMatrix::from_element(1, 1, e),
            offset: DVector::from_element(1, theta[1] * (1.0 - e)),
            noise: DMatrix::from_element(1, 1, var),
            init_mean: DVector::from_element(1, self.x0),
            init_cov: DMatrix::zeros(1, 1),
            obs: self.obs(),
        })
    }
}
