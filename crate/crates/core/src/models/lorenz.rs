//! Stochastic Lorenz-96 system with isotropic diffusion `θ4² I`, fully
//! observed with additive Gaussian noise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::sde::{substep_transition, Diffusion, Sde};
use crate::dist::GammaPrior;
use crate::error::Result;
use crate::linalg::normal_logpdf;
use crate::model::{GaussianObs, Model};
use crate::rng::StreamRng;

#[derive(Debug, Clone)]
pub struct Lorenz96Model {
    pub d: usize,
    pub dt: f64,
    pub substeps: usize,
    pub obs_var: f64,
    prior: GammaPrior,
}

impl Lorenz96Model {
    pub fn new(d: usize, dt: f64, substeps: usize, obs_var: f64) -> Self {
        Self {
            d,
            dt,
            substeps,
            obs_var,
            prior: GammaPrior::new(vec![(4.0, 4.0), (4.0, 4.0), (6.0, 2.0), (16.0, 2.0)]).expect("valid prior"),
        }
    }

    /// Steps of 5e-3, observations every 0.2 time units, noise variance 25.
    pub fn standard(d: usize) -> Self {
        Self::new(d, 5e-3, 40, 25.0)
    }

    pub fn true_theta() -> [f64; 4] {
        [1.0, 1.0, 8.0, 10f64.sqrt()]
    }
}

/// `a_i = θ1 (x_{i+1} − x_{i−2}) x_{i−1} − θ2 x_i + θ3` with cyclic indices.
pub fn lorenz_drift(theta: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for i in 0..d {
        let xp1 = x[(i + 1) % d];
        let xm1 = x[(i + d - 1) % d];
        let xm2 = x[(i + 2 * d - 2) % d];
        out[i] = theta[0] * (xp1 - xm2) * xm1 - theta[1] * x[i] + theta[2];
    }
}

impl Sde for Lorenz96Model {
    fn dim(&self) -> usize {
        self.d
    }
    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        lorenz_drift(theta, x, out);
    }
    fn diffusion(&self, theta: &[f64], _x: &[f64]) -> Diffusion {
        Diffusion::Isotropic(theta[3] * theta[3])
    }
}

impl Model for Lorenz96Model {
    fn name(&self) -> &str {
        "lorenz96"
    }
    fn state_dim(&self) -> usize {
        self.d
    }
    fn obs_dim(&self) -> usize {
        self.d
    }
    fn param_names(&self) -> Vec<String> {
        (1..=4).map(|i| format!("theta{i}")).collect()
    }
    fn prior(&self) -> &GammaPrior {
        &self.prior
    }
    fn sample_initial(&self, _theta: &[f64], _rng: &mut StreamRng, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn sample_transition(&self, theta: &[f64], x: &mut [f64], rng: &mut StreamRng) -> Result<()> {
        substep_transition(self, theta, x, self.substeps, self.dt, rng)
    }
    fn obs_logpdf(&self, _theta: &[f64], y: &[f64], x: &[f64]) -> f64 {
        y.iter().zip(x).map(|(&yi, &xi)| normal_logpdf(yi, xi, self.obs_var)).sum()
    }
    fn sample_obs(&self, _theta: &[f64], x: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        let s = self.obs_var.sqrt();
        x.iter()
            .map(|&xi| {
                let z: f64 = rng.sample(StandardNormal);
                xi + s * z
            })
            .collect()
    }
    fn gaussian_obs(&self, _theta: &[f64], _forecast_mean: &DVector<f64>) -> Option<GaussianObs> {
        Some(GaussianObs {
            h: DMatrix::identity(self.d, self.d),
            r: DMatrix::identity(self.d, self.d) * self.obs_var,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_at_symmetric_states() {
        let mut out = [0.0; 5];
        lorenz_drift(&[1.0, 1.0, 8.0, 1.0], &[0.0; 5], &mut out);
        assert_eq!(out, [8.0; 5]);
        lorenz_drift(&[1.0, 1.0, 8.0, 1.0], &[1.0; 5], &mut out);
        assert_eq!(out, [7.0; 5]);
    }
}
