//! Two-node stochastic SIR epidemic with Brownian log infection rates.
//!
//! State `(S1, I1, S2, I2, log β1, log β2)`, parameters
//! `(γ, α12, α21, σ_β, σ)`. The observed quantity is `(S1 + I1, S2 + I2)`,
//! the complement of the cumulative removals at each node.

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

pub const SIR_X0: [f64; 6] = [4631.0, 240.0, 37413.0, 1400.0, -10.0, -10.5];

#[derive(Debug, Clone)]
pub struct Sir2Model {
    pub x0: [f64; 6],
    pub dt: f64,
    pub substeps: usize,
    prior: GammaPrior,
}

impl Sir2Model {
    pub fn new(x0: [f64; 6], dt: f64, substeps: usize) -> Self {
        Self {
            x0,
            dt,
            substeps,
            prior: GammaPrior::new(vec![(2.0, 2.0), (2.0, 2.0), (2.0, 2.0), (2.0, 10.0), (2.0, 2.0)])
                .expect("valid prior"),
        }
    }

    /// Annual observations, steps of 0.1.
    pub fn standard() -> Self {
        Self::new(SIR_X0, 0.1, 10)
    }

    /// Data-generating parameters: the prior means.
    pub fn true_theta(&self) -> Vec<f64> {
        self.prior.means()
    }

    pub fn h() -> DMatrix<f64> {
        dmatrix![1.0, 1.0, 0.0, 0.0, 0.0, 0.0; 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]
    }
}

/// Infection rates `(β1 (I1 + α21 I2) S1, β2 (I2 + α12 I1) S2)`.
fn infection_rates(theta: &[f64], x: &[f64]) -> (f64, f64) {
    let (a12, a21) = (theta[1], theta[2]);
    let inf1 = x[4].exp() * (x[1] + a21 * x[3]) * x[0];
    let inf2 = x[5].exp() * (x[3] + a12 * x[1]) * x[2];
    (inf1, inf2)
}

pub fn sir_drift(theta: &[f64], x: &[f64]) -> [f64; 6] {
    let g = theta[0];
    let (inf1, inf2) = infection_rates(theta, x);
    [-inf1, inf1 - g * x[1], -inf2, inf2 - g * x[3], 0.0, 0.0]
}

pub fn sir_diffusion(theta: &[f64], x: &[f64]) -> DMatrix<f64> {
    let (g, sb) = (theta[0], theta[3]);
    let (inf1, inf2) = infection_rates(theta, x);
    let mut b = DMatrix::zeros(6, 6);
    b[(0, 0)] = inf1;
    b[(0, 1)] = -inf1;
    b[(1, 0)] = -inf1;
    b[(1, 1)] = inf1 + g * x[1];
    b[(2, 2)] = inf2;
    b[(2, 3)] = -inf2;
    b[(3, 2)] = -inf2;
    b[(3, 3)] = inf2 + g * x[3];
    b[(4, 4)] = sb * sb;
    b[(5, 5)] = sb * sb;
    b
}

impl Sde for Sir2Model {
    fn dim(&self) -> usize {
        6
    }
    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&sir_drift(theta, x));
    }
    fn diffusion(&self, theta: &[f64], x: &[f64]) -> Diffusion {
        Diffusion::Dense(sir_diffusion(theta, x))
    }
    fn floor(&self, x: &mut [f64]) {
        for v in &mut x[..4] {
            *v = v.max(STATE_FLOOR);
        }
    }
}

fn observed(x: &[f64]) -> [f64; 2] {
    [x[0] + x[1], x[2] + x[3]]
}

impl Model for Sir2Model {
    fn name(&self) -> &str {
        "sir"
    }
    fn state_dim(&self) -> usize {
        6
    }
    fn obs_dim(&self) -> usize {
        2
    }
    fn param_names(&self) -> Vec<String> {
        vec!["gamma".into(), "alpha12".into(), "alpha21".into(), "sigma_beta".into(), "sigma".into()]
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
    fn obs_logpdf(&self, theta: &[f64], y: &[f64], x: &[f64]) -> f64 {
        let s2 = theta[4] * theta[4];
        observed(x)
            .iter()
            .zip(y)
            .map(|(&hx, &yi)| normal_logpdf(yi, hx, s2 * hx.max(OBS_VAR_FLOOR)))
            .sum()
    }
    fn sample_obs(&self, theta: &[f64], x: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        observed(x)
            .iter()
            .map(|&hx| {
                let z: f64 = rng.sample(StandardNormal);
                hx + theta[4] * hx.max(OBS_VAR_FLOOR).sqrt() * z
            })
            .collect()
    }
    fn gaussian_obs(&self, theta: &[f64], forecast_mean: &DVector<f64>) -> Option<GaussianObs> {
        let hm = observed(forecast_mean.as_slice());
        let s2 = theta[4] * theta[4];
        Some(GaussianObs {
            h: Self::h(),
            r: DMatrix::from_diagonal(&DVector::from_vec(hm.iter().map(|v| s2 * v.max(OBS_VAR_FLOOR)).collect())),
        })
    }
}
