//! Euler-Maruyama discretisation of Itô SDEs `dX = a(X, θ) dt + b(X, θ)^{1/2} dW`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FilterError, Result};
use crate::linalg::cholesky_jittered;
use crate::rng::StreamRng;

/// Diffusion matrix `b(x, θ)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Diffusion {
    Zero,
    /// `σ² I`.
    Isotropic(f64),
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl Diffusion {
    pub fn to_matrix(&self, d: usize) -> DMatrix<f64> {
        match self {
            Diffusion::Zero => DMatrix::zeros(d, d),
            Diffusion::Isotropic(v) => DMatrix::identity(d, d) * *v,
            Diffusion::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
            Diffusion::Dense(m) => m.clone(),
        }
    }
}

/// An Itô SDE with state-dependent drift and diffusion.
pub trait Sde: Send + Sync {
    fn dim(&self) -> usize;
    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]);
    fn diffusion(&self, theta: &[f64], x: &[f64]) -> Diffusion;
    /// Boundary handling applied after each step.
    fn floor(&self, _x: &mut [f64]) {}
}

/// One step `x' ~ N(x + a(x)Δt, b(x)Δt)`, in place.
pub fn euler_maruyama_step(sde: &dyn Sde, theta: &[f64], x: &mut [f64], dt: f64, rng: &mut StreamRng) -> Result<()> {
    if !(dt > 0.0) {
        return Err(FilterError::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let d = x.len();
    let mut a = vec![0.0; d];
    sde.drift(theta, x, &mut a);
    let b = sde.diffusion(theta, x);
    let sdt = dt.sqrt();
    match b {
        Diffusion::Zero => {
            for i in 0..d {
                x[i] += a[i] * dt;
            }
        }
        Diffusion::Isotropic(v) => {
            let s = v.sqrt() * sdt;
            for i in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                x[i] += a[i] * dt + s * z;
            }
        }
        Diffusion::Diagonal(v) => {
            for i in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                x[i] += a[i] * dt + v[i].max(0.0).sqrt() * sdt * z;
            }
        }
        Diffusion::Dense(m) => {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let l = if m.iter().all(|&v| v == 0.0) {
                DMatrix::zeros(d, d)
            } else {
                cholesky_jittered(&m)?.l()
            };
            for i in 0..d {
                let mut noise = 0.0;
                for k in 0..=i {
                    noise += l[(i, k)] * z[k];
                }
                x[i] += a[i] * dt + sdt * noise;
            }
        }
    }
    sde.floor(x);
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FilterError::NotANumber("Euler-Maruyama step"))
    }
}

/// `m` chained Euler-Maruyama steps of size `dt`.
pub fn substep_transition(sde: &dyn Sde, theta: &[f64], x: &mut [f64], m: usize, dt: f64, rng: &mut StreamRng) -> Result<()> {
    if m == 0 {
        return Err(FilterError::InvalidArgument("at least one substep is required".into()));
    }
    for _ in 0..m {
        euler_maruyama_step(sde, theta, x, dt, rng)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    struct Linear {
        rate: f64,
        noise: bool,
    }

    impl Sde for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn drift(&self, _theta: &[f64], x: &[f64], out: &mut [f64]) {
            out[0] = -self.rate * x[0];
        }
        fn diffusion(&self, _theta: &[f64], _x: &[f64]) -> Diffusion {
            if self.noise {
                Diffusion::Isotropic(1.0)
            } else {
                Diffusion::Zero
            }
        }
    }

    #[test]
    fn zero_drift_and_diffusion_is_identity() {
        let sde = Linear { rate: 0.0, noise: false };
        let mut x = [3.5];
        euler_maruyama_step(&sde, &[], &mut x, 0.1, &mut RngStream::new(0).rng()).unwrap();
        assert_eq!(x, [3.5]);
    }

    #[test]
    fn deterministic_substeps_match_fine_euler() {
        let sde = Linear { rate: 0.7, noise: false };
        let mut a = [2.0];
        substep_transition(&sde, &[], &mut a, 10, 0.05, &mut RngStream::new(0).rng()).unwrap();
        let mut b = 2.0f64;
        for _ in 0..10 {
            b += -0.7 * b * 0.05;
        }
        assert_eq!(a[0], b);
    }

    #[test]
    fn single_substep_is_one_step() {
        let sde = Linear { rate: 0.3, noise: true };
        let mut a = [1.0];
        let mut b = [1.0];
        substep_transition(&sde, &[], &mut a, 1, 0.2, &mut RngStream::new(5).rng()).unwrap();
        euler_maruyama_step(&sde, &[], &mut b, 0.2, &mut RngStream::new(5).rng()).unwrap();
        assert_eq!(a, b);
    }
}
