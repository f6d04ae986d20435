//! Gamma densities and the independent-Gamma parameter prior.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::ln_gamma;

use crate::error::{FilterError, Result};

/// Log density of Gamma(shape, rate) at `x`.
pub fn gamma_logpdf(x: f64, shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) {
        return Err(FilterError::InvalidArgument(format!(
            "gamma shape and rate must be positive (shape={shape}, rate={rate})"
        )));
    }
    if !(x > 0.0) {
        return Err(FilterError::InvalidArgument(format!("gamma density evaluated at x={x}")));
    }
    Ok(shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x)
}

/// One draw from Gamma(shape, rate).
pub fn gamma_sample<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0 && rate.is_finite()) {
        return Err(FilterError::InvalidArgument(format!(
            "gamma shape and rate must be positive (shape={shape}, rate={rate})"
        )));
    }
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| {
        FilterError::InvalidArgument(format!("gamma(shape={shape}, rate={rate}): {e}"))
    })?;
    Ok(g.sample(rng))
}

/// Independent Gamma(shape, rate) priors, one per parameter component.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaPrior {
    components: Vec<(f64, f64)>,
}

impl GammaPrior {
    pub fn new(components: Vec<(f64, f64)>) -> Result<Self> {
        for &(a, b) in &components {
            if !(a > 0.0 && b > 0.0) {
                return Err(FilterError::InvalidArgument(format!(
                    "gamma prior needs positive shape and rate, got ({a}, {b})"
                )));
            }
        }
        Ok(Self { components })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[(f64, f64)] {
        &self.components
    }

    /// Prior means on the natural scale.
    pub fn means(&self) -> Vec<f64> {
        self.components.iter().map(|(a, b)| a / b).collect()
    }

    /// Density of `log θ` (natural-scale density plus the log Jacobian Σ log θ_i).
    pub fn log_density_log_scale(&self, log_theta: &[f64]) -> f64 {
        debug_assert_eq!(log_theta.len(), self.components.len());
        self.components
            .iter()
            .zip(log_theta)
            .map(|(&(a, b), &lt)| {
                // shape*log(rate) - lnΓ(shape) + shape*lt - rate*exp(lt)
                let x = lt.exp();
                if !lt.is_finite() {
                    return f64::NEG_INFINITY;
                }
                a * b.ln() - ln_gamma(a) + a * lt - b * x
            })
            .sum()
    }

    /// Draw `log θ` from the prior.
    pub fn sample_log<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.components
            .iter()
            .map(|&(a, b)| {
                let x = Gamma::new(a, 1.0 / b).expect("validated at construction").sample(rng);
                x.max(f64::MIN_POSITIVE).ln()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use approx::assert_relative_eq;

    #[test]
    fn exponential_special_case() {
        for &(lambda, x) in &[(0.5, 1.0), (3.0, 0.2), (1.0, 7.0)] {
            let v = gamma_logpdf(x, 1.0, lambda).unwrap();
            assert_relative_eq!(v, f64::ln(lambda) - lambda * x, epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_two_rate_two_at_one() {
        assert_relative_eq!(gamma_logpdf(1.0, 2.0, 2.0).unwrap(), 4f64.ln() - 2.0, epsilon = 1e-12);
        assert_relative_eq!(gamma_logpdf(1.0, 2.0, 2.0).unwrap(), -0.613_705_638_880_109_4, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gamma_logpdf(-1.0, 2.0, 2.0).is_err());
        assert!(gamma_logpdf(1.0, 0.0, 2.0).is_err());
        assert!(gamma_logpdf(1.0, 2.0, -2.0).is_err());
        assert!(gamma_sample(2.0, 0.0, &mut RngStream::new(0).rng()).is_err());
        assert!(GammaPrior::new(vec![(1.0, -1.0)]).is_err());
    }

    #[test]
    fn sampler_mean_is_shape_over_rate() {
        let mut rng = RngStream::new(42).rng();
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| gamma_sample(5.0, 3.0, &mut rng).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = (5.0f64).sqrt() / 3.0 / (n as f64).sqrt();
        assert!((mean - 5.0 / 3.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn log_scale_density_includes_jacobian() {
        let p = GammaPrior::new(vec![(2.0, 2.0), (5.0, 3.0)]).unwrap();
        let theta = [0.7, 1.9];
        let lt: Vec<f64> = theta.iter().map(|t: &f64| t.ln()).collect();
        let direct: f64 = gamma_logpdf(0.7, 2.0, 2.0).unwrap() + gamma_logpdf(1.9, 5.0, 3.0).unwrap() + lt.iter().sum::<f64>();
        assert_relative_eq!(p.log_density_log_scale(&lt), direct, epsilon = 1e-12);
    }
}
