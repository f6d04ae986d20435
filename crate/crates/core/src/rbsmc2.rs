//! Particle filters that use the EnKF update as their proposal, for models
//! whose observation density is not Gaussian.
//!
//! The Rao-Blackwellised weight of particle `j` at time `t` is
//! `ĝ(y_t | y_{0:t−1}) · f(y_t | x_t^j) / g(y_t | x_t^j)`: the EnKF
//! likelihood increment `ĝ` is common to all particles and `f / g` corrects
//! the Gaussian approximation `g` towards the true observation density `f`.
//! The transition density is never evaluated.
//!
//! The proposal update uses `(H, c R)`. The correction's `g` uses the same
//! `(H, c R)`, so `ĝ · f / g` remains an exact importance weight for the
//! inflated proposal.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::enkf::{enkf_init, enkf_step, kalman_gain};
use crate::error::{FilterError, Result};
use crate::filters::{run_nested, FilterRun, NestedConfig, StateFilter};
use crate::linalg::{cholesky_jittered, column_moments, gaussian_logpdf, gaussian_logpdf_chol, log_mean_exp, normal_logpdf, symmetrise};
use crate::model::{GaussianObs, Model, ObsBuilder, Observation, StateEnsemble};
use crate::pf::{pf_init, propagate_member, resample_multinomial, WeightedParticles};
use crate::rng::{Phase, RngStream};

/// Target Gaussian approximation `(H, R)` and the proposal inflation `c ≥ 1`.
pub struct ObsApprox<'a> {
    pub target: &'a dyn ObsBuilder,
    pub inflation: f64,
}

impl<'a> ObsApprox<'a> {
    pub fn new(target: &'a dyn ObsBuilder, inflation: f64) -> Result<Self> {
        if !(inflation >= 1.0) || !inflation.is_finite() {
            return Err(FilterError::InvalidArgument(format!(
                "proposal inflation must be a finite c >= 1, got {inflation}"
            )));
        }
        Ok(Self { target, inflation })
    }

    pub fn target_obs(&self, theta: &[f64], forecast_mean: &DVector<f64>) -> Result<GaussianObs> {
        self.target.build(theta, forecast_mean)
    }

    pub fn proposal_obs(&self, theta: &[f64], forecast_mean: &DVector<f64>) -> Result<GaussianObs> {
        Ok(self.target.build(theta, forecast_mean)?.inflated(self.inflation))
    }
}

impl ObsBuilder for ObsApprox<'_> {
    fn build(&self, theta: &[f64], forecast_mean: &DVector<f64>) -> Result<GaussianObs> {
        self.proposal_obs(theta, forecast_mean)
    }
}

/// The two factors of the Rao-Blackwellised weight.
#[derive(Debug, Clone, PartialEq)]
pub struct RbWeightParts {
    /// `log ĝ(y_t | y_{0:t−1})`, shared by all particles.
    pub common: f64,
    /// `log f(y_t | x_t^j) − log g(y_t | x_t^j)` per particle.
    pub corrections: Vec<f64>,
}

impl RbWeightParts {
    /// `log ĝ + log mean_j exp(correction_j)`.
    pub fn increment(&self) -> f64 {
        self.common + log_mean_exp(&self.corrections)
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.corrections.iter().map(|c| self.common + c).collect()
    }
}

/// Output of one RB particle filter step.
#[derive(Debug, Clone)]
pub struct RbStepOutput {
    pub particles: WeightedParticles,
    pub parts: RbWeightParts,
    /// The proposal `(H, c R)` used by the update.
    pub proposal_obs: GaussianObs,
    pub log_lik_increment: f64,
}

/// `log N(y; H x, R)`, evaluated component-wise when `R` is diagonal.
fn gaussian_obs_logpdf(obs: &GaussianObs, y: &DVector<f64>, x: &[f64]) -> Result<f64> {
    let hx = &obs.h * DVector::from_column_slice(x);
    let dy = y.len();
    let diagonal = (0..dy).all(|i| (0..dy).all(|j| i == j || obs.r[(i, j)] == 0.0));
    if diagonal {
        Ok((0..dy).map(|i| normal_logpdf(y[i], hx[i], obs.r[(i, i)])).sum())
    } else {
        gaussian_logpdf(y, &hx, &obs.r)
    }
}

fn corrections(
    model: &dyn Model,
    theta: &[f64],
    ens: &StateEnsemble,
    y: &Observation,
    obs: &GaussianObs,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ens.size());
    for j in 0..ens.size() {
        let x = ens.member(j);
        let c = model.obs_logpdf(theta, y.values.as_slice(), x) - gaussian_obs_logpdf(obs, &y.values, x)?;
        out.push(if c.is_nan() { f64::NEG_INFINITY } else { c });
    }
    Ok(out)
}

fn finish(particles: StateEnsemble, ancestors: Vec<usize>, parts: RbWeightParts, obs: GaussianObs, t: usize) -> Result<RbStepOutput> {
    let inc = parts.increment();
    if inc == f64::NEG_INFINITY {
        return Err(FilterError::ParticleCollapse { t });
    }
    if !inc.is_finite() {
        return Err(FilterError::NotANumber("RB particle filter increment"));
    }
    Ok(RbStepOutput {
        particles: WeightedParticles {
            particles,
            log_weights: parts.log_weights(),
            ancestors,
        },
        parts,
        proposal_obs: obs,
        log_lik_increment: inc,
    })
}

/// Time-0 step: EnKF analysis of a prior cloud as the proposal.
pub fn rb_pf_init(
    model: &dyn Model,
    theta: &[f64],
    n: usize,
    y0: &Observation,
    approx: &ObsApprox,
    stream: RngStream,
) -> Result<RbStepOutput> {
    let out = enkf_init(model, theta, n, y0, approx, stream)?;
    let corr = corrections(model, theta, &out.ensemble, y0, &out.obs)?;
    let parts = RbWeightParts {
        common: out.log_lik_increment,
        corrections: corr,
    };
    finish(out.ensemble, (0..n).collect(), parts, out.obs, y0.t)
}

/// Resample, run one EnKF step on the resampled cloud and weight by the
/// Rao-Blackwellised weight. When all previous weights are equal the cloud is
/// carried over unchanged.
pub fn rb_pf_step(
    model: &dyn Model,
    theta: &[f64],
    prev: &WeightedParticles,
    y_t: &Observation,
    approx: &ObsApprox,
    stream: RngStream,
) -> Result<RbStepOutput> {
    let n = prev.size();
    let t = y_t.t;
    let equal = prev.log_weights.iter().all(|w| w.to_bits() == prev.log_weights[0].to_bits()) && prev.log_weights[0].is_finite();
    let (resampled, ancestors) = if equal {
        (prev.particles.clone(), (0..n).collect())
    } else {
        let w = prev.normalised_weights().ok_or(FilterError::ParticleCollapse { t })?;
        let idx = resample_multinomial(&w, n, &mut stream.phase(Phase::Resample).rng())?;
        (prev.particles.select(&idx), idx)
    };
    let out = enkf_step(model, theta, &resampled, y_t, approx, stream)?;
    let corr = corrections(model, theta, &out.ensemble, y_t, &out.obs)?;
    let parts = RbWeightParts {
        common: out.log_lik_increment,
        corrections: corr,
    };
    finish(out.ensemble, ancestors, parts, out.obs, t)
}

/// Gaussian EnKF proposal `N(μ_a, Σ_a)` built from forecast moments.
pub struct Weight0Proposal {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Weight0Proposal {
    pub fn new(forecast_mean: &DVector<f64>, forecast_cov: &DMatrix<f64>, y: &DVector<f64>, obs: &GaussianObs) -> Result<Self> {
        let gain = kalman_gain(forecast_cov, obs)?;
        let mean = forecast_mean + &gain * (y - &obs.h * forecast_mean);
        let d = forecast_mean.len();
        let mut cov = (DMatrix::identity(d, d) - &gain * &obs.h) * forecast_cov;
        symmetrise(&mut cov);
        let chol = cholesky_jittered(&cov)?;
        Ok(Self { mean, cov, chol })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + self.chol.l_dirty().lower_triangle() * z
    }

    pub fn logpdf(&self, x: &DVector<f64>) -> f64 {
        gaussian_logpdf_chol(x, &self.mean, &self.chol)
    }
}

/// `log p(x_new | x_prev) + log f(y | x_new) − log ĝ(x_new)` where `ĝ` is the
/// EnKF Gaussian proposal built from the given forecast moments.
#[allow(clippy::too_many_arguments)]
pub fn enkf_proposal_weight0(
    model: &dyn Model,
    theta: &[f64],
    x_prev: &[f64],
    x_new: &[f64],
    forecast_mean: &DVector<f64>,
    forecast_cov: &DMatrix<f64>,
    y: &Observation,
    obs: &GaussianObs,
) -> Result<f64> {
    let q = Weight0Proposal::new(forecast_mean, forecast_cov, &y.values, obs)?;
    weight0_with(model, theta, x_prev, x_new, &q, y)
}

fn weight0_with(model: &dyn Model, theta: &[f64], x_prev: &[f64], x_new: &[f64], q: &Weight0Proposal, y: &Observation) -> Result<f64> {
    let lp = model
        .transition_logpdf(theta, x_new, x_prev)
        .ok_or_else(|| FilterError::Unsupported(format!("{} has no transition density", model.name())))?;
    Ok(lp + model.obs_logpdf(theta, y.values.as_slice(), x_new) - q.logpdf(&DVector::from_column_slice(x_new)))
}

/// Particle filter step with the Gaussian EnKF proposal and the plain
/// importance weight: resample, simulate a forecast cloud to fit the
/// proposal, draw new particles from it and weight them.
pub fn weight0_pf_step(
    model: &dyn Model,
    theta: &[f64],
    prev: &WeightedParticles,
    y_t: &Observation,
    approx: &ObsApprox,
    stream: RngStream,
) -> Result<(WeightedParticles, f64)> {
    if model.transition_logpdf(theta, prev.particles.member(0), prev.particles.member(0)).is_none() {
        return Err(FilterError::Unsupported(format!("{} has no transition density", model.name())));
    }
    let n = prev.size();
    let t = y_t.t;
    let w = prev.normalised_weights().ok_or(FilterError::ParticleCollapse { t })?;
    let ancestors = resample_multinomial(&w, n, &mut stream.phase(Phase::Resample).rng())?;
    let parents = prev.particles.select(&ancestors);
    let mut forecast = parents.clone();
    for j in 0..n {
        let mut rng = stream.fork(j as u64).phase(Phase::Forecast).rng();
        propagate_member(model, theta, forecast.member_mut(j), &mut rng, j, t)?;
    }
    let (mean, cov) = column_moments(forecast.matrix())?;
    let obs = approx.proposal_obs(theta, &mean)?;
    let q = Weight0Proposal::new(&mean, &cov, &y_t.values, &obs)?;
    let mut particles = parents.clone();
    let mut log_weights = Vec::with_capacity(n);
    for j in 0..n {
        let mut rng = stream.fork(j as u64).phase(Phase::Propagate).rng();
        let x = q.sample(&mut rng);
        let lw = weight0_with(model, theta, parents.member(j), x.as_slice(), &q, y_t)?;
        particles.member_mut(j).copy_from_slice(x.as_slice());
        log_weights.push(if lw.is_nan() { f64::NEG_INFINITY } else { lw });
    }
    let inc = log_mean_exp(&log_weights);
    if inc == f64::NEG_INFINITY {
        return Err(FilterError::ParticleCollapse { t });
    }
    Ok((
        WeightedParticles {
            particles,
            log_weights,
            ancestors,
        },
        inc,
    ))
}

/// Which importance weight an EnKF-proposal particle filter uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RbWeight {
    RaoBlackwell,
    Weight0,
}

/// EnKF-proposal particle filter as the inner filter of RB-SMC².
pub struct RbPfFilter<'a> {
    pub model: &'a dyn Model,
    pub approx: ObsApprox<'a>,
    pub weight: RbWeight,
}

impl StateFilter for RbPfFilter<'_> {
    type State = WeightedParticles;

    fn init(&self, theta: &[f64], n: usize, y0: &Observation, stream: RngStream) -> Result<(WeightedParticles, f64)> {
        match self.weight {
            RbWeight::RaoBlackwell => {
                let out = rb_pf_init(self.model, theta, n, y0, &self.approx, stream)?;
                Ok((out.particles, out.log_lik_increment))
            }
            RbWeight::Weight0 => pf_init(self.model, theta, n, y0, stream),
        }
    }

    fn step(&self, theta: &[f64], state: &WeightedParticles, y: &Observation, stream: RngStream) -> Result<(WeightedParticles, f64)> {
        match self.weight {
            RbWeight::RaoBlackwell => {
                let out = rb_pf_step(self.model, theta, state, y, &self.approx, stream)?;
                Ok((out.particles, out.log_lik_increment))
            }
            RbWeight::Weight0 => weight0_pf_step(self.model, theta, state, y, &self.approx, stream),
        }
    }
}

/// RB-SMC²: the resample-move parameter filter with the RB particle filter
/// inside.
pub fn rbsmc2_run(
    model: &dyn Model,
    approx: ObsApprox,
    data: &[Observation],
    cfg: &NestedConfig,
    base: RngStream,
) -> Result<FilterRun<WeightedParticles>> {
    let filter = RbPfFilter {
        model,
        approx,
        weight: RbWeight::RaoBlackwell,
    };
    run_nested(model, &filter, data, cfg, base)
}
