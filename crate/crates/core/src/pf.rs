//! Particle filter with multinomial or systematic resampling and the unbiased
//! observed-data likelihood estimator.

use rand::Rng;

use crate::error::{FilterError, Result};
use crate::linalg::log_mean_exp;
use crate::model::{Model, Observation, StateEnsemble};
use crate::rng::{Phase, RngStream, StreamRng};

/// Tolerance on the weight sum accepted as "normalised".
const NORMALISED_TOL: f64 = 1e-9;

/// Effective sample size `1 / Σ w_i²` of normalised weights.
pub fn ess(weights: &[f64]) -> Result<f64> {
    check_normalised(weights)?;
    Ok(1.0 / weights.iter().map(|w| w * w).sum::<f64>())
}

/// Effective sample size straight from log-weights. Zero when every weight
/// is zero.
pub fn ess_from_log(log_w: &[f64]) -> f64 {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return 0.0;
    }
    let (s, s2) = log_w.iter().fold((0.0, 0.0), |(s, s2), &lw| {
        let w = (lw - max).exp();
        (s + w, s2 + w * w)
    });
    s * s / s2
}

fn check_normalised(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(FilterError::precondition("empty weight vector"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(FilterError::precondition("weights must be nonnegative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > NORMALISED_TOL {
        return Err(FilterError::precondition(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// Resampling scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resampler {
    #[default]
    Multinomial,
    Systematic,
}

impl Resampler {
    pub fn resample(self, weights: &[f64], count: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
        match self {
            Resampler::Multinomial => resample_multinomial(weights, count, rng),
            Resampler::Systematic => resample_systematic(weights, count, rng),
        }
    }
}

fn cumulative(weights: &[f64], count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(FilterError::precondition("resample count must be at least 1"));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(FilterError::precondition("cannot resample all-zero weights"));
    }
    check_normalised(weights)?;
    let mut acc = 0.0;
    let cdf = weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    Ok(cdf)
}

/// Index into the cumulative weights for a position in `[0, total)`. Never
/// returns an index with zero weight.
fn locate(cdf: &[f64], weights: &[f64], u: f64) -> usize {
    let total = *cdf.last().expect("nonempty");
    let u = u * total;
    let mut j = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
    while weights[j] == 0.0 && j > 0 {
        j -= 1;
    }
    while weights[j] == 0.0 {
        j += 1;
    }
    j
}

/// `count` independent draws from the categorical distribution `weights`.
pub fn resample_multinomial<R: Rng + ?Sized>(weights: &[f64], count: usize, rng: &mut R) -> Result<Vec<usize>> {
    let cdf = cumulative(weights, count)?;
    Ok((0..count).map(|_| locate(&cdf, weights, rng.random::<f64>())).collect())
}

/// Systematic resampling: one uniform offset, `count` evenly spaced positions.
pub fn resample_systematic<R: Rng + ?Sized>(weights: &[f64], count: usize, rng: &mut R) -> Result<Vec<usize>> {
    let cdf = cumulative(weights, count)?;
    let u0: f64 = rng.random();
    Ok((0..count)
        .map(|i| locate(&cdf, weights, (i as f64 + u0) / count as f64))
        .collect())
}

/// A particle cloud with its unnormalised log-weights and the ancestor
/// indices of the most recent resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedParticles {
    pub particles: StateEnsemble,
    pub log_weights: Vec<f64>,
    pub ancestors: Vec<usize>,
}

impl WeightedParticles {
    pub fn size(&self) -> usize {
        self.particles.size()
    }

    pub fn normalised_weights(&self) -> Option<Vec<f64>> {
        crate::linalg::normalise_log_weights(&self.log_weights)
    }
}

/// Proposal `q(x_t | x_{t-1}, y_t)` for the particle filter.
pub trait Proposal: Sync {
    /// The bootstrap proposal `q = p` never evaluates the transition density.
    fn is_bootstrap(&self) -> bool;

    /// Draws `x_t` in place over `x` (which holds `x_{t-1}` on entry).
    fn sample(&self, model: &dyn Model, theta: &[f64], y: &[f64], x: &mut [f64], rng: &mut StreamRng) -> Result<()>;

    /// `log q(x_new | x_prev, y)`.
    fn logpdf(&self, model: &dyn Model, theta: &[f64], y: &[f64], x_new: &[f64], x_prev: &[f64]) -> f64;
}

/// The transition density itself as proposal.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bootstrap;

impl Proposal for Bootstrap {
    fn is_bootstrap(&self) -> bool {
        true
    }

    fn sample(&self, model: &dyn Model, theta: &[f64], _y: &[f64], x: &mut [f64], rng: &mut StreamRng) -> Result<()> {
        model.sample_transition(theta, x, rng)
    }

    fn logpdf(&self, model: &dyn Model, theta: &[f64], _y: &[f64], x_new: &[f64], x_prev: &[f64]) -> f64 {
        model.transition_logpdf(theta, x_new, x_prev).unwrap_or(f64::NAN)
    }
}

/// Advances one member by the model transition, mapping any failure to a
/// [`FilterError::TransitionFailure`] naming the member.
pub(crate) fn propagate_member(
    model: &dyn Model,
    theta: &[f64],
    x: &mut [f64],
    rng: &mut StreamRng,
    member: usize,
    t: usize,
) -> Result<()> {
    match model.sample_transition(theta, x, rng) {
        Ok(()) if x.iter().all(|v| v.is_finite()) => Ok(()),
        _ => Err(FilterError::TransitionFailure { member, t }),
    }
}

/// `log mean exp` of log-weights, failing on total collapse.
pub(crate) fn increment_or_collapse(log_w: &[f64], t: usize) -> Result<f64> {
    let inc = log_mean_exp(log_w);
    if inc.is_finite() {
        Ok(inc)
    } else if inc == f64::INFINITY {
        Err(FilterError::NotANumber("particle weights"))
    } else {
        Err(FilterError::ParticleCollapse { t })
    }
}

fn sanitise(lw: f64) -> f64 {
    if lw.is_nan() {
        f64::NEG_INFINITY
    } else {
        lw
    }
}

/// Time-0 step: draw `x_0^j ~ p_0` and weight by `f(y_0 | x_0^j)`.
pub fn pf_init(model: &dyn Model, theta: &[f64], n: usize, y0: &Observation, stream: RngStream) -> Result<(WeightedParticles, f64)> {
    if n == 0 {
        return Err(FilterError::precondition("particle filter needs at least one particle"));
    }
    let d = model.state_dim();
    let mut particles = StateEnsemble::new(nalgebra::DMatrix::zeros(d, n));
    let y = y0.values.as_slice();
    let mut log_weights = Vec::with_capacity(n);
    for j in 0..n {
        let mut rng = stream.fork(j as u64).phase(Phase::Init).rng();
        let x = particles.member_mut(j);
        model.sample_initial(theta, &mut rng, x);
        log_weights.push(sanitise(model.obs_logpdf(theta, y, x)));
    }
    let inc = increment_or_collapse(&log_weights, y0.t)?;
    Ok((
        WeightedParticles {
            particles,
            log_weights,
            ancestors: (0..n).collect(),
        },
        inc,
    ))
}

/// One step of the particle filter: resample, propagate, weight.
pub fn pf_step(
    model: &dyn Model,
    theta: &[f64],
    prev: &WeightedParticles,
    y_t: &Observation,
    proposal: &dyn Proposal,
    resampler: Resampler,
    stream: RngStream,
) -> Result<(WeightedParticles, f64)> {
    let n = prev.size();
    let t = y_t.t;
    let w = prev
        .normalised_weights()
        .ok_or(FilterError::ParticleCollapse { t })?;
    let ancestors = resampler.resample(&w, n, &mut stream.phase(Phase::Resample).rng())?;
    let mut particles = prev.particles.select(&ancestors);
    let y = y_t.values.as_slice();
    let mut log_weights = Vec::with_capacity(n);
    let mut x_prev = vec![0.0; particles.dim()];
    for j in 0..n {
        let mut rng = stream.fork(j as u64).phase(Phase::Propagate).rng();
        let x = particles.member_mut(j);
        let lw = if proposal.is_bootstrap() {
            propagate_member(model, theta, x, &mut rng, j, t)?;
            model.obs_logpdf(theta, y, x)
        } else {
            x_prev.copy_from_slice(x);
            proposal
                .sample(model, theta, y, x, &mut rng)
                .map_err(|_| FilterError::TransitionFailure { member: j, t })?;
            if !x.iter().all(|v| v.is_finite()) {
                return Err(FilterError::TransitionFailure { member: j, t });
            }
            let lp = model.transition_logpdf(theta, x, &x_prev).ok_or_else(|| {
                FilterError::Unsupported(format!("guided proposal needs the transition density of {}", model.name()))
            })?;
            model.obs_logpdf(theta, y, x) + lp - proposal.logpdf(model, theta, y, x, &x_prev)
        };
        log_weights.push(sanitise(lw));
    }
    let inc = increment_or_collapse(&log_weights, t)?;
    Ok((
        WeightedParticles {
            particles,
            log_weights,
            ancestors,
        },
        inc,
    ))
}

/// Output of a full particle filter pass.
#[derive(Debug, Clone)]
pub struct PfRun {
    pub loglik: f64,
    pub increments: Vec<f64>,
    pub particles: WeightedParticles,
}

/// Particle filter over `data`. Step `k` uses `stream.fork(k)`.
pub fn pf_run(
    model: &dyn Model,
    theta: &[f64],
    n: usize,
    data: &[Observation],
    proposal: &dyn Proposal,
    resampler: Resampler,
    stream: RngStream,
) -> Result<PfRun> {
    let (first, rest) = data
        .split_first()
        .ok_or_else(|| FilterError::precondition("particle filter needs at least one observation"))?;
    let (mut particles, inc) = pf_init(model, theta, n, first, stream.fork(0))?;
    let mut increments = Vec::with_capacity(data.len());
    increments.push(inc);
    for (k, obs) in rest.iter().enumerate() {
        let (next, inc) = pf_step(model, theta, &particles, obs, proposal, resampler, stream.fork(k as u64 + 1))?;
        particles = next;
        increments.push(inc);
    }
    Ok(PfRun {
        loglik: increments.iter().sum(),
        increments,
        particles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ess_examples() {
        let m = 1000;
        assert_relative_eq!(ess(&vec![1.0 / m as f64; m]).unwrap(), 1000.0, epsilon = 1e-8);
        assert_relative_eq!(ess(&[0.0, 1.0, 0.0]).unwrap(), 1.0);
        assert_relative_eq!(ess(&[0.5, 0.5, 0.0, 0.0]).unwrap(), 2.0);
        assert!(ess(&[0.5, 0.6]).is_err());
        assert!(ess(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn ess_from_log_agrees() {
        let lw = [-1.0, -2.0, -0.5, -7.0];
        let w = crate::linalg::normalise_log_weights(&lw).unwrap();
        assert_relative_eq!(ess_from_log(&lw), ess(&w).unwrap(), epsilon = 1e-12);
        assert_eq!(ess_from_log(&[f64::NEG_INFINITY; 3]), 0.0);
    }

    #[test]
    fn one_hot_resampling() {
        let mut rng = RngStream::new(3).rng();
        let w = [0.0, 0.0, 1.0, 0.0];
        assert!(resample_multinomial(&w, 50, &mut rng).unwrap().iter().all(|&i| i == 2));
        assert!(resample_systematic(&w, 50, &mut rng).unwrap().iter().all(|&i| i == 2));
    }

    #[test]
    fn uniform_multinomial_counts() {
        let mut rng = RngStream::new(11).rng();
        let n = 100_000;
        let idx = resample_multinomial(&[0.25; 4], n, &mut rng).unwrap();
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for k in 0..4 {
            let c = idx.iter().filter(|&&i| i == k).count() as f64;
            assert!((c - 25_000.0).abs() < 4.0 * sd, "index {k}: {c}");
        }
    }

    #[test]
    fn systematic_dyadic_is_exact() {
        for seed in 0..20 {
            let mut rng = RngStream::new(seed).rng();
            let mut idx = resample_systematic(&[0.5, 0.5], 4, &mut rng).unwrap();
            idx.sort_unstable();
            assert_eq!(idx, vec![0, 0, 1, 1]);
        }
    }

    #[test]
    fn resampling_rejects_bad_weights() {
        let mut rng = RngStream::new(0).rng();
        assert!(resample_multinomial(&[0.0, 0.0], 3, &mut rng).is_err());
        assert!(resample_multinomial(&[0.5, 0.5], 0, &mut rng).is_err());
        assert!(resample_systematic(&[0.2, 0.2], 3, &mut rng).is_err());
    }
}
