//! Metropolis-Hastings kernels on the log-parameter scale: random-walk
//! proposals, the delayed-acceptance kernel with a k-nearest-neighbour
//! log-likelihood surrogate, and batch chains (eMCMC, PMMH, exact-likelihood
//! MCMC).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dist::GammaPrior;
use crate::enkf::enkf_run;
use crate::error::{FilterError, Result};
use crate::kalman::kalman_filter_exact;
use crate::linalg::{psd_sqrt, symmetrise};
use crate::model::{Model, ModelObs, Observation};
use crate::pf::{pf_run, Bootstrap, Resampler};
use crate::rng::{Phase, RngStream};

/// Random-walk scaling `ζ²` recommended for pseudo-marginal chains.
pub fn default_zeta2(d: usize) -> f64 {
    2.56 * 2.56 / d as f64
}

/// Random-walk proposal `θ* = θ + ε`, `ε ~ N(0, ζ² V)` on log θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhProposalConfig {
    pub zeta2: f64,
    pub leave_one_out: bool,
}

impl MhProposalConfig {
    pub fn default_for(d: usize) -> Self {
        Self {
            zeta2: default_zeta2(d),
            leave_one_out: true,
        }
    }
}

/// Sample covariance (divisor N−1) of a cloud of points, optionally leaving
/// out point `exclude`.
pub fn proposal_covariance(cloud: &[Vec<f64>], exclude: Option<usize>) -> Result<DMatrix<f64>> {
    let shared = CloudScatter::new(cloud)?;
    shared.covariance(exclude)
}

/// Centred scatter of a cloud, from which the full and every leave-one-out
/// covariance follow by a rank-one downdate.
pub(crate) struct CloudScatter {
    centred: Vec<DVector<f64>>,
    scatter: DMatrix<f64>,
}

impl CloudScatter {
    pub(crate) fn new(cloud: &[Vec<f64>]) -> Result<Self> {
        let n = cloud.len();
        if n < 2 {
            return Err(FilterError::precondition("proposal covariance needs at least 2 points"));
        }
        let d = cloud[0].len();
        let mut mean = DVector::zeros(d);
        for p in cloud {
            mean += DVector::from_column_slice(p);
        }
        mean /= n as f64;
        let centred: Vec<DVector<f64>> = cloud.iter().map(|p| DVector::from_column_slice(p) - &mean).collect();
        let mut scatter = DMatrix::zeros(d, d);
        for c in &centred {
            scatter.ger(1.0, c, c, 1.0);
        }
        Ok(Self { centred, scatter })
    }

    pub(crate) fn covariance(&self, exclude: Option<usize>) -> Result<DMatrix<f64>> {
        let n = self.centred.len() as f64;
        let mut cov = match exclude {
            Some(i) if self.centred.len() >= 3 => {
                let c = &self.centred[i];
                let mut s = self.scatter.clone();
                s.ger(-n / (n - 1.0), c, c, 1.0);
                s / (n - 2.0)
            }
            _ => &self.scatter / (n - 1.0),
        };
        symmetrise(&mut cov);
        Ok(cov)
    }
}

/// `θ* = θ + L z` for a square root `L` of the proposal covariance.
pub fn rw_propose<R: Rng + ?Sized>(theta: &[f64], sqrt_cov: &DMatrix<f64>, rng: &mut R) -> Vec<f64> {
    let d = theta.len();
    let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let eps = sqrt_cov * z;
    theta.iter().zip(eps.iter()).map(|(t, e)| t + e).collect()
}

/// Square root of `ζ² V`.
pub fn proposal_sqrt(cov: &DMatrix<f64>, zeta2: f64) -> Result<DMatrix<f64>> {
    psd_sqrt(&(cov * zeta2))
}

/// `min(0, prior_lr + loglik_lr + proposal_lr)`.
pub fn mh_log_accept(prior_lr: f64, loglik_lr: f64, proposal_lr: f64) -> Result<f64> {
    if prior_lr.is_nan() || loglik_lr.is_nan() || proposal_lr.is_nan() {
        return Err(FilterError::NotANumber("acceptance ratio"));
    }
    let s = prior_lr + loglik_lr + proposal_lr;
    if s.is_nan() {
        return Err(FilterError::NotANumber("acceptance ratio"));
    }
    Ok(s.min(0.0))
}

/// Cheap approximation to the log-likelihood used for screening proposals.
pub trait Surrogate: Sync {
    fn loglik(&self, log_theta: &[f64]) -> f64;
}

/// Inverse-distance-weighted k-nearest-neighbour surrogate over the unique
/// resampled parameter particles and their log-likelihoods.
#[derive(Debug, Clone)]
pub struct SurrogateStore {
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    scale: Vec<f64>,
    k: usize,
}

impl SurrogateStore {
    /// Builds the store, removing duplicated parameter vectors. Distances are
    /// Euclidean after dividing each coordinate by its standard deviation
    /// over the unique points (a zero or undefined spread counts as 1).
    pub fn new(entries: impl IntoIterator<Item = (Vec<f64>, f64)>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(FilterError::precondition("k must be at least 1"));
        }
        let mut points: Vec<Vec<f64>> = Vec::new();
        let mut values = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (p, v) in entries {
            let key: Vec<u64> = p.iter().map(|x| x.to_bits()).collect();
            if seen.insert(key) {
                points.push(p);
                values.push(v);
            }
        }
        if points.is_empty() {
            return Err(FilterError::precondition("surrogate store is empty"));
        }
        let d = points[0].len();
        let m = points.len();
        let scale = (0..d)
            .map(|c| {
                if m < 2 {
                    return 1.0;
                }
                let mean = points.iter().map(|p| p[c]).sum::<f64>() / m as f64;
                let var = points.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
                let sd = var.sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { points, values, scale, k })
    }

    /// Same store with an explicit per-coordinate scale.
    pub fn with_scale(mut self, scale: Vec<f64>) -> Self {
        self.scale = scale;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// k-NN inverse-distance-weighted log-likelihood at `log_theta`. A query
/// that coincides with a stored point returns that point's value.
pub fn knn_surrogate_loglik(log_theta: &[f64], store: &SurrogateStore, k: usize) -> f64 {
    let k = k.min(store.points.len()).max(1);
    let mut nearest: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (j, p) in store.points.iter().enumerate() {
        let d2: f64 = p
            .iter()
            .zip(log_theta)
            .zip(&store.scale)
            .map(|((a, b), s)| ((a - b) / s).powi(2))
            .sum();
        if d2 == 0.0 {
            return store.values[j];
        }
        if nearest.len() < k || d2 < nearest[k - 1].0 {
            let pos = nearest.partition_point(|&(d, _)| d <= d2);
            nearest.insert(pos, (d2, j));
            nearest.truncate(k);
        }
    }
    let (num, den) = nearest.iter().fold((0.0, 0.0), |(num, den), &(d2, j)| {
        let w = 1.0 / d2.sqrt();
        (num + w * store.values[j], den + w)
    });
    num / den
}

impl Surrogate for SurrogateStore {
    fn loglik(&self, log_theta: &[f64]) -> f64 {
        knn_surrogate_loglik(log_theta, self, self.k)
    }
}

/// Any closure as a surrogate.
pub struct FnSurrogate<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> Surrogate for FnSurrogate<F> {
    fn loglik(&self, log_theta: &[f64]) -> f64 {
        (self.0)(log_theta)
    }
}

/// Expensive log-likelihood evaluation, typically a filter run from time 0.
pub trait Evaluator: Sync {
    /// Filter state carried alongside the estimate.
    type Output: Send;
    fn evaluate(&self, log_theta: &[f64], stream: RngStream) -> Result<(f64, Self::Output)>;
}

/// Any closure returning a log-likelihood as an evaluator without state.
pub struct FnEvaluator<F>(pub F);

impl<F: Fn(&[f64], RngStream) -> Result<f64> + Sync> Evaluator for FnEvaluator<F> {
    type Output = ();
    fn evaluate(&self, log_theta: &[f64], stream: RngStream) -> Result<(f64, ())> {
        Ok(((self.0)(log_theta, stream)?, ()))
    }
}

/// Current position of an MH chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState<O> {
    pub log_theta: Vec<f64>,
    pub loglik: f64,
    pub output: O,
}

/// Move statistics. Stage 1 counts proposals screened (every proposal under a
/// standard kernel); stage 2 counts evaluator calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MoveCounters {
    pub proposals: usize,
    pub stage1: usize,
    pub stage2: usize,
    pub accepted: usize,
    pub evaluator_failures: usize,
}

impl MoveCounters {
    pub fn merge(&mut self, other: &MoveCounters) {
        self.proposals += other.proposals;
        self.stage1 += other.stage1;
        self.stage2 += other.stage2;
        self.accepted += other.accepted;
        self.evaluator_failures += other.evaluator_failures;
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

fn evaluate_or_reject<E: Evaluator>(
    evaluator: &E,
    log_theta: &[f64],
    stream: RngStream,
    counters: &mut MoveCounters,
) -> Result<Option<(f64, E::Output)>> {
    counters.stage2 += 1;
    match evaluator.evaluate(log_theta, stream) {
        Ok((l, out)) if !l.is_nan() => Ok(Some((l, out))),
        Ok(_) => {
            counters.evaluator_failures += 1;
            Ok(None)
        }
        Err(e) if e.is_numerical() => {
            counters.evaluator_failures += 1;
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// One Metropolis-Hastings iteration in place. With a surrogate this is the
/// delayed-acceptance kernel: stage 1 screens with surrogate values at both
/// points and the evaluator is only called after a stage-1 acceptance.
///
/// Draws come from `stream`: the proposal from `Propose`, the stage-1 (or
/// single-stage) uniform from `Accept`, the stage-2 uniform from
/// `AcceptStage2` and the evaluator from `Evaluate`. Returns whether the
/// proposal was accepted.
pub fn mh_step<E: Evaluator>(
    state: &mut ChainState<E::Output>,
    prior: &GammaPrior,
    sqrt_cov: &DMatrix<f64>,
    evaluator: &E,
    surrogate: Option<&dyn Surrogate>,
    stream: RngStream,
    counters: &mut MoveCounters,
) -> Result<bool> {
    let proposal = rw_propose(&state.log_theta, sqrt_cov, &mut stream.phase(Phase::Propose).rng());
    let prior_lr = prior.log_density_log_scale(&proposal) - prior.log_density_log_scale(&state.log_theta);
    counters.proposals += 1;
    counters.stage1 += 1;
    let u1: f64 = stream.phase(Phase::Accept).rng().random();
    let accepted = match surrogate {
        None => {
            let Some((l, out)) = evaluate_or_reject(evaluator, &proposal, stream.phase(Phase::Evaluate), counters)? else {
                return Ok(false);
            };
            let log_a = mh_log_accept(prior_lr, l - state.loglik, 0.0)?;
            if u1.ln() < log_a {
                Some((l, out))
            } else {
                None
            }
        }
        Some(s) => {
            let s_star = s.loglik(&proposal);
            let s_cur = s.loglik(&state.log_theta);
            let surrogate_lr = s_star - s_cur;
            let log_a1 = mh_log_accept(prior_lr, if surrogate_lr.is_nan() { f64::NEG_INFINITY } else { surrogate_lr }, 0.0)?;
            if !(u1.ln() < log_a1) {
                return Ok(false);
            }
            let Some((l, out)) = evaluate_or_reject(evaluator, &proposal, stream.phase(Phase::Evaluate), counters)? else {
                return Ok(false);
            };
            let log_a2 = mh_log_accept(0.0, (l - state.loglik) - surrogate_lr, 0.0)?;
            let u2: f64 = stream.phase(Phase::AcceptStage2).rng().random();
            if u2.ln() < log_a2 {
                Some((l, out))
            } else {
                None
            }
        }
    };
    match accepted {
        Some((l, out)) => {
            state.log_theta = proposal;
            state.loglik = l;
            state.output = out;
            counters.accepted += 1;
            Ok(true)
        }
        None => Ok(false),
    }
}

/// Output of a batch MH chain.
#[derive(Debug, Clone)]
pub struct Chain {
    /// Retained log-parameter draws (after thinning).
    pub samples: Vec<Vec<f64>>,
    pub logliks: Vec<f64>,
    /// Accept/reject decision of every iteration.
    pub decisions: Vec<bool>,
    pub counters: MoveCounters,
}

impl Chain {
    pub fn acceptance_rate(&self) -> f64 {
        self.counters.acceptance_rate()
    }
}

/// Settings for a batch chain with a fixed proposal covariance.
#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub iterations: usize,
    pub thin: usize,
    /// Proposal covariance on log θ (already scaled).
    pub proposal_cov: DMatrix<f64>,
}

/// Random-walk MH chain from `init` (log scale). Iteration `i` uses
/// `stream.fork(i)`; the initial evaluation uses `stream.phase(Init)`.
pub fn mh_chain<E: Evaluator>(
    prior: &GammaPrior,
    evaluator: &E,
    init: &[f64],
    cfg: &ChainConfig,
    surrogate: Option<&dyn Surrogate>,
    stream: RngStream,
) -> Result<Chain> {
    let sqrt_cov = psd_sqrt(&cfg.proposal_cov)?;
    let (l0, out0) = evaluator.evaluate(init, stream.phase(Phase::Init))?;
    if !l0.is_finite() {
        return Err(FilterError::InvalidArgument("initial log-likelihood is not finite".into()));
    }
    let mut state = ChainState {
        log_theta: init.to_vec(),
        loglik: l0,
        output: out0,
    };
    let thin = cfg.thin.max(1);
    let mut chain = Chain {
        samples: Vec::with_capacity(cfg.iterations / thin + 1),
        logliks: Vec::with_capacity(cfg.iterations / thin + 1),
        decisions: Vec::with_capacity(cfg.iterations),
        counters: MoveCounters::default(),
    };
    for i in 0..cfg.iterations {
        let acc = mh_step(&mut state, prior, &sqrt_cov, evaluator, surrogate, stream.fork(i as u64), &mut chain.counters)?;
        chain.decisions.push(acc);
        if (i + 1) % thin == 0 {
            chain.samples.push(state.log_theta.clone());
            chain.logliks.push(state.loglik);
        }
    }
    Ok(chain)
}

fn natural(log_theta: &[f64]) -> Vec<f64> {
    log_theta.iter().map(|v| v.exp()).collect()
}

/// Exact Kalman-filter log-likelihood as an evaluator.
pub struct KalmanEvaluator<'a> {
    pub model: &'a dyn Model,
    pub data: &'a [Observation],
}

impl Evaluator for KalmanEvaluator<'_> {
    type Output = ();
    fn evaluate(&self, log_theta: &[f64], _stream: RngStream) -> Result<(f64, ())> {
        Ok((kalman_filter_exact(self.model, &natural(log_theta), self.data)?.loglik, ()))
    }
}

/// EnKF log-likelihood estimate as an evaluator.
pub struct EnkfEvaluator<'a> {
    pub model: &'a dyn Model,
    pub data: &'a [Observation],
    pub n: usize,
}

impl Evaluator for EnkfEvaluator<'_> {
    type Output = ();
    fn evaluate(&self, log_theta: &[f64], stream: RngStream) -> Result<(f64, ())> {
        let r = enkf_run(self.model, &natural(log_theta), self.n, self.data, &ModelObs(self.model), stream)?;
        Ok((r.loglik, ()))
    }
}

/// Bootstrap particle filter log-likelihood estimate as an evaluator.
pub struct PfEvaluator<'a> {
    pub model: &'a dyn Model,
    pub data: &'a [Observation],
    pub n: usize,
    pub resampler: Resampler,
}

impl Evaluator for PfEvaluator<'_> {
    type Output = ();
    fn evaluate(&self, log_theta: &[f64], stream: RngStream) -> Result<(f64, ())> {
        let r = pf_run(self.model, &natural(log_theta), self.n, self.data, &Bootstrap, self.resampler, stream)?;
        Ok((r.loglik, ()))
    }
}

/// Ensemble MCMC: MH on the EnKF likelihood.
pub fn emcmc_run(
    model: &dyn Model,
    data: &[Observation],
    n: usize,
    init: &[f64],
    cfg: &ChainConfig,
    stream: RngStream,
) -> Result<Chain> {
    mh_chain(model.prior(), &EnkfEvaluator { model, data, n }, init, cfg, None, stream)
}

/// Particle marginal MH on the bootstrap particle filter likelihood.
pub fn pmmh_run(
    model: &dyn Model,
    data: &[Observation],
    n: usize,
    init: &[f64],
    cfg: &ChainConfig,
    stream: RngStream,
) -> Result<Chain> {
    mh_chain(
        model.prior(),
        &PfEvaluator {
            model,
            data,
            n,
            resampler: Resampler::Multinomial,
        },
        init,
        cfg,
        None,
        stream,
    )
}

/// MH on the exact Kalman-filter likelihood.
pub fn exact_mcmc_run(model: &dyn Model, data: &[Observation], init: &[f64], cfg: &ChainConfig, stream: RngStream) -> Result<Chain> {
    mh_chain(model.prior(), &KalmanEvaluator { model, data }, init, cfg, None, stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_scale_proposal_is_identity() {
        let l = proposal_sqrt(&DMatrix::identity(2, 2), 0.0).unwrap();
        let t = rw_propose(&[0.3, -0.2], &l, &mut RngStream::new(1).rng());
        assert_eq!(t, vec![0.3, -0.2]);
    }

    #[test]
    fn default_scaling() {
        assert_relative_eq!(default_zeta2(3), 2.1845333333333334, epsilon = 1e-12);
    }

    #[test]
    fn leave_one_out_two_point_variance() {
        let cloud = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert_relative_eq!(proposal_covariance(&cloud, Some(1)).unwrap()[(0, 0)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(proposal_covariance(&cloud, None).unwrap()[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn leave_one_out_matches_direct() {
        let cloud: Vec<Vec<f64>> = (0..7).map(|i| vec![(i as f64 * 1.3).sin(), (i as f64 * 0.7).cos() * 2.0]).collect();
        for i in 0..7 {
            let rest: Vec<Vec<f64>> = cloud.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p.clone()).collect();
            let direct = proposal_covariance(&rest, None).unwrap();
            let loo = proposal_covariance(&cloud, Some(i)).unwrap();
            assert!((direct - loo).abs().max() < 1e-12);
        }
    }

    #[test]
    fn knn_examples() {
        let store = SurrogateStore::new(vec![(vec![0.0], -10.0), (vec![2.0], -20.0), (vec![5.0], -1.0)], 2).unwrap();
        assert_eq!(knn_surrogate_loglik(&[2.0], &store, 2), -20.0);
        assert_eq!(knn_surrogate_loglik(&[1.9], &store, 1), -20.0);
        let flat = SurrogateStore::new(vec![(vec![0.0], -10.0), (vec![2.0], -20.0), (vec![9.0], 0.0)], 2)
            .unwrap()
            .with_scale(vec![1.0]);
        assert_relative_eq!(knn_surrogate_loglik(&[1.0], &flat, 2), -15.0, epsilon = 1e-12);
    }

    #[test]
    fn store_deduplicates() {
        let store = SurrogateStore::new(vec![(vec![1.0], -3.0), (vec![1.0], -3.0), (vec![2.0], -4.0)], 3).unwrap();
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn accept_examples() {
        assert_eq!(mh_log_accept(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(mh_log_accept(f64::NEG_INFINITY, 0.0, 0.0).unwrap(), f64::NEG_INFINITY);
        assert_relative_eq!(mh_log_accept(2f64.ln(), 0.25f64.ln(), 0.0).unwrap(), 0.5f64.ln(), epsilon = 1e-15);
        assert!(mh_log_accept(f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn zero_variance_chain_is_constant() {
        let prior = GammaPrior::new(vec![(2.0, 2.0)]).unwrap();
        let ev = FnEvaluator(|lt: &[f64], _s: RngStream| Ok(-lt[0] * lt[0]));
        let cfg = ChainConfig {
            iterations: 50,
            thin: 1,
            proposal_cov: DMatrix::zeros(1, 1),
        };
        let chain = mh_chain(&prior, &ev, &[0.2], &cfg, None, RngStream::new(0)).unwrap();
        assert!(chain.samples.iter().all(|s| s[0] == 0.2));
        assert_eq!(chain.acceptance_rate(), 1.0);
    }
}
