//! Parameter filters: a weighted cloud of parameter particles, each carrying
//! its own state filter.
//!
//! [`run_nested`] is the resample-move scheme shared by SMC² (particle filter
//! inside), the nested EnKF (EnKF inside) and RB-SMC² (EnKF-proposal particle
//! filter inside); [`penkf_run`] is the Liu-West particle EnKF.
//!
//! Random streams: particle `i` draws its prior sample from
//! `base.substream(i, 0, Prior)`, its time-`t` filter step from
//! `base.substream(i, t, Weight)`, its move iteration `j` from
//! `base.substream(0, t, Move).fork(j).fork(i)` and its ensemble exchange
//! from `base.substream(i, t, Exchange)`.

use std::collections::HashSet;
use std::time::Instant;

use rayon::prelude::*;

use crate::enkf::{enkf_init, enkf_step, liu_west_shrink, LiuWestConfig};
use crate::error::{FilterError, Result};
use crate::linalg::normalise_log_weights;
use crate::model::{Model, ObsBuilder, Observation, StateEnsemble};
use crate::pf::{ess_from_log, pf_init, pf_step, resample_multinomial, Bootstrap, Resampler, WeightedParticles};
use crate::rejuvenate::{mh_step, ChainState, CloudScatter, Evaluator, MhProposalConfig, MoveCounters, SurrogateStore};
use crate::rng::{Phase, RngStream};
use crate::summary::{summarise, weighted_mean_vector, ComponentSummary};

/// A filter over latent states for a fixed parameter vector.
pub trait StateFilter: Sync {
    type State: Clone + Send + Sync;

    fn init(&self, theta: &[f64], n: usize, y0: &Observation, stream: RngStream) -> Result<(Self::State, f64)>;

    fn step(&self, theta: &[f64], state: &Self::State, y: &Observation, stream: RngStream) -> Result<(Self::State, f64)>;

    /// Run from time 0 over `data`: initialise with `stream.fork(0)` and take
    /// step `k` with `stream.fork(k)`.
    fn run(&self, theta: &[f64], n: usize, data: &[Observation], stream: RngStream) -> Result<(Self::State, Vec<f64>)> {
        let (first, rest) = data
            .split_first()
            .ok_or_else(|| FilterError::precondition("filter needs at least one observation"))?;
        let (mut state, inc) = self.init(theta, n, first, stream.fork(0))?;
        let mut incs = Vec::with_capacity(data.len());
        incs.push(inc);
        for (k, y) in rest.iter().enumerate() {
            let (next, inc) = self.step(theta, &state, y, stream.fork(k as u64 + 1))?;
            state = next;
            incs.push(inc);
        }
        Ok((state, incs))
    }
}

/// EnKF as the inner filter (nested EnKF).
pub struct EnkfFilter<'a> {
    pub model: &'a dyn Model,
    pub obs: &'a dyn ObsBuilder,
}

impl StateFilter for EnkfFilter<'_> {
    type State = StateEnsemble;

    fn init(&self, theta: &[f64], n: usize, y0: &Observation, stream: RngStream) -> Result<(StateEnsemble, f64)> {
        let out = enkf_init(self.model, theta, n, y0, self.obs, stream)?;
        Ok((out.ensemble, out.log_lik_increment))
    }

    fn step(&self, theta: &[f64], state: &StateEnsemble, y: &Observation, stream: RngStream) -> Result<(StateEnsemble, f64)> {
        let out = enkf_step(self.model, theta, state, y, self.obs, stream)?;
        Ok((out.ensemble, out.log_lik_increment))
    }
}

/// Bootstrap particle filter as the inner filter (SMC²).
pub struct PfFilter<'a> {
    pub model: &'a dyn Model,
    pub resampler: Resampler,
}

impl StateFilter for PfFilter<'_> {
    type State = WeightedParticles;

    fn init(&self, theta: &[f64], n: usize, y0: &Observation, stream: RngStream) -> Result<(WeightedParticles, f64)> {
        pf_init(self.model, theta, n, y0, stream)
    }

    fn step(&self, theta: &[f64], state: &WeightedParticles, y: &Observation, stream: RngStream) -> Result<(WeightedParticles, f64)> {
        pf_step(self.model, theta, state, y, &Bootstrap, self.resampler, stream)
    }
}

/// A particle's filter state and how it was produced: a run from time 0
/// over the first `root_len` observations with stream `root`, followed by
/// single steps with the streams in `steps`.
#[derive(Debug, Clone)]
pub struct Trace<S> {
    pub state: S,
    pub increments: Vec<f64>,
    pub n: usize,
    pub root: RngStream,
    pub root_len: usize,
    pub steps: Vec<RngStream>,
}

/// One weighted parameter particle.
#[derive(Debug, Clone)]
pub struct ParamParticle<S> {
    pub chain: ChainState<Trace<S>>,
    pub log_weight: f64,
    /// Set when a weighting step failed numerically (weight is then zero).
    pub failed: bool,
}

impl<S> ParamParticle<S> {
    pub fn log_theta(&self) -> &[f64] {
        &self.chain.log_theta
    }

    pub fn theta(&self) -> Vec<f64> {
        self.chain.log_theta.iter().map(|v| v.exp()).collect()
    }

    pub fn loglik(&self) -> f64 {
        self.chain.loglik
    }

    pub fn trace(&self) -> &Trace<S> {
        &self.chain.output
    }
}

/// The weighted cloud of parameter particles.
#[derive(Debug, Clone)]
pub struct ParamParticleSystem<S> {
    pub particles: Vec<ParamParticle<S>>,
    /// Current ensemble size / number of state particles.
    pub n: usize,
    /// Number of observations assimilated.
    pub len: usize,
}

impl<S> ParamParticleSystem<S> {
    pub fn log_weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight).collect()
    }

    pub fn normalised_weights(&self) -> Option<Vec<f64>> {
        normalise_log_weights(&self.log_weights())
    }

    pub fn ess(&self) -> f64 {
        ess_from_log(&self.log_weights())
    }

    pub fn log_thetas(&self) -> Vec<Vec<f64>> {
        self.particles.iter().map(|p| p.chain.log_theta.clone()).collect()
    }

    pub fn unique_count(&self) -> usize {
        unique_count(self.particles.iter().map(|p| p.log_theta()))
    }

    /// Weighted summaries of each log-parameter.
    pub fn summaries(&self) -> Result<Vec<ComponentSummary>> {
        let w = self.normalised_weights().ok_or(FilterError::ParticleCollapse { t: self.len })?;
        summarise(&self.log_thetas(), &w)
    }

    /// Weighted mean of log θ.
    pub fn mean_log_theta(&self) -> Result<Vec<f64>> {
        let w = self.normalised_weights().ok_or(FilterError::ParticleCollapse { t: self.len })?;
        Ok(weighted_mean_vector(&self.log_thetas(), &w))
    }
}

fn unique_count<'a>(points: impl Iterator<Item = &'a [f64]>) -> usize {
    points
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

/// `σ̂²_N` threshold used by the default rule and by forced values under
/// other rules.
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 1.5;

/// Rule for growing the inner ensemble size after a move sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdaptRule {
    Off,
    /// Estimate `σ̂²_N` from `runs` filter runs at the posterior mean; when it
    /// exceeds `threshold`, set `N ← ceil(σ̂²_N N)`.
    Variance { threshold: f64, runs: usize },
    /// Double `N` when the move acceptance rate falls below `threshold`.
    AcceptanceDoubling { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerConfig {
    /// Resample-move when `ESS < γ M`.
    pub gamma: f64,
    pub adapt: AdaptRule,
    pub n_max: usize,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.4,
            adapt: AdaptRule::Variance {
                threshold: DEFAULT_VARIANCE_THRESHOLD,
                runs: 10,
            },
            n_max: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoveConfig {
    pub proposal: MhProposalConfig,
    pub iterations: usize,
    pub delayed_acceptance: bool,
    pub k: usize,
}

impl MoveConfig {
    pub fn default_for(d: usize) -> Self {
        Self {
            proposal: MhProposalConfig::default_for(d),
            iterations: 1,
            delayed_acceptance: true,
            k: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NestedConfig {
    pub m: usize,
    pub n0: usize,
    pub trigger: TriggerConfig,
    pub moves: MoveConfig,
    /// Every particle uses particle 0's weighting streams. Only useful for
    /// checking symmetry properties.
    pub shared_streams: bool,
    /// Use this `σ̂²_N` at the given step index instead of estimating it. The
    /// adaptation rule then runs at that step whether or not a move happened.
    pub sigma2_override: Option<(usize, f64)>,
}

/// Normalised weights and ensemble sizes around a dynamic-N exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub n_before: usize,
    pub n_after: usize,
    pub weights_before: Vec<f64>,
    pub weights_after: Vec<f64>,
}

/// Diagnostics for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub t: usize,
    pub ess: f64,
    pub resampled: bool,
    pub moved: bool,
    pub acceptance_rate: f64,
    pub stage1: usize,
    pub stage2: usize,
    /// Ensemble size in force at the end of the step.
    pub n: usize,
    pub sigma2: Option<f64>,
    pub unique_before_move: usize,
    pub unique_after_move: usize,
    /// Particles whose weighting or exchange rerun failed numerically.
    pub weight_failures: usize,
    pub evaluator_failures: usize,
    pub n_capped: bool,
    pub exchange: Option<Exchange>,
    /// Wall-clock time of the step in milliseconds.
    pub wall_ms: f64,
}

/// Output of a parameter-filter run.
#[derive(Debug, Clone)]
pub struct FilterRun<S> {
    pub records: Vec<RunRecord>,
    /// Weighted summaries of each log-parameter after each step.
    pub summaries: Vec<Vec<ComponentSummary>>,
    pub system: ParamParticleSystem<S>,
}

/// Runs the filter from time 0 and packages the result as a [`Trace`].
struct MoveEvaluator<'a, F: StateFilter> {
    filter: &'a F,
    data: &'a [Observation],
    n: usize,
}

impl<F: StateFilter> Evaluator for MoveEvaluator<'_, F> {
    type Output = Trace<F::State>;

    fn evaluate(&self, log_theta: &[f64], stream: RngStream) -> Result<(f64, Trace<F::State>)> {
        let theta: Vec<f64> = log_theta.iter().map(|v| v.exp()).collect();
        let (state, increments) = self.filter.run(&theta, self.n, self.data, stream)?;
        let loglik = increments.iter().sum();
        Ok((
            loglik,
            Trace {
                state,
                increments,
                n: self.n,
                root: stream,
                root_len: self.data.len(),
                steps: Vec::new(),
            },
        ))
    }
}

/// Sample variance of the log-likelihood over `r` runs of the filter at
/// `log_theta`. Runs that fail numerically are dropped.
pub fn estimate_sigma2_n<F: StateFilter>(
    filter: &F,
    log_theta: &[f64],
    data: &[Observation],
    n: usize,
    r: usize,
    stream: RngStream,
) -> Result<f64> {
    if r < 2 {
        return Err(FilterError::precondition("variance estimation needs r >= 2 runs"));
    }
    let theta: Vec<f64> = log_theta.iter().map(|v| v.exp()).collect();
    let runs: Vec<Result<f64>> = (0..r)
        .into_par_iter()
        .map(|k| Ok(filter.run(&theta, n, data, stream.fork(k as u64))?.1.iter().sum()))
        .collect();
    let mut ls = Vec::with_capacity(r);
    for run in runs {
        match run {
            Ok(l) if f64::is_finite(l) => ls.push(l),
            Ok(_) => {}
            Err(e) if e.is_numerical() => {}
            Err(e) => return Err(e),
        }
    }
    if ls.len() < 2 {
        return Err(FilterError::precondition(format!(
            "only {} of {r} variance-estimation runs succeeded",
            ls.len()
        )));
    }
    let mean = ls.iter().sum::<f64>() / ls.len() as f64;
    Ok(ls.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (ls.len() - 1) as f64)
}

/// `ceil(σ̂² N)` capped at `n_max`; `None` when `σ̂²` does not exceed the
/// threshold. The flag reports whether the cap was hit.
pub fn adapted_size(sigma2: f64, n: usize, threshold: f64, n_max: usize) -> Option<(usize, bool)> {
    if !(sigma2 > threshold) {
        return None;
    }
    let raw = (sigma2 * n as f64).ceil();
    if raw > n_max as f64 {
        Some((n_max, true))
    } else {
        Some((raw as usize, false))
    }
}

/// Replaces every particle's filter by a fresh run from time 0 with `new_n`
/// members. Weights are left untouched (the exchange has incremental weight 1);
/// cumulative log-likelihoods are those of the new runs. A particle whose
/// rerun fails numerically keeps its old trace, gets weight zero and is
/// marked failed; the number of such particles is returned.
pub fn adapt_n<F: StateFilter>(
    system: &mut ParamParticleSystem<F::State>,
    filter: &F,
    data: &[Observation],
    new_n: usize,
    stream: RngStream,
) -> Result<usize> {
    let t = system.len - 1;
    let data = &data[..system.len];
    let ev = MoveEvaluator { filter, data, n: new_n };
    let results: Vec<Result<(f64, Trace<F::State>)>> = system
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| ev.evaluate(&p.chain.log_theta, stream.substream(i, t, Phase::Exchange)))
        .collect();
    let mut failures = 0;
    for (p, r) in system.particles.iter_mut().zip(results) {
        match r {
            Ok((l, trace)) if !l.is_nan() => {
                p.chain.loglik = l;
                p.chain.output = trace;
            }
            Ok(_) => failures += 1,
            Err(e) if e.is_numerical() => failures += 1,
            Err(e) => return Err(e),
        }
        if p.chain.output.n != new_n && !p.failed {
            p.log_weight = f64::NEG_INFINITY;
            p.chain.loglik = f64::NEG_INFINITY;
            p.failed = true;
        }
    }
    system.n = new_n;
    Ok(failures)
}

fn weight_stream(base: RngStream, i: usize, t: usize, shared: bool) -> RngStream {
    base.substream(if shared { 0 } else { i }, t, Phase::Weight)
}

/// Draws the initial system from the prior and assimilates `y_0`.
fn init_system<F: StateFilter>(
    model: &dyn Model,
    filter: &F,
    data: &[Observation],
    cfg: &NestedConfig,
    base: RngStream,
) -> Result<ParamParticleSystem<F::State>> {
    let prior = model.prior();
    let y0 = &data[0];
    let results: Vec<Result<ParamParticle<F::State>>> = (0..cfg.m)
        .into_par_iter()
        .map(|i| {
            let log_theta = prior.sample_log(&mut base.substream(i, 0, Phase::Prior).rng());
            let theta: Vec<f64> = log_theta.iter().map(|v| v.exp()).collect();
            let root = weight_stream(base, i, 0, cfg.shared_streams);
            let (state, inc) = filter.init(&theta, cfg.n0, y0, root.fork(0))?;
            let inc = if inc.is_nan() { f64::NEG_INFINITY } else { inc };
            Ok(ParamParticle {
                chain: ChainState {
                    log_theta,
                    loglik: inc,
                    output: Trace {
                        state,
                        increments: vec![inc],
                        n: cfg.n0,
                        root,
                        root_len: 1,
                        steps: Vec::new(),
                    },
                },
                log_weight: inc,
                failed: inc == f64::NEG_INFINITY,
            })
        })
        .collect();
    Ok(ParamParticleSystem {
        particles: results.into_iter().collect::<Result<_>>()?,
        n: cfg.n0,
        len: 1,
    })
}

/// New state, log-likelihood increment and the stream that produced them;
/// `None` for a particle whose weighting failed numerically.
type StepResult<S> = Result<Option<(S, f64, RngStream)>>;

/// Advances every particle's filter by one observation and updates its weight.
fn weight_step<F: StateFilter>(
    system: &mut ParamParticleSystem<F::State>,
    filter: &F,
    y: &Observation,
    shared: bool,
    base: RngStream,
) -> Result<usize> {
    let t = system.len;
    let results: Vec<StepResult<F::State>> = system
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            if p.failed {
                return Ok(None);
            }
            let s = weight_stream(base, i, t, shared);
            match filter.step(&p.theta(), &p.chain.output.state, y, s) {
                Ok((state, inc)) if !inc.is_nan() => Ok(Some((state, inc, s))),
                Ok(_) => Ok(None),
                Err(e) if e.is_numerical() => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut failures = 0;
    for (p, r) in system.particles.iter_mut().zip(results) {
        match r? {
            Some((state, inc, s)) => {
                p.chain.output.state = state;
                p.chain.output.increments.push(inc);
                p.chain.output.steps.push(s);
                p.chain.loglik += inc;
                p.log_weight += inc;
            }
            None => {
                if !p.failed {
                    failures += 1;
                }
                p.failed = true;
                p.log_weight = f64::NEG_INFINITY;
            }
        }
    }
    system.len += 1;
    Ok(failures)
}

/// Multinomial resampling of whole particles; weights become uniform.
fn resample_system<S: Clone>(system: &mut ParamParticleSystem<S>, stream: RngStream) -> Result<()> {
    let t = system.len - 1;
    let w = system.normalised_weights().ok_or(FilterError::ParticleCollapse { t })?;
    let idx = resample_multinomial(&w, system.particles.len(), &mut stream.rng())?;
    let mut next: Vec<ParamParticle<S>> = idx.iter().map(|&j| system.particles[j].clone()).collect();
    for p in &mut next {
        p.log_weight = 0.0;
    }
    system.particles = next;
    Ok(())
}

/// One sweep of MH moves over all particles, targeting the posterior given
/// the observations assimilated so far.
fn move_sweep<F: StateFilter>(
    system: &mut ParamParticleSystem<F::State>,
    model: &dyn Model,
    filter: &F,
    data: &[Observation],
    moves: &MoveConfig,
    stream: RngStream,
) -> Result<MoveCounters> {
    let cloud = system.log_thetas();
    let scatter = CloudScatter::new(&cloud)?;
    let full_sqrt = crate::rejuvenate::proposal_sqrt(&scatter.covariance(None)?, moves.proposal.zeta2)?;
    let store = if moves.delayed_acceptance {
        Some(SurrogateStore::new(
            system.particles.iter().map(|p| (p.chain.log_theta.clone(), p.chain.loglik)),
            moves.k,
        )?)
    } else {
        None
    };
    let ev = MoveEvaluator {
        filter,
        data: &data[..system.len],
        n: system.n,
    };
    let prior = model.prior();
    let results: Vec<Result<MoveCounters>> = system
        .particles
        .par_iter_mut()
        .enumerate()
        .map(|(i, p)| {
            let mut counters = MoveCounters::default();
            let sqrt_cov = if moves.proposal.leave_one_out {
                crate::rejuvenate::proposal_sqrt(&scatter.covariance(Some(i))?, moves.proposal.zeta2)?
            } else {
                full_sqrt.clone()
            };
            let s = store.as_ref().map(|s| s as &dyn crate::rejuvenate::Surrogate);
            if mh_step(&mut p.chain, prior, &sqrt_cov, &ev, s, stream.fork(i as u64), &mut counters)? {
                p.failed = false;
            }
            Ok(counters)
        })
        .collect();
    let mut total = MoveCounters::default();
    for r in results {
        total.merge(&r?);
    }
    Ok(total)
}

/// Resample-move parameter filter with an arbitrary inner state filter.
pub fn run_nested<F: StateFilter>(
    model: &dyn Model,
    filter: &F,
    data: &[Observation],
    cfg: &NestedConfig,
    base: RngStream,
) -> Result<FilterRun<F::State>> {
    validate(cfg, model)?;
    if data.is_empty() {
        return Err(FilterError::precondition("no observations"));
    }
    let mut records = Vec::with_capacity(data.len());
    let mut summaries = Vec::with_capacity(data.len());
    let mut system = init_system(model, filter, data, cfg, base)?;
    let mut weight_failures = 0;
    for t in 0..data.len() {
        let step_start = Instant::now();
        if t > 0 {
            weight_failures = weight_step(&mut system, filter, &data[t], cfg.shared_streams, base)?;
        }
        let ess = system.ess();
        if ess == 0.0 {
            return Err(FilterError::ParticleCollapse { t: data[t].t });
        }
        let mut record = RunRecord {
            t: data[t].t,
            ess,
            resampled: false,
            moved: false,
            acceptance_rate: 0.0,
            stage1: 0,
            stage2: 0,
            n: system.n,
            sigma2: None,
            unique_before_move: 0,
            unique_after_move: 0,
            weight_failures,
            evaluator_failures: 0,
            n_capped: false,
            exchange: None,
            wall_ms: 0.0,
        };
        if ess < cfg.trigger.gamma * cfg.m as f64 {
            resample_system(&mut system, base.substream(0, t, Phase::Resample))?;
            record.resampled = true;
            record.unique_before_move = system.unique_count();
            let mut counters = MoveCounters::default();
            for iter in 0..cfg.moves.iterations {
                let c = move_sweep(
                    &mut system,
                    model,
                    filter,
                    data,
                    &cfg.moves,
                    base.substream(0, t, Phase::Move).fork(iter as u64),
                )?;
                counters.merge(&c);
            }
            record.moved = cfg.moves.iterations > 0;
            record.unique_after_move = system.unique_count();
            record.acceptance_rate = counters.acceptance_rate();
            record.stage1 = counters.stage1;
            record.stage2 = counters.stage2;
            record.evaluator_failures = counters.evaluator_failures;
        }
        let forced = cfg.sigma2_override.filter(|&(at, _)| at == t).map(|(_, v)| v);
        if record.moved || forced.is_some() {
            let new_n = match (cfg.trigger.adapt, forced) {
                (AdaptRule::Off, None) => None,
                (AdaptRule::Variance { threshold, .. }, Some(s2)) => {
                    record.sigma2 = Some(s2);
                    adapted_size(s2, system.n, threshold, cfg.trigger.n_max)
                }
                (_, Some(s2)) => {
                    record.sigma2 = Some(s2);
                    adapted_size(s2, system.n, DEFAULT_VARIANCE_THRESHOLD, cfg.trigger.n_max)
                }
                (AdaptRule::Variance { threshold, runs }, None) => {
                    let centre = system.mean_log_theta()?;
                    let s2 = estimate_sigma2_n(
                        filter,
                        &centre,
                        &data[..system.len],
                        system.n,
                        runs,
                        base.substream(0, t, Phase::Sigma),
                    )?;
                    record.sigma2 = Some(s2);
                    adapted_size(s2, system.n, threshold, cfg.trigger.n_max)
                }
                (AdaptRule::AcceptanceDoubling { threshold }, None) => {
                    if record.acceptance_rate < threshold && system.n < cfg.trigger.n_max {
                        let doubled = 2 * system.n;
                        Some((doubled.min(cfg.trigger.n_max), doubled > cfg.trigger.n_max))
                    } else {
                        None
                    }
                }
            };
            if let Some((n_new, capped)) = new_n {
                record.n_capped = capped;
                if n_new != system.n {
                    let n_before = system.n;
                    let weights_before = system.normalised_weights().ok_or(FilterError::ParticleCollapse { t: data[t].t })?;
                    record.weight_failures += adapt_n(&mut system, filter, data, n_new, base)?;
                    let weights_after = system.normalised_weights().ok_or(FilterError::ParticleCollapse { t: data[t].t })?;
                    record.exchange = Some(Exchange {
                        n_before,
                        n_after: n_new,
                        weights_before,
                        weights_after,
                    });
                }
            }
        }
        record.n = system.n;
        record.wall_ms = step_start.elapsed().as_secs_f64() * 1e3;
        summaries.push(system.summaries()?);
        records.push(record);
    }
    Ok(FilterRun {
        records,
        summaries,
        system,
    })
}

fn validate(cfg: &NestedConfig, model: &dyn Model) -> Result<()> {
    if cfg.m == 0 {
        return Err(FilterError::InvalidArgument("M must be at least 1".into()));
    }
    if cfg.n0 == 0 {
        return Err(FilterError::InvalidArgument("N must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.trigger.gamma) {
        return Err(FilterError::InvalidArgument(format!(
            "ESS fraction must lie in [0, 1], got {}",
            cfg.trigger.gamma
        )));
    }
    if let AdaptRule::Variance { threshold, runs } = cfg.trigger.adapt {
        if !(threshold > 0.0) || runs < 2 {
            return Err(FilterError::InvalidArgument("variance trigger needs threshold > 0 and r >= 2".into()));
        }
    }
    if cfg.m > 1 && cfg.trigger.gamma > 0.0 && cfg.moves.iterations > 0 && !(cfg.moves.proposal.zeta2 >= 0.0) {
        return Err(FilterError::InvalidArgument("proposal scale must be nonnegative".into()));
    }
    if model.param_dim() == 0 {
        return Err(FilterError::InvalidArgument("model has no parameters".into()));
    }
    Ok(())
}

/// Nested EnKF.
pub fn nenkf_run(
    model: &dyn Model,
    obs: &dyn ObsBuilder,
    data: &[Observation],
    cfg: &NestedConfig,
    base: RngStream,
) -> Result<FilterRun<StateEnsemble>> {
    run_nested(model, &EnkfFilter { model, obs }, data, cfg, base)
}

/// SMC² with a bootstrap particle filter.
pub fn smc2_run(
    model: &dyn Model,
    resampler: Resampler,
    data: &[Observation],
    cfg: &NestedConfig,
    base: RngStream,
) -> Result<FilterRun<WeightedParticles>> {
    run_nested(model, &PfFilter { model, resampler }, data, cfg, base)
}

/// Settings for the particle EnKF.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenkfConfig {
    pub m: usize,
    pub n: usize,
    pub gamma: f64,
    pub liu_west: LiuWestConfig,
}

/// Particle EnKF: Liu-West parameter dynamics, EnKF likelihood weights and
/// ESS-triggered resampling of (θ, ensemble) pairs.
pub fn penkf_run(
    model: &dyn Model,
    obs: &dyn ObsBuilder,
    data: &[Observation],
    cfg: &PenkfConfig,
    base: RngStream,
) -> Result<FilterRun<StateEnsemble>> {
    if cfg.m == 0 || data.is_empty() {
        return Err(FilterError::InvalidArgument("PEnKF needs M >= 1 and at least one observation".into()));
    }
    let filter = EnkfFilter { model, obs };
    let nested = NestedConfig {
        m: cfg.m,
        n0: cfg.n,
        trigger: TriggerConfig {
            gamma: cfg.gamma,
            adapt: AdaptRule::Off,
            n_max: cfg.n,
        },
        moves: MoveConfig {
            proposal: MhProposalConfig {
                zeta2: 0.0,
                leave_one_out: false,
            },
            iterations: 0,
            delayed_acceptance: false,
            k: 1,
        },
        shared_streams: false,
        sigma2_override: None,
    };
    let mut system = init_system(model, &filter, data, &nested, base)?;
    let mut records = Vec::with_capacity(data.len());
    let mut summaries = Vec::with_capacity(data.len());
    for (t, y) in data.iter().enumerate() {
        let step_start = Instant::now();
        let mut failures = 0;
        if t > 0 {
            if cfg.m >= 2 {
                let w = system.normalised_weights().ok_or(FilterError::ParticleCollapse { t: y.t })?;
                let moved = liu_west_shrink(&system.log_thetas(), Some(&w), &cfg.liu_west, base.substream(0, t, Phase::LiuWest))?;
                for (p, lt) in system.particles.iter_mut().zip(moved) {
                    p.chain.log_theta = lt;
                }
            }
            failures = weight_step(&mut system, &filter, y, false, base)?;
        }
        let ess = system.ess();
        if ess == 0.0 {
            return Err(FilterError::ParticleCollapse { t: y.t });
        }
        let mut record = RunRecord {
            t: y.t,
            ess,
            resampled: false,
            moved: false,
            acceptance_rate: 0.0,
            stage1: 0,
            stage2: 0,
            n: system.n,
            sigma2: None,
            unique_before_move: 0,
            unique_after_move: 0,
            weight_failures: failures,
            evaluator_failures: 0,
            n_capped: false,
            exchange: None,
            wall_ms: 0.0,
        };
        if ess < cfg.gamma * cfg.m as f64 {
            resample_system(&mut system, base.substream(0, t, Phase::Resample))?;
            record.resampled = true;
        }
        summaries.push(system.summaries()?);
        record.wall_ms = step_start.elapsed().as_secs_f64() * 1e3;
        records.push(record);
    }
    Ok(FilterRun {
        records,
        summaries,
        system,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adapted_size_rule() {
        assert_eq!(adapted_size(2.0, 100, 1.5, 100_000), Some((200, false)));
        assert_eq!(adapted_size(1.5, 100, 1.5, 100_000), None);
        assert_eq!(adapted_size(1.2, 100, 1.5, 100_000), None);
        assert_eq!(adapted_size(1.501, 10, 1.5, 100_000), Some((16, false)));
        assert_eq!(adapted_size(50.0, 10_000, 1.5, 100_000), Some((100_000, true)));
    }
}
