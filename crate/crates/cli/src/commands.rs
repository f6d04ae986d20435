//! The four subcommands: simulate, filter, reference and benchmark.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use nenkf::enkf::{aenkf_run, enkf_run, LiuWestConfig};
use nenkf::filters::{
    nenkf_run, penkf_run, run_nested, smc2_run, AdaptRule, FilterRun, MoveConfig, NestedConfig, ParamParticleSystem, PenkfConfig,
    RunRecord, TriggerConfig,
};
use nenkf::kalman::kalman_filter_exact;
use nenkf::model::ModelObs;
use nenkf::models::simulate_dataset;
use nenkf::pf::{pf_run, Bootstrap, Resampler};
use nenkf::rbsmc2::{ObsApprox, RbPfFilter, RbWeight};
use nenkf::rejuvenate::{
    default_zeta2, mh_chain, Chain, ChainConfig, EnkfEvaluator, Evaluator, KalmanEvaluator, MhProposalConfig, PfEvaluator,
};
use nenkf::summary::{batch_means_se, summarise, ComponentSummary};
use nenkf::{Dataset, Model, Observation, RngStream};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{AdaptKind, AlgorithmConfig, AlgorithmId, ExperimentConfig, ModelId, OracleKind, ResamplerKind, WeightKind};
use crate::error::CliError;
use crate::io::{fmt, read_dataset, read_table, write_dataset, write_json, write_latent, write_table};
use crate::setup::{build_models, ModelSetup};

/// Process CPU time (user + system, all threads) in seconds.
pub fn cpu_seconds() -> f64 {
    let mut usage = std::mem::MaybeUninit::<libc::rusage>::zeroed();
    // SAFETY: getrusage fills the struct it is given and reports failure by
    // its return value.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, usage.as_mut_ptr()) };
    if rc != 0 {
        return f64::NAN;
    }
    // SAFETY: initialised by the successful call above.
    let u = unsafe { usage.assume_init() };
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
    tv(u.ru_utime) + tv(u.ru_stime)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub cpu_seconds: f64,
}

struct Clock {
    wall: Instant,
    cpu: f64,
}

impl Clock {
    fn start() -> Self {
        Self {
            wall: Instant::now(),
            cpu: cpu_seconds(),
        }
    }

    fn stop(&self) -> Timing {
        Timing {
            wall_seconds: self.wall.elapsed().as_secs_f64(),
            cpu_seconds: cpu_seconds() - self.cpu,
        }
    }
}

/// Runs `f` on a pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Modelling conventions not visible in the configuration.
#[derive(Serialize)]
struct Conventions {
    parameter_scale: &'static str,
    prior_density: &'static str,
    liu_west_scale: &'static str,
    surrogate_store: &'static str,
    variance_statistic: &'static str,
    ess_check: &'static str,
    rb_correction_density: &'static str,
    quantile_rule: &'static str,
}

const CONVENTIONS: Conventions = Conventions {
    parameter_scale: "random-walk proposals, summaries and references are on log theta",
    prior_density: "log-scale prior density including the Jacobian of theta = exp(log theta)",
    liu_west_scale: "log theta",
    surrogate_store: "k-NN store built from the resampled cloud and frozen for the whole move sweep",
    variance_statistic: "sample variance of r independent log-likelihood estimates",
    ess_check: "once per time step, after every weight has been updated",
    rb_correction_density: "g uses the inflated (H, c R) of the proposal",
    quantile_rule: "smallest sample value whose weighted CDF reaches q",
};

#[derive(Serialize)]
struct Metadata<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    conventions: &'a Conventions,
    config: &'a ExperimentConfig,
    threads: usize,
    timing: Timing,
    details: T,
}

fn write_metadata<T: Serialize>(path: &Path, command: &str, cfg: &ExperimentConfig, timing: Timing, details: T) -> Result<(), CliError> {
    write_json(
        path,
        &Metadata {
            command,
            version: env!("CARGO_PKG_VERSION"),
            conventions: &CONVENTIONS,
            config: cfg,
            threads: rayon::current_num_threads(),
            timing,
            details,
        },
    )
}

fn log_names(model: &dyn Model) -> Vec<String> {
    model.param_names().iter().map(|n| format!("log_{n}")).collect()
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize)]
struct SimulateDetails {
    theta_true: Vec<f64>,
    seed: u64,
    n_obs: usize,
    model: String,
}

/// Simulates a dataset; writes `data.csv`, `latent.csv` and `simulate.json`.
pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset, CliError> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let clock = Clock::start();
    let setup = build_models(&cfg)?;
    let sim = simulate_dataset(&*setup.generator, &setup.theta, setup.n_obs, RngStream::new(cfg.data.seed))?;
    let times: Vec<usize> = sim.dataset.observations().iter().map(|o| o.t).collect();
    write_dataset(&out.join("data.csv"), &sim.dataset)?;
    write_latent(&out.join("latent.csv"), &times, &sim.latent)?;
    write_metadata(
        &out.join("simulate.json"),
        "simulate",
        &cfg,
        clock.stop(),
        SimulateDetails {
            theta_true: setup.theta.clone(),
            seed: cfg.data.seed,
            n_obs: setup.n_obs,
            model: setup.generator.name().to_string(),
        },
    )?;
    Ok(sim.dataset)
}

// ---------------------------------------------------------------- algorithms

/// Final parameter cloud: log-weight, log-likelihood (when tracked) and log θ.
#[derive(Debug, Clone)]
pub struct CloudRow {
    pub log_weight: f64,
    pub loglik: Option<f64>,
    pub log_theta: Vec<f64>,
}

/// Everything an algorithm run produces.
#[derive(Debug, Clone, Default)]
pub struct AlgorithmOutput {
    /// Posterior summaries of each log-parameter, keyed by observation time.
    pub summaries: Vec<(usize, Vec<ComponentSummary>)>,
    pub records: Vec<RunRecord>,
    pub cloud: Vec<CloudRow>,
    /// Log-likelihood increments of a fixed-parameter filter.
    pub increments: Vec<f64>,
    pub chain: Option<Chain>,
}

impl AlgorithmOutput {
    pub fn final_summary(&self) -> Option<&[ComponentSummary]> {
        self.summaries.last().map(|(_, s)| s.as_slice())
    }
}

pub fn nested_config(a: &AlgorithmConfig, d: usize) -> NestedConfig {
    NestedConfig {
        m: a.m,
        n0: a.n0,
        trigger: TriggerConfig {
            gamma: a.gamma,
            adapt: match a.adapt {
                AdaptKind::Off => AdaptRule::Off,
                AdaptKind::Variance => AdaptRule::Variance {
                    threshold: a.sigma2_threshold,
                    runs: a.r,
                },
                AdaptKind::Acceptance => AdaptRule::AcceptanceDoubling {
                    threshold: a.acceptance_threshold,
                },
            },
            n_max: a.n_max,
        },
        moves: MoveConfig {
            proposal: MhProposalConfig {
                zeta2: a.zeta2.unwrap_or_else(|| default_zeta2(d)),
                leave_one_out: a.leave_one_out,
            },
            iterations: a.move_iterations,
            delayed_acceptance: a.delayed_acceptance,
            k: a.k,
        },
        shared_streams: false,
        sigma2_override: None,
    }
}

fn resampler(k: ResamplerKind) -> Resampler {
    match k {
        ResamplerKind::Multinomial => Resampler::Multinomial,
        ResamplerKind::Systematic => Resampler::Systematic,
    }
}

fn from_filter_run<S>(run: FilterRun<S>, data: &[Observation]) -> AlgorithmOutput {
    AlgorithmOutput {
        summaries: data.iter().map(|o| o.t).zip(run.summaries).collect(),
        records: run.records,
        cloud: cloud_rows(&run.system),
        increments: Vec::new(),
        chain: None,
    }
}

fn cloud_rows<S>(system: &ParamParticleSystem<S>) -> Vec<CloudRow> {
    system
        .particles
        .iter()
        .map(|p| CloudRow {
            log_weight: p.log_weight,
            loglik: Some(p.loglik()),
            log_theta: p.log_theta().to_vec(),
        })
        .collect()
}

/// Adaptive random-walk chain: two pilot rounds tune the proposal covariance
/// to `2.56² / d` times the pilot posterior covariance, then the main run.
pub fn tuned_chain<E: Evaluator>(
    model: &dyn Model,
    evaluator: &E,
    iterations: usize,
    pilot: usize,
    thin: usize,
    scale: f64,
    stream: RngStream,
) -> Result<Chain, CliError> {
    let prior = model.prior();
    let d = prior.dim();
    let zeta2 = default_zeta2(d);
    let mut init: Vec<f64> = prior.means().iter().map(|v| v.ln()).collect();
    let mut cov = DMatrix::identity(d, d) * 0.01;
    let half = (pilot / 2).max(1);
    for round in 0..2u64 {
        let c = mh_chain(
            prior,
            evaluator,
            &init,
            &ChainConfig {
                iterations: half,
                thin: 1,
                proposal_cov: cov.clone(),
            },
            None,
            stream.fork(round + 1),
        )?;
        init = c.samples.last().cloned().unwrap_or(init);
        let tail = &c.samples[c.samples.len() / 2..];
        if tail.len() >= 2 && c.counters.accepted > d {
            let est = nenkf::rejuvenate::proposal_covariance(tail, None)?;
            if est.diagonal().iter().all(|v| *v > 0.0) {
                cov = est * zeta2;
            }
        }
    }
    Ok(mh_chain(
        prior,
        evaluator,
        &init,
        &ChainConfig {
            iterations,
            thin: thin.max(1),
            proposal_cov: cov * scale,
        },
        None,
        stream.fork(0),
    )?)
}

fn chain_output(chain: Chain, data: &[Observation]) -> Result<AlgorithmOutput, CliError> {
    let n = chain.samples.len();
    if n == 0 {
        return Err(CliError::Validation("chain retained no samples".into()));
    }
    let w = vec![1.0 / n as f64; n];
    let s = summarise(&chain.samples, &w)?;
    let t = data.last().map_or(0, |o| o.t);
    Ok(AlgorithmOutput {
        summaries: vec![(t, s)],
        chain: Some(chain),
        ..Default::default()
    })
}

/// Runs the configured algorithm once. `cfg` must be resolved.
pub fn run_algorithm(cfg: &ExperimentConfig, setup: &ModelSetup, data: &[Observation], stream: RngStream) -> Result<AlgorithmOutput, CliError> {
    let a = &cfg.algorithm;
    let model = &*setup.inference;
    let obs = ModelObs(model);
    let d = model.param_dim();
    let nested = nested_config(a, d);
    let out = match a.id {
        AlgorithmId::Pf => {
            let r = pf_run(model, &setup.theta, a.n0, data, &Bootstrap, resampler(a.resampler), stream)?;
            AlgorithmOutput {
                increments: r.increments,
                ..Default::default()
            }
        }
        AlgorithmId::Enkf => {
            let r = enkf_run(model, &setup.theta, a.n0, data, &obs, stream)?;
            AlgorithmOutput {
                increments: r.increments,
                ..Default::default()
            }
        }
        AlgorithmId::KfExact => {
            let r = kalman_filter_exact(model, &setup.theta, data)?;
            AlgorithmOutput {
                increments: r.increments,
                ..Default::default()
            }
        }
        AlgorithmId::Aenkf => {
            let lw = LiuWestConfig::new(a.delta)?;
            let r = aenkf_run(model, a.m, data, &lw, &obs, stream)?;
            let m = r.final_log_theta.len();
            AlgorithmOutput {
                summaries: data.iter().map(|o| o.t).zip(r.summaries).collect(),
                cloud: r
                    .final_log_theta
                    .into_iter()
                    .map(|lt| CloudRow {
                        log_weight: -(m as f64).ln(),
                        loglik: None,
                        log_theta: lt,
                    })
                    .collect(),
                increments: r.increments,
                ..Default::default()
            }
        }
        AlgorithmId::Penkf => {
            let pc = PenkfConfig {
                m: a.m,
                n: a.n0,
                gamma: a.gamma,
                liu_west: LiuWestConfig::new(a.delta)?,
            };
            from_filter_run(penkf_run(model, &obs, data, &pc, stream)?, data)
        }
        AlgorithmId::Smc2 => from_filter_run(smc2_run(model, resampler(a.resampler), data, &nested, stream)?, data),
        AlgorithmId::Nenkf => from_filter_run(nenkf_run(model, &obs, data, &nested, stream)?, data),
        AlgorithmId::Rbsmc2 => {
            let filter = RbPfFilter {
                model,
                approx: ObsApprox::new(&obs, a.inflation)?,
                weight: match a.weight {
                    WeightKind::RaoBlackwell => RbWeight::RaoBlackwell,
                    WeightKind::Weight0 => RbWeight::Weight0,
                },
            };
            from_filter_run(run_nested(model, &filter, data, &nested, stream)?, data)
        }
        AlgorithmId::Emcmc => {
            let ev = EnkfEvaluator { model, data, n: a.n0 };
            chain_output(tuned_chain(model, &ev, a.iterations, cfg.reference.pilot_iterations, 1, 1.0, stream)?, data)?
        }
        AlgorithmId::Pmmh => {
            let ev = PfEvaluator {
                model,
                data,
                n: a.n0,
                resampler: resampler(a.resampler),
            };
            chain_output(tuned_chain(model, &ev, a.iterations, cfg.reference.pilot_iterations, 1, 1.0, stream)?, data)?
        }
    };
    Ok(out)
}

// ---------------------------------------------------------------- filter

fn write_summaries(path: &Path, names: &[String], summaries: &[(usize, Vec<ComponentSummary>)]) -> Result<(), CliError> {
    let header: Vec<String> = ["t", "param", "mean", "sd", "q025", "q975"].iter().map(|s| s.to_string()).collect();
    let rows = summaries.iter().flat_map(|(t, s)| {
        s.iter().zip(names).map(move |(c, n)| vec![t.to_string(), n.clone(), fmt(c.mean), fmt(c.sd), fmt(c.q025), fmt(c.q975)])
    });
    write_table(path, &header, rows)
}

fn write_records(path: &Path, records: &[RunRecord]) -> Result<(), CliError> {
    let header: Vec<String> = [
        "t",
        "ess",
        "resampled",
        "moved",
        "acceptance_rate",
        "stage1",
        "stage2",
        "n",
        "sigma2",
        "unique_before_move",
        "unique_after_move",
        "weight_failures",
        "evaluator_failures",
        "n_capped",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = records.iter().map(|r| {
        vec![
            r.t.to_string(),
            fmt(r.ess),
            r.resampled.to_string(),
            r.moved.to_string(),
            fmt(r.acceptance_rate),
            r.stage1.to_string(),
            r.stage2.to_string(),
            r.n.to_string(),
            r.sigma2.map(fmt).unwrap_or_default(),
            r.unique_before_move.to_string(),
            r.unique_after_move.to_string(),
            r.weight_failures.to_string(),
            r.evaluator_failures.to_string(),
            r.n_capped.to_string(),
        ]
    });
    write_table(path, &header, rows)
}

fn write_cloud(path: &Path, names: &[String], cloud: &[CloudRow]) -> Result<(), CliError> {
    let header: Vec<String> = ["particle", "log_weight", "loglik"]
        .iter()
        .map(|s| s.to_string())
        .chain(names.iter().cloned())
        .collect();
    let rows = cloud.iter().enumerate().map(|(i, c)| {
        [i.to_string(), fmt(c.log_weight), c.loglik.map(fmt).unwrap_or_default()]
            .into_iter()
            .chain(c.log_theta.iter().map(|v| fmt(*v)))
            .collect()
    });
    write_table(path, &header, rows)
}

fn write_increments(path: &Path, data: &[Observation], incs: &[f64]) -> Result<(), CliError> {
    let header: Vec<String> = ["t", "increment", "loglik"].iter().map(|s| s.to_string()).collect();
    let mut total = 0.0;
    let rows: Vec<Vec<String>> = data
        .iter()
        .zip(incs)
        .map(|(o, inc)| {
            total += inc;
            vec![o.t.to_string(), fmt(*inc), fmt(total)]
        })
        .collect();
    write_table(path, &header, rows)
}

fn write_chain(path: &Path, names: &[String], chain: &Chain) -> Result<(), CliError> {
    let header: Vec<String> = ["sample", "loglik"].iter().map(|s| s.to_string()).chain(names.iter().cloned()).collect();
    let rows = chain.samples.iter().zip(&chain.logliks).enumerate().map(|(i, (s, l))| {
        [i.to_string(), fmt(*l)].into_iter().chain(s.iter().map(|v| fmt(*v))).collect()
    });
    write_table(path, &header, rows)
}

#[derive(Serialize)]
struct FilterDetails {
    seed: u64,
    algorithm: AlgorithmId,
    loglik: Option<f64>,
    final_n: Option<usize>,
    step_wall_ms: Vec<f64>,
    acceptance_rate: Option<f64>,
    files: Vec<&'static str>,
}

fn load_data(path: &Path, model: &dyn Model) -> Result<Dataset, CliError> {
    let data = read_dataset(path)?;
    if data.obs_dim() != model.obs_dim() {
        return Err(CliError::Validation(format!(
            "dataset has {} observed components but {} expects {}",
            data.obs_dim(),
            model.name(),
            model.obs_dim()
        )));
    }
    Ok(data)
}

/// Runs one filter; writes CSV outputs and `run.json` into `out`.
pub fn filter(cfg: &ExperimentConfig, data_path: &Path, out: &Path) -> Result<AlgorithmOutput, CliError> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let setup = build_models(&cfg)?;
    let data = load_data(data_path, &*setup.inference)?;
    with_threads(cfg.run.threads, || -> Result<AlgorithmOutput, CliError> {
        let clock = Clock::start();
        let result = run_algorithm(&cfg, &setup, data.observations(), RngStream::new(cfg.run.seed).fork(0))?;
        let timing = clock.stop();
        let names = log_names(&*setup.inference);
        let mut files = Vec::new();
        if !result.summaries.is_empty() {
            write_summaries(&out.join("summary.csv"), &names, &result.summaries)?;
            files.push("summary.csv");
        }
        if !result.records.is_empty() {
            write_records(&out.join("records.csv"), &result.records)?;
            files.push("records.csv");
        }
        if !result.cloud.is_empty() {
            write_cloud(&out.join("cloud.csv"), &names, &result.cloud)?;
            files.push("cloud.csv");
        }
        if !result.increments.is_empty() {
            write_increments(&out.join("loglik.csv"), data.observations(), &result.increments)?;
            files.push("loglik.csv");
        }
        if let Some(c) = &result.chain {
            write_chain(&out.join("chain.csv"), &names, c)?;
            files.push("chain.csv");
        }
        write_metadata(
            &out.join("run.json"),
            "filter",
            &cfg,
            timing,
            FilterDetails {
                seed: cfg.run.seed,
                algorithm: cfg.algorithm.id,
                loglik: (!result.increments.is_empty()).then(|| result.increments.iter().sum()),
                final_n: result.records.last().map(|r| r.n),
                step_wall_ms: result.records.iter().map(|r| r.wall_ms).collect(),
                acceptance_rate: result.chain.as_ref().map(|c| c.acceptance_rate()),
                files,
            },
        )?;
        Ok(result)
    })?
}

// ---------------------------------------------------------------- reference

/// Posterior moments of one log-parameter with Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRow {
    pub param: String,
    pub mean: f64,
    pub sd: f64,
    pub mean_se: f64,
    pub sd_se: f64,
}

/// Mean, SD and their batch-means standard errors for each component.
pub fn chain_moments(names: &[String], samples: &[Vec<f64>], batches: usize) -> Result<Vec<ReferenceRow>, CliError> {
    let n = samples.len();
    if n < 2 * batches {
        return Err(CliError::Validation(format!("{n} samples are too few for {batches} batches")));
    }
    let mut rows = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let xs: Vec<f64> = samples.iter().map(|s| s[i]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        if xs.iter().all(|x| x.to_bits() == xs[0].to_bits()) {
            return Err(CliError::DegenerateReference(format!("chain for {name} never moved")));
        }
        let sq: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
        let var = sq.iter().sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        rows.push(ReferenceRow {
            param: name.clone(),
            mean,
            sd,
            mean_se: batch_means_se(&xs, batches),
            sd_se: batch_means_se(&sq, batches) / (2.0 * sd),
        });
    }
    Ok(rows)
}

pub fn write_reference(path: &Path, rows: &[ReferenceRow]) -> Result<(), CliError> {
    let header: Vec<String> = ["param", "mean", "sd", "mean_se", "sd_se"].iter().map(|s| s.to_string()).collect();
    write_table(
        path,
        &header,
        rows.iter()
            .map(|r| vec![r.param.clone(), fmt(r.mean), fmt(r.sd), fmt(r.mean_se), fmt(r.sd_se)]),
    )
}

pub fn read_reference(path: &Path) -> Result<Vec<ReferenceRow>, CliError> {
    let (header, rows) = read_table(path)?;
    if header != ["param", "mean", "sd", "mean_se", "sd_se"] {
        return Err(CliError::Validation("reference header must be param,mean,sd,mean_se,sd_se".into()));
    }
    rows.into_iter()
        .map(|r| {
            let num = |i: usize| {
                r[i].parse::<f64>()
                    .map_err(|_| CliError::Validation(format!("reference value {:?} is not a number", r[i])))
            };
            Ok(ReferenceRow {
                param: r[0].clone(),
                mean: num(1)?,
                sd: num(2)?,
                mean_se: num(3)?,
                sd_se: num(4)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct ReferenceDetails {
    oracle: OracleKind,
    iterations: usize,
    retained: usize,
    acceptance_rate: f64,
    seed: u64,
}

fn oracle_for(cfg: &ExperimentConfig) -> OracleKind {
    cfg.reference.oracle.unwrap_or(if cfg.model.id == ModelId::Ou {
        OracleKind::KfExact
    } else {
        OracleKind::Pmmh
    })
}

/// Long MCMC run on an oracle likelihood; writes `reference.csv`,
/// `reference_chain.csv` and `reference.json`.
pub fn reference(cfg: &ExperimentConfig, data_path: &Path, out: &Path) -> Result<Vec<ReferenceRow>, CliError> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let setup = build_models(&cfg)?;
    let data = load_data(data_path, &*setup.inference)?;
    let model = &*setup.inference;
    let r = &cfg.reference;
    let oracle = oracle_for(&cfg);
    with_threads(cfg.run.threads, || -> Result<Vec<ReferenceRow>, CliError> {
        let clock = Clock::start();
        let obs = data.observations();
        let stream = RngStream::new(r.seed);
        let chain = match oracle {
            OracleKind::KfExact => tuned_chain(model, &KalmanEvaluator { model, data: obs }, r.iterations, r.pilot_iterations, r.thin, r.scale, stream)?,
            OracleKind::Pmmh => tuned_chain(
                model,
                &PfEvaluator {
                    model,
                    data: obs,
                    n: r.n,
                    resampler: Resampler::Multinomial,
                },
                r.iterations,
                r.pilot_iterations,
                r.thin,
                r.scale,
                stream,
            )?,
            OracleKind::Emcmc => tuned_chain(model, &EnkfEvaluator { model, data: obs, n: r.n }, r.iterations, r.pilot_iterations, r.thin, r.scale, stream)?,
        };
        if chain.counters.accepted == 0 {
            return Err(CliError::DegenerateReference("no proposal was accepted".into()));
        }
        let names = log_names(model);
        let rows = chain_moments(&names, &chain.samples, r.batches)?;
        write_reference(&out.join("reference.csv"), &rows)?;
        write_chain(&out.join("reference_chain.csv"), &names, &chain)?;
        write_metadata(
            &out.join("reference.json"),
            "reference",
            &cfg,
            clock.stop(),
            ReferenceDetails {
                oracle,
                iterations: r.iterations,
                retained: chain.samples.len(),
                acceptance_rate: chain.acceptance_rate(),
                seed: r.seed,
            },
        )?;
        Ok(rows)
    })?
}

// ---------------------------------------------------------------- benchmark

/// Bias and RMSE of one summary statistic across replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub param: String,
    pub statistic: &'static str,
    pub bias: f64,
    pub rmse: f64,
    pub replicates: usize,
    pub failed: usize,
}

/// Per-replicate final-time estimates `(mean, sd)` of each log-parameter;
/// `None` for a failed replicate.
pub type ReplicateEstimates = Vec<Option<Vec<(f64, f64)>>>;

/// `bias = mean(est − ref)` and `rmse = sqrt(mean((est − ref)²))` over the
/// successful replicates.
pub fn bias_rmse(estimates: &[f64], reference: f64) -> (f64, f64) {
    let n = estimates.len() as f64;
    let bias = estimates.iter().map(|e| e - reference).sum::<f64>() / n;
    let mse = estimates.iter().map(|e| (e - reference).powi(2)).sum::<f64>() / n;
    (bias, mse.sqrt())
}

pub fn benchmark_table(reference: &[ReferenceRow], estimates: &ReplicateEstimates) -> Vec<BenchmarkRow> {
    let ok: Vec<&Vec<(f64, f64)>> = estimates.iter().flatten().collect();
    let failed = estimates.len() - ok.len();
    let mut rows = Vec::new();
    for (i, r) in reference.iter().enumerate() {
        for (statistic, pick, target) in [("mean", 0usize, r.mean), ("sd", 1, r.sd)] {
            let xs: Vec<f64> = ok.iter().map(|e| if pick == 0 { e[i].0 } else { e[i].1 }).collect();
            let (bias, rmse) = if xs.is_empty() { (f64::NAN, f64::NAN) } else { bias_rmse(&xs, target) };
            rows.push(BenchmarkRow {
                param: r.param.clone(),
                statistic,
                bias,
                rmse,
                replicates: xs.len(),
                failed,
            });
        }
    }
    rows
}

#[derive(Serialize)]
struct BenchmarkDetails {
    algorithm: AlgorithmId,
    replicates: usize,
    failed: Vec<(usize, String)>,
    replicate_cpu_seconds: Vec<f64>,
    replicate_wall_seconds: Vec<f64>,
}

pub struct BenchmarkOutput {
    pub rows: Vec<BenchmarkRow>,
    pub estimates: ReplicateEstimates,
    pub outputs: Vec<Option<AlgorithmOutput>>,
}

/// Replicated runs scored against a reference; writes `benchmark.csv`,
/// `replicates.csv` and `benchmark.json`. A failed replicate is reported and
/// excluded from the table.
pub fn benchmark(cfg: &ExperimentConfig, data_path: &Path, reference_path: &Path, out: &Path) -> Result<BenchmarkOutput, CliError> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    if !(cfg.algorithm.id.is_parameter_filter() || cfg.algorithm.id.is_chain()) {
        return Err(CliError::Validation("benchmark needs an algorithm that estimates parameters".into()));
    }
    if cfg.run.replicates < 2 {
        return Err(CliError::Validation("benchmark needs at least 2 replicates".into()));
    }
    let setup = build_models(&cfg)?;
    let data = load_data(data_path, &*setup.inference)?;
    let reference = read_reference(reference_path)?;
    let names = log_names(&*setup.inference);
    if reference.iter().map(|r| &r.param).ne(names.iter()) {
        return Err(CliError::Validation(format!("reference parameters must be {}", names.join(","))));
    }
    with_threads(cfg.run.threads, || -> Result<BenchmarkOutput, CliError> {
        let clock = Clock::start();
        let base = RngStream::new(cfg.run.seed);
        let runs: Vec<(Result<AlgorithmOutput, CliError>, Timing)> = (0..cfg.run.replicates)
            .into_par_iter()
            .map(|rep| {
                let c = Clock::start();
                let r = run_algorithm(&cfg, &setup, data.observations(), base.fork(rep as u64));
                (r, c.stop())
            })
            .collect();
        let mut estimates: ReplicateEstimates = Vec::with_capacity(runs.len());
        let mut outputs = Vec::with_capacity(runs.len());
        let mut failed = Vec::new();
        let mut cpu = Vec::new();
        let mut wall = Vec::new();
        for (rep, (r, t)) in runs.into_iter().enumerate() {
            cpu.push(t.cpu_seconds);
            wall.push(t.wall_seconds);
            match r {
                Ok(o) => {
                    let est = o
                        .final_summary()
                        .map(|s| s.iter().map(|c| (c.mean, c.sd)).collect::<Vec<_>>());
                    estimates.push(est);
                    outputs.push(Some(o));
                }
                Err(e @ CliError::Numerical(_)) => {
                    failed.push((rep, e.to_string()));
                    estimates.push(None);
                    outputs.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        let rows = benchmark_table(&reference, &estimates);
        let header: Vec<String> = ["param", "statistic", "bias", "rmse", "replicates", "failed"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        write_table(
            &out.join("benchmark.csv"),
            &header,
            rows.iter().map(|r| {
                vec![
                    r.param.clone(),
                    r.statistic.to_string(),
                    fmt(r.bias),
                    fmt(r.rmse),
                    r.replicates.to_string(),
                    r.failed.to_string(),
                ]
            }),
        )?;
        let rep_header: Vec<String> = ["replicate", "status", "param", "mean", "sd"].iter().map(|s| s.to_string()).collect();
        let mut rep_rows = Vec::new();
        for (rep, e) in estimates.iter().enumerate() {
            for (i, n) in names.iter().enumerate() {
                rep_rows.push(match e {
                    Some(v) => vec![rep.to_string(), "ok".into(), n.clone(), fmt(v[i].0), fmt(v[i].1)],
                    None => vec![rep.to_string(), "failed".into(), n.clone(), String::new(), String::new()],
                });
            }
        }
        write_table(&out.join("replicates.csv"), &rep_header, rep_rows)?;
        write_metadata(
            &out.join("benchmark.json"),
            "benchmark",
            &cfg,
            clock.stop(),
            BenchmarkDetails {
                algorithm: cfg.algorithm.id,
                replicates: cfg.run.replicates,
                failed,
                replicate_cpu_seconds: cpu,
                replicate_wall_seconds: wall,
            },
        )?;
        Ok(BenchmarkOutput { rows, estimates, outputs })
    })?
}

/// Recomputes the benchmark table from a `replicates.csv` file.
pub fn recompute_benchmark(reference: &[ReferenceRow], replicates_csv: &Path) -> Result<Vec<BenchmarkRow>, CliError> {
    let (_, rows) = read_table(replicates_csv)?;
    let mut by_rep: BTreeMap<usize, Option<Vec<(f64, f64)>>> = BTreeMap::new();
    for r in rows {
        let rep: usize = r[0].parse().map_err(|_| CliError::Validation("bad replicate index".into()))?;
        let entry = by_rep.entry(rep).or_insert_with(|| Some(Vec::new()));
        if r[1] == "ok" {
            let p = |s: &str| s.parse::<f64>().map_err(|_| CliError::Validation("bad estimate".into()));
            if let Some(v) = entry {
                v.push((p(&r[3])?, p(&r[4])?));
            }
        } else {
            *entry = None;
        }
    }
    Ok(benchmark_table(reference, &by_rep.into_values().collect()))
}
