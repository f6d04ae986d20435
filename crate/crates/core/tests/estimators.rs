use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use nenkf::dist::GammaPrior;
use nenkf::filters::StateFilter;
use nenkf::kalman::kalman_filter_exact;
use nenkf::linalg::normal_logpdf;
use nenkf::model::{GaussianObs, ModelObs};
use nenkf::models::{simulate_dataset, OuModel};
use nenkf::pf::{pf_run, Bootstrap, Resampler};
use nenkf::rbsmc2::{ObsApprox, RbPfFilter, RbWeight};
use nenkf::rejuvenate::{mh_chain, ChainConfig, FnEvaluator, FnSurrogate};
use nenkf::rng::StreamRng;
use nenkf::{Model, Result, RngStream};
use rand::Rng;
use rand_distr::StandardNormal;

/// OU dynamics observed with state-dependent variance `|x| + 0.1`.
struct NonlinearOu {
    inner: OuModel,
}

fn noise_var(x: f64) -> f64 {
    x.abs() + 0.1
}

impl Model for NonlinearOu {
    fn name(&self) -> &str {
        "ou-nonlinear"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn param_names(&self) -> Vec<String> {
        self.inner.param_names()
    }
    fn prior(&self) -> &GammaPrior {
        self.inner.prior()
    }
    fn sample_initial(&self, theta: &[f64], rng: &mut StreamRng, out: &mut [f64]) {
        self.inner.sample_initial(theta, rng, out)
    }
    fn sample_transition(&self, theta: &[f64], x: &mut [f64], rng: &mut StreamRng) -> Result<()> {
        self.inner.sample_transition(theta, x, rng)
    }
    fn obs_logpdf(&self, _theta: &[f64], y: &[f64], x: &[f64]) -> f64 {
        normal_logpdf(y[0], x[0], noise_var(x[0]))
    }
    fn sample_obs(&self, _theta: &[f64], x: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        let z: f64 = rng.sample(StandardNormal);
        vec![x[0] + noise_var(x[0]).sqrt() * z]
    }
    fn gaussian_obs(&self, _theta: &[f64], m: &DVector<f64>) -> Option<GaussianObs> {
        Some(GaussianObs {
            h: DMatrix::identity(1, 1),
            r: DMatrix::from_element(1, 1, noise_var(m[0])),
        })
    }
}

/// Mean and standard error of `exp(l − reference)`.
fn ratio_stats(logliks: &[f64], reference: f64) -> (f64, f64) {
    let r: Vec<f64> = logliks.iter().map(|l| (l - reference).exp()).collect();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn weight0_filter_is_unbiased_for_the_exact_likelihood() {
    let m = OuModel::default();
    let theta = OuModel::true_theta();
    let data = simulate_dataset(&m, &theta, 5, RngStream::new(21)).unwrap();
    let obs = data.dataset.observations();
    let exact = kalman_filter_exact(&m, &theta, obs).unwrap().loglik;
    let target = ModelObs(&m);
    let f = RbPfFilter {
        model: &m,
        approx: ObsApprox::new(&target, 1.0).unwrap(),
        weight: RbWeight::Weight0,
    };
    let base = RngStream::new(22);
    let ls: Vec<f64> = (0..500)
        .map(|k| f.run(&theta, 50, obs, base.fork(k)).unwrap().1.iter().sum())
        .collect();
    let (mean, se) = ratio_stats(&ls, exact);
    assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean}, se {se}");
}

#[test]
fn rb_filter_agrees_with_a_large_bootstrap_filter_on_a_nonlinear_observation() {
    let m = NonlinearOu { inner: OuModel::default() };
    let theta = OuModel::true_theta();
    let data = simulate_dataset(&m, &theta, 5, RngStream::new(31)).unwrap();
    let obs = data.dataset.observations();
    let reference = pf_run(&m, &theta, 200_000, obs, &Bootstrap, Resampler::Systematic, RngStream::new(32))
        .unwrap()
        .loglik;
    let target = ModelObs(&m);
    let f = RbPfFilter {
        model: &m,
        approx: ObsApprox::new(&target, 1.0).unwrap(),
        weight: RbWeight::RaoBlackwell,
    };
    let base = RngStream::new(33);
    let ls: Vec<f64> = (0..200)
        .map(|k| f.run(&theta, 200, obs, base.fork(k)).unwrap().1.iter().sum())
        .collect();
    let (mean, se) = ratio_stats(&ls, reference);
    assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean}, se {se}");
}

fn toy_prior() -> GammaPrior {
    GammaPrior::new(vec![(2.0, 2.0)]).unwrap()
}

fn toy_loglik(lt: &[f64]) -> f64 {
    -0.5 * ((lt[0] - 0.3) / 0.2).powi(2)
}

#[test]
fn delayed_acceptance_with_exact_surrogate_reproduces_mh() {
    let ev = FnEvaluator(|lt: &[f64], _s: RngStream| Ok(toy_loglik(lt)));
    let sur = FnSurrogate(toy_loglik);
    let cfg = ChainConfig {
        iterations: 10_000,
        thin: 1,
        proposal_cov: DMatrix::from_element(1, 1, 0.09),
    };
    let prior = toy_prior();
    let mh = mh_chain(&prior, &ev, &[0.0], &cfg, None, RngStream::new(41)).unwrap();
    let da = mh_chain(&prior, &ev, &[0.0], &cfg, Some(&sur), RngStream::new(41)).unwrap();
    assert_eq!(mh.decisions, da.decisions);
    assert_eq!(mh.samples, da.samples);
    assert!(da.counters.stage2 <= da.counters.stage1);
}

#[test]
fn stage_one_rejections_skip_the_evaluator() {
    let calls = AtomicUsize::new(0);
    let ev = FnEvaluator(|lt: &[f64], _s: RngStream| {
        calls.fetch_add(1, Ordering::Relaxed);
        Ok(toy_loglik(lt))
    });
    // a surrogate much sharper than the target rejects most proposals early
    let sur = FnSurrogate(|lt: &[f64]| -50.0 * (lt[0] - 0.3).powi(2) / 0.04);
    let cfg = ChainConfig {
        iterations: 2000,
        thin: 1,
        proposal_cov: DMatrix::from_element(1, 1, 0.09),
    };
    let chain = mh_chain(&toy_prior(), &ev, &[0.3], &cfg, Some(&sur), RngStream::new(42)).unwrap();
    // one extra call for the initial evaluation
    assert_eq!(calls.load(Ordering::Relaxed), chain.counters.stage2 + 1);
    assert!(chain.counters.stage2 < chain.counters.stage1 / 2);
    assert_eq!(chain.counters.stage1, 2000);
}

#[test]
fn delayed_acceptance_keeps_the_target() {
    let ev = FnEvaluator(|lt: &[f64], _s: RngStream| Ok(toy_loglik(lt)));
    let sur = FnSurrogate(|lt: &[f64]| -0.5 * ((lt[0] - 0.1) / 0.3).powi(2));
    let cfg = ChainConfig {
        iterations: 60_000,
        thin: 1,
        proposal_cov: DMatrix::from_element(1, 1, 0.09),
    };
    let prior = toy_prior();
    let mh = mh_chain(&prior, &ev, &[0.3], &cfg, None, RngStream::new(43)).unwrap();
    let da = mh_chain(&prior, &ev, &[0.3], &cfg, Some(&sur), RngStream::new(44)).unwrap();
    let mean = |c: &nenkf::rejuvenate::Chain| c.samples.iter().map(|s| s[0]).sum::<f64>() / c.samples.len() as f64;
    let xs: Vec<f64> = mh.samples.iter().map(|s| s[0]).collect();
    let ys: Vec<f64> = da.samples.iter().map(|s| s[0]).collect();
    let se = (nenkf::summary::batch_means_se(&xs, 50).powi(2) + nenkf::summary::batch_means_se(&ys, 50).powi(2)).sqrt();
    assert!((mean(&mh) - mean(&da)).abs() < 4.0 * se, "{} vs {} (se {se})", mean(&mh), mean(&da));
}

#[test]
fn numerical_evaluator_failures_reject_and_are_counted() {
    let ev = FnEvaluator(|lt: &[f64], _s: RngStream| {
        if lt[0] > 0.4 {
            Err(nenkf::FilterError::SingularCovariance { dim: 1 })
        } else {
            Ok(toy_loglik(lt))
        }
    });
    let cfg = ChainConfig {
        iterations: 500,
        thin: 1,
        proposal_cov: DMatrix::from_element(1, 1, 0.09),
    };
    let chain = mh_chain(&toy_prior(), &ev, &[0.3], &cfg, None, RngStream::new(45)).unwrap();
    assert!(chain.counters.evaluator_failures > 0);
    assert!(chain.samples.iter().all(|s| s[0] <= 0.4));
    let bad = FnEvaluator(|_lt: &[f64], _s: RngStream| -> Result<f64> { Err(nenkf::FilterError::Unsupported("x".into())) });
    assert!(mh_chain(&toy_prior(), &bad, &[0.3], &cfg, None, RngStream::new(46)).is_err());
}
