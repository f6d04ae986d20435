//! Stochastic ensemble Kalman filter, its likelihood estimate, the augmented
//! (joint state and parameter) EnKF and Liu-West parameter shrinkage.

use nalgebra::{DMatrix, DVector};
use rand_distr::StandardNormal;
use rand::Rng;

use crate::error::{FilterError, Result};
use crate::linalg::{cholesky_jittered, column_moments, gaussian_logpdf_chol, psd_sqrt, symmetrise};
use crate::model::{GaussianObs, Model, ObsBuilder, Observation, StateEnsemble};
use crate::pf::propagate_member;
use crate::rng::{Phase, RngStream};
use crate::summary::{summarise, ComponentSummary};

/// `K = Σ_f H' (H Σ_f H' + R)^{-1}`, computed with a linear solve.
pub fn kalman_gain(sigma_f: &DMatrix<f64>, obs: &GaussianObs) -> Result<DMatrix<f64>> {
    if sigma_f.nrows() != obs.state_dim() || sigma_f.ncols() != obs.state_dim() {
        return Err(FilterError::DimensionMismatch {
            what: "forecast covariance",
            expected: obs.state_dim(),
            got: sigma_f.nrows(),
        });
    }
    let h_sigma = &obs.h * sigma_f;
    let mut s = &h_sigma * obs.h.transpose() + &obs.r;
    symmetrise(&mut s);
    let chol = cholesky_jittered(&s)?;
    Ok(chol.solve(&h_sigma).transpose())
}

/// Result of one EnKF step.
#[derive(Debug, Clone)]
pub struct EnkfStepOutput {
    pub ensemble: StateEnsemble,
    pub forecast_mean: DVector<f64>,
    pub forecast_cov: DMatrix<f64>,
    /// The `(H, R)` used for this update.
    pub obs: GaussianObs,
    pub log_lik_increment: f64,
}

impl EnkfStepOutput {
    /// Recomputes the increment from the stored forecast moments.
    pub fn recompute_increment(&self, y: &DVector<f64>) -> Result<f64> {
        let mut s = &self.obs.h * &self.forecast_cov * self.obs.h.transpose() + &self.obs.r;
        symmetrise(&mut s);
        let chol = cholesky_jittered(&s)?;
        Ok(gaussian_logpdf_chol(y, &(&self.obs.h * &self.forecast_mean), &chol))
    }
}

/// Forecast moments, the `(H, R)` pair used and the likelihood increment of
/// an in-place analysis.
pub(crate) struct Analysis {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub obs: GaussianObs,
    pub increment: f64,
}

/// Stochastic EnKF analysis of the forecast ensemble in the columns of
/// `members`, in place. Pseudo-observation noise for member `j` comes from
/// `stream.fork(j).phase(PseudoObs)`.
pub(crate) fn analyse(
    members: &mut DMatrix<f64>,
    y: &DVector<f64>,
    obs_for: impl FnOnce(&DVector<f64>) -> Result<GaussianObs>,
    stream: RngStream,
) -> Result<Analysis> {
    let (mean, cov) = column_moments(members)?;
    let obs = obs_for(&mean)?;
    let dy = obs.obs_dim();
    if y.len() != dy {
        return Err(FilterError::DimensionMismatch {
            what: "observation",
            expected: dy,
            got: y.len(),
        });
    }
    if obs.state_dim() != members.nrows() {
        return Err(FilterError::DimensionMismatch {
            what: "observation matrix columns",
            expected: members.nrows(),
            got: obs.state_dim(),
        });
    }
    let h_sigma = &obs.h * &cov;
    let mut s = &h_sigma * obs.h.transpose() + &obs.r;
    symmetrise(&mut s);
    let chol = cholesky_jittered(&s)?;
    let increment = gaussian_logpdf_chol(y, &(&obs.h * &mean), &chol);
    if !increment.is_finite() {
        return Err(FilterError::NotANumber("EnKF likelihood increment"));
    }
    let gain = chol.solve(&h_sigma).transpose();
    let r_sqrt = psd_sqrt(&obs.r)?;
    let n = members.ncols();
    // innovations y - (H x_j + L_R z_j), one column per member
    let mut innov = &obs.h * &*members;
    let mut z = DVector::zeros(dy);
    for j in 0..n {
        let mut rng = stream.fork(j as u64).phase(Phase::PseudoObs).rng();
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let noise = &r_sqrt * &z;
        for i in 0..dy {
            innov[(i, j)] = y[i] - innov[(i, j)] - noise[i];
        }
    }
    members.gemm(1.0, &gain, &innov, 1.0);
    if members.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::NotANumber("EnKF update"));
    }
    Ok(Analysis {
        mean,
        cov,
        obs,
        increment,
    })
}

fn step_output(ensemble: StateEnsemble, a: Analysis) -> EnkfStepOutput {
    EnkfStepOutput {
        ensemble,
        forecast_mean: a.mean,
        forecast_cov: a.cov,
        obs: a.obs,
        log_lik_increment: a.increment,
    }
}

/// Time-0 EnKF: draw `N` members from `p_0` and assimilate `y_0`.
pub fn enkf_init(
    model: &dyn Model,
    theta: &[f64],
    n: usize,
    y0: &Observation,
    obs: &dyn ObsBuilder,
    stream: RngStream,
) -> Result<EnkfStepOutput> {
    if n < 2 {
        return Err(FilterError::precondition(format!("EnKF needs at least 2 members, got {n}")));
    }
    let d = model.state_dim();
    let mut ens = StateEnsemble::new(DMatrix::zeros(d, n));
    for j in 0..n {
        let mut rng = stream.fork(j as u64).phase(Phase::Init).rng();
        model.sample_initial(theta, &mut rng, ens.member_mut(j));
    }
    let a = analyse(ens.matrix_mut(), &y0.values, |m| obs.build(theta, m), stream)?;
    Ok(step_output(ens, a))
}

/// One EnKF step: forecast every member through the transition, then
/// assimilate `y_t`.
pub fn enkf_step(
    model: &dyn Model,
    theta: &[f64],
    prev: &StateEnsemble,
    y_t: &Observation,
    obs: &dyn ObsBuilder,
    stream: RngStream,
) -> Result<EnkfStepOutput> {
    let n = prev.size();
    if n < 2 {
        return Err(FilterError::precondition(format!("EnKF needs at least 2 members, got {n}")));
    }
    let mut ens = prev.clone();
    for j in 0..n {
        let mut rng = stream.fork(j as u64).phase(Phase::Forecast).rng();
        propagate_member(model, theta, ens.member_mut(j), &mut rng, j, y_t.t)?;
    }
    let a = analyse(ens.matrix_mut(), &y_t.values, |m| obs.build(theta, m), stream)?;
    Ok(step_output(ens, a))
}

/// Output of a full EnKF pass.
#[derive(Debug, Clone)]
pub struct EnkfRun {
    pub loglik: f64,
    pub increments: Vec<f64>,
    pub ensemble: StateEnsemble,
}

/// EnKF over `data`; step `k` uses `stream.fork(k)`.
pub fn enkf_run(
    model: &dyn Model,
    theta: &[f64],
    n: usize,
    data: &[Observation],
    obs: &dyn ObsBuilder,
    stream: RngStream,
) -> Result<EnkfRun> {
    let (first, rest) = data
        .split_first()
        .ok_or_else(|| FilterError::precondition("EnKF needs at least one observation"))?;
    let out = enkf_init(model, theta, n, first, obs, stream.fork(0))?;
    let mut increments = Vec::with_capacity(data.len());
    increments.push(out.log_lik_increment);
    let mut ensemble = out.ensemble;
    for (k, y) in rest.iter().enumerate() {
        let out = enkf_step(model, theta, &ensemble, y, obs, stream.fork(k as u64 + 1))?;
        increments.push(out.log_lik_increment);
        ensemble = out.ensemble;
    }
    Ok(EnkfRun {
        loglik: increments.iter().sum(),
        increments,
        ensemble,
    })
}

/// Liu-West kernel constants for discount `δ ∈ (1/3, 1]`:
/// `h = 1 − ((3δ − 1) / (2δ))²`, `a = √(1 − h²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiuWestConfig {
    pub delta: f64,
    pub h: f64,
    pub a: f64,
}

impl LiuWestConfig {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 1.0 / 3.0 && delta <= 1.0) {
            return Err(FilterError::InvalidArgument(format!(
                "Liu-West discount must lie in (1/3, 1], got {delta}"
            )));
        }
        let r = (3.0 * delta - 1.0) / (2.0 * delta);
        let h = 1.0 - r * r;
        Ok(Self {
            delta,
            h,
            a: (1.0 - h * h).sqrt(),
        })
    }
}

/// Weighted mean and covariance of a cloud of vectors. Without weights the
/// covariance uses the N−1 divisor.
fn cloud_moments(points: &[Vec<f64>], weights: Option<&[f64]>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = points[0].len();
    let m = DMatrix::from_fn(d, points.len(), |i, j| points[j][i]);
    match weights {
        None => column_moments(&m),
        Some(w) => {
            let total: f64 = w.iter().sum();
            let mut mean = DVector::zeros(d);
            for (j, wj) in w.iter().enumerate() {
                mean.axpy(wj / total, &m.column(j), 1.0);
            }
            let mut cov = DMatrix::zeros(d, d);
            for (j, wj) in w.iter().enumerate() {
                let c = m.column(j) - &mean;
                cov.ger(wj / total, &c, &c, 1.0);
            }
            symmetrise(&mut cov);
            Ok((mean, cov))
        }
    }
}

/// Liu-West move `θ̃_i ~ N(aθ_i + (1−a)θ̄, h²V)` applied to each point of a
/// (log-scale) parameter cloud. Particle `i` draws from
/// `stream.fork(i).phase(LiuWest)`.
pub fn liu_west_shrink(
    points: &[Vec<f64>],
    weights: Option<&[f64]>,
    cfg: &LiuWestConfig,
    stream: RngStream,
) -> Result<Vec<Vec<f64>>> {
    if points.len() < 2 {
        return Err(FilterError::precondition("Liu-West shrinkage needs at least 2 particles"));
    }
    if let Some(w) = weights {
        if w.len() != points.len() {
            return Err(FilterError::DimensionMismatch {
                what: "Liu-West weights",
                expected: points.len(),
                got: w.len(),
            });
        }
    }
    if cfg.h == 0.0 {
        return Ok(points.to_vec());
    }
    let (mean, cov) = cloud_moments(points, weights)?;
    let l = psd_sqrt(&(cov * (cfg.h * cfg.h)))?;
    let d = mean.len();
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = stream.fork(i as u64).phase(Phase::LiuWest).rng();
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let jitter = &l * z;
            (0..d)
                .map(|k| cfg.a * p[k] + (1.0 - cfg.a) * mean[k] + jitter[k])
                .collect()
        })
        .collect())
}

/// Output of an augmented EnKF pass.
#[derive(Debug, Clone)]
pub struct AenkfRun {
    /// Per-time summaries of each log-parameter component.
    pub summaries: Vec<Vec<ComponentSummary>>,
    pub final_log_theta: Vec<Vec<f64>>,
    pub increments: Vec<f64>,
}

/// Augmented ensemble Kalman filter: the state is `z = (x, log θ)`, the
/// parameter block follows Liu-West dynamics and the joint ensemble is
/// updated with `H_z = (H, 0)`.
pub fn aenkf_run(
    model: &dyn Model,
    n: usize,
    data: &[Observation],
    lw: &LiuWestConfig,
    obs: &dyn ObsBuilder,
    stream: RngStream,
) -> Result<AenkfRun> {
    if n < 2 {
        return Err(FilterError::precondition("AEnKF needs at least 2 members"));
    }
    let dx = model.state_dim();
    let dt = model.param_dim();
    let prior = model.prior();
    let mut z = DMatrix::zeros(dx + dt, n);
    let mut out = AenkfRun {
        summaries: Vec::with_capacity(data.len()),
        final_log_theta: Vec::new(),
        increments: Vec::with_capacity(data.len()),
    };
    let uniform = vec![1.0; n];
    for (k, y) in data.iter().enumerate() {
        let s = stream.fork(k as u64);
        if k == 0 {
            for j in 0..n {
                let lt = prior.sample_log(&mut s.fork(j as u64).phase(Phase::Prior).rng());
                let theta: Vec<f64> = lt.iter().map(|v| v.exp()).collect();
                let mut x = vec![0.0; dx];
                model.sample_initial(&theta, &mut s.fork(j as u64).phase(Phase::Init).rng(), &mut x);
                for i in 0..dx {
                    z[(i, j)] = x[i];
                }
                for i in 0..dt {
                    z[(dx + i, j)] = lt[i];
                }
            }
        } else {
            let cloud: Vec<Vec<f64>> = (0..n).map(|j| (0..dt).map(|i| z[(dx + i, j)]).collect()).collect();
            let moved = liu_west_shrink(&cloud, None, lw, s.phase(Phase::LiuWest))?;
            let mut x = vec![0.0; dx];
            for (j, lt) in moved.iter().enumerate() {
                let theta: Vec<f64> = lt.iter().map(|v| v.exp()).collect();
                for i in 0..dx {
                    x[i] = z[(i, j)];
                }
                let mut rng = s.fork(j as u64).phase(Phase::Forecast).rng();
                propagate_member(model, &theta, &mut x, &mut rng, j, y.t)?;
                for i in 0..dx {
                    z[(i, j)] = x[i];
                }
                for i in 0..dt {
                    z[(dx + i, j)] = lt[i];
                }
            }
        }
        let a = analyse(
            &mut z,
            &y.values,
            |m| {
                let xm = m.rows(0, dx).into_owned();
                let theta_bar: Vec<f64> = (0..dt).map(|i| m[dx + i].exp()).collect();
                let g = obs.build(&theta_bar, &xm)?;
                let mut hz = DMatrix::zeros(g.obs_dim(), dx + dt);
                hz.view_mut((0, 0), (g.obs_dim(), dx)).copy_from(&g.h);
                GaussianObs::new(hz, g.r)
            },
            s,
        )?;
        out.increments.push(a.increment);
        let cloud: Vec<Vec<f64>> = (0..n).map(|j| (0..dt).map(|i| z[(dx + i, j)]).collect()).collect();
        out.summaries.push(summarise(&cloud, &uniform)?);
        if k + 1 == data.len() {
            out.final_log_theta = cloud;
        }
    }
    Ok(out)
}
