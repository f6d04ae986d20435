//! State-space model abstraction and the core domain types.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::dist::GammaPrior;
use crate::error::{FilterError, Result};
use crate::rng::StreamRng;

/// A parameter vector. Stored on the log scale (the scale used for proposals
/// and reporting); every component is positive on the natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    log: Vec<f64>,
}

impl ParamVector {
    pub fn from_natural(values: &[f64]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(FilterError::InvalidArgument(format!(
                "parameters must be finite and positive, got {v}"
            )));
        }
        Ok(Self {
            log: values.iter().map(|v| v.ln()).collect(),
        })
    }

    pub fn from_log(log: Vec<f64>) -> Result<Self> {
        if log.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::InvalidArgument("non-finite log-parameter".into()));
        }
        Ok(Self { log })
    }

    pub fn log(&self) -> &[f64] {
        &self.log
    }

    pub fn natural(&self) -> Vec<f64> {
        self.log.iter().map(|v| v.exp()).collect()
    }

    pub fn dim(&self) -> usize {
        self.log.len()
    }
}

/// One observation `y_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: usize,
    pub values: DVector<f64>,
}

impl Observation {
    pub fn new(t: usize, values: Vec<f64>) -> Self {
        Self {
            t,
            values: DVector::from_vec(values),
        }
    }
}

/// An observation sequence `y_{0:T}` with strictly increasing time indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    observations: Vec<Observation>,
}

impl Dataset {
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        if observations.is_empty() {
            return Err(FilterError::InvalidArgument("dataset has no observations".into()));
        }
        let dim = observations[0].values.len();
        for w in observations.windows(2) {
            if w[1].t <= w[0].t {
                return Err(FilterError::InvalidArgument(format!(
                    "time indices must increase strictly ({} then {})",
                    w[0].t, w[1].t
                )));
            }
        }
        for o in &observations {
            if o.values.len() != dim {
                return Err(FilterError::DimensionMismatch {
                    what: "observation",
                    expected: dim,
                    got: o.values.len(),
                });
            }
            if o.values.iter().any(|v| !v.is_finite()) {
                return Err(FilterError::InvalidArgument(format!("non-finite observation at t={}", o.t)));
            }
        }
        Ok(Self { observations })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.observations[0].values.len()
    }

    /// The first `n` observations.
    pub fn prefix(&self, n: usize) -> &[Observation] {
        &self.observations[..n.min(self.observations.len())]
    }
}

/// N state vectors of dimension d, stored column-wise (one member per column).
#[derive(Debug, Clone, PartialEq)]
pub struct StateEnsemble {
    members: DMatrix<f64>,
}

impl StateEnsemble {
    pub fn new(members: DMatrix<f64>) -> Self {
        Self { members }
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Self {
        let d = cols.first().map_or(0, |c| c.len());
        let members = DMatrix::from_fn(d, cols.len(), |i, j| cols[j][i]);
        Self { members }
    }

    /// N copies of `x`.
    pub fn replicate(x: &[f64], n: usize) -> Self {
        Self {
            members: DMatrix::from_fn(x.len(), n, |i, _| x[i]),
        }
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.members
    }

    pub fn member(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.members.as_slice()[j * d..(j + 1) * d]
    }

    pub fn member_mut(&mut self, j: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.members.as_mut_slice()[j * d..(j + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.members.iter().all(|v| v.is_finite())
    }

    /// Ensemble made of the members at `indices` (with repetition).
    pub fn select(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, indices.len());
        for (k, &j) in indices.iter().enumerate() {
            out.column_mut(k).copy_from(&self.members.column(j));
        }
        Self { members: out }
    }
}

/// A linear-Gaussian observation model `y ~ N(Hx, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianObs {
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl GaussianObs {
    pub fn new(h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if r.nrows() != h.nrows() || r.ncols() != h.nrows() {
            return Err(FilterError::DimensionMismatch {
                what: "observation noise covariance",
                expected: h.nrows(),
                got: r.nrows(),
            });
        }
        Ok(Self { h, r })
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    /// Same H with R scaled by `factor`.
    pub fn inflated(&self, factor: f64) -> Self {
        Self {
            h: self.h.clone(),
            r: &self.r * factor,
        }
    }
}

/// Exact linear-Gaussian state-space structure:
/// `x_0 ~ N(m0, P0)`, `x_t = F x_{t-1} + b + N(0, Q)`, `y_t ~ N(H x_t, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianSsm {
    pub transition: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub noise: DMatrix<f64>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    pub obs: GaussianObs,
}

/// A state-space model for a fixed parameter vector `θ` (natural scale).
pub trait Model: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn param_names(&self) -> Vec<String>;
    fn prior(&self) -> &GammaPrior;

    fn param_dim(&self) -> usize {
        self.prior().dim()
    }

    /// Draw `x_0 ~ p_0(·)` into `out`.
    fn sample_initial(&self, theta: &[f64], rng: &mut StreamRng, out: &mut [f64]);

    /// Advance `x` in place by one inter-observation interval.
    fn sample_transition(&self, theta: &[f64], x: &mut [f64], rng: &mut StreamRng) -> Result<()>;

    /// `log f(y | x)`.
    fn obs_logpdf(&self, theta: &[f64], y: &[f64], x: &[f64]) -> f64;

    /// Draw `y ~ f(· | x)`.
    fn sample_obs(&self, theta: &[f64], x: &[f64], rng: &mut StreamRng) -> Vec<f64>;

    /// Linear-Gaussian observation model (or approximation) given the
    /// forecast mean. `None` when the model has no such structure.
    fn gaussian_obs(&self, theta: &[f64], forecast_mean: &DVector<f64>) -> Option<GaussianObs>;

    /// `log p(x_new | x_prev)`, only for models with a tractable transition.
    fn transition_logpdf(&self, _theta: &[f64], _x_new: &[f64], _x_prev: &[f64]) -> Option<f64> {
        None
    }

    /// Exact linear-Gaussian structure, when the model has it.
    fn linear_gaussian(&self, _theta: &[f64]) -> Option<LinearGaussianSsm> {
        None
    }
}

/// Source of the `(H, R)` pair used by an EnKF update.
pub trait ObsBuilder: Sync {
    fn build(&self, theta: &[f64], forecast_mean: &DVector<f64>) -> Result<GaussianObs>;
}

impl ObsBuilder for GaussianObs {
    fn build(&self, _theta: &[f64], _forecast_mean: &DVector<f64>) -> Result<GaussianObs> {
        Ok(self.clone())
    }
}

/// The model's own Gaussian observation structure.
pub struct ModelObs<'a>(pub &'a dyn Model);

impl ObsBuilder for ModelObs<'_> {
    fn build(&self, theta: &[f64], forecast_mean: &DVector<f64>) -> Result<GaussianObs> {
        self.0.gaussian_obs(theta, forecast_mean).ok_or_else(|| {
            FilterError::Unsupported(format!("{} has no Gaussian observation structure", self.0.name()))
        })
    }
}

/// Another builder with its R multiplied by a constant factor.
pub struct InflatedObs<B> {
    pub inner: B,
    pub factor: f64,
}

impl<B: ObsBuilder> ObsBuilder for InflatedObs<B> {
    fn build(&self, theta: &[f64], forecast_mean: &DVector<f64>) -> Result<GaussianObs> {
        Ok(self.inner.build(theta, forecast_mean)?.inflated(self.factor))
    }
}

/// Wraps a model and counts how often its transition density is evaluated.
pub struct InstrumentedModel<M> {
    pub inner: M,
    transition_density_calls: AtomicUsize,
    transition_samples: AtomicUsize,
}

impl<M: Model> InstrumentedModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            transition_density_calls: AtomicUsize::new(0),
            transition_samples: AtomicUsize::new(0),
        }
    }

    pub fn transition_density_calls(&self) -> usize {
        self.transition_density_calls.load(Ordering::Relaxed)
    }

    pub fn transition_samples(&self) -> usize {
        self.transition_samples.load(Ordering::Relaxed)
    }
}

impl<M: Model> Model for InstrumentedModel<M> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
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
        self.transition_samples.fetch_add(1, Ordering::Relaxed);
        self.inner.sample_transition(theta, x, rng)
    }
    fn obs_logpdf(&self, theta: &[f64], y: &[f64], x: &[f64]) -> f64 {
        self.inner.obs_logpdf(theta, y, x)
    }
    fn sample_obs(&self, theta: &[f64], x: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        self.inner.sample_obs(theta, x, rng)
    }
    fn gaussian_obs(&self, theta: &[f64], forecast_mean: &DVector<f64>) -> Option<GaussianObs> {
        self.inner.gaussian_obs(theta, forecast_mean)
    }
    fn transition_logpdf(&self, theta: &[f64], x_new: &[f64], x_prev: &[f64]) -> Option<f64> {
        self.transition_density_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.transition_logpdf(theta, x_new, x_prev)
    }
    fn linear_gaussian(&self, theta: &[f64]) -> Option<LinearGaussianSsm> {
        self.inner.linear_gaussian(theta)
    }
}
