//! Experiment configuration, read from a TOML file with one section per
//! concern. Every field has a default; [`ExperimentConfig::resolved`] fills in
//! the model-dependent ones so the run metadata records every setting used.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelId {
    Ou,
    Lv,
    Sir,
    Lorenz96,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmId {
    Pf,
    Enkf,
    Aenkf,
    Penkf,
    Smc2,
    Nenkf,
    Rbsmc2,
    Emcmc,
    Pmmh,
    KfExact,
}

impl AlgorithmId {
    /// Algorithms that estimate the parameter posterior sequentially.
    pub fn is_parameter_filter(self) -> bool {
        matches!(self, Self::Aenkf | Self::Penkf | Self::Smc2 | Self::Nenkf | Self::Rbsmc2)
    }

    pub fn is_chain(self) -> bool {
        matches!(self, Self::Emcmc | Self::Pmmh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptKind {
    Off,
    Variance,
    Acceptance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    RaoBlackwell,
    Weight0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResamplerKind {
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    KfExact,
    Pmmh,
    Emcmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub id: ModelId,
    /// Parameters on the natural scale used for simulation and for the
    /// fixed-parameter filters.
    pub theta: Option<Vec<f64>>,
    pub x0: Option<Vec<f64>>,
    pub dt: Option<f64>,
    pub substeps: Option<usize>,
    pub obs_var: Option<f64>,
    /// Lorenz-96 dimension.
    pub d: Option<usize>,
    /// Discretisation used to generate data, when it differs from the
    /// inference grid.
    pub data_dt: Option<f64>,
    pub data_substeps: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            id: ModelId::Ou,
            theta: None,
            x0: None,
            dt: None,
            substeps: None,
            obs_var: None,
            d: None,
            data_dt: None,
            data_substeps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_obs: Option<usize>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_obs: None, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub id: AlgorithmId,
    /// Parameter particles (ensemble size for the augmented EnKF).
    pub m: usize,
    /// Initial inner ensemble size / number of state particles.
    pub n0: usize,
    pub gamma: f64,
    /// Liu-West discount.
    pub delta: f64,
    /// Proposal variance factor; `None` selects `2.56² / d`.
    pub zeta2: Option<f64>,
    pub leave_one_out: bool,
    pub k: usize,
    pub delayed_acceptance: bool,
    pub move_iterations: usize,
    pub adapt: AdaptKind,
    pub sigma2_threshold: f64,
    pub r: usize,
    pub acceptance_threshold: f64,
    pub n_max: usize,
    /// Proposal inflation `c` of the observation variance for RB-SMC².
    pub inflation: f64,
    pub weight: WeightKind,
    pub resampler: ResamplerKind,
    /// Chain length for `emcmc` and `pmmh` runs.
    pub iterations: usize,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        Self {
            id: AlgorithmId::Nenkf,
            m: 1000,
            n0: 10,
            gamma: 0.4,
            delta: 0.97,
            zeta2: None,
            leave_one_out: true,
            k: 3,
            delayed_acceptance: true,
            move_iterations: 1,
            adapt: AdaptKind::Variance,
            sigma2_threshold: 1.5,
            r: 10,
            acceptance_threshold: 0.10,
            n_max: 100_000,
            inflation: 1.0,
            weight: WeightKind::RaoBlackwell,
            resampler: ResamplerKind::Multinomial,
            iterations: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub replicates: usize,
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            replicates: 1,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    /// `None` picks the exact Kalman likelihood for OU and PMMH otherwise.
    pub oracle: Option<OracleKind>,
    pub iterations: usize,
    pub pilot_iterations: usize,
    pub thin: usize,
    pub batches: usize,
    /// State particles (or ensemble members) for the PMMH / eMCMC oracles.
    pub n: usize,
    /// Multiplier on the tuned proposal covariance.
    pub scale: f64,
    pub seed: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            oracle: None,
            iterations: 100_000,
            pilot_iterations: 5_000,
            thin: 1,
            batches: 50,
            n: 500,
            scale: 1.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub algorithm: AlgorithmConfig,
    pub run: RunConfig,
    pub reference: ReferenceConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(s).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    /// A copy with every model-dependent default made explicit.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let m = &mut c.model;
        match m.id {
            ModelId::Ou => {
                m.theta.get_or_insert_with(|| vec![1.0, 2.0, 1.0]);
                m.x0.get_or_insert_with(|| vec![10.0]);
                m.dt.get_or_insert(1.0);
                m.obs_var.get_or_insert(0.1);
                c.data.n_obs.get_or_insert(51);
            }
            ModelId::Lv => {
                m.theta.get_or_insert_with(|| vec![0.5, 0.0025, 0.3]);
                m.x0.get_or_insert_with(|| vec![50.0, 50.0]);
                m.dt.get_or_insert(0.2);
                m.substeps.get_or_insert(10);
                m.data_dt.get_or_insert(1e-3);
                m.data_substeps.get_or_insert(2000);
                c.data.n_obs.get_or_insert(20);
            }
            ModelId::Sir => {
                m.theta.get_or_insert_with(|| vec![1.0, 1.0, 1.0, 0.2, 1.0]);
                m.x0.get_or_insert_with(|| nenkf::models::sir::SIR_X0.to_vec());
                m.dt.get_or_insert(0.1);
                m.substeps.get_or_insert(10);
                c.data.n_obs.get_or_insert(12);
            }
            ModelId::Lorenz96 => {
                let d = *m.d.get_or_insert(5);
                m.theta.get_or_insert_with(|| vec![1.0, 1.0, 8.0, 10f64.sqrt()]);
                m.x0.get_or_insert_with(|| vec![0.0; d]);
                m.dt.get_or_insert(5e-3);
                m.substeps.get_or_insert(40);
                m.obs_var.get_or_insert(25.0);
                c.data.n_obs.get_or_insert(30);
            }
        }
        c
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Validation(msg));
        let a = &self.algorithm;
        if a.m == 0 {
            return bad("algorithm.m must be at least 1".into());
        }
        if a.n0 == 0 {
            return bad("algorithm.n0 must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&a.gamma) {
            return bad(format!("algorithm.gamma must lie in [0, 1], got {}", a.gamma));
        }
        if !(a.delta > 1.0 / 3.0 && a.delta <= 1.0) {
            return bad(format!("algorithm.delta must lie in (1/3, 1], got {}", a.delta));
        }
        if let Some(z) = a.zeta2 {
            if !(z >= 0.0) {
                return bad(format!("algorithm.zeta2 must be nonnegative, got {z}"));
            }
        }
        if a.k == 0 {
            return bad("algorithm.k must be at least 1".into());
        }
        if !(a.sigma2_threshold > 0.0) {
            return bad("algorithm.sigma2_threshold must be positive".into());
        }
        if a.r < 2 {
            return bad("algorithm.r must be at least 2".into());
        }
        if a.n_max < a.n0 {
            return bad("algorithm.n_max must be at least n0".into());
        }
        if !(a.inflation >= 1.0) || !a.inflation.is_finite() {
            return bad(format!("algorithm.inflation must be a finite c >= 1, got {}", a.inflation));
        }
        if matches!(a.id, AlgorithmId::Enkf | AlgorithmId::Penkf | AlgorithmId::Nenkf | AlgorithmId::Emcmc) && a.n0 < 2 {
            return bad("EnKF-based algorithms need n0 >= 2".into());
        }
        if a.id == AlgorithmId::Aenkf && a.m < 2 {
            return bad("the augmented EnKF needs m >= 2".into());
        }
        if self.run.replicates == 0 {
            return bad("run.replicates must be at least 1".into());
        }
        if self.run.threads == Some(0) {
            return bad("run.threads must be at least 1".into());
        }
        let r = &self.reference;
        if r.iterations == 0 || r.batches < 2 || r.iterations < r.batches {
            return bad("reference.iterations must be at least reference.batches >= 2".into());
        }
        if !(r.scale >= 0.0) {
            return bad("reference.scale must be nonnegative".into());
        }
        let needs_ou = a.id == AlgorithmId::KfExact
            || (a.id == AlgorithmId::Rbsmc2 && a.weight == WeightKind::Weight0)
            || r.oracle == Some(OracleKind::KfExact);
        if needs_ou && self.model.id != ModelId::Ou {
            return bad("the exact Kalman likelihood and the weight0 variant need the OU model".into());
        }
        let m = &self.model;
        if let Some(d) = m.d {
            if m.id == ModelId::Lorenz96 && d < 4 {
                return bad("Lorenz-96 needs d >= 4".into());
            }
        }
        for (name, v) in [("dt", m.dt), ("obs_var", m.obs_var), ("data_dt", m.data_dt)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return bad(format!("model.{name} must be positive"));
                }
            }
        }
        if let Some(t) = &m.theta {
            if t.iter().any(|v| !(*v > 0.0)) {
                return bad("model.theta entries must be positive".into());
            }
        }
        Ok(())
    }
}
