//! Builds models from a resolved configuration.

use nenkf::models::{Lorenz96Model, LvModel, OuModel, Sir2Model};
use nenkf::Model;

use crate::config::{ExperimentConfig, ModelId};
use crate::error::CliError;

/// The model used for inference, the one used to generate data (they differ
/// only in discretisation) and the data-generating parameters.
pub struct ModelSetup {
    pub inference: Box<dyn Model>,
    pub generator: Box<dyn Model>,
    pub theta: Vec<f64>,
    pub n_obs: usize,
}

fn same_interval(dt: f64, sub: usize, ddt: f64, dsub: usize) -> Result<(), CliError> {
    let (a, b) = (dt * sub as f64, ddt * dsub as f64);
    if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
        return Err(CliError::Validation(format!(
            "inference grid covers {a} time units between observations but the data grid covers {b}"
        )));
    }
    Ok(())
}

fn fixed<const N: usize>(v: &[f64], what: &str) -> Result<[f64; N], CliError> {
    v.try_into()
        .map_err(|_| CliError::Validation(format!("model.x0 for {what} needs {N} entries, got {}", v.len())))
}

/// `cfg` must already be resolved.
pub fn build_models(cfg: &ExperimentConfig) -> Result<ModelSetup, CliError> {
    let m = &cfg.model;
    let missing = |f: &str| CliError::Validation(format!("model.{f} is unresolved"));
    let theta = m.theta.clone().ok_or_else(|| missing("theta"))?;
    let x0 = m.x0.clone().ok_or_else(|| missing("x0"))?;
    let dt = m.dt.ok_or_else(|| missing("dt"))?;
    let (inference, generator): (Box<dyn Model>, Box<dyn Model>) = match m.id {
        ModelId::Ou => {
            let obs_var = m.obs_var.ok_or_else(|| missing("obs_var"))?;
            let x: [f64; 1] = fixed(&x0, "OU")?;
            (Box::new(OuModel::new(x[0], dt, obs_var)), Box::new(OuModel::new(x[0], dt, obs_var)))
        }
        ModelId::Lv => {
            let x: [f64; 2] = fixed(&x0, "LV")?;
            let sub = m.substeps.ok_or_else(|| missing("substeps"))?;
            let ddt = m.data_dt.ok_or_else(|| missing("data_dt"))?;
            let dsub = m.data_substeps.ok_or_else(|| missing("data_substeps"))?;
            same_interval(dt, sub, ddt, dsub)?;
            (Box::new(LvModel::new(x, dt, sub)), Box::new(LvModel::new(x, ddt, dsub)))
        }
        ModelId::Sir => {
            let x: [f64; 6] = fixed(&x0, "SIR")?;
            let sub = m.substeps.ok_or_else(|| missing("substeps"))?;
            let ddt = m.data_dt.unwrap_or(dt);
            let dsub = m.data_substeps.unwrap_or(sub);
            same_interval(dt, sub, ddt, dsub)?;
            (Box::new(Sir2Model::new(x, dt, sub)), Box::new(Sir2Model::new(x, ddt, dsub)))
        }
        ModelId::Lorenz96 => {
            let d = m.d.ok_or_else(|| missing("d"))?;
            if x0.iter().any(|v| *v != 0.0) || x0.len() != d {
                return Err(CliError::Validation("Lorenz-96 starts from the zero vector of length d".into()));
            }
            let sub = m.substeps.ok_or_else(|| missing("substeps"))?;
            let obs_var = m.obs_var.ok_or_else(|| missing("obs_var"))?;
            let ddt = m.data_dt.unwrap_or(dt);
            let dsub = m.data_substeps.unwrap_or(sub);
            same_interval(dt, sub, ddt, dsub)?;
            (
                Box::new(Lorenz96Model::new(d, dt, sub, obs_var)),
                Box::new(Lorenz96Model::new(d, ddt, dsub, obs_var)),
            )
        }
    };
    if theta.len() != inference.param_dim() {
        return Err(CliError::Validation(format!(
            "model.theta needs {} entries for {}, got {}",
            inference.param_dim(),
            inference.name(),
            theta.len()
        )));
    }
    let n_obs = cfg.data.n_obs.ok_or_else(|| CliError::Validation("data.n_obs is unresolved".into()))?;
    Ok(ModelSetup {
        inference,
        generator,
        theta,
        n_obs,
    })
}
