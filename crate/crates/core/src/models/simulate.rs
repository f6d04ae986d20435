//! Synthetic datasets: a latent path simulated from the model, observed
//! through the model's observation density.

use crate::error::{FilterError, Result};
use crate::model::{Dataset, Model, Observation};
use crate::rng::{Phase, RngStream};

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: Dataset,
    /// Latent state at each observation time.
    pub latent: Vec<Vec<f64>>,
}

/// Simulates `n_obs` observations at `t = 0, …, n_obs − 1`, one model
/// transition apart.
pub fn simulate_dataset(model: &dyn Model, theta: &[f64], n_obs: usize, stream: RngStream) -> Result<SimulatedData> {
    if n_obs == 0 {
        return Err(FilterError::InvalidArgument("need at least one observation".into()));
    }
    let mut x = vec![0.0; model.state_dim()];
    model.sample_initial(theta, &mut stream.phase(Phase::Init).rng(), &mut x);
    let mut latent = Vec::with_capacity(n_obs);
    let mut obs = Vec::with_capacity(n_obs);
    for t in 0..n_obs {
        if t > 0 {
            let mut rng = stream.fork(t as u64).phase(Phase::Simulate).rng();
            model
                .sample_transition(theta, &mut x, &mut rng)
                .map_err(|_| FilterError::TransitionFailure { member: 0, t })?;
        }
        let y = model.sample_obs(theta, &x, &mut stream.fork(t as u64).phase(Phase::Observe).rng());
        latent.push(x.clone());
        obs.push(Observation::new(t, y));
    }
    Ok(SimulatedData {
        dataset: Dataset::new(obs)?,
        latent,
    })
}
