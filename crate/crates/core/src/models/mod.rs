//! Benchmark models and synthetic data generation.

pub mod lorenz;
pub mod lv;
pub mod ou;
pub mod sde;
pub mod simulate;
pub mod sir;

pub use lorenz::Lorenz96Model;
pub use lv::LvModel;
pub use ou::OuModel;
pub use simulate::{simulate_dataset, SimulatedData};
pub use sir::Sir2Model;

/// Lower bound applied to population states after each Euler-Maruyama step.
pub const STATE_FLOOR: f64 = 1e-6;
/// Lower bound applied to state-dependent observation variances.
pub const OBS_VAR_FLOOR: f64 = 1e-2;
