//! Simulation and analysis of K-sync, K-batch-sync, K-async and K-batch-async
//! SGD under random worker delays.

pub mod adasync;
pub mod bounds;
pub mod delay;
pub mod objective;
pub mod rng;
pub mod runtime;
pub mod sim;
pub mod stats;
pub mod variant;

pub use delay::{AgingClass, DelayDistribution, DelayError};
pub use objective::{GradientOracle, NoiseModel, Objective};
pub use sim::{Horizon, RunSetup, Seeds, SimOptions, Trace};
pub use variant::{Variant, VariantConfig};
