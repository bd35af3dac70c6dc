//! Toy forward model: damage + environment in, motion features out.
//!
//! Replaces a hydrodynamic simulator with an analytic surrogate that keeps
//! the properties the inference pipeline needs: smooth in (z, w), damage
//! sensitivity in both the spectral and static features, and a many-to-one
//! structure (only the stiffness/mass ratio enters the natural frequency)
//! that leaves genuine posterior uncertainty to infer.

mod dataset;
mod features;
mod response;

pub use dataset::{
    build_dataset, sample_damage, sample_environment, Dataset, MinMaxScaler, Scenario, Split,
};
pub use features::{
    extract_features, feature_vector, periodogram, DofFeatures, F_LIM_DEFAULT_HZ,
    TRANSIENT_FRACTION,
};
pub use response::{
    natural_frequency, simulate_response, DamageState, Environment, SimulatorSpec,
    NATURAL_FREQS_HZ,
};
