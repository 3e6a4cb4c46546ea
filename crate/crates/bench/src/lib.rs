//! Shared fixtures for the kernel benchmarks.

use opclass_core::hmm::{init_model, sample_observations, HmmModel};
use opclass_core::seeding;

/// A jittered near-uniform model at the production shape (N = 20, M = 427).
pub fn production_scale_model() -> HmmModel {
    init_model(20, 427, 7, 0.02).expect("valid dimensions")
}

/// A deterministic observation sequence drawn from the model itself.
pub fn observations(model: &HmmModel, length: usize) -> Vec<u32> {
    let mut rng = seeding::rng(99);
    sample_observations(model, length, &mut rng)
}
