//! Fixtures shared by the benchmarks in `benches/`.

use gsps_core::model::{CorrelationFamily, CorrelationModel, Dataset, SeparableModel};
use gsps_core::simulate::{sample_grf, uniform_locations, SimulationSpec};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fixture_model(p: usize) -> SeparableModel {
    let corr = CorrelationModel::with_default_bounds(CorrelationFamily::AnisotropicExponential, vec![0.6, 0.8]).unwrap();
    let gamma = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { 0.5 });
    SeparableModel::new(corr, gamma).unwrap()
}

/// Simulated dataset on `[0, 10]^2`.
pub fn fixture(n: usize, p: usize, num_realizations: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locations = uniform_locations(&mut rng, n, 2, 10.0);
    sample_grf(&SimulationSpec { locations, model: fixture_model(p), num_realizations, seed }).unwrap()
}
