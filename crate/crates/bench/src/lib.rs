//! Fixtures shared by the benchmarks.

use entrolab::datagen::sample_batch;
use entrolab::numerics::gaussian_matrix;
use entrolab::{Architecture, Batch, DataModel, Network, Rng};

/// A deep linear network of widths `dims` with a matching random teacher,
/// and one batch drawn from it.
pub fn linear_fixture(dims: &[usize], batch_size: usize, seed: u64) -> (Network, Batch) {
    let mut rng = Rng::new(seed);
    let (dx, dy) = (dims[0], *dims.last().unwrap());
    let v = gaussian_matrix(&mut rng, dy, dx, None).unwrap();
    let dm = DataModel::isotropic(v, 0.1).unwrap();
    let net = Network::random(Architecture::DeepLinear, dims, &mut rng, 0.5).unwrap();
    let batch = sample_batch(&dm, &mut rng, batch_size).unwrap();
    (net, batch)
}
