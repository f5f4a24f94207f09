//! Seeded random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed by an
//! explicit seed and a stream id, so results are reproducible across runs and
//! independent of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grid::Grid;

pub type Rng = ChaCha8Rng;

/// Stream `stream` of the generator keyed by `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_grid(rng: &mut Rng, width: usize, height: usize) -> Grid {
    let data = (0..width * height)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Grid::from_vec(width, height, data).expect("length matches by construction")
}

pub fn normal_vec(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
