//! Seed discipline. Every random quantity in an experiment is drawn from its
//! own ChaCha stream derived from the single experiment seed, so that changing
//! e.g. the algorithm never perturbs the graph or the dataset.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Graph = 1,
    Dataset = 2,
    Initialization = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
