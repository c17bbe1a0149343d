pub mod correspondence;
pub mod dense_ba;
pub mod error;
pub mod geometry;
pub mod init_pnp;
pub mod optim;
pub mod se3field;
pub mod splat;
pub mod synthgen;
pub mod tensorio;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream `stream` of the generator seeded by `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
