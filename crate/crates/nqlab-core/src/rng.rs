//! Seeded random streams. ChaCha8 gives portable, platform-independent
//! sequences; independent streams of one seed keep the Gaussian init and
//! the trajectory decoupled, so runs at different widths share data.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream 0 of the seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    seeded_stream(seed, 0)
}

/// Independent stream `stream` of the seed.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
