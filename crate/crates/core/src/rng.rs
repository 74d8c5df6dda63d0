//! Named random streams derived from one seed.
//!
//! Each consumer asks for its stream by name, so adding or reordering consumers never
//! shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// The ChaCha stream `name` under key `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// A sub-seed for APIs that take a `u64`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    rand::Rng::random(&mut stream(seed, name))
}
