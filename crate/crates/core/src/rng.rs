//! Counter-based random streams.
//!
//! A stream is addressed by `(seed, role, index)`: the seed and role name
//! hash to a ChaCha key and the index selects the ChaCha stream. Any stream
//! can be rebuilt without replaying the ones before it, which is what makes
//! training resumable from a checkpoint.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, role: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(role.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// `n` standard-normal draws in call order.
pub fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn uniform(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

/// Fresh seed from OS entropy, for commands run without `--seed`.
pub fn entropy_seed() -> u64 {
    rand::random()
}
