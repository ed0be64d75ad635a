//! Counter-based random streams.
//!
//! Every draw in the crate comes from a ChaCha8 stream whose key is derived
//! from `(seed, tag)` and whose stream id is an item index (trajectory, data
//! point, restart). A trajectory's draws therefore depend only on its index,
//! never on how a batch is partitioned across worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Stage tags mixed into the stream key.
pub mod tag {
    pub const POPULATION: u64 = 0x5050_0001;
    pub const PRIOR: u64 = 0x5050_0002;
    pub const REVERSE: u64 = 0x5050_0003;
    pub const GMM_INIT: u64 = 0x5050_0004;
    pub const GMM_SAMPLE: u64 = 0x5050_0005;
    pub const DM_LOSS: u64 = 0x5050_0006;
    pub const PROBE: u64 = 0x5050_0007;
    pub const CALIBRATE: u64 = 0x5050_0008;
    pub const CORRECT: u64 = 0x5050_0009;
    pub const BASELINE: u64 = 0x5050_000a;
    pub const RESTART: u64 = 0x5050_000b;
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed for a stage: `splitmix64(seed ^ splitmix64(tag))`.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Opens stream `index` of the generator keyed by `(seed, tag)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> StreamRng {
    let mut key = [0u8; 32];
    let mut state = derive(seed, tag);
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// Uniform draw in `[0, 1)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}
