//! Seed derivation. Each (master seed, seed index) pair yields one run seed;
//! the environment, reward noise and each agent draw from separate ChaCha streams of it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ENV_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn run_seed(master: u64, seed_index: u64) -> u64 {
    mix(master ^ mix(seed_index))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Draws the environment instance. Shared by every agent at the same seed.
pub fn env_rng(run_seed: u64) -> ChaCha8Rng {
    stream(run_seed, ENV_STREAM)
}

/// Reward noise. Also shared across agents, so they face the same noise sequence.
pub fn noise_rng(run_seed: u64) -> ChaCha8Rng {
    stream(run_seed, NOISE_STREAM)
}

/// Agent randomness, keyed by label so adding an agent leaves the others unchanged.
pub fn agent_rng(run_seed: u64, label: &str) -> ChaCha8Rng {
    // FNV-1a
    let h = label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    stream(run_seed, 3 + (h >> 2))
}
