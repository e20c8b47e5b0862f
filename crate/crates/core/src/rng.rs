//! Seed derivation for reproducible Monte-Carlo replications.
//!
//! Every replication owns a ChaCha8 generator keyed by `(master, purpose, rep)`.
//! Stream 0 of that key drives the data (so all methods in a sweep see the same
//! noise); stream `1 + method` drives the method's own policy randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a derived seed is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Scenario = 0,
    Arl = 1,
    Edd = 2,
    Trace = 3,
    Plan = 4,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, purpose: Purpose, rep: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ purpose as u64) ^ rep)
}

/// Generator for the observation noise of one replication.
pub fn data_rng(master: u64, purpose: Purpose, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, rep));
    rng.set_stream(0);
    rng
}

/// Generator for the arm choices and schedule phase of one method.
pub fn policy_rng(master: u64, purpose: Purpose, rep: u64, method: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, rep));
    rng.set_stream(1 + method as u64);
    rng
}
