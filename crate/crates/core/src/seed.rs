//! Reproducible random substreams.
//!
//! Every random draw in the simulator comes from a stream derived from the
//! master seed and a tuple of labels (drop, cluster, ray, role, ...). The
//! derivation is counter based, so any single coefficient can be regenerated
//! without replaying the draws that preceded it.

use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Role labels, used as the last label of a tuple to separate independent
/// consumers that share the same drop/cluster/ray indices.
pub mod role {
    pub const TDL_SOS: u64 = 1;
    pub const CDL_COUPLING: u64 = 2;
    pub const CDL_PHASE: u64 = 3;
    pub const DROP_TIME: u64 = 4;
    pub const CSI_RS_NOISE: u64 = 5;
    pub const DMRS_NOISE: u64 = 6;
    pub const HARQ: u64 = 7;
    pub const RANDOM_PMI: u64 = 8;
    pub const BOOTSTRAP: u64 = 9;
    pub const PRECODER_PROBE: u64 = 10;
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 32-byte ChaCha seed for `(master, labels)`.
pub fn derive_seed(master: u64, labels: &[u64]) -> [u8; 32] {
    let mut h = splitmix64(master.wrapping_add(GAMMA));
    for (i, &l) in labels.iter().enumerate() {
        let salted = l.wrapping_add((i as u64 + 1).wrapping_mul(GAMMA));
        h = splitmix64(h ^ splitmix64(salted));
    }
    // length is folded in so that (a) and (a, 0) differ
    h = splitmix64(h ^ (labels.len() as u64));
    let mut out = [0u8; 32];
    for k in 0..4 {
        let w = splitmix64(h.wrapping_add((k as u64 + 1).wrapping_mul(GAMMA)));
        out[8 * k..8 * k + 8].copy_from_slice(&w.to_le_bytes());
    }
    out
}

/// Independent generator for `(master, labels)`.
pub fn seed_stream(master: u64, labels: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_seed(master, labels))
}
