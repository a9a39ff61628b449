//! Named seed substreams.
//!
//! A single root seed fans out into independent generators keyed by a label
//! and a list of integer coordinates (client id, epoch, round, ...), so that
//! enabling one source of randomness never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub const CLIENT_INIT: &str = "client-init";
pub const AUX_INIT: &str = "aux-init";
pub const SERVER_INIT: &str = "server-init";
pub const SHUFFLE: &str = "shuffle";
pub const SAMPLING: &str = "sampling";
pub const PARTITION: &str = "partition";
pub const ARRIVAL: &str = "arrival";
pub const DATA: &str = "data";
pub const PROBE: &str = "probe";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `root`, a stream label, and coordinates.
pub fn derive_seed(root: u64, label: &str, coords: &[u64]) -> u64 {
    let mut h = splitmix64(root);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    // separator so ("ab", []) and ("a", [b'b']) differ
    h = splitmix64(h ^ 0xff);
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

pub fn stream(root: u64, label: &str, coords: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(root, label, coords))
}
