//! Index-derived random substreams.
//!
//! Every random draw in the pipeline is taken from a generator keyed by
//! `(seed, domain, index)`, so results never depend on how work is
//! scheduled across threads or in which order draws are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domain for the per-epoch sampling plan.
pub const DOMAIN_PLAN: u64 = 0x504C_414E;
/// Stream domain for per-draw augmentation (drop and patch choice).
pub const DOMAIN_DRAW: u64 = 0x4452_4157;
/// Stream domain for parameter initialization.
pub const DOMAIN_INIT: u64 = 0x494E_4954;
/// Stream domain for label-budget subsampling.
pub const DOMAIN_BUDGET: u64 = 0x4255_4447;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `index` within `domain` under `seed`.
pub fn substream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(domain)));
    rng.set_stream(index);
    rng
}

/// Packs an (epoch, position) pair into one stream index.
pub fn draw_index(epoch: usize, position: usize) -> u64 {
    ((epoch as u64) << 32) | (position as u64 & 0xFFFF_FFFF)
}
