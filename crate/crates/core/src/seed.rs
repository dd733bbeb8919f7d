//! Counter-based seed derivation.
//!
//! Every stochastic component draws from its own ChaCha stream whose seed is
//! `derive(master, stream, index)`: the three words are mixed through
//! SplitMix64 finalizers in sequence. Streams are fixed tags so that adding
//! a component never shifts the seeds of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_SPLIT: u64 = 0x5350_4c49_5400_0001;
pub const STREAM_GCL: u64 = 0x4743_4c00_0000_0002;
pub const STREAM_PLAN: u64 = 0x504c_414e_0000_0003;
pub const STREAM_SYNTH: u64 = 0x5359_4e54_4800_0004;
pub const STREAM_MC: u64 = 0x4d43_0000_0000_0005;
pub const STREAM_INIT: u64 = 0x494e_4954_0000_0006;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ stream) ^ index)
}

pub fn rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, index))
}
