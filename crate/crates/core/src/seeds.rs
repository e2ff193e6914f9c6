//! Sub-seed derivation.
//!
//! Every random stream in a run is seeded by `derive(master, stream, index)`,
//! where `stream` names the consumer (see the constants below) and `index`
//! counts instances of it (scan number, run cell, epoch). The mix is three
//! nested SplitMix64 finalizers, so neighbouring counters give unrelated
//! seeds and the scheme is stable across platforms.

pub const DATA: u64 = 1;
pub const SUBJECT: u64 = 2;
pub const SCAN: u64 = 3;
pub const SPLIT: u64 = 4;
pub const SUBSET: u64 = 5;
pub const INIT: u64 = 6;
pub const SAMPLING: u64 = 7;
pub const CELL: u64 = 8;
pub const EVAL: u64 = 9;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_mul(0x1000_0000_01B3) ^ splitmix64(index)))
}
