//! Seed derivation. One master seed fans out into independent labeled
//! streams so each source of randomness can be varied on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Partition,
    Batch,
    Blobs,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x696e_6974,
            Stream::Partition => 0x7061_7274,
            Stream::Batch => 0x6261_7463,
            Stream::Blobs => 0x626c_6f62,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for `stream` and sub-index `index` (agent id, for instance).
pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream.tag()) ^ index)
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, stream, index))
}
