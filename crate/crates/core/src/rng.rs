//! Named random sub-streams derived from one top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Generator,
    Shuffle,
    Init,
    Sampling,
    Eval,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Generator => 0x67656e,
            Stream::Shuffle => 0x736875,
            Stream::Init => 0x696e69,
            Stream::Sampling => 0x73616d,
            Stream::Eval => 0x6576616c,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator for `(seed, stream, index)`.
///
/// `index` separates repeated uses of one stream, e.g. one shuffle per epoch,
/// so that any epoch can be replayed without the state of earlier ones.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> StreamRng {
    let mixed = splitmix64(splitmix64(seed ^ stream.tag()) ^ splitmix64(index.wrapping_add(1)));
    ChaCha8Rng::seed_from_u64(mixed)
}
