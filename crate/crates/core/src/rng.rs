//! Seeded random streams.
//!
//! Every parallelizable unit of work (a training record, an ensemble member)
//! draws from its own stream. A stream is a ChaCha8 generator keyed by the
//! root seed with the ChaCha stream id set to `stream`, so the sequence a unit
//! sees depends only on `(root, stream)` and never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream ids at or above this offset are reserved for internal purposes
/// (shuffling, dequantization noise) so they never collide with record or
/// member ids.
pub const RESERVED_STREAM_BASE: u64 = 1 << 62;

pub fn split(root: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng
}
