//! Named random streams split from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Weight initialization.
    Init,
    /// Dataset generation and shuffling.
    Data,
    /// Training-time augmentation.
    Augment,
    /// Probe-batch selection.
    Probe,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Data => 2,
            Stream::Augment => 3,
            Stream::Probe => 4,
        }
    }
}

/// Independent generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
