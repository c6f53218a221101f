//! Counter-based random streams.
//!
//! Every stochastic site draws from its own ChaCha stream keyed by
//! `(seed, site, index)`, where `index` is usually the training step. A run is
//! therefore reproducible from the seed and the step counter alone, which is
//! all a checkpoint needs to record.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Call sites that consume randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Site {
    Init = 1,
    Shuffle = 2,
    Crop = 3,
    Mask = 4,
    Dropout = 5,
    Render = 6,
    Subset = 7,
    Synthetic = 8,
    Eval = 9,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::Init => "init",
            Site::Shuffle => "shuffle",
            Site::Crop => "crop",
            Site::Mask => "mask",
            Site::Dropout => "dropout",
            Site::Render => "render",
            Site::Subset => "subset",
            Site::Synthetic => "synthetic",
            Site::Eval => "eval",
        }
    }
}

const INDEX_BITS: u32 = 56;

/// Root of all random streams for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `site` at `index`.
    pub fn stream(&self, site: Site, index: u64) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let index = index & ((1u64 << INDEX_BITS) - 1);
        rng.set_stream(((site as u64) << INDEX_BITS) | index);
        rng
    }
}
