//! Named, reproducible random streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    root: u64,
}

impl Streams {
    pub fn new(root: u64) -> Self {
        Streams { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Independent generator for `(name, index)`; the same pair always yields
    /// the same sequence, and different pairs do not overlap.
    pub fn stream(&self, name: &str, index: u64) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.root ^ fnv1a(name));
        rng.set_stream(index);
        rng
    }

    /// A child root for a sub-experiment.
    pub fn child(&self, name: &str, index: u64) -> Streams {
        use rand::RngCore;
        Streams::new(self.stream(name, index).next_u64())
    }
}
