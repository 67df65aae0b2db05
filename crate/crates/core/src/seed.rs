//! Deterministic seed derivation.
//!
//! Every random quantity in the crate is drawn from a ChaCha stream whose
//! seed derives from a single root `u64` plus a string tag and integer
//! indices. Each (tag, indices) pair names an independent stream, so the
//! values a subsystem draws do not depend on the order in which other
//! subsystems draw theirs. Derivation chains splitmix64 over the tag bytes
//! and indices, which is cheap and has good avalanche behavior.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 step: advances `state` and returns the mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives independent sub-seeds from one root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSplitter {
    root: u64,
}

impl SeedSplitter {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Sub-seed for the stream named by `tag` and `indices`.
    pub fn derive(&self, tag: &str, indices: &[u64]) -> u64 {
        let mut state = self.root;
        let _ = splitmix64(&mut state);
        for &b in tag.as_bytes() {
            state ^= b as u64;
            let _ = splitmix64(&mut state);
        }
        for &idx in indices {
            state ^= idx.wrapping_mul(0xff51_afd7_ed55_8ccd);
            let _ = splitmix64(&mut state);
        }
        splitmix64(&mut state)
    }

    /// A ChaCha generator seeded for the named stream.
    pub fn rng(&self, tag: &str, indices: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(tag, indices))
    }

    /// A splitter rooted at the named sub-stream, for further splitting.
    pub fn child(&self, tag: &str, indices: &[u64]) -> SeedSplitter {
        SeedSplitter::new(self.derive(tag, indices))
    }
}
