//! Counter-based random stream derivation.
//!
//! Every consumer of randomness gets its own ChaCha8 stream whose 256-bit
//! key is derived by hashing (master seed, purpose, episode, t, rollout
//! index) through two independent SplitMix64 lanes. Streams are therefore a
//! pure function of their coordinates: rollout i of step t of episode e
//! draws the same numbers no matter how work is scheduled across threads,
//! which is what makes run artifacts reproducible under any `--threads`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const LANE_A: u64 = 0x243F_6A88_85A3_08D3; // pi digits
const LANE_B: u64 = 0x1319_8A2E_0370_7344;

const PURPOSE_ROLLOUT: u64 = 1;
const PURPOSE_SELECTION: u64 = 2;
const PURPOSE_REFERENCE: u64 = 3;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn absorb(state: u64, word: u64) -> u64 {
    mix64(state ^ word.wrapping_mul(GOLDEN))
}

fn derive_key(master: u64, words: [u64; 4]) -> [u8; 32] {
    // Two lanes give an effectively 128-bit internal state, so distinct
    // coordinate tuples collide with negligible probability even across
    // billions of derived streams.
    let mut a = mix64(master ^ LANE_A);
    let mut b = mix64(master.rotate_left(32) ^ LANE_B);
    for w in words {
        a = absorb(a, w);
        b = absorb(b, w.rotate_left(17));
    }
    let mut key = [0u8; 32];
    let mut k = a;
    for (slot, chunk) in key.chunks_exact_mut(8).enumerate() {
        k = k.wrapping_add(GOLDEN);
        let lane = if slot % 2 == 0 { b } else { b.rotate_left(24) };
        chunk.copy_from_slice(&(mix64(k) ^ lane).to_le_bytes());
    }
    key
}

/// Root of a run's randomness: a master seed from which all streams are
/// derived by coordinates instead of by sequential splitting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedLineage {
    master: u64,
}

impl SeedLineage {
    pub fn new(master: u64) -> Self {
        SeedLineage { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Stream feeding reference-policy draws inside rollout `i` of the
    /// batch planned at `(episode, t)`.
    pub fn rollout(&self, episode: u64, t: u64, i: u64) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(derive_key(self.master, [PURPOSE_ROLLOUT, episode, t, i]))
    }

    /// Stream producing the single uniform selection draw at `(episode, t)`.
    pub fn selection(&self, episode: u64, t: u64) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(derive_key(self.master, [PURPOSE_SELECTION, episode, t, 0]))
    }

    /// Stream for running episode `episode` under the reference policy
    /// itself (no planning).
    pub fn reference(&self, episode: u64) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(derive_key(self.master, [PURPOSE_REFERENCE, episode, 0, 0]))
    }
}

/// A [`SeedLineage`] narrowed to one episode; what the per-step sampling
/// functions take.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSeed {
    pub lineage: SeedLineage,
    pub episode: u64,
}

impl EpisodeSeed {
    pub fn new(lineage: SeedLineage, episode: u64) -> Self {
        EpisodeSeed { lineage, episode }
    }

    pub fn rollout_rng(&self, t: usize, i: usize) -> ChaCha8Rng {
        self.lineage.rollout(self.episode, t as u64, i as u64)
    }

    pub fn selection_rng(&self, t: usize) -> ChaCha8Rng {
        self.lineage.selection(self.episode, t as u64)
    }

    pub fn reference_rng(&self) -> ChaCha8Rng {
        self.lineage.reference(self.episode)
    }
}
