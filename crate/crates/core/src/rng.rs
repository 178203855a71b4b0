//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a stream identified by
//! `(master_seed, purpose, a, b)`. Streams are value types: two streams with
//! the same id produce the same sequence regardless of which thread drives
//! them or in which order they are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Namespaces for random streams. Evaluation purposes never share a stream
/// with training purposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    Calibration = 2,
    TrainBatch = 3,
    EqualizerFit = 4,
    TrainEval = 16,
    Evaluation = 17,
    EvalEqualizer = 18,
    Heatmap = 19,
    GradCheck = 32,
    Sweep = 33,
}

impl Purpose {
    pub fn is_evaluation(self) -> bool {
        matches!(
            self,
            Purpose::TrainEval | Purpose::Evaluation | Purpose::EvalEqualizer | Purpose::Heatmap
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub master_seed: u64,
    pub purpose: Purpose,
    pub a: u64,
    pub b: u64,
}

impl StreamId {
    pub fn new(master_seed: u64, purpose: Purpose, a: u64, b: u64) -> Self {
        Self { master_seed, purpose, a, b }
    }

    /// Sub-stream `b` of this stream's `(purpose, a)` family.
    pub fn with_b(self, b: u64) -> Self {
        Self { b, ..self }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut state = self.master_seed;
        let mut seed = [0u8; 32];
        let words = [
            splitmix64(&mut state),
            splitmix64(&mut state) ^ (self.purpose as u64).wrapping_mul(0xA24B_AED4_963E_E407),
            splitmix64(&mut state) ^ self.a.wrapping_mul(0x9FB2_1C65_1E98_DF25),
            splitmix64(&mut state) ^ self.b.wrapping_mul(0xD6E8_FEB8_6659_FD93),
        ];
        // one more mixing round so nearby ids do not share key words
        let mut mix = words[0] ^ words[1].rotate_left(17) ^ words[2].rotate_left(31) ^ words[3].rotate_left(47);
        for (chunk, w) in seed.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&(w ^ splitmix64(&mut mix)).to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
