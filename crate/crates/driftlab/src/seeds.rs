//! Deterministic RNG stream derivation.
//!
//! Every run owns a single master seed; each randomized phase draws from
//! its own stream derived from `(master, purpose, index)`. Phases that are
//! disabled for a given configuration therefore consume no randomness from
//! anyone else's stream, which is what makes ablations comparable: turning
//! a phase off cannot shift the draws of the phases that remain.
//!
//! Discriminant values are frozen; changing them silently reseeds every
//! experiment.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Randomized phase of a run. Each variant gets an independent stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    /// Synthetic data generation; index = task id.
    DataGen = 1,
    /// Class-order shuffle when slicing a dataset into tasks.
    ClassShuffle = 2,
    /// Embedding network weight init; index = restart ordinal (0 here).
    EmbedInit = 3,
    /// Mini-batch order while training the embedding; index = task id.
    EmbedBatch = 4,
    /// Triplet anchor/negative selection; index = task id.
    TripletMine = 5,
    /// Translation network weight init; index = transition id.
    TransitionInit = 6,
    /// Mini-batch order while training a translation pair; index = transition id.
    TransitionBatch = 7,
    /// Sampling around stored prototypes; index = transition id.
    PrototypeSample = 8,
    /// Batch order for importance estimation; index = task id.
    Importance = 9,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the 64-bit seed of one stream.
pub fn derive(master: u64, purpose: Stream, index: u64) -> u64 {
    let a = mix(master.wrapping_add(GOLDEN.wrapping_mul(purpose as u64)));
    mix(a ^ mix(index.wrapping_add(GOLDEN)))
}

/// RNG for one stream. ChaCha12 keeps draws identical across platforms.
pub fn rng(master: u64, purpose: Stream, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive(master, purpose, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::RngCore;

    #[test]
    fn derivation_is_deterministic() {
        assert_eq!(
            derive(42, Stream::EmbedInit, 0),
            derive(42, Stream::EmbedInit, 0)
        );
    }

    #[test]
    fn streams_differ_across_purpose_index_and_master() {
        let base = derive(42, Stream::EmbedBatch, 0);
        assert_ne!(base, derive(42, Stream::TripletMine, 0));
        assert_ne!(base, derive(42, Stream::EmbedBatch, 1));
        assert_ne!(base, derive(43, Stream::EmbedBatch, 0));
    }

    #[test]
    fn rng_reproduces_draw_sequence() {
        let mut a = rng(7, Stream::DataGen, 3);
        let mut b = rng(7, Stream::DataGen, 3);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
