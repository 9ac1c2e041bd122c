//! Named random streams derived from one master seed.
//!
//! Every consumer owns its own ChaCha8 stream, so adding draws in one place
//! never shifts the numbers seen elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    /// Trainable network initialization, one per member.
    Init = 1,
    /// Prior network initialization, one per member.
    Prior = 2,
    /// Seeds of training episodes.
    Episodes = 3,
    /// Member choice or ε-greedy draws.
    Explore = 4,
    /// Replay membership bits.
    ReplayMask = 5,
    /// Minibatch sampling, one per member.
    Minibatch = 6,
    /// Seeds of the fixed evaluation suite.
    EvaluationSuite = 7,
}

pub fn stream(seed: u64, which: Stream, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((which as u64) << 32) | index as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: u64 = stream(7, Stream::Init, 0).gen();
        let b: u64 = stream(7, Stream::Init, 1).gen();
        let c: u64 = stream(7, Stream::Prior, 0).gen();
        let d: u64 = stream(8, Stream::Init, 0).gen();
        assert_eq!(a, stream(7, Stream::Init, 0).gen::<u64>());
        assert!(a != b && a != c && a != d && b != c);
    }
}
