//! Deterministic random streams.
//!
//! Every stochastic operation in the crate draws from a [`Rng`] created here.
//! ChaCha8 is platform independent, so a seed pins the exact stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Root stream for `seed`.
pub fn make_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream `stream` of `seed`. Training keys these by step so a
/// resumed run reproduces the batches of an uninterrupted one.
pub fn make_substream(seed: u64, stream: u64) -> Rng {
    let mut rng = make_rng(seed);
    rng.set_stream(stream);
    rng
}

/// Well-known substream ids.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SYNTHETIC: u64 = 2;
    pub const TEXT: u64 = 3;
    /// Training steps use `TRAIN_BASE + step`.
    pub const TRAIN_BASE: u64 = 1 << 32;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn same_seed_same_stream() {
        let mut a = make_rng(0);
        let mut b = make_rng(0);
        for _ in 0..100 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let x0: u64 = make_rng(0).random();
        let x1: u64 = make_rng(1).random();
        assert_ne!(x0, x1);
        // regression pin for the first draw of seed 0
        assert_eq!(x0, make_rng(0).random::<u64>());
        assert_eq!(x0, FIRST_DRAW_SEED0);
    }

    const FIRST_DRAW_SEED0: u64 = 13_080_132_717_333_068_652;

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = make_rng(7);
        for _ in 0..1000 {
            let u: f64 = r.random();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn substreams_are_independent_and_stable() {
        let a: u64 = make_substream(5, 10).random();
        let b: u64 = make_substream(5, 11).random();
        assert_ne!(a, b);
        assert_eq!(a, make_substream(5, 10).random::<u64>());
    }
}
