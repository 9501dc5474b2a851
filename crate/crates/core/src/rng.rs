//! Counter-based noise streams.
//!
//! Every draw is addressed by `(seed, stream id)`: the seed keys a ChaCha8
//! cipher and the stream id selects an independent 2^64-block counter space.
//! Draws therefore do not depend on evaluation order or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::volume::Slice2D;

/// Which random quantity a stream feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Predictor,
    Corrector(u8),
    Init,
    Plan,
    Measurement,
}

impl Purpose {
    fn code(self) -> u64 {
        match self {
            Purpose::Predictor => 0,
            Purpose::Corrector(k) => 1 + u64::from(k.min(250)),
            Purpose::Init => 252,
            Purpose::Plan => 253,
            Purpose::Measurement => 254,
        }
    }
}

/// Address of one slice-sized draw: `(step, branch, slice, purpose)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamKey {
    pub step: u32,
    pub branch: u8,
    pub slice: u16,
    pub purpose: Purpose,
}

impl StreamKey {
    pub fn id(&self) -> u64 {
        (u64::from(self.step) << 32)
            | (u64::from(self.branch & 1) << 24)
            | (u64::from(self.slice) << 8)
            | self.purpose.code()
    }
}

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng.set_word_pos(0);
    rng
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn normal_slice(seed: u64, key: StreamKey, shape: (usize, usize)) -> Slice2D {
    let mut rng = stream(seed, key.id());
    Slice2D::new(shape, normal_vec(&mut rng, shape.0 * shape.1)).expect("shape matches")
}
