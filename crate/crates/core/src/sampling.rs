//! Counter-based random streams: sample `i` under seed `s` always draws the
//! same numbers, whatever thread evaluates it.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

/// Samples per task in the parallel loops. Reductions fold chunk results in
/// chunk order so sums do not depend on the thread count.
pub const CHUNK: usize = 1024;

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn standard_normal<T: Scalar>(rng: &mut ChaCha8Rng, len: usize) -> DVector<T> {
    DVector::from_fn(len, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// `factor · ξ` with `ξ ~ N(0, I)`.
pub fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, factor: &DMatrix<T>) -> DVector<T> {
    factor * standard_normal::<T>(rng, factor.ncols())
}

pub fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK)).map(|c| c * CHUNK..((c + 1) * CHUNK).min(n)).collect()
}
