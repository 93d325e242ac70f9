//! Seeding and sampling helpers.
//!
//! All randomness in the crate flows through ChaCha8, a counter-based stream
//! cipher RNG: the same 64-bit seed yields bit-identical streams on every
//! platform and across runs, which the reproducibility contracts rely on.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// The crate-wide RNG, constructed from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer, used to derive independent sub-seeds from a base
/// seed without aliasing the base stream (e.g. encoder vs decoder seeds).
pub fn mix_seed(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for the i-th independent job derived from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix_seed(base ^ index.wrapping_mul(0xA076_1D64_78BD_642F))
}

/// rows x cols matrix of i.i.d. standard normals, filled row by row.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// rows x cols gaussian matrix filled column by column, so that the matrix
/// sampled with `cols = c` is a column prefix of the one sampled with
/// `cols = c + 1` under the same seed. Used for projection matrices so that
/// binary searches over the projection width probe nested matrices.
pub fn gaussian_matrix_by_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// rows x cols matrix of i.i.d. Rademacher entries (+1 or -1), filled column
/// by column for the same prefix property as the gaussian variant.
pub fn rademacher_matrix_by_columns(
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
    }
    m
}
