//! Shared fixtures for the criterion benches.

use ndarray::Array2;
use pcsl_core::{generate_synthetic, PersonBuffer, PersonIndex, SynthSpec, SyntheticSplits};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-1, 1)`.
pub fn matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Person labels of a PK batch: `n_p` persons, `n_k` images each.
pub fn pk_persons(n_p: usize, n_k: usize) -> Vec<usize> {
    (0..n_p).flat_map(|p| std::iter::repeat_n(p, n_k)).collect()
}

/// A fully initialized buffer of `per_camera` persons under each of
/// `cameras` cameras.
pub fn populated_buffer(cameras: usize, per_camera: usize, dim: usize, seed: u64) -> (PersonBuffer, PersonIndex) {
    let index = PersonIndex::new(vec![per_camera; cameras]);
    let c = index.num_classes();
    let feats = matrix(c, dim, &mut rng(seed));
    let buf = PersonBuffer::from_parts(feats, vec![true; c], 1).expect("consistent shapes");
    (buf, index)
}

/// The default synthetic splits at a reduced identity count.
pub fn splits(identities: usize, seed: u64) -> SyntheticSplits {
    let spec = SynthSpec {
        n_identities: identities,
        n_test_identities: identities / 2,
        seed,
        ..SynthSpec::default()
    };
    generate_synthetic(&spec).expect("valid spec")
}
