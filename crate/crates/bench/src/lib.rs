//! Deterministic input builders shared by the microbenchmarks, sized to the
//! same desk-scale dimensions the default config uses so bench numbers track
//! what the test suite and CLI actually execute.

use elf_core::synth::synth_dataset;
use elf_core::{Config, ModalPair, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded uniform tensor in [-1.5, 1.5].
pub fn rand_tensor(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(dims, -1.5, 1.5, &mut rng)
}

/// The merged fundus feature stack at default dims: (d_x, w_x) = (32, 4).
pub fn fundus_stack() -> Tensor {
    rand_tensor(&[32, 4], 11)
}

/// A channel-aligned volume at default dims: (d_x, s_y, w_y) = (32, 16, 4).
pub fn aligned_volume() -> Tensor {
    rand_tensor(&[32, 16, 4], 12)
}

/// One synthetic sample at the default input dims.
pub fn sample_pair(cfg: &Config) -> ModalPair {
    let mut data = synth_dataset(&cfg.synth, &cfg.dims).expect("default synth spec is valid");
    data.truncate(1);
    data.remove(0)
}
