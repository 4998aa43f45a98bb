//! Synthetic dataset generation: Gaussian noise everywhere, with a
//! class-proportional mean shift injected into one fixed patch per modality so
//! each modality is informative on its own and the pair more so.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ModelDims, SynthSpec};
use crate::dataset::{GradeLabel, ModalPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The signal band along one axis of length `n`: [n/4, n/2), widened to at
/// least one index so the signal never vanishes on tiny axes.
pub fn signal_band(n: usize) -> (usize, usize) {
    let lo = n / 4;
    let hi = (n / 2).max(lo + 1).min(n);
    (lo, hi)
}

fn add_patch_fundus(fundus: &mut Tensor, amount: f64) {
    let dims = fundus.dims().to_vec();
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let (r0, r1) = signal_band(h);
    let (c0, c1) = signal_band(w);
    let data = fundus.data_mut();
    for ch in 0..c {
        for y in r0..r1 {
            for x in c0..c1 {
                data[(ch * h + y) * w + x] += amount;
            }
        }
    }
}

fn add_patch_oct(oct: &mut Tensor, amount: f64) {
    let dims = oct.dims().to_vec();
    let (t, h, w) = (dims[0], dims[2], dims[3]);
    let (t0, t1) = signal_band(t);
    let (r0, r1) = signal_band(h);
    let (c0, c1) = signal_band(w);
    let data = oct.data_mut();
    for ti in t0..t1 {
        for y in r0..r1 {
            for x in c0..c1 {
                data[(ti * h + y) * w + x] += amount;
            }
        }
    }
}

/// Generate the dataset: per_class[c] samples of class c, in class order.
/// Class c's fundus patch mean is c·signal_fundus and its OCT sub-volume mean
/// is c·signal_oct, both over N(0, σ²) noise.
pub fn synth_dataset(spec: &SynthSpec, dims: &ModelDims) -> Result<Vec<ModalPair>> {
    spec.validate(spec.per_class.len())?;
    dims.validate()?;
    let num_classes = spec.per_class.len();
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::Param(format!("noise_sigma {}: {e}", spec.noise_sigma)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (h, w) = dims.fundus_input_hw;
    let (t, oh, ow) = dims.oct_input_thw;
    let mut out = Vec::with_capacity(spec.total_samples());
    for (class, &count) in spec.per_class.iter().enumerate() {
        for _ in 0..count {
            let fundus_noise: Vec<f64> =
                (0..3 * h * w).map(|_| noise.sample(&mut rng)).collect();
            let mut fundus = Tensor::new(vec![3, h, w], fundus_noise)?;
            add_patch_fundus(&mut fundus, class as f64 * spec.signal_fundus);

            let oct_noise: Vec<f64> =
                (0..t * oh * ow).map(|_| noise.sample(&mut rng)).collect();
            let mut oct = Tensor::new(vec![t, 1, oh, ow], oct_noise)?;
            add_patch_oct(&mut oct, class as f64 * spec.signal_oct);

            out.push(ModalPair { fundus, oct, label: GradeLabel::new(class, num_classes)? });
        }
    }
    Ok(out)
}
