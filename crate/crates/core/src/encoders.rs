//! Toy per-modality encoders.
//!
//! Each modality gets two parameter-disjoint branches ("local" and "global").
//! The fundus encoder is two stride-2 3x3 convolutions with ReLU; the OCT
//! encoder factorizes into a per-slice spatial stage and a temporal mixing
//! stage. Both end in a parameter-free adaptive average pool onto the
//! configured feature dims, so the emitted shape always equals the declared
//! shape regardless of input size.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelDims;
use crate::elft;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{dims_str, Tensor};

/// Stable 64-bit mix (splitmix64 finalizer).
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic per-name RNG stream: the run seed combined with an FNV-1a
/// hash of the tensor name. Stable across platforms and compiler versions,
/// unlike the std hasher.
pub fn name_stream_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(seed ^ h)
}

/// Trainable weight with fan-in-scaled uniform init: bound = sqrt(6 / fan_in)
/// where fan_in is the product of all dims after the first (output) axis.
pub fn init_weight(seed: u64, name: &str, dims: &[usize]) -> Tensor {
    let fan_in: usize = dims[1..].iter().product::<usize>().max(1);
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(name_stream_seed(seed, name));
    Tensor::rand_uniform(dims, -bound, bound, &mut rng).with_grad()
}

/// Trainable bias, zero-initialized.
pub fn init_bias(len: usize) -> Tensor {
    Tensor::zeros(&[len]).with_grad()
}

#[derive(Clone, Debug)]
pub struct Conv2dParams {
    pub weight: Tensor, // (out_c, in_c, k, k)
    pub bias: Tensor,   // (out_c)
}

impl Conv2dParams {
    pub fn init(seed: u64, name: &str, out_c: usize, in_c: usize, k: usize) -> Self {
        Conv2dParams {
            weight: init_weight(seed, &format!("{name}.weight"), &[out_c, in_c, k, k]),
            bias: init_bias(out_c),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv1dParams {
    pub weight: Tensor, // (out_c, in_c, k)
    pub bias: Tensor,   // (out_c)
}

impl Conv1dParams {
    pub fn init(seed: u64, name: &str, out_c: usize, in_c: usize, k: usize) -> Self {
        Conv1dParams {
            weight: init_weight(seed, &format!("{name}.weight"), &[out_c, in_c, k]),
            bias: init_bias(out_c),
        }
    }
}

/// One fundus branch: conv3x3/2 -> ReLU -> conv3x3/2 -> ReLU -> adaptive pool.
#[derive(Clone, Debug)]
pub struct FundusEncoderParams {
    pub conv1: Conv2dParams, // 3 -> c_x
    pub conv2: Conv2dParams, // c_x -> c_x
}

impl FundusEncoderParams {
    pub fn init(seed: u64, prefix: &str, dims: &ModelDims) -> Self {
        FundusEncoderParams {
            conv1: Conv2dParams::init(seed, &format!("{prefix}.conv1"), dims.c_x, 3, 3),
            conv2: Conv2dParams::init(seed, &format!("{prefix}.conv2"), dims.c_x, dims.c_x, 3),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.conv1.weight"), &self.conv1.weight);
        f(format!("{prefix}.conv1.bias"), &self.conv1.bias);
        f(format!("{prefix}.conv2.weight"), &self.conv2.weight);
        f(format!("{prefix}.conv2.bias"), &self.conv2.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.conv1.weight"), &mut self.conv1.weight);
        f(format!("{prefix}.conv1.bias"), &mut self.conv1.bias);
        f(format!("{prefix}.conv2.weight"), &mut self.conv2.weight);
        f(format!("{prefix}.conv2.bias"), &mut self.conv2.bias);
    }
}

/// One OCT branch: per-slice conv3x3/2 -> ReLU -> spatial pool, then temporal
/// conv k3/2 -> ReLU -> temporal pool.
#[derive(Clone, Debug)]
pub struct OctEncoderParams {
    pub spatial: Conv2dParams,  // 1 -> c_y, applied per slice
    pub temporal: Conv1dParams, // c_y -> c_y over the slice axis
}

impl OctEncoderParams {
    pub fn init(seed: u64, prefix: &str, dims: &ModelDims) -> Self {
        OctEncoderParams {
            spatial: Conv2dParams::init(seed, &format!("{prefix}.spatial"), dims.c_y, 1, 3),
            temporal: Conv1dParams::init(seed, &format!("{prefix}.temporal"), dims.c_y, dims.c_y, 3),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.spatial.weight"), &self.spatial.weight);
        f(format!("{prefix}.spatial.bias"), &self.spatial.bias);
        f(format!("{prefix}.temporal.weight"), &self.temporal.weight);
        f(format!("{prefix}.temporal.bias"), &self.temporal.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.spatial.weight"), &mut self.spatial.weight);
        f(format!("{prefix}.spatial.bias"), &mut self.spatial.bias);
        f(format!("{prefix}.temporal.weight"), &mut self.temporal.weight);
        f(format!("{prefix}.temporal.bias"), &mut self.temporal.bias);
    }
}

/// Two same-shaped feature tensors from parameter-disjoint branches.
#[derive(Clone, Debug)]
pub struct FundusFeatures {
    pub local: Tensor,  // (c_x, h_x, w_x)
    pub global: Tensor, // (c_x, h_x, w_x)
}

#[derive(Clone, Debug)]
pub struct OctFeatures {
    pub local: Tensor,  // (t_y, c_y, h_y, w_y)
    pub global: Tensor, // (t_y, c_y, h_y, w_y)
}

fn check_fundus_input(x: &Tensor, dims: &ModelDims) -> Result<()> {
    let (h, w) = dims.fundus_input_hw;
    if x.dims() != [3, h, w] {
        return Err(Error::Shape(format!(
            "fundus input must be 3x{h}x{w}, got {}",
            dims_str(x.dims())
        )));
    }
    Ok(())
}

fn check_oct_input(y: &Tensor, dims: &ModelDims) -> Result<()> {
    let (t, h, w) = dims.oct_input_thw;
    if y.dims() != [t, 1, h, w] {
        return Err(Error::Shape(format!(
            "oct input must be {t}x1x{h}x{w}, got {}",
            dims_str(y.dims())
        )));
    }
    Ok(())
}

/// Run one fundus branch to its (c_x, h_x, w_x) feature tensor.
pub fn encode_fundus_branch(
    tape: &mut Tape,
    x: &Tensor,
    params: &FundusEncoderParams,
    dims: &ModelDims,
) -> Result<Tensor> {
    check_fundus_input(x, dims)?;
    let (h, w) = dims.fundus_input_hw;
    let batched = tape.reshape(x, &[1, 3, h, w])?;
    let c1 = tape.conv2d(&batched, &params.conv1.weight, &params.conv1.bias, 2, 1)?;
    let c1 = tape.relu(&c1)?;
    let c2 = tape.conv2d(&c1, &params.conv2.weight, &params.conv2.bias, 2, 1)?;
    let c2 = tape.relu(&c2)?;
    let pooled = tape.adaptive_avg_pool2d(&c2, dims.h_x, dims.w_x)?;
    tape.reshape(&pooled, &[dims.c_x, dims.h_x, dims.w_x])
}

/// Run one OCT branch to its (t_y, c_y, h_y, w_y) feature tensor.
pub fn encode_oct_branch(
    tape: &mut Tape,
    y: &Tensor,
    params: &OctEncoderParams,
    dims: &ModelDims,
) -> Result<Tensor> {
    check_oct_input(y, dims)?;
    // slices act as the batch axis for the spatial stage
    let s1 = tape.conv2d(y, &params.spatial.weight, &params.spatial.bias, 2, 1)?;
    let s1 = tape.relu(&s1)?;
    let s1 = tape.adaptive_avg_pool2d(&s1, dims.h_y, dims.w_y)?;
    let t1 = tape.conv1d_t(&s1, &params.temporal.weight, &params.temporal.bias, 2, 1)?;
    let t1 = tape.relu(&t1)?;
    tape.adaptive_avg_pool_t(&t1, dims.t_y)
}

pub fn encode_fundus(
    tape: &mut Tape,
    x: &Tensor,
    local: &FundusEncoderParams,
    global: &FundusEncoderParams,
    dims: &ModelDims,
) -> Result<FundusFeatures> {
    Ok(FundusFeatures {
        local: encode_fundus_branch(tape, x, local, dims)?,
        global: encode_fundus_branch(tape, x, global, dims)?,
    })
}

pub fn encode_oct(
    tape: &mut Tape,
    y: &Tensor,
    local: &OctEncoderParams,
    global: &OctEncoderParams,
    dims: &ModelDims,
) -> Result<OctFeatures> {
    Ok(OctFeatures {
        local: encode_oct_branch(tape, y, local, dims)?,
        global: encode_oct_branch(tape, y, global, dims)?,
    })
}

/// View (c_x, h_x, w_x) as (c_x * h_x, w_x); gradient flows through.
pub fn merge_axes_fundus(tape: &mut Tape, f: &Tensor) -> Result<Tensor> {
    let d = f.dims();
    if d.len() != 3 {
        return Err(Error::Shape(format!("expected a 3-d fundus feature tensor, got {}", dims_str(d))));
    }
    tape.reshape(f, &[d[0] * d[1], d[2]])
}

/// View (t_y, c_y, h_y, w_y) as (t_y, c_y * h_y, w_y).
pub fn merge_axes_oct(tape: &mut Tape, o: &Tensor) -> Result<Tensor> {
    let d = o.dims();
    if d.len() != 4 {
        return Err(Error::Shape(format!("expected a 4-d oct feature tensor, got {}", dims_str(d))));
    }
    tape.reshape(o, &[d[0], d[1] * d[2], d[3]])
}

/// A feature tensor loaded from disk, classified by rank.
#[derive(Clone, Debug)]
pub enum ImportedFeatures {
    Fundus(Tensor),
    Oct(Tensor),
}

/// Load externally computed branch features. 3-d files must match the fundus
/// feature dims, 4-d files the OCT feature dims.
pub fn import_features(path: &Path, dims: &ModelDims) -> Result<ImportedFeatures> {
    let t = elft::read_tensor(path)?;
    match t.dims().len() {
        3 => {
            let want = [dims.c_x, dims.h_x, dims.w_x];
            if t.dims() != want {
                return Err(Error::Shape(format!(
                    "{}: fundus features must be {}, got {}",
                    path.display(),
                    dims_str(&want),
                    dims_str(t.dims())
                )));
            }
            Ok(ImportedFeatures::Fundus(t))
        }
        4 => {
            let want = [dims.t_y, dims.c_y, dims.h_y, dims.w_y];
            if t.dims() != want {
                return Err(Error::Shape(format!(
                    "{}: oct features must be {}, got {}",
                    path.display(),
                    dims_str(&want),
                    dims_str(t.dims())
                )));
            }
            Ok(ImportedFeatures::Oct(t))
        }
        n => Err(Error::Format(format!(
            "{}: feature files must be 3-d or 4-d, got ndim {n}",
            path.display()
        ))),
    }
}
