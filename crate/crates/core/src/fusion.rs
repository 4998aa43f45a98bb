//! Cross-modal fusion: the local-wise and global-wise attention modules, the
//! per-branch heads, and the final classifier.
//!
//! Local-wise: every spatial position of the aligned OCT tensor scores the
//! fundus columns and pulls back a convex combination of them. Global-wise:
//! every fundus column scores all OCT positions jointly and aggregates them.
//! Both are built from tape primitives so gradients come for free; each has a
//! scalar quadruple-loop oracle used only by tests.

use crate::encoders::{init_bias, init_weight};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{dims_str, Tensor};

/// Weight (out x in) plus bias (out); used for the channel aligners, the
/// branch heads, and the final classifier.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn init(seed: u64, name: &str, out_dim: usize, in_dim: usize) -> Self {
        Self::init_scaled(seed, name, out_dim, in_dim, 1.0)
    }

    /// Like [`LinearParams::init`] but with the fan-in bound multiplied by
    /// `scale`. Used to start the final classifier close to (but not at) zero
    /// so initial predictions are near-uniform while gradients still flow.
    pub fn init_scaled(seed: u64, name: &str, out_dim: usize, in_dim: usize, scale: f64) -> Self {
        let mut weight = init_weight(seed, &format!("{name}.weight"), &[out_dim, in_dim]);
        if scale != 1.0 {
            for v in weight.data_mut() {
                *v *= scale;
            }
        }
        LinearParams { weight, bias: init_bias(out_dim) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Local-wise module products.
#[derive(Clone, Debug)]
pub struct LmOutput {
    /// Attended fundus representation, (d_x, s_y, w_y).
    pub x_bar_l: Tensor,
    /// Channel-aligned OCT representation, (d_x, s_y, w_y).
    pub y_bar_l: Tensor,
    /// concat(x_bar_l, y_bar_l), (2*d_x, s_y, w_y).
    pub fused: Tensor,
}

/// Global-wise module products.
#[derive(Clone, Debug)]
pub struct GmOutput {
    /// Channel-aligned OCT representation, (d_x, s_y, w_y).
    pub y_bar_g: Tensor,
    /// Aggregated OCT representation, one column per fundus column, (d_x, w_x).
    pub y_agg_g: Tensor,
    /// concat(y_agg_g, x_g), (2*d_x, w_x).
    pub fused: Tensor,
}

/// Align OCT channels to the merged fundus channel count: pointwise conv
/// mapping (t_y, s_y, w_y) -> (d_x, s_y, w_y).
pub fn lm_transform(tape: &mut Tape, y_l: &Tensor, params: &LinearParams) -> Result<Tensor> {
    tape.conv1x1(y_l, &params.weight, &params.bias)
}

/// Same contract as [`lm_transform`] with its own parameters.
pub fn gm_transform(tape: &mut Tape, y_g: &Tensor, params: &LinearParams) -> Result<Tensor> {
    tape.conv1x1(y_g, &params.weight, &params.bias)
}

fn check_attention_dims(x: &Tensor, y_bar: &Tensor, op: &str) -> Result<(usize, usize, usize, usize)> {
    if x.dims().len() != 2 {
        return Err(Error::Shape(format!("{op}: fundus view must be 2-D, got {}", dims_str(x.dims()))));
    }
    if y_bar.dims().len() != 3 {
        return Err(Error::Shape(format!("{op}: oct view must be 3-D, got {}", dims_str(y_bar.dims()))));
    }
    let (d_x, w_x) = (x.dims()[0], x.dims()[1]);
    let (d_y, s_y, w_y) = (y_bar.dims()[0], y_bar.dims()[1], y_bar.dims()[2]);
    if d_x != d_y {
        return Err(Error::Shape(format!("{op}: channel dims differ, fundus {d_x} vs oct {d_y}")));
    }
    Ok((d_x, w_x, s_y, w_y))
}

/// Local-wise attention weights: column (i,j) holds the distribution over the
/// w_x fundus columns chosen by OCT position (i,j). Shape (w_x, s_y*w_y).
pub fn lm_attention_weights(tape: &mut Tape, x_l: &Tensor, y_bar_l: &Tensor, tau_l: f64) -> Result<Tensor> {
    let (d_x, _, s_y, w_y) = check_attention_dims(x_l, y_bar_l, "lm_attention")?;
    let yb = tape.reshape(y_bar_l, &[d_x, s_y * w_y])?;
    let xt = tape.transpose2d(x_l)?;
    let scores = tape.matmul(&xt, &yb)?;
    tape.softmax_temp(&scores, tau_l)
}

/// Local-wise attention: each OCT position gets a convex combination of the
/// fundus columns. (d_x, w_x) x (d_x, s_y, w_y) -> (d_x, s_y, w_y).
pub fn lm_attention(tape: &mut Tape, x_l: &Tensor, y_bar_l: &Tensor, tau_l: f64) -> Result<Tensor> {
    let (d_x, _, s_y, w_y) = check_attention_dims(x_l, y_bar_l, "lm_attention")?;
    let weights = lm_attention_weights(tape, x_l, y_bar_l, tau_l)?;
    let mixed = tape.matmul(x_l, &weights)?;
    tape.reshape(&mixed, &[d_x, s_y, w_y])
}

/// concat(x_bar_l, y_bar_l) along channels -> (2*d_x, s_y, w_y).
pub fn lm_fuse(tape: &mut Tape, x_bar_l: &Tensor, y_bar_l: &Tensor) -> Result<Tensor> {
    tape.concat_first(x_bar_l, y_bar_l)
}

/// Global-wise attention weights: column o holds the joint distribution over
/// all s_y*w_y OCT positions chosen by fundus column o. Shape (s_y*w_y, w_x).
pub fn gm_attention_weights(tape: &mut Tape, x_g: &Tensor, y_bar_g: &Tensor, tau_g: f64) -> Result<Tensor> {
    let (d_x, _, s_y, w_y) = check_attention_dims(x_g, y_bar_g, "gm_attention")?;
    let yb = tape.reshape(y_bar_g, &[d_x, s_y * w_y])?;
    let ybt = tape.transpose2d(&yb)?;
    let scores = tape.matmul(&ybt, x_g)?;
    tape.softmax_temp(&scores, tau_g)
}

/// Global-wise attention: each fundus column aggregates the OCT positions into
/// one vector. (d_x, w_x) x (d_x, s_y, w_y) -> (d_x, w_x).
pub fn gm_attention(tape: &mut Tape, x_g: &Tensor, y_bar_g: &Tensor, tau_g: f64) -> Result<Tensor> {
    let (d_x, _, s_y, w_y) = check_attention_dims(x_g, y_bar_g, "gm_attention")?;
    let weights = gm_attention_weights(tape, x_g, y_bar_g, tau_g)?;
    let yb = tape.reshape(y_bar_g, &[d_x, s_y * w_y])?;
    tape.matmul(&yb, &weights)
}

/// concat(y_agg_g, x_g) along channels -> (2*d_x, w_x).
pub fn gm_fuse(tape: &mut Tape, y_agg_g: &Tensor, x_g: &Tensor) -> Result<Tensor> {
    tape.concat_first(y_agg_g, x_g)
}

/// Run the whole local-wise module: align, attend, fuse.
pub fn lm_module(
    tape: &mut Tape,
    x_l: &Tensor,
    y_l: &Tensor,
    aligner: &LinearParams,
    tau_l: f64,
) -> Result<LmOutput> {
    let y_bar_l = lm_transform(tape, y_l, aligner)?;
    let x_bar_l = lm_attention(tape, x_l, &y_bar_l, tau_l)?;
    let fused = lm_fuse(tape, &x_bar_l, &y_bar_l)?;
    Ok(LmOutput { x_bar_l, y_bar_l, fused })
}

/// Run the whole global-wise module: align, attend, fuse.
pub fn gm_module(
    tape: &mut Tape,
    x_g: &Tensor,
    y_g: &Tensor,
    aligner: &LinearParams,
    tau_g: f64,
) -> Result<GmOutput> {
    let y_bar_g = gm_transform(tape, y_g, aligner)?;
    let y_agg_g = gm_attention(tape, x_g, &y_bar_g, tau_g)?;
    let fused = gm_fuse(tape, &y_agg_g, x_g)?;
    Ok(GmOutput { y_bar_g, y_agg_g, fused })
}

/// Pool a fused map over its spatial axes and project: channels -> fused_width,
/// with ReLU.
pub fn branch_head(tape: &mut Tape, z: &Tensor, params: &LinearParams) -> Result<Tensor> {
    let pooled = tape.global_avg_pool(z)?;
    let projected = tape.linear(&pooled, &params.weight, &params.bias)?;
    tape.relu(&projected)
}

/// Concatenate the two branch features and project to class logits.
pub fn fuse_classify(tape: &mut Tape, f_l: &Tensor, f_g: &Tensor, params: &LinearParams) -> Result<Tensor> {
    let cat = tape.concat_first(f_l, f_g)?;
    tape.linear(&cat, &params.weight, &params.bias)
}

fn softmax_scalar(scores: &[f64], tau: f64) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - m) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Naive scalar-loop reference for [`lm_attention`]; test-only oracle.
pub fn lm_attention_oracle(x_l: &Tensor, y_bar_l: &Tensor, tau_l: f64) -> Result<Tensor> {
    let (d_x, w_x, s_y, w_y) = check_attention_dims(x_l, y_bar_l, "lm_attention_oracle")?;
    if !(tau_l.is_finite() && tau_l > 0.0) {
        return Err(Error::Param(format!("lm_attention_oracle: tau must be positive, got {tau_l}")));
    }
    let mut out = Tensor::zeros(&[d_x, s_y, w_y]);
    for i in 0..s_y {
        for j in 0..w_y {
            let mut scores = vec![0.0; w_x];
            for (l, score) in scores.iter_mut().enumerate() {
                let mut acc = 0.0;
                for d in 0..d_x {
                    acc += x_l.at(&[d, l]) * y_bar_l.at(&[d, i, j]);
                }
                *score = acc;
            }
            let w = softmax_scalar(&scores, tau_l);
            for d in 0..d_x {
                let mut acc = 0.0;
                for (l, wl) in w.iter().enumerate() {
                    acc += wl * x_l.at(&[d, l]);
                }
                let o = out.offset(&[d, i, j]);
                out.data_mut()[o] = acc;
            }
        }
    }
    Ok(out)
}

/// Naive scalar-loop reference for [`gm_attention`]; test-only oracle.
pub fn gm_attention_oracle(x_g: &Tensor, y_bar_g: &Tensor, tau_g: f64) -> Result<Tensor> {
    let (d_x, w_x, s_y, w_y) = check_attention_dims(x_g, y_bar_g, "gm_attention_oracle")?;
    if !(tau_g.is_finite() && tau_g > 0.0) {
        return Err(Error::Param(format!("gm_attention_oracle: tau must be positive, got {tau_g}")));
    }
    let mut out = Tensor::zeros(&[d_x, w_x]);
    for o in 0..w_x {
        let mut scores = Vec::with_capacity(s_y * w_y);
        for i in 0..s_y {
            for j in 0..w_y {
                let mut acc = 0.0;
                for d in 0..d_x {
                    acc += y_bar_g.at(&[d, i, j]) * x_g.at(&[d, o]);
                }
                scores.push(acc);
            }
        }
        let w = softmax_scalar(&scores, tau_g);
        for d in 0..d_x {
            let mut acc = 0.0;
            for i in 0..s_y {
                for j in 0..w_y {
                    acc += w[i * w_y + j] * y_bar_g.at(&[d, i, j]);
                }
            }
            let off = out.offset(&[d, o]);
            out.data_mut()[off] = acc;
        }
    }
    Ok(out)
}
