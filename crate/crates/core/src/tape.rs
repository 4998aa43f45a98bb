//! Reverse-mode autodiff over an ordered op tape.
//!
//! Every differentiable operation is a method on [`Tape`]: it validates
//! shapes, computes the forward value, and (when the tape is recording)
//! appends a record holding cheap clones of whatever the backward pass needs.
//! [`Tape::backward`] walks the records in reverse, accumulating
//! vector-Jacobian products into a per-tensor gradient map, and finally adds
//! each leaf's total into its gradient accumulator.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::tensor::{dims_str, Tensor};

/// Output size of a strided convolution along one axis.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Param("conv stride must be positive".into()));
    }
    let padded = size + 2 * pad;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "conv kernel {kernel} does not fit input extent {size} with pad {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Inclusive-exclusive input window covered by output cell `i` of an
/// adaptive average pool mapping `in_size` onto `out_size`.
pub fn pool_window(i: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    let start = i * in_size / out_size;
    let end = ((i + 1) * in_size).div_ceil(out_size);
    (start, end)
}

enum Record {
    Reshape { input: Tensor, out: Tensor },
    Transpose { input: Tensor, out: Tensor },
    Matmul { a: Tensor, b: Tensor, out: Tensor },
    Add { a: Tensor, b: Tensor, out: Tensor },
    MulScalar { input: Tensor, factor: f64, out: Tensor },
    Relu { input: Tensor, out: Tensor },
    SoftmaxTemp { input: Tensor, tau: f64, out: Tensor },
    ConcatFirst { a: Tensor, b: Tensor, out: Tensor },
    SliceFirst { input: Tensor, start: usize, out: Tensor },
    GlobalAvgPool { input: Tensor, out: Tensor },
    AdaptivePool2d { input: Tensor, out: Tensor },
    AdaptivePoolT { input: Tensor, out: Tensor },
    Conv2d { input: Tensor, weight: Tensor, bias: Tensor, stride: usize, pad: usize, out: Tensor },
    Conv1dT { input: Tensor, weight: Tensor, bias: Tensor, stride: usize, pad: usize, out: Tensor },
    Conv1x1 { input: Tensor, weight: Tensor, bias: Tensor, out: Tensor },
    Linear { input: Tensor, weight: Tensor, bias: Tensor, out: Tensor },
    CrossEntropy { logits: Tensor, label: usize, out: Tensor },
    SumAll { input: Tensor, out: Tensor },
}

/// Ordered record of executed ops plus the bookkeeping needed to find leaf
/// tensors (trainable inputs that were not produced by this tape).
pub struct Tape {
    records: Vec<Record>,
    produced: HashSet<u64>,
    leaves: HashMap<u64, Tensor>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { records: Vec::new(), produced: HashSet::new(), leaves: HashMap::new(), recording: true }
    }

    /// A tape that validates and computes but records nothing; `backward`
    /// is unavailable. Use for inference and finite-difference probes.
    pub fn no_grad() -> Self {
        Tape { records: Vec::new(), produced: HashSet::new(), leaves: HashMap::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    fn note_inputs(&mut self, inputs: &[&Tensor]) {
        for t in inputs {
            if t.requires_grad() && !self.produced.contains(&t.id()) {
                self.leaves.entry(t.id()).or_insert_with(|| (*t).clone());
            }
        }
    }

    fn push(&mut self, inputs: &[&Tensor], out: &Tensor, record: Record) {
        if !self.recording {
            return;
        }
        self.note_inputs(inputs);
        self.produced.insert(out.id());
        self.records.push(record);
    }

    /// View the same elements under new dims.
    pub fn reshape(&mut self, t: &Tensor, dims: &[usize]) -> Result<Tensor> {
        let out = t.with_dims(dims.to_vec())?;
        self.push(&[t], &out, Record::Reshape { input: t.clone(), out: out.clone() });
        Ok(out)
    }

    /// 2-D transpose.
    pub fn transpose2d(&mut self, t: &Tensor) -> Result<Tensor> {
        let (m, n) = as_2d(t, "transpose2d")?;
        let x = t.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push(&[t], &out, Record::Transpose { input: t.clone(), out: out.clone() });
        Ok(out)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = as_2d(a, "matmul lhs")?;
        let (k2, n) = as_2d(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dims differ, lhs {} vs rhs {}",
                dims_str(a.dims()),
                dims_str(b.dims())
            )));
        }
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        self.push(&[a, b], &out, Record::Matmul { a: a.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!(
                "add: dims differ, {} vs {}",
                dims_str(a.dims()),
                dims_str(b.dims())
            )));
        }
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.dims().to_vec(), data)?;
        self.push(&[a, b], &out, Record::Add { a: a.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    pub fn mul_scalar(&mut self, t: &Tensor, factor: f64) -> Result<Tensor> {
        if !factor.is_finite() {
            return Err(Error::Param(format!("mul_scalar: factor {factor} is not finite")));
        }
        let data: Vec<f64> = t.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(t.dims().to_vec(), data)?;
        self.push(&[t], &out, Record::MulScalar { input: t.clone(), factor, out: out.clone() });
        Ok(out)
    }

    /// Elementwise max(x, 0). The subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, t: &Tensor) -> Result<Tensor> {
        // NaN passes through rather than being clipped to 0, so numeric
        // corruption surfaces at the loss instead of being silently laundered
        let data: Vec<f64> =
            t.data().iter().map(|&x| if x > 0.0 || x.is_nan() { x } else { 0.0 }).collect();
        let out = Tensor::new(t.dims().to_vec(), data)?;
        self.push(&[t], &out, Record::Relu { input: t.clone(), out: out.clone() });
        Ok(out)
    }

    /// Temperature softmax along the first axis, computed independently for
    /// every trailing index. Stable under large scores via max subtraction.
    pub fn softmax_temp(&mut self, t: &Tensor, tau: f64) -> Result<Tensor> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Param(format!("softmax_temp: temperature must be positive, got {tau}")));
        }
        let l = t.dims()[0];
        let b = t.elem_count() / l;
        let x = t.data();
        let mut data = vec![0.0; x.len()];
        for col in 0..b {
            let mut m = f64::NEG_INFINITY;
            for row in 0..l {
                m = m.max(x[row * b + col]);
            }
            let mut z = 0.0;
            for row in 0..l {
                let e = ((x[row * b + col] - m) / tau).exp();
                data[row * b + col] = e;
                z += e;
            }
            for row in 0..l {
                data[row * b + col] /= z;
            }
        }
        let out = Tensor::new(t.dims().to_vec(), data)?;
        self.push(&[t], &out, Record::SoftmaxTemp { input: t.clone(), tau, out: out.clone() });
        Ok(out)
    }

    /// Concatenate along the first axis; trailing dims must agree.
    pub fn concat_first(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims().len() != b.dims().len() || a.dims()[1..] != b.dims()[1..] {
            return Err(Error::Shape(format!(
                "concat_first: trailing dims differ, {} vs {}",
                dims_str(a.dims()),
                dims_str(b.dims())
            )));
        }
        let mut dims = a.dims().to_vec();
        dims[0] += b.dims()[0];
        let mut data = Vec::with_capacity(a.elem_count() + b.elem_count());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        let out = Tensor::new(dims, data)?;
        self.push(&[a, b], &out, Record::ConcatFirst { a: a.clone(), b: b.clone(), out: out.clone() });
        Ok(out)
    }

    /// Contiguous slice `[start, start+len)` along the first axis.
    pub fn slice_first(&mut self, t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let first = t.dims()[0];
        if len == 0 || start + len > first {
            return Err(Error::Shape(format!(
                "slice_first: range {start}..{} out of bounds for first dim {first}",
                start + len
            )));
        }
        let row = t.elem_count() / first;
        let mut dims = t.dims().to_vec();
        dims[0] = len;
        let data = t.data()[start * row..(start + len) * row].to_vec();
        let out = Tensor::new(dims, data)?;
        self.push(&[t], &out, Record::SliceFirst { input: t.clone(), start, out: out.clone() });
        Ok(out)
    }

    /// Mean over all trailing axes, one value per first-axis channel.
    pub fn global_avg_pool(&mut self, t: &Tensor) -> Result<Tensor> {
        let c = t.dims()[0];
        let p = t.elem_count() / c;
        let x = t.data();
        let mut data = vec![0.0; c];
        for ch in 0..c {
            let s: f64 = x[ch * p..(ch + 1) * p].iter().sum();
            data[ch] = s / p as f64;
        }
        let out = Tensor::new(vec![c], data)?;
        self.push(&[t], &out, Record::GlobalAvgPool { input: t.clone(), out: out.clone() });
        Ok(out)
    }

    /// Adaptive average pool over the two trailing axes of an NxCxHxW tensor.
    pub fn adaptive_avg_pool2d(&mut self, t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let [n, c, h, w] = as_4d(t, "adaptive_avg_pool2d")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Shape("adaptive_avg_pool2d: target dims must be positive".into()));
        }
        let x = t.data();
        let mut data = vec![0.0; n * c * out_h * out_w];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                for oy in 0..out_h {
                    let (y0, y1) = pool_window(oy, h, out_h);
                    for ox in 0..out_w {
                        let (x0, x1) = pool_window(ox, w, out_w);
                        let mut acc = 0.0;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                acc += x[base + iy * w + ix];
                            }
                        }
                        let count = ((y1 - y0) * (x1 - x0)) as f64;
                        data[((img * c + ch) * out_h + oy) * out_w + ox] = acc / count;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, out_h, out_w], data)?;
        self.push(&[t], &out, Record::AdaptivePool2d { input: t.clone(), out: out.clone() });
        Ok(out)
    }

    /// Adaptive average pool over the leading (temporal) axis of a TxCxHxW
    /// tensor; channel and spatial axes pass through.
    pub fn adaptive_avg_pool_t(&mut self, t: &Tensor, out_t: usize) -> Result<Tensor> {
        let [tin, c, h, w] = as_4d(t, "adaptive_avg_pool_t")?;
        if out_t == 0 {
            return Err(Error::Shape("adaptive_avg_pool_t: target dim must be positive".into()));
        }
        let x = t.data();
        let chw = c * h * w;
        let mut data = vec![0.0; out_t * chw];
        for u in 0..out_t {
            let (t0, t1) = pool_window(u, tin, out_t);
            let inv = 1.0 / (t1 - t0) as f64;
            let ob = u * chw;
            for src in t0..t1 {
                let ib = src * chw;
                for i in 0..chw {
                    data[ob + i] += x[ib + i];
                }
            }
            for v in &mut data[ob..ob + chw] {
                *v *= inv;
            }
        }
        let out = Tensor::new(vec![out_t, c, h, w], data)?;
        self.push(&[t], &out, Record::AdaptivePoolT { input: t.clone(), out: out.clone() });
        Ok(out)
    }

    /// Strided 2-D convolution over NxCxHxW input with an OxCxKxK kernel and
    /// per-output-channel bias, zero padding `pad` on both spatial axes.
    pub fn conv2d(
        &mut self,
        t: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let [n, cin, h, w] = as_4d(t, "conv2d input")?;
        let [cout, cin_w, kh, kw] = as_4d(weight, "conv2d weight")?;
        if kh != kw {
            return Err(Error::Shape(format!("conv2d: kernel must be square, got {kh}x{kw}")));
        }
        if cin_w != cin {
            return Err(Error::Shape(format!(
                "conv2d: weight expects {cin_w} input channels, input has {cin}"
            )));
        }
        if bias.dims() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d: bias dims {} do not match {cout} output channels",
                dims_str(bias.dims())
            )));
        }
        let oh = conv_out_dim(h, kh, stride, pad)?;
        let ow = conv_out_dim(w, kh, stride, pad)?;
        let data = conv2d_raw(t.data(), weight.data(), bias.data(), n, cin, h, w, cout, kh, stride, pad, oh, ow);
        let out = Tensor::new(vec![n, cout, oh, ow], data)?;
        self.push(
            &[t, weight, bias],
            &out,
            Record::Conv2d {
                input: t.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                stride,
                pad,
                out: out.clone(),
            },
        );
        Ok(out)
    }

    /// Strided 1-D convolution along the leading (temporal) axis of a
    /// TxCxHxW tensor, mixing channels with an OxCxK kernel.
    pub fn conv1d_t(
        &mut self,
        t: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let [tin, cin, h, w] = as_4d(t, "conv1d_t input")?;
        let wd = weight.dims();
        if wd.len() != 3 {
            return Err(Error::Shape(format!(
                "conv1d_t weight must be 3-D (out x in x k), got {}",
                dims_str(wd)
            )));
        }
        let (cout, cin_w, k) = (wd[0], wd[1], wd[2]);
        if cin_w != cin {
            return Err(Error::Shape(format!(
                "conv1d_t: weight expects {cin_w} input channels, input has {cin}"
            )));
        }
        if bias.dims() != [cout] {
            return Err(Error::Shape(format!(
                "conv1d_t: bias dims {} do not match {cout} output channels",
                dims_str(bias.dims())
            )));
        }
        let to = conv_out_dim(tin, k, stride, pad)?;
        let x = t.data();
        let wt = weight.data();
        let bs = bias.data();
        let hw = h * w;
        let mut data = vec![0.0; to * cout * hw];
        for u in 0..to {
            for co in 0..cout {
                let ob = (u * cout + co) * hw;
                data[ob..ob + hw].fill(bs[co]);
                for ci in 0..cin {
                    for kt in 0..k {
                        let src = (u * stride + kt) as isize - pad as isize;
                        if src < 0 || src >= tin as isize {
                            continue;
                        }
                        let wv = wt[(co * cin + ci) * k + kt];
                        let ib = (src as usize * cin + ci) * hw;
                        for i in 0..hw {
                            data[ob + i] += wv * x[ib + i];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![to, cout, h, w], data)?;
        self.push(
            &[t, weight, bias],
            &out,
            Record::Conv1dT {
                input: t.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                stride,
                pad,
                out: out.clone(),
            },
        );
        Ok(out)
    }

    /// Pointwise (1x1) convolution: mixes the channel axis of a CxPxQ tensor
    /// with an OxC weight matrix plus per-channel bias.
    pub fn conv1x1(&mut self, t: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let td = t.dims();
        if td.len() != 3 {
            return Err(Error::Shape(format!(
                "conv1x1 input must be 3-D (channels x rows x cols), got {}",
                dims_str(td)
            )));
        }
        let (cin, p, q) = (td[0], td[1], td[2]);
        let (cout, cin_w) = as_2d(weight, "conv1x1 weight")?;
        if cin_w != cin {
            return Err(Error::Shape(format!(
                "conv1x1: weight expects {cin_w} input channels, input has {cin}"
            )));
        }
        if bias.dims() != [cout] {
            return Err(Error::Shape(format!(
                "conv1x1: bias dims {} do not match {cout} output channels",
                dims_str(bias.dims())
            )));
        }
        let x = t.data();
        let wt = weight.data();
        let bs = bias.data();
        let pq = p * q;
        let mut data = vec![0.0; cout * pq];
        for co in 0..cout {
            let ob = co * pq;
            data[ob..ob + pq].fill(bs[co]);
            for ci in 0..cin {
                let wv = wt[co * cin + ci];
                let ib = ci * pq;
                for i in 0..pq {
                    data[ob + i] += wv * x[ib + i];
                }
            }
        }
        let out = Tensor::new(vec![cout, p, q], data)?;
        self.push(
            &[t, weight, bias],
            &out,
            Record::Conv1x1 { input: t.clone(), weight: weight.clone(), bias: bias.clone(), out: out.clone() },
        );
        Ok(out)
    }

    /// Affine map of a vector: weight (out x in) times input plus bias.
    pub fn linear(&mut self, t: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if t.dims().len() != 1 {
            return Err(Error::Shape(format!(
                "linear input must be 1-D, got {}",
                dims_str(t.dims())
            )));
        }
        let n = t.dims()[0];
        let (m, n_w) = as_2d(weight, "linear weight")?;
        if n_w != n {
            return Err(Error::Shape(format!(
                "linear: weight expects {n_w} inputs, input has {n}"
            )));
        }
        if bias.dims() != [m] {
            return Err(Error::Shape(format!(
                "linear: bias dims {} do not match {m} outputs",
                dims_str(bias.dims())
            )));
        }
        let x = t.data();
        let wt = weight.data();
        let bs = bias.data();
        let mut data = vec![0.0; m];
        for row in 0..m {
            let wr = &wt[row * n..(row + 1) * n];
            let mut acc = bs[row];
            for i in 0..n {
                acc += wr[i] * x[i];
            }
            data[row] = acc;
        }
        let out = Tensor::new(vec![m], data)?;
        self.push(
            &[t, weight, bias],
            &out,
            Record::Linear { input: t.clone(), weight: weight.clone(), bias: bias.clone(), out: out.clone() },
        );
        Ok(out)
    }

    /// Negative log softmax probability of the true label, computed stably
    /// from raw logits. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: &Tensor, label: usize) -> Result<Tensor> {
        if logits.dims().len() != 1 {
            return Err(Error::Shape(format!(
                "cross_entropy expects 1-D logits, got {}",
                dims_str(logits.dims())
            )));
        }
        let k = logits.dims()[0];
        if label >= k {
            return Err(Error::Param(format!(
                "cross_entropy: label {label} out of range for {k} classes"
            )));
        }
        let x = logits.data();
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
        let loss = m + z.ln() - x[label];
        let out = Tensor::scalar(loss);
        self.push(
            &[logits],
            &out,
            Record::CrossEntropy { logits: logits.clone(), label, out: out.clone() },
        );
        Ok(out)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, t: &Tensor) -> Result<Tensor> {
        let s: f64 = t.data().iter().sum();
        let out = Tensor::scalar(s);
        self.push(&[t], &out, Record::SumAll { input: t.clone(), out: out.clone() });
        Ok(out)
    }

    /// Walk the tape in reverse from a scalar loss, accumulating gradients
    /// into every trainable leaf. Repeated calls without `zero_grad` add up.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if !self.recording {
            return Err(Error::Param("backward called on a non-recording tape".into()));
        }
        if !self.produced.contains(&loss.id()) {
            return Err(Error::Param("backward: loss was not produced on this tape".into()));
        }
        if loss.elem_count() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got {}",
                dims_str(loss.dims())
            )));
        }
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(loss.id(), vec![1.0]);
        for i in (0..self.records.len()).rev() {
            backprop(&self.records[i], &mut grads);
        }
        for (id, leaf) in &self.leaves {
            if let Some(g) = grads.get(id) {
                leaf.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

fn as_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let d = t.dims();
    if d.len() != 2 {
        return Err(Error::Shape(format!("{what} must be 2-D, got {}", dims_str(d))));
    }
    Ok((d[0], d[1]))
}

fn as_4d(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    let d = t.dims();
    if d.len() != 4 {
        return Err(Error::Shape(format!("{what} must be 4-D, got {}", dims_str(d))));
    }
    Ok([d[0], d[1], d[2], d[3]])
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_raw(
    x: &[f64],
    wt: &[f64],
    bs: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * cout * oh * ow];
    for img in 0..n {
        for co in 0..cout {
            let ob = (img * cout + co) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bs[co];
                    for ci in 0..cin {
                        let ib = (img * cin + ci) * h * w;
                        let wb = (co * cin + ci) * k * k;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = ib + iy as usize * w;
                            let wrow = wb + ky * k;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[wrow + kx] * x[irow + ix as usize];
                            }
                        }
                    }
                    out[ob + oy * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn entry<'m>(grads: &'m mut HashMap<u64, Vec<f64>>, t: &Tensor) -> &'m mut Vec<f64> {
    grads.entry(t.id()).or_insert_with(|| vec![0.0; t.elem_count()])
}

fn backprop(rec: &Record, grads: &mut HashMap<u64, Vec<f64>>) {
    match rec {
        Record::Reshape { input, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let e = entry(grads, input);
            for (slot, gv) in e.iter_mut().zip(&g) {
                *slot += gv;
            }
        }
        Record::Transpose { input, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let (m, n) = (input.dims()[0], input.dims()[1]);
            let e = entry(grads, input);
            for i in 0..m {
                for j in 0..n {
                    e[i * n + j] += g[j * m + i];
                }
            }
        }
        Record::Matmul { a, b, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let (m, k) = (a.dims()[0], a.dims()[1]);
            let n = b.dims()[1];
            let bd = b.data();
            {
                // dA[i,p] = sum_j G[i,j] * B[p,j]
                let ea = entry(grads, a);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let arow = &mut ea[i * k..(i + 1) * k];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        arow[p] += acc;
                    }
                }
            }
            let ad = a.data();
            {
                // dB[p,j] = sum_i A[i,p] * G[i,j]
                let eb = entry(grads, b);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let arow = &ad[i * k..(i + 1) * k];
                    for (p, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &mut eb[p * n..(p + 1) * n];
                        for j in 0..n {
                            brow[j] += av * grow[j];
                        }
                    }
                }
            }
        }
        Record::Add { a, b, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            {
                let ea = entry(grads, a);
                for (slot, gv) in ea.iter_mut().zip(&g) {
                    *slot += gv;
                }
            }
            let eb = entry(grads, b);
            for (slot, gv) in eb.iter_mut().zip(&g) {
                *slot += gv;
            }
        }
        Record::MulScalar { input, factor, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let e = entry(grads, input);
            for (slot, gv) in e.iter_mut().zip(&g) {
                *slot += gv * factor;
            }
        }
        Record::Relu { input, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let x = input.data();
            let e = entry(grads, input);
            for i in 0..x.len() {
                if x[i] > 0.0 {
                    e[i] += g[i];
                }
            }
        }
        Record::SoftmaxTemp { input, tau, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let y = out.data();
            let l = out.dims()[0];
            let b = y.len() / l;
            // per column: dx = y .* (g - <g, y>) / tau
            let e = entry(grads, input);
            for col in 0..b {
                let mut dot = 0.0;
                for row in 0..l {
                    let i = row * b + col;
                    dot += g[i] * y[i];
                }
                for row in 0..l {
                    let i = row * b + col;
                    e[i] += y[i] * (g[i] - dot) / tau;
                }
            }
        }
        Record::ConcatFirst { a, b, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let na = a.elem_count();
            {
                let ea = entry(grads, a);
                for i in 0..na {
                    ea[i] += g[i];
                }
            }
            let eb = entry(grads, b);
            for i in 0..eb.len() {
                eb[i] += g[na + i];
            }
        }
        Record::SliceFirst { input, start, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let row = input.elem_count() / input.dims()[0];
            let off = start * row;
            let e = entry(grads, input);
            for (i, gv) in g.iter().enumerate() {
                e[off + i] += gv;
            }
        }
        Record::GlobalAvgPool { input, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let c = input.dims()[0];
            let p = input.elem_count() / c;
            let inv = 1.0 / p as f64;
            let e = entry(grads, input);
            for ch in 0..c {
                let gv = g[ch] * inv;
                for slot in &mut e[ch * p..(ch + 1) * p] {
                    *slot += gv;
                }
            }
        }
        Record::AdaptivePool2d { input, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let (n, c, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2], input.dims()[3]);
            let (oh, ow) = (out.dims()[2], out.dims()[3]);
            let e = entry(grads, input);
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * h * w;
                    for oy in 0..oh {
                        let (y0, y1) = pool_window(oy, h, oh);
                        for ox in 0..ow {
                            let (x0, x1) = pool_window(ox, w, ow);
                            let gv = g[((img * c + ch) * oh + oy) * ow + ox]
                                / ((y1 - y0) * (x1 - x0)) as f64;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    e[base + iy * w + ix] += gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Record::AdaptivePoolT { input, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let tin = input.dims()[0];
            let chw = input.elem_count() / tin;
            let to = out.dims()[0];
            let e = entry(grads, input);
            for u in 0..to {
                let (t0, t1) = pool_window(u, tin, to);
                let inv = 1.0 / (t1 - t0) as f64;
                let gb = u * chw;
                for src in t0..t1 {
                    let ib = src * chw;
                    for i in 0..chw {
                        e[ib + i] += g[gb + i] * inv;
                    }
                }
            }
        }
        Record::Conv2d { input, weight, bias, stride, pad, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let (n, cin, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2], input.dims()[3]);
            let (cout, k) = (weight.dims()[0], weight.dims()[2]);
            let (oh, ow) = (out.dims()[2], out.dims()[3]);
            let x = input.data();
            let wt = weight.data();
            let mut dx = vec![0.0; x.len()];
            let mut dw = vec![0.0; wt.len()];
            let mut db = vec![0.0; cout];
            for img in 0..n {
                for co in 0..cout {
                    let gb = (img * cout + co) * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[gb + oy * ow + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            db[co] += gv;
                            for ci in 0..cin {
                                let ib = (img * cin + ci) * h * w;
                                let wb = (co * cin + ci) * k * k;
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let irow = ib + iy as usize * w;
                                    let wrow = wb + ky * k;
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        dw[wrow + kx] += gv * x[irow + ix as usize];
                                        dx[irow + ix as usize] += gv * wt[wrow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            add_into(entry(grads, input), &dx);
            add_into(entry(grads, weight), &dw);
            add_into(entry(grads, bias), &db);
        }
        Record::Conv1dT { input, weight, bias, stride, pad, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let (tin, cin) = (input.dims()[0], input.dims()[1]);
            let hw = input.dims()[2] * input.dims()[3];
            let (cout, k) = (weight.dims()[0], weight.dims()[2]);
            let to = out.dims()[0];
            let x = input.data();
            let wt = weight.data();
            let mut dx = vec![0.0; x.len()];
            let mut dw = vec![0.0; wt.len()];
            let mut db = vec![0.0; cout];
            for u in 0..to {
                for co in 0..cout {
                    let gb = (u * cout + co) * hw;
                    let gplane = &g[gb..gb + hw];
                    db[co] += gplane.iter().sum::<f64>();
                    for ci in 0..cin {
                        for kt in 0..k {
                            let src = (u * stride + kt) as isize - *pad as isize;
                            if src < 0 || src >= tin as isize {
                                continue;
                            }
                            let ib = (src as usize * cin + ci) * hw;
                            let wv = wt[(co * cin + ci) * k + kt];
                            let mut acc = 0.0;
                            for i in 0..hw {
                                acc += gplane[i] * x[ib + i];
                                dx[ib + i] += gplane[i] * wv;
                            }
                            dw[(co * cin + ci) * k + kt] += acc;
                        }
                    }
                }
            }
            add_into(entry(grads, input), &dx);
            add_into(entry(grads, weight), &dw);
            add_into(entry(grads, bias), &db);
        }
        Record::Conv1x1 { input, weight, bias, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let (cin, p, q) = (input.dims()[0], input.dims()[1], input.dims()[2]);
            let cout = weight.dims()[0];
            let pq = p * q;
            let x = input.data();
            let wt = weight.data();
            let mut dx = vec![0.0; x.len()];
            let mut dw = vec![0.0; wt.len()];
            let mut db = vec![0.0; cout];
            for co in 0..cout {
                let gplane = &g[co * pq..(co + 1) * pq];
                db[co] += gplane.iter().sum::<f64>();
                for ci in 0..cin {
                    let ib = ci * pq;
                    let wv = wt[co * cin + ci];
                    let mut acc = 0.0;
                    for i in 0..pq {
                        acc += gplane[i] * x[ib + i];
                        dx[ib + i] += gplane[i] * wv;
                    }
                    dw[co * cin + ci] += acc;
                }
            }
            add_into(entry(grads, input), &dx);
            add_into(entry(grads, weight), &dw);
            add_into(entry(grads, bias), &db);
        }
        Record::Linear { input, weight, bias, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let n = input.dims()[0];
            let m = weight.dims()[0];
            let x = input.data();
            let wt = weight.data();
            let mut dx = vec![0.0; n];
            let mut dw = vec![0.0; wt.len()];
            for row in 0..m {
                let gv = g[row];
                if gv == 0.0 {
                    continue;
                }
                let wr = &wt[row * n..(row + 1) * n];
                let dwr = &mut dw[row * n..(row + 1) * n];
                for i in 0..n {
                    dx[i] += gv * wr[i];
                    dwr[i] += gv * x[i];
                }
            }
            add_into(entry(grads, input), &dx);
            add_into(entry(grads, weight), &dw);
            add_into(entry(grads, bias), &g);
        }
        Record::CrossEntropy { logits, label, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let gv = g[0];
            let x = logits.data();
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
            let e = entry(grads, logits);
            for i in 0..x.len() {
                let p = (x[i] - m).exp() / z;
                let onehot = if i == *label { 1.0 } else { 0.0 };
                e[i] += gv * (p - onehot);
            }
        }
        Record::SumAll { input, out } => {
            let Some(g) = grads.get(&out.id()).cloned() else { return };
            let gv = g[0];
            let e = entry(grads, input);
            for slot in e.iter_mut() {
                *slot += gv;
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
