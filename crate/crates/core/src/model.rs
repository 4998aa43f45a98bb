//! The assembled network: encoder branches feeding the local-wise and
//! global-wise fusion modules and a classifier, with ablation modes that
//! bypass components, a symbolic shape tracer, and checkpoint I/O.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::config::Config;
use crate::elft;
use crate::encoders::{
    encode_fundus_branch, encode_oct_branch, merge_axes_fundus, merge_axes_oct, FundusEncoderParams,
    OctEncoderParams,
};
use crate::error::{Error, Result};
use crate::fusion::{branch_head, fuse_classify, gm_module, lm_module, LinearParams};
use crate::tape::Tape;
use crate::tensor::{dims_str, Tensor};

/// Which components of the network run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Full,
    FundusOnly,
    OctOnly,
    ConcatOnly,
    LmOnly,
    GmOnly,
}

impl Mode {
    pub fn all() -> [Mode; 6] {
        [Mode::FundusOnly, Mode::OctOnly, Mode::ConcatOnly, Mode::LmOnly, Mode::GmOnly, Mode::Full]
    }

    /// (fundus, oct, lm, gm) component flags, one row of the ablation table.
    pub fn flags(&self) -> (bool, bool, bool, bool) {
        match self {
            Mode::FundusOnly => (true, false, false, false),
            Mode::OctOnly => (false, true, false, false),
            Mode::ConcatOnly => (true, true, false, false),
            Mode::LmOnly => (true, true, true, false),
            Mode::GmOnly => (true, true, false, true),
            Mode::Full => (true, true, true, true),
        }
    }

    pub fn uses_fundus(&self) -> bool {
        self.flags().0
    }

    pub fn uses_oct(&self) -> bool {
        self.flags().1
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Full => "full",
            Mode::FundusOnly => "fundus_only",
            Mode::OctOnly => "oct_only",
            Mode::ConcatOnly => "concat_only",
            Mode::LmOnly => "lm_only",
            Mode::GmOnly => "gm_only",
        };
        f.write_str(s)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "fundus_only" => Ok(Mode::FundusOnly),
            "oct_only" => Ok(Mode::OctOnly),
            "concat_only" => Ok(Mode::ConcatOnly),
            "lm_only" => Ok(Mode::LmOnly),
            "gm_only" => Ok(Mode::GmOnly),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected one of full, fundus_only, oct_only, concat_only, lm_only, gm_only"
            ))),
        }
    }
}

/// Every trainable tensor of one mode's network. Components absent from the
/// mode are `None`.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub mode: Mode,
    pub fundus_local: Option<FundusEncoderParams>,
    pub fundus_global: Option<FundusEncoderParams>,
    pub oct_local: Option<OctEncoderParams>,
    pub oct_global: Option<OctEncoderParams>,
    pub lm_aligner: Option<LinearParams>,
    pub gm_aligner: Option<LinearParams>,
    pub lm_head: Option<LinearParams>,
    pub gm_head: Option<LinearParams>,
    /// Head for the attention-free modes (single modality / plain concat).
    pub pooled_head: Option<LinearParams>,
    pub classifier: LinearParams,
}

/// Shrink factor for the final layer's weights at init. Keeps the initial
/// logits small (so the first loss is close to the uniform-prediction value)
/// without zeroing them, which would kill the gradient signal into everything
/// upstream.
const CLASSIFIER_INIT_SCALE: f64 = 0.125;

/// Width of the vector entering the final classifier for a mode.
fn classifier_in_width(mode: Mode, cfg: &Config) -> usize {
    match mode {
        // two branch features, or one duplicated to keep the width
        Mode::Full | Mode::LmOnly | Mode::GmOnly => 2 * cfg.fusion.fused_width,
        Mode::FundusOnly | Mode::OctOnly | Mode::ConcatOnly => cfg.fusion.fused_width,
    }
}

/// Width of the pooled vector entering `pooled_head` for the attention-free
/// modes.
fn pooled_in_width(mode: Mode, cfg: &Config) -> Option<usize> {
    let d = &cfg.dims;
    match mode {
        Mode::FundusOnly => Some(d.c_x),
        Mode::OctOnly => Some(d.t_y * d.c_y),
        Mode::ConcatOnly => Some(d.c_x + d.t_y * d.c_y),
        _ => None,
    }
}

impl ModelParams {
    pub fn init(mode: Mode, cfg: &Config) -> Self {
        let seed = cfg.train.seed;
        let d = &cfg.dims;
        let fw = cfg.fusion.fused_width;
        let (use_lm, use_gm) = (mode.flags().2, mode.flags().3);

        let need_fundus_local = matches!(mode, Mode::Full | Mode::FundusOnly | Mode::ConcatOnly | Mode::LmOnly);
        let need_fundus_global = matches!(mode, Mode::Full | Mode::GmOnly);
        let need_oct_local = matches!(mode, Mode::Full | Mode::OctOnly | Mode::ConcatOnly | Mode::LmOnly);
        let need_oct_global = matches!(mode, Mode::Full | Mode::GmOnly);

        ModelParams {
            mode,
            fundus_local: need_fundus_local.then(|| FundusEncoderParams::init(seed, "fundus_local", d)),
            fundus_global: need_fundus_global.then(|| FundusEncoderParams::init(seed, "fundus_global", d)),
            oct_local: need_oct_local.then(|| OctEncoderParams::init(seed, "oct_local", d)),
            oct_global: need_oct_global.then(|| OctEncoderParams::init(seed, "oct_global", d)),
            lm_aligner: use_lm.then(|| LinearParams::init(seed, "lm_aligner", d.d_x(), d.t_y)),
            gm_aligner: use_gm.then(|| LinearParams::init(seed, "gm_aligner", d.d_x(), d.t_y)),
            lm_head: use_lm.then(|| LinearParams::init(seed, "lm_head", fw, 2 * d.d_x())),
            gm_head: use_gm.then(|| LinearParams::init(seed, "gm_head", fw, 2 * d.d_x())),
            pooled_head: pooled_in_width(mode, cfg)
                .map(|w| LinearParams::init(seed, "pooled_head", fw, w)),
            // the last layer starts small so initial logits are near-uniform
            // and the first loss sits near ln(num_classes)
            classifier: LinearParams::init_scaled(
                seed,
                "classifier",
                cfg.fusion.num_classes,
                classifier_in_width(mode, cfg),
                CLASSIFIER_INIT_SCALE,
            ),
        }
    }

    /// Visit every tensor as (name, &Tensor), in a fixed deterministic order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        if let Some(p) = &self.fundus_local {
            p.visit("fundus_local", f);
        }
        if let Some(p) = &self.fundus_global {
            p.visit("fundus_global", f);
        }
        if let Some(p) = &self.oct_local {
            p.visit("oct_local", f);
        }
        if let Some(p) = &self.oct_global {
            p.visit("oct_global", f);
        }
        if let Some(p) = &self.lm_aligner {
            p.visit("lm_aligner", f);
        }
        if let Some(p) = &self.gm_aligner {
            p.visit("gm_aligner", f);
        }
        if let Some(p) = &self.lm_head {
            p.visit("lm_head", f);
        }
        if let Some(p) = &self.gm_head {
            p.visit("gm_head", f);
        }
        if let Some(p) = &self.pooled_head {
            p.visit("pooled_head", f);
        }
        self.classifier.visit("classifier", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        if let Some(p) = &mut self.fundus_local {
            p.visit_mut("fundus_local", f);
        }
        if let Some(p) = &mut self.fundus_global {
            p.visit_mut("fundus_global", f);
        }
        if let Some(p) = &mut self.oct_local {
            p.visit_mut("oct_local", f);
        }
        if let Some(p) = &mut self.oct_global {
            p.visit_mut("oct_global", f);
        }
        if let Some(p) = &mut self.lm_aligner {
            p.visit_mut("lm_aligner", f);
        }
        if let Some(p) = &mut self.gm_aligner {
            p.visit_mut("gm_aligner", f);
        }
        if let Some(p) = &mut self.lm_head {
            p.visit_mut("lm_head", f);
        }
        if let Some(p) = &mut self.gm_head {
            p.visit_mut("gm_head", f);
        }
        if let Some(p) = &mut self.pooled_head {
            p.visit_mut("pooled_head", f);
        }
        self.classifier.visit_mut("classifier", f);
    }

    /// Named clones of every tensor (clones share data and grad accumulators).
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// A copy of this bundle with each tensor replaced by the same-named entry
    /// of `tensors` (which must line up with [`ModelParams::named`] order).
    pub fn with_tensors(&self, tensors: &[(String, Tensor)]) -> Result<ModelParams> {
        let mut clone = self.clone();
        let mut i = 0;
        let mut err = None;
        clone.visit_mut(&mut |name, slot| {
            if err.is_some() {
                return;
            }
            match tensors.get(i) {
                Some((n, t)) if *n == name => *slot = t.clone(),
                Some((n, _)) => err = Some(format!("expected tensor {name}, got {n}")),
                None => err = Some(format!("missing tensor {name}")),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(Error::Param(format!("parameter replacement: {e}")));
        }
        if i != tensors.len() {
            return Err(Error::Param(format!(
                "parameter replacement: {} tensors supplied, {} expected",
                tensors.len(),
                i
            )));
        }
        Ok(clone)
    }

    pub fn num_coords(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.elem_count());
        n
    }
}

/// The (name, dims) list [`ModelParams::init`] produces for a mode, computed
/// without allocating anything.
pub fn expected_param_dims(mode: Mode, cfg: &Config) -> Vec<(String, Vec<usize>)> {
    let d = &cfg.dims;
    let fw = cfg.fusion.fused_width;
    let mut v: Vec<(String, Vec<usize>)> = Vec::new();

    let mut fundus_enc = |prefix: &str| {
        v.push((format!("{prefix}.conv1.weight"), vec![d.c_x, 3, 3, 3]));
        v.push((format!("{prefix}.conv1.bias"), vec![d.c_x]));
        v.push((format!("{prefix}.conv2.weight"), vec![d.c_x, d.c_x, 3, 3]));
        v.push((format!("{prefix}.conv2.bias"), vec![d.c_x]));
    };
    if matches!(mode, Mode::Full | Mode::FundusOnly | Mode::ConcatOnly | Mode::LmOnly) {
        fundus_enc("fundus_local");
    }
    if matches!(mode, Mode::Full | Mode::GmOnly) {
        fundus_enc("fundus_global");
    }

    let mut oct_enc = |prefix: &str| {
        v.push((format!("{prefix}.spatial.weight"), vec![d.c_y, 1, 3, 3]));
        v.push((format!("{prefix}.spatial.bias"), vec![d.c_y]));
        v.push((format!("{prefix}.temporal.weight"), vec![d.c_y, d.c_y, 3]));
        v.push((format!("{prefix}.temporal.bias"), vec![d.c_y]));
    };
    if matches!(mode, Mode::Full | Mode::OctOnly | Mode::ConcatOnly | Mode::LmOnly) {
        oct_enc("oct_local");
    }
    if matches!(mode, Mode::Full | Mode::GmOnly) {
        oct_enc("oct_global");
    }

    let mut linear = |prefix: &str, out: usize, inw: usize| {
        v.push((format!("{prefix}.weight"), vec![out, inw]));
        v.push((format!("{prefix}.bias"), vec![out]));
    };
    let (_, _, use_lm, use_gm) = mode.flags();
    if use_lm {
        linear("lm_aligner", d.d_x(), d.t_y);
    }
    if use_gm {
        linear("gm_aligner", d.d_x(), d.t_y);
    }
    if use_lm {
        linear("lm_head", fw, 2 * d.d_x());
    }
    if use_gm {
        linear("gm_head", fw, 2 * d.d_x());
    }
    if let Some(w) = pooled_in_width(mode, cfg) {
        linear("pooled_head", fw, w);
    }
    linear("classifier", cfg.fusion.num_classes, classifier_in_width(mode, cfg));
    v
}

pub type ShapeTrace = Vec<(String, Vec<usize>)>;

fn note(trace: &mut ShapeTrace, name: &str, t: &Tensor) {
    trace.push((name.to_string(), t.dims().to_vec()));
}

fn missing(component: &str, mode: Mode) -> Error {
    Error::Param(format!("mode {mode} is missing its {component} parameters"))
}

/// Forward pass that also returns the dims of every intermediate tensor, in
/// dataflow order externally comparable against [`shape_plan`].
pub fn forward_traced(
    tape: &mut Tape,
    params: &ModelParams,
    fundus: &Tensor,
    oct: &Tensor,
    cfg: &Config,
) -> Result<(Tensor, ShapeTrace)> {
    let d = &cfg.dims;
    let mut trace = ShapeTrace::new();
    let mode = params.mode;

    let logits = match mode {
        Mode::Full => {
            note(&mut trace, "fundus_input", fundus);
            note(&mut trace, "oct_input", oct);
            let fl = params.fundus_local.as_ref().ok_or_else(|| missing("fundus_local", mode))?;
            let fg = params.fundus_global.as_ref().ok_or_else(|| missing("fundus_global", mode))?;
            let ol = params.oct_local.as_ref().ok_or_else(|| missing("oct_local", mode))?;
            let og = params.oct_global.as_ref().ok_or_else(|| missing("oct_global", mode))?;

            let f_local = encode_fundus_branch(tape, fundus, fl, d)?;
            note(&mut trace, "fundus_local_features", &f_local);
            let f_global = encode_fundus_branch(tape, fundus, fg, d)?;
            note(&mut trace, "fundus_global_features", &f_global);
            let o_local = encode_oct_branch(tape, oct, ol, d)?;
            note(&mut trace, "oct_local_features", &o_local);
            let o_global = encode_oct_branch(tape, oct, og, d)?;
            note(&mut trace, "oct_global_features", &o_global);

            let x_l = merge_axes_fundus(tape, &f_local)?;
            note(&mut trace, "fundus_local_merged", &x_l);
            let x_g = merge_axes_fundus(tape, &f_global)?;
            note(&mut trace, "fundus_global_merged", &x_g);
            let y_l = merge_axes_oct(tape, &o_local)?;
            note(&mut trace, "oct_local_merged", &y_l);
            let y_g = merge_axes_oct(tape, &o_global)?;
            note(&mut trace, "oct_global_merged", &y_g);

            let lm_aligner = params.lm_aligner.as_ref().ok_or_else(|| missing("lm_aligner", mode))?;
            let gm_aligner = params.gm_aligner.as_ref().ok_or_else(|| missing("gm_aligner", mode))?;
            let lm = lm_module(tape, &x_l, &y_l, lm_aligner, cfg.fusion.tau_local)?;
            note(&mut trace, "lm_aligned_oct", &lm.y_bar_l);
            note(&mut trace, "lm_attended_fundus", &lm.x_bar_l);
            note(&mut trace, "lm_fused", &lm.fused);
            let gm = gm_module(tape, &x_g, &y_g, gm_aligner, cfg.fusion.tau_global)?;
            note(&mut trace, "gm_aligned_oct", &gm.y_bar_g);
            note(&mut trace, "gm_aggregated_oct", &gm.y_agg_g);
            note(&mut trace, "gm_fused", &gm.fused);

            let lm_head = params.lm_head.as_ref().ok_or_else(|| missing("lm_head", mode))?;
            let gm_head = params.gm_head.as_ref().ok_or_else(|| missing("gm_head", mode))?;
            let f_l = branch_head(tape, &lm.fused, lm_head)?;
            note(&mut trace, "lm_feature", &f_l);
            let f_g = branch_head(tape, &gm.fused, gm_head)?;
            note(&mut trace, "gm_feature", &f_g);
            fuse_classify(tape, &f_l, &f_g, &params.classifier)?
        }
        Mode::FundusOnly => {
            note(&mut trace, "fundus_input", fundus);
            let fl = params.fundus_local.as_ref().ok_or_else(|| missing("fundus_local", mode))?;
            let f = encode_fundus_branch(tape, fundus, fl, d)?;
            note(&mut trace, "fundus_local_features", &f);
            let pooled = tape.global_avg_pool(&f)?;
            note(&mut trace, "pooled_features", &pooled);
            let head = params.pooled_head.as_ref().ok_or_else(|| missing("pooled_head", mode))?;
            let hidden = tape.linear(&pooled, &head.weight, &head.bias)?;
            let hidden = tape.relu(&hidden)?;
            note(&mut trace, "hidden_feature", &hidden);
            tape.linear(&hidden, &params.classifier.weight, &params.classifier.bias)?
        }
        Mode::OctOnly => {
            note(&mut trace, "oct_input", oct);
            let ol = params.oct_local.as_ref().ok_or_else(|| missing("oct_local", mode))?;
            let o = encode_oct_branch(tape, oct, ol, d)?;
            note(&mut trace, "oct_local_features", &o);
            let view = tape.reshape(&o, &[d.t_y * d.c_y, d.h_y, d.w_y])?;
            note(&mut trace, "oct_channel_view", &view);
            let pooled = tape.global_avg_pool(&view)?;
            note(&mut trace, "pooled_features", &pooled);
            let head = params.pooled_head.as_ref().ok_or_else(|| missing("pooled_head", mode))?;
            let hidden = tape.linear(&pooled, &head.weight, &head.bias)?;
            let hidden = tape.relu(&hidden)?;
            note(&mut trace, "hidden_feature", &hidden);
            tape.linear(&hidden, &params.classifier.weight, &params.classifier.bias)?
        }
        Mode::ConcatOnly => {
            note(&mut trace, "fundus_input", fundus);
            note(&mut trace, "oct_input", oct);
            let fl = params.fundus_local.as_ref().ok_or_else(|| missing("fundus_local", mode))?;
            let ol = params.oct_local.as_ref().ok_or_else(|| missing("oct_local", mode))?;
            let f = encode_fundus_branch(tape, fundus, fl, d)?;
            note(&mut trace, "fundus_local_features", &f);
            let o = encode_oct_branch(tape, oct, ol, d)?;
            note(&mut trace, "oct_local_features", &o);
            let f_pooled = tape.global_avg_pool(&f)?;
            note(&mut trace, "fundus_pooled", &f_pooled);
            let o_view = tape.reshape(&o, &[d.t_y * d.c_y, d.h_y, d.w_y])?;
            let o_pooled = tape.global_avg_pool(&o_view)?;
            note(&mut trace, "oct_pooled", &o_pooled);
            let cat = tape.concat_first(&f_pooled, &o_pooled)?;
            note(&mut trace, "concat_pooled", &cat);
            let head = params.pooled_head.as_ref().ok_or_else(|| missing("pooled_head", mode))?;
            let hidden = tape.linear(&cat, &head.weight, &head.bias)?;
            let hidden = tape.relu(&hidden)?;
            note(&mut trace, "hidden_feature", &hidden);
            tape.linear(&hidden, &params.classifier.weight, &params.classifier.bias)?
        }
        Mode::LmOnly => {
            note(&mut trace, "fundus_input", fundus);
            note(&mut trace, "oct_input", oct);
            let fl = params.fundus_local.as_ref().ok_or_else(|| missing("fundus_local", mode))?;
            let ol = params.oct_local.as_ref().ok_or_else(|| missing("oct_local", mode))?;
            let f = encode_fundus_branch(tape, fundus, fl, d)?;
            note(&mut trace, "fundus_local_features", &f);
            let o = encode_oct_branch(tape, oct, ol, d)?;
            note(&mut trace, "oct_local_features", &o);
            let x_l = merge_axes_fundus(tape, &f)?;
            note(&mut trace, "fundus_local_merged", &x_l);
            let y_l = merge_axes_oct(tape, &o)?;
            note(&mut trace, "oct_local_merged", &y_l);
            let aligner = params.lm_aligner.as_ref().ok_or_else(|| missing("lm_aligner", mode))?;
            let lm = lm_module(tape, &x_l, &y_l, aligner, cfg.fusion.tau_local)?;
            note(&mut trace, "lm_aligned_oct", &lm.y_bar_l);
            note(&mut trace, "lm_attended_fundus", &lm.x_bar_l);
            note(&mut trace, "lm_fused", &lm.fused);
            let head = params.lm_head.as_ref().ok_or_else(|| missing("lm_head", mode))?;
            let f_l = branch_head(tape, &lm.fused, head)?;
            note(&mut trace, "lm_feature", &f_l);
            // duplicated so the classifier keeps its full-mode input width
            fuse_classify(tape, &f_l, &f_l, &params.classifier)?
        }
        Mode::GmOnly => {
            note(&mut trace, "fundus_input", fundus);
            note(&mut trace, "oct_input", oct);
            let fg = params.fundus_global.as_ref().ok_or_else(|| missing("fundus_global", mode))?;
            let og = params.oct_global.as_ref().ok_or_else(|| missing("oct_global", mode))?;
            let f = encode_fundus_branch(tape, fundus, fg, d)?;
            note(&mut trace, "fundus_global_features", &f);
            let o = encode_oct_branch(tape, oct, og, d)?;
            note(&mut trace, "oct_global_features", &o);
            let x_g = merge_axes_fundus(tape, &f)?;
            note(&mut trace, "fundus_global_merged", &x_g);
            let y_g = merge_axes_oct(tape, &o)?;
            note(&mut trace, "oct_global_merged", &y_g);
            let aligner = params.gm_aligner.as_ref().ok_or_else(|| missing("gm_aligner", mode))?;
            let gm = gm_module(tape, &x_g, &y_g, aligner, cfg.fusion.tau_global)?;
            note(&mut trace, "gm_aligned_oct", &gm.y_bar_g);
            note(&mut trace, "gm_aggregated_oct", &gm.y_agg_g);
            note(&mut trace, "gm_fused", &gm.fused);
            let head = params.gm_head.as_ref().ok_or_else(|| missing("gm_head", mode))?;
            let f_g = branch_head(tape, &gm.fused, head)?;
            note(&mut trace, "gm_feature", &f_g);
            fuse_classify(tape, &f_g, &f_g, &params.classifier)?
        }
    };
    note(&mut trace, "logits", &logits);
    Ok((logits, trace))
}

pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    fundus: &Tensor,
    oct: &Tensor,
    cfg: &Config,
) -> Result<Tensor> {
    forward_traced(tape, params, fundus, oct, cfg).map(|(logits, _)| logits)
}

/// The (name, dims) trace [`forward_traced`] produces, computed symbolically
/// from the config alone — clinical-scale dims stay numbers, nothing is allocated.
pub fn shape_plan(mode: Mode, cfg: &Config) -> ShapeTrace {
    let d = &cfg.dims;
    let (ih, iw) = d.fundus_input_hw;
    let (it, ioh, iow) = d.oct_input_thw;
    let fw = cfg.fusion.fused_width;
    let (d_x, s_y) = (d.d_x(), d.s_y());
    let fundus_feat = vec![d.c_x, d.h_x, d.w_x];
    let oct_feat = vec![d.t_y, d.c_y, d.h_y, d.w_y];
    let mut t: ShapeTrace = Vec::new();
    let mut p = |name: &str, dims: Vec<usize>| t.push((name.to_string(), dims));

    match mode {
        Mode::Full => {
            p("fundus_input", vec![3, ih, iw]);
            p("oct_input", vec![it, 1, ioh, iow]);
            p("fundus_local_features", fundus_feat.clone());
            p("fundus_global_features", fundus_feat);
            p("oct_local_features", oct_feat.clone());
            p("oct_global_features", oct_feat);
            p("fundus_local_merged", vec![d_x, d.w_x]);
            p("fundus_global_merged", vec![d_x, d.w_x]);
            p("oct_local_merged", vec![d.t_y, s_y, d.w_y]);
            p("oct_global_merged", vec![d.t_y, s_y, d.w_y]);
            p("lm_aligned_oct", vec![d_x, s_y, d.w_y]);
            p("lm_attended_fundus", vec![d_x, s_y, d.w_y]);
            p("lm_fused", vec![2 * d_x, s_y, d.w_y]);
            p("gm_aligned_oct", vec![d_x, s_y, d.w_y]);
            p("gm_aggregated_oct", vec![d_x, d.w_x]);
            p("gm_fused", vec![2 * d_x, d.w_x]);
            p("lm_feature", vec![fw]);
            p("gm_feature", vec![fw]);
        }
        Mode::FundusOnly => {
            p("fundus_input", vec![3, ih, iw]);
            p("fundus_local_features", fundus_feat);
            p("pooled_features", vec![d.c_x]);
            p("hidden_feature", vec![fw]);
        }
        Mode::OctOnly => {
            p("oct_input", vec![it, 1, ioh, iow]);
            p("oct_local_features", oct_feat);
            p("oct_channel_view", vec![d.t_y * d.c_y, d.h_y, d.w_y]);
            p("pooled_features", vec![d.t_y * d.c_y]);
            p("hidden_feature", vec![fw]);
        }
        Mode::ConcatOnly => {
            p("fundus_input", vec![3, ih, iw]);
            p("oct_input", vec![it, 1, ioh, iow]);
            p("fundus_local_features", fundus_feat);
            p("oct_local_features", oct_feat);
            p("fundus_pooled", vec![d.c_x]);
            p("oct_pooled", vec![d.t_y * d.c_y]);
            p("concat_pooled", vec![d.c_x + d.t_y * d.c_y]);
            p("hidden_feature", vec![fw]);
        }
        Mode::LmOnly => {
            p("fundus_input", vec![3, ih, iw]);
            p("oct_input", vec![it, 1, ioh, iow]);
            p("fundus_local_features", fundus_feat);
            p("oct_local_features", oct_feat);
            p("fundus_local_merged", vec![d_x, d.w_x]);
            p("oct_local_merged", vec![d.t_y, s_y, d.w_y]);
            p("lm_aligned_oct", vec![d_x, s_y, d.w_y]);
            p("lm_attended_fundus", vec![d_x, s_y, d.w_y]);
            p("lm_fused", vec![2 * d_x, s_y, d.w_y]);
            p("lm_feature", vec![fw]);
        }
        Mode::GmOnly => {
            p("fundus_input", vec![3, ih, iw]);
            p("oct_input", vec![it, 1, ioh, iow]);
            p("fundus_global_features", fundus_feat);
            p("oct_global_features", oct_feat);
            p("fundus_global_merged", vec![d_x, d.w_x]);
            p("oct_global_merged", vec![d.t_y, s_y, d.w_y]);
            p("gm_aligned_oct", vec![d_x, s_y, d.w_y]);
            p("gm_aggregated_oct", vec![d_x, d.w_x]);
            p("gm_fused", vec![2 * d_x, d.w_x]);
            p("gm_feature", vec![fw]);
        }
    }
    p("logits", vec![cfg.fusion.num_classes]);
    t
}

/// Render a shape trace as aligned text lines.
pub fn render_trace(trace: &ShapeTrace) -> String {
    let width = trace.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (name, dims) in trace {
        out.push_str(&format!("{name:<width$}  {}\n", dims_str(dims)));
    }
    out
}

const MANIFEST_HEADER: &str = "elf-checkpoint v1";

/// Write every parameter tensor plus a manifest into `dir`.
pub fn save_checkpoint(dir: &Path, params: &ModelParams) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = format!("{MANIFEST_HEADER}\nmode {}\n", params.mode);
    let mut failure = None;
    params.visit(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let file = format!("{name}.elft");
        if let Err(e) = elft::write_tensor(&dir.join(&file), t, elft::DType::F64) {
            failure = Some(e);
            return;
        }
        manifest.push_str(&format!("tensor {name} {} {file}\n", dims_str(t.dims())));
    });
    if let Some(e) = failure {
        return Err(e);
    }
    elft::write_string_atomic(&dir.join("manifest.txt"), &manifest)
}

/// Load a checkpoint and validate every tensor against the dims the config
/// implies for the stored mode.
pub fn load_checkpoint(dir: &Path, cfg: &Config) -> Result<ModelParams> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(MANIFEST_HEADER) => {}
        other => {
            return Err(Error::Data(format!(
                "{}: expected header {MANIFEST_HEADER:?}, got {other:?}",
                manifest_path.display()
            )))
        }
    }
    let mode = match lines.next().and_then(|l| l.strip_prefix("mode ")) {
        Some(m) => Mode::from_str(m)?,
        None => return Err(Error::Data(format!("{}: missing mode line", manifest_path.display()))),
    };

    let mut files: HashMap<String, String> = HashMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some("tensor"), Some(name), Some(_dims), Some(file)) => {
                files.insert(name.to_string(), file.to_string());
            }
            _ => return Err(Error::Data(format!("{}: bad manifest line {line:?}", manifest_path.display()))),
        }
    }

    let expected = expected_param_dims(mode, cfg);
    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(expected.len());
    for (name, dims) in &expected {
        let file = files.remove(name).ok_or_else(|| {
            Error::Data(format!("checkpoint {} is missing tensor {name}", dir.display()))
        })?;
        let t = elft::read_tensor(&dir.join(&file))?;
        if t.dims() != dims.as_slice() {
            return Err(Error::Shape(format!(
                "checkpoint tensor {name} has dims {}, config expects {}",
                dims_str(t.dims()),
                dims_str(dims)
            )));
        }
        loaded.push((name.clone(), t.with_grad()));
    }
    if let Some(extra) = files.keys().next() {
        return Err(Error::Data(format!(
            "checkpoint {} lists unexpected tensor {extra}",
            dir.display()
        )));
    }

    // assemble a same-shaped bundle, then swap the loaded tensors in
    let skeleton = ModelParams::init(mode, cfg);
    skeleton.with_tensors(&loaded)
}
