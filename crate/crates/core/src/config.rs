//! Configuration types: feature-map dimensions, fusion hyperparameters,
//! optimizer settings, and the synthetic-data recipe.
//!
//! Defaults are the toy profile used throughout the test suite; the
//! clinical-scale preset exists for shape tracing only and is never allocated.

use crate::error::{Error, Result};

/// Input sizes and per-branch feature-map dimensions.
///
/// Fundus features are `c_x x h_x x w_x`; the fused attention ops view them as
/// `d_x x w_x` with `d_x = c_x * h_x`. OCT features are `t_y x c_y x h_y x w_y`,
/// viewed as `t_y x s_y x w_y` with `s_y = c_y * h_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    /// Expected fundus input height/width (channels are fixed at 3).
    pub fundus_input_hw: (usize, usize),
    /// Expected OCT input depth/height/width (one channel per slice).
    pub oct_input_thw: (usize, usize, usize),
    pub c_x: usize,
    pub h_x: usize,
    pub w_x: usize,
    pub t_y: usize,
    pub c_y: usize,
    pub h_y: usize,
    pub w_y: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            fundus_input_hw: (64, 64),
            oct_input_thw: (8, 32, 32),
            c_x: 8,
            h_x: 4,
            w_x: 4,
            t_y: 4,
            c_y: 4,
            h_y: 4,
            w_y: 4,
        }
    }
}

impl ModelDims {
    /// Merged fundus channel count: `c_x * h_x`.
    pub fn d_x(&self) -> usize {
        self.c_x * self.h_x
    }

    /// Merged OCT channel count: `c_y * h_y`.
    pub fn s_y(&self) -> usize {
        self.c_y * self.h_y
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("fundus input height", self.fundus_input_hw.0),
            ("fundus input width", self.fundus_input_hw.1),
            ("oct input depth", self.oct_input_thw.0),
            ("oct input height", self.oct_input_thw.1),
            ("oct input width", self.oct_input_thw.2),
            ("c_x", self.c_x),
            ("h_x", self.h_x),
            ("w_x", self.w_x),
            ("t_y", self.t_y),
            ("c_y", self.c_y),
            ("h_y", self.h_y),
            ("w_y", self.w_y),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Attention temperatures and classifier widths.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// Temperature of the local-wise attention softmax.
    pub tau_local: f64,
    /// Temperature of the global-wise attention softmax.
    pub tau_global: f64,
    /// Width each branch head projects to before the final classifier.
    pub fused_width: usize,
    pub num_classes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { tau_local: 6.0, tau_global: 4.0, fused_width: 1024, num_classes: 3 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_local.is_finite() && self.tau_local > 0.0) {
            return Err(Error::Config(format!("tau_local must be positive, got {}", self.tau_local)));
        }
        if !(self.tau_global.is_finite() && self.tau_global > 0.0) {
            return Err(Error::Config(format!("tau_global must be positive, got {}", self.tau_global)));
        }
        if self.fused_width == 0 {
            return Err(Error::Config("fused_width must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        Ok(())
    }
}

/// Optimizer and epoch-loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Adam learning rate. Zero is accepted so optimizer-identity runs can be
    /// expressed; real training wants a positive value.
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub augment_fundus: bool,
    pub augment_oct: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 0.001,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 42,
            augment_fundus: true,
            augment_oct: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Synthetic dataset recipe: class `c` adds a mean shift of `c * signal` on a
/// fixed patch of each modality over Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Sample count per class; length must equal `num_classes`.
    pub per_class: Vec<usize>,
    pub signal_fundus: f64,
    pub signal_oct: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        // sigma low enough that the patch signal, not the noise, dominates a
        // volume's variance: augmentation's crop+resize smooths noise before
        // standardization, so noise-dominated data makes augmented training
        // views systematically higher-contrast than the raw evaluation view.
        SynthSpec { per_class: vec![8, 8, 8], signal_fundus: 1.5, signal_oct: 1.5, noise_sigma: 0.25, seed: 7 }
    }
}

impl SynthSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.per_class.len() != num_classes {
            return Err(Error::Config(format!(
                "synth_per_class lists {} classes but num_classes is {num_classes}",
                self.per_class.len()
            )));
        }
        for (name, v) in [("synth_signal_fundus", self.signal_fundus), ("synth_signal_oct", self.signal_oct)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(Error::Config(format!("synth_noise_sigma must be positive, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.per_class.iter().sum()
    }
}

/// Everything a run needs, bundled.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub dims: ModelDims,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl Config {
    /// The desk-scale defaults used by the test suite.
    pub fn toy() -> Self {
        Config::default()
    }

    /// Full-scale dimensions for shape tracing only. A 2048x14x14 fundus map
    /// is never allocated; `shape_plan` walks these numbers symbolically.
    pub fn clinical_scale() -> Self {
        Config {
            dims: ModelDims {
                fundus_input_hw: (1024, 1024),
                oct_input_thw: (256, 384, 384),
                c_x: 2048,
                h_x: 14,
                w_x: 14,
                t_y: 16,
                c_y: 64,
                h_y: 12,
                w_y: 12,
            },
            train: TrainConfig { epochs: 1000, ..TrainConfig::default() },
            ..Config::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.fusion.validate()?;
        self.train.validate()?;
        self.synth.validate(self.fusion.num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_defaults_are_the_documented_values() {
        let c = Config::toy();
        assert_eq!(c.dims.fundus_input_hw, (64, 64));
        assert_eq!(c.dims.oct_input_thw, (8, 32, 32));
        assert_eq!((c.dims.c_x, c.dims.h_x, c.dims.w_x), (8, 4, 4));
        assert_eq!((c.dims.t_y, c.dims.c_y, c.dims.h_y, c.dims.w_y), (4, 4, 4, 4));
        assert_eq!(c.dims.d_x(), 32);
        assert_eq!(c.dims.s_y(), 16);
        assert_eq!(c.fusion.tau_local, 6.0);
        assert_eq!(c.fusion.tau_global, 4.0);
        assert_eq!(c.fusion.fused_width, 1024);
        assert_eq!(c.fusion.num_classes, 3);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.train.seed, 42);
        c.validate().unwrap();
    }

    #[test]
    fn clinical_scale_dims_trace_without_allocation() {
        let c = Config::clinical_scale();
        assert_eq!((c.dims.c_x, c.dims.h_x, c.dims.w_x), (2048, 14, 14));
        assert_eq!(c.dims.d_x(), 2048 * 14);
        assert_eq!(c.train.epochs, 1000);
        c.validate().unwrap();
    }

    #[test]
    fn validation_names_the_offending_field() {
        let mut c = Config::toy();
        c.fusion.tau_local = 0.0;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("tau_local"), "{err}");

        let mut c = Config::toy();
        c.dims.w_y = 0;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("w_y"), "{err}");

        let mut c = Config::toy();
        c.train.beta2 = 1.0;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("beta2"), "{err}");

        let mut c = Config::toy();
        c.synth.per_class = vec![4, 4];
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("synth_per_class"), "{err}");
    }

    #[test]
    fn zero_learning_rate_is_accepted() {
        let mut c = Config::toy();
        c.train.learning_rate = 0.0;
        c.validate().unwrap();
    }
}
