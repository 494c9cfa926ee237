use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which context branches an aggregation level uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleToggle {
    #[default]
    Full,
    CamOnly,
    LcmOnly,
}

impl std::str::FromStr for ModuleToggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "cam_only" => Ok(Self::CamOnly),
            "lcm_only" => Ok(Self::LcmOnly),
            other => Err(Error::Config(format!("unknown module toggle {other:?}"))),
        }
    }
}

/// Temporal downsampling between pyramid levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    /// Parameter-free max pool, kernel 3, stride 2, padding 1.
    #[default]
    MaxPool,
    /// Depthwise convolution, kernel 3, stride 2, padding 1.
    StridedConv,
}

/// Architectural hyperparameters of the detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel count of the input feature sequence.
    pub input_dim: usize,
    pub embed_dim: usize,
    pub pyramid_levels: usize,
    /// Depthwise kernel sizes of the context gating block branches.
    pub cgb_kernels: Vec<usize>,
    /// Kernel of the convolution producing the gate logits.
    pub cgb_mix_kernel: usize,
    pub lcm_large_kernel_min: usize,
    pub lcm_large_kernel_max: usize,
    pub lcm_small_kernels: Vec<usize>,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Convolutions per head, including the output convolution.
    pub head_layers: usize,
    pub head_kernel: usize,
    pub module_toggle: ModuleToggle,
    pub downsample: Downsample,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 2048,
            embed_dim: 256,
            pyramid_levels: 6,
            cgb_kernels: vec![1, 3, 5],
            cgb_mix_kernel: 7,
            lcm_large_kernel_min: 5,
            lcm_large_kernel_max: 17,
            lcm_small_kernels: vec![1, 1, 3],
            mlp_ratio: 4,
            num_classes: 20,
            head_layers: 3,
            head_kernel: 3,
            module_toggle: ModuleToggle::Full,
            downsample: Downsample::MaxPool,
            layer_norm_eps: 1e-5,
        }
    }
}

fn check_kernel(name: &str, k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Config(format!("{name} must be odd and >= 1, got {k}")));
    }
    Ok(())
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("pyramid_levels", self.pyramid_levels),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
            ("head_layers", self.head_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.cgb_kernels.is_empty() {
            return Err(Error::Config("cgb_kernels must not be empty".into()));
        }
        for &k in &self.cgb_kernels {
            check_kernel("cgb_kernels entry", k)?;
        }
        for &k in &self.lcm_small_kernels {
            check_kernel("lcm_small_kernels entry", k)?;
        }
        check_kernel("cgb_mix_kernel", self.cgb_mix_kernel)?;
        check_kernel("lcm_large_kernel_min", self.lcm_large_kernel_min)?;
        check_kernel("lcm_large_kernel_max", self.lcm_large_kernel_max)?;
        check_kernel("head_kernel", self.head_kernel)?;
        if self.lcm_large_kernel_min > self.lcm_large_kernel_max {
            return Err(Error::Config(format!(
                "lcm_large_kernel_min {} exceeds lcm_large_kernel_max {}",
                self.lcm_large_kernel_min, self.lcm_large_kernel_max
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Large kernel length of pyramid level `level` (1-based).
    pub fn lcm_kernel(&self, level: usize) -> usize {
        lcm_schedule(
            level,
            self.pyramid_levels,
            self.lcm_large_kernel_min,
            self.lcm_large_kernel_max,
        )
    }

    /// Stride of level `level` (1-based) relative to the projected input.
    pub fn stride(&self, level: usize) -> usize {
        1 << (level - 1)
    }

    /// Padding multiple that keeps every level length integral.
    pub fn pad_multiple(&self) -> usize {
        1 << (self.pyramid_levels - 1)
    }
}

/// Large-kernel length for level `level` of `levels`: linear interpolation
/// from `k_max` at level 1 down to `k_min` at the last level, rounded to the
/// nearest odd integer with halves going up.
///
/// Integer form: with `num = k_max*(L-1) - (k_max-k_min)*(i-1)` and
/// `den = L-1`, the target is `num/den` and the nearest odd is
/// `2*floor(num / (2*den)) + 1`.
pub fn lcm_schedule(level: usize, levels: usize, k_min: usize, k_max: usize) -> usize {
    assert!(level >= 1 && level <= levels, "level {level} outside 1..={levels}");
    if levels == 1 {
        return k_max;
    }
    let den = levels - 1;
    let num = k_max * den - (k_max - k_min) * (level - 1);
    2 * (num / (2 * den)) + 1
}
