//! The detector network: projection, aggregation pyramid and heads.

mod checkpoint;
mod config;
pub(crate) mod layers;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use config::{lcm_schedule, Downsample, ModelConfig, ModuleToggle};
pub use layers::{
    aca_level, cam_forward, cgb_forward, forward_pyramid, lcm_forward, project, CgbOutput,
    LevelOverrides, PyramidFeatures,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, SeqTensor, Tensor3};
use crate::detection::{head_forward, head_param_specs, HeadOutputs};
use crate::Result;

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: [usize; 3],
    pub init: Init,
    pub decay: bool,
}

impl ParamSpec {
    pub(crate) fn weight(name: String, dims: [usize; 3]) -> Self {
        Self {
            name,
            dims,
            init: Init::FanIn(dims[1] * dims[2]),
            decay: true,
        }
    }

    pub(crate) fn bias(name: String, channels: usize, fan_in: usize) -> Self {
        Self {
            name,
            dims: [1, channels, 1],
            init: Init::FanIn(fan_in),
            decay: false,
        }
    }

    pub(crate) fn constant(name: String, channels: usize, value: f64) -> Self {
        Self {
            name,
            dims: [1, channels, 1],
            init: Init::Const(value),
            decay: false,
        }
    }
}

/// Weight + bias of a convolution with `(out, in_per_group, k)` weights.
pub(crate) fn conv_specs(name: &str, out: usize, in_per_group: usize, k: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::weight(format!("{name}.weight"), [out, in_per_group, k]),
        ParamSpec::bias(format!("{name}.bias"), out, in_per_group * k),
    ]
}

pub(crate) fn norm_specs(name: &str, channels: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::constant(format!("{name}.gamma"), channels, 1.0),
        ParamSpec::constant(format!("{name}.beta"), channels, 0.0),
    ]
}

/// Every parameter of the network for `cfg`, sorted by name.
///
/// Parameters of both context branches exist regardless of the module
/// toggle; a disabled branch simply never receives gradient.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let mut specs = Vec::new();
    specs.extend(conv_specs("proj.0", d, cfg.input_dim, 3));
    specs.extend(conv_specs("proj.1", d, d, 3));
    for level in 1..=cfg.pyramid_levels {
        let p = layers::level_prefix(level);
        if level > 1 && cfg.downsample == Downsample::StridedConv {
            specs.extend(conv_specs(&format!("{p}.ds"), d, 1, 3));
        }
        specs.extend(norm_specs(&format!("{p}.ln1"), d));
        specs.extend(norm_specs(&format!("{p}.ln2"), d));
        specs.extend(conv_specs(&format!("{p}.cam.k"), d, d, 1));
        specs.extend(conv_specs(&format!("{p}.cam.q"), d, d, 1));
        for (m, &k) in cfg.cgb_kernels.iter().enumerate() {
            specs.extend(conv_specs(&format!("{p}.cam.cgb.dw{m}"), d, 1, k));
        }
        let branches = cfg.cgb_kernels.len();
        specs.extend(conv_specs(&format!("{p}.cam.cgb.mix"), branches, 2, cfg.cgb_mix_kernel));
        specs.extend(conv_specs(&format!("{p}.lcm.large"), d, 1, cfg.lcm_kernel(level)));
        for (n, &k) in cfg.lcm_small_kernels.iter().enumerate() {
            specs.extend(conv_specs(&format!("{p}.lcm.small{n}"), d, 1, k));
        }
        let hidden = cfg.mlp_ratio * d;
        specs.extend(conv_specs(&format!("{p}.mlp.fc1"), hidden, d, 1));
        specs.extend(conv_specs(&format!("{p}.mlp.fc2"), d, hidden, 1));
    }
    specs.extend(head_param_specs(cfg));
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    specs
}

/// Draws parameters in sorted-name order from a seeded generator.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(cfg) {
        let value = match spec.init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor3::from_fn(spec.dims, |_, _, _| rng.random_range(-bound..=bound))
            }
            Init::Const(v) => Tensor3::filled(spec.dims, v),
        };
        store.insert(&spec.name, value, spec.decay)?;
    }
    Ok(store)
}

/// The full detector: configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextDet {
    cfg: ModelConfig,
    params: ParamStore,
}

impl ContextDet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    /// Wraps existing parameters; they must match the config exactly.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        if specs.len() != params.len() {
            return Err(crate::Error::Format(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            match params.value(&spec.name) {
                Some(v) if v.dims() == spec.dims => {}
                Some(v) => {
                    return Err(crate::Error::Format(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        v.dims(),
                        spec.dims
                    )))
                }
                None => return Err(crate::Error::Format(format!("missing parameter {}", spec.name))),
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Per-video, per-level valid lengths for projected lengths `t0s`.
    pub fn level_lengths(&self, t0s: &[usize]) -> Vec<Vec<usize>> {
        t0s.iter()
            .map(|&t0| {
                let mut lens = Vec::with_capacity(self.cfg.pyramid_levels);
                let mut t = t0;
                for level in 1..=self.cfg.pyramid_levels {
                    if level > 1 {
                        t = t.div_ceil(2);
                    }
                    lens.push(t);
                }
                lens
            })
            .collect()
    }

    /// Forward pass with externally supplied parameters.
    pub fn forward_with(&self, g: &mut Graph, params: &ParamStore, features: &SeqTensor) -> Result<HeadOutputs> {
        self.forward_with_overrides(g, params, features, &LevelOverrides::default())
    }

    pub fn forward_with_overrides(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        features: &SeqTensor,
        overrides: &LevelOverrides,
    ) -> Result<HeadOutputs> {
        let pyramid = self.pyramid_with(g, params, features, overrides)?;
        head_forward(g, params, &self.cfg, &pyramid)
    }

    pub fn pyramid_with(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        features: &SeqTensor,
        overrides: &LevelOverrides,
    ) -> Result<PyramidFeatures> {
        let x = g.input(features);
        let projected = project(g, params, &self.cfg, x)?;
        forward_pyramid(g, params, &self.cfg, projected, overrides)
    }

    pub fn forward(&self, g: &mut Graph, features: &SeqTensor) -> Result<HeadOutputs> {
        self.forward_with(g, &self.params, features)
    }
}
