//! Forward definitions of the projection layer and of one adaptive context
//! aggregation level (context attention module with its gating block, long
//! context module, norms, MLP and skips).

use super::config::{Downsample, ModelConfig, ModuleToggle};
use crate::autodiff::{ConvSpec, Graph, ParamStore, PoolKind, Tensor3, Var};
use crate::Result;

/// Forces parts of a level to fixed values, for ablation and identity tests.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LevelOverrides {
    /// Replace the gated attention `G` by this constant.
    pub attention: Option<f64>,
    /// Replace every gating coefficient by this constant.
    pub gate: Option<f64>,
    /// Replace the attention module output by zeros.
    pub zero_cam: bool,
    /// Replace the long context module output by zeros.
    pub zero_lcm: bool,
}

/// Intermediate values of the context gating block.
#[derive(Clone, Debug)]
pub struct CgbOutput {
    /// Per-scale activated depthwise features `z_m`, each `(B, D, T)`.
    pub branches: Vec<Var>,
    /// Gating coefficients `(B, M, T)`.
    pub gates: Var,
    /// Gated sum `G`, `(B, D, T)`.
    pub attention: Var,
}

pub(crate) fn level_prefix(level: usize) -> String {
    format!("levels.{level}")
}

fn conv(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    name: &str,
    spec: ConvSpec,
) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    g.conv1d(x, w, Some(b), spec)
}

pub(crate) fn linear(g: &mut Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    g.linear(x, w, Some(b))
}

pub(crate) fn layer_norm(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    name: &str,
    eps: f64,
) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.gamma"))?;
    let beta = g.param(store, &format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta, eps)
}

/// Same-padded convolution named `name` (`.weight`/`.bias`).
pub(crate) fn conv_same(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    name: &str,
    kernel: usize,
    groups: usize,
) -> Result<Var> {
    conv(g, store, x, name, ConvSpec::same(kernel, groups)?)
}

/// Two kernel-3 convolutions with ReLU: input features to the embedding.
pub fn project(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let got = g.dims(x)[1];
    if got != cfg.input_dim {
        return Err(crate::Error::Config(format!(
            "feature dim {got} does not match model input_dim {}",
            cfg.input_dim
        )));
    }
    let h = conv_same(g, store, x, "proj.0", 3, 1)?;
    let h = g.relu(h);
    let h = conv_same(g, store, h, "proj.1", 3, 1)?;
    Ok(g.relu(h))
}

/// Context gating block on the Q-branch output.
pub fn cgb_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    level: usize,
    q: Var,
    overrides: &LevelOverrides,
) -> Result<CgbOutput> {
    let prefix = format!("{}.cam.cgb", level_prefix(level));
    let d = g.dims(q)[1];
    let mut branches = Vec::with_capacity(cfg.cgb_kernels.len());
    for (m, &k) in cfg.cgb_kernels.iter().enumerate() {
        let z = conv_same(g, store, q, &format!("{prefix}.dw{m}"), k, d)?;
        branches.push(g.gelu(z));
    }
    let gates = match overrides.gate {
        Some(value) => {
            let [b, _, t] = g.dims(q);
            let mask = g.mask(q).cloned();
            g.constant(Tensor3::filled([b, branches.len(), t], value), mask)
        }
        None => {
            let stacked = g.concat_channels(&branches)?;
            let max = g.channel_pool(stacked, PoolKind::Max)?;
            let avg = g.channel_pool(stacked, PoolKind::Avg)?;
            let pooled = g.concat_channels(&[avg, max])?;
            let logits = conv_same(g, store, pooled, &format!("{prefix}.mix"), cfg.cgb_mix_kernel, 1)?;
            g.sigmoid(logits)
        }
    };
    let attention = g.gated_sum(&branches, gates)?;
    Ok(CgbOutput {
        branches,
        gates,
        attention,
    })
}

/// Context attention module: `A = CGB(L_Q x) * L_K x`.
pub fn cam_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    level: usize,
    x_norm: Var,
    overrides: &LevelOverrides,
) -> Result<Var> {
    let prefix = format!("{}.cam", level_prefix(level));
    let k = linear(g, store, x_norm, &format!("{prefix}.k"))?;
    let attention = match overrides.attention {
        Some(value) => {
            let mask = g.mask(x_norm).cloned();
            g.constant(Tensor3::filled(g.dims(x_norm), value), mask)
        }
        None => {
            let q = linear(g, store, x_norm, &format!("{prefix}.q"))?;
            cgb_forward(g, store, cfg, level, q, overrides)?.attention
        }
    };
    g.mul(attention, k)
}

/// Long context module: one large and several small depthwise kernels, each
/// followed by GeLU, summed.
pub fn lcm_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    level: usize,
    x_norm: Var,
) -> Result<Var> {
    let prefix = format!("{}.lcm", level_prefix(level));
    let d = g.dims(x_norm)[1];
    let large = conv_same(g, store, x_norm, &format!("{prefix}.large"), cfg.lcm_kernel(level), d)?;
    let mut acc = g.gelu(large);
    for (n, &k) in cfg.lcm_small_kernels.iter().enumerate() {
        let s = conv_same(g, store, x_norm, &format!("{prefix}.small{n}"), k, d)?;
        let s = g.gelu(s);
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

fn downsample(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, level: usize, x: Var) -> Result<Var> {
    if level == 1 {
        return Ok(x);
    }
    match cfg.downsample {
        Downsample::MaxPool => g.temporal_max_pool(x, 3, 2, 1),
        Downsample::StridedConv => {
            let d = g.dims(x)[1];
            let spec = ConvSpec {
                stride: 2,
                padding: 1,
                groups: d,
            };
            conv(g, store, x, &format!("{}.ds", level_prefix(level)), spec)
        }
    }
}

fn zeros_like(g: &mut Graph, x: Var) -> Var {
    let mask = g.mask(x).cloned();
    g.constant(Tensor3::zeros(g.dims(x)), mask)
}

/// One aggregation level:
/// `x = DS(prev)`, `n = LN(x)`, `r = CAM(n) + LCM(n) + x`,
/// `out = MLP(LN(r)) + r`.
pub fn aca_level(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    level: usize,
    prev: Var,
    overrides: &LevelOverrides,
) -> Result<Var> {
    let prefix = level_prefix(level);
    let eps = cfg.layer_norm_eps;
    let x = downsample(g, store, cfg, level, prev)?;
    let normed = layer_norm(g, store, x, &format!("{prefix}.ln1"), eps)?;

    let use_cam = cfg.module_toggle != ModuleToggle::LcmOnly;
    let use_lcm = cfg.module_toggle != ModuleToggle::CamOnly;
    let cam = use_cam
        .then(|| {
            if overrides.zero_cam {
                Ok(zeros_like(g, normed))
            } else {
                cam_forward(g, store, cfg, level, normed, overrides)
            }
        })
        .transpose()?;
    let lcm = use_lcm
        .then(|| {
            if overrides.zero_lcm {
                Ok(zeros_like(g, normed))
            } else {
                lcm_forward(g, store, cfg, level, normed)
            }
        })
        .transpose()?;
    let context = match (cam, lcm) {
        (Some(a), Some(d)) => g.add(a, d)?,
        (Some(a), None) => a,
        (None, Some(d)) => d,
        (None, None) => unreachable!("toggle always keeps one branch"),
    };
    let residual = g.add(context, x)?;

    let h = layer_norm(g, store, residual, &format!("{prefix}.ln2"), eps)?;
    let h = linear(g, store, h, &format!("{prefix}.mlp.fc1"))?;
    let h = g.gelu(h);
    let h = linear(g, store, h, &format!("{prefix}.mlp.fc2"))?;
    g.add(h, residual)
}

/// Feature maps of every pyramid level, as graph handles.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub levels: Vec<Var>,
    /// `2^(i-1)` for level `i`.
    pub strides: Vec<usize>,
}

/// Applies the levels in sequence to the projected input.
pub fn forward_pyramid(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    projected: Var,
    overrides: &LevelOverrides,
) -> Result<PyramidFeatures> {
    let mut levels = Vec::with_capacity(cfg.pyramid_levels);
    let mut strides = Vec::with_capacity(cfg.pyramid_levels);
    let mut prev = projected;
    for level in 1..=cfg.pyramid_levels {
        prev = aca_level(g, store, cfg, level, prev, overrides)?;
        levels.push(prev);
        strides.push(cfg.stride(level));
    }
    Ok(PyramidFeatures { levels, strides })
}
