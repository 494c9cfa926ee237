use crate::autodiff::{Graph, ParamStore, Tensor3, Var};
use crate::model::layers::{conv_same, layer_norm};
use crate::model::{conv_specs, norm_specs, ModelConfig, ParamSpec, PyramidFeatures};
use crate::Result;

/// Prior probability of the foreground classes at initialization.
const CLS_PRIOR: f64 = 0.01;

/// Initial bias of the offset output, so early predictions have nonzero
/// length and the ReLU starts in its active region.
const REG_BIAS_INIT: f64 = 1.0;

/// Per-level head outputs, as graph handles.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    /// Class logits `(B, U, T_i)`.
    pub class_logits: Vec<Var>,
    /// Nonnegative `(start, end)` offsets `(B, 2, T_i)` in units of the level stride.
    pub offsets: Vec<Var>,
    pub strides: Vec<usize>,
}

/// Head outputs copied out of the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadValues {
    pub class_logits: Vec<Tensor3>,
    pub offsets: Vec<Tensor3>,
    pub strides: Vec<usize>,
    /// Valid length per level, per video: `valid[b][level]`.
    pub valid: Vec<Vec<usize>>,
}

impl HeadOutputs {
    pub fn num_levels(&self) -> usize {
        self.class_logits.len()
    }

    pub fn values(&self, g: &Graph) -> HeadValues {
        let batch = self.class_logits.first().map_or(0, |&v| g.dims(v)[0]);
        let valid = (0..batch)
            .map(|b| {
                self.class_logits
                    .iter()
                    .map(|&v| g.mask(v).map_or(g.dims(v)[2], |m| m.len_of(b)))
                    .collect()
            })
            .collect();
        HeadValues {
            class_logits: self.class_logits.iter().map(|&v| g.value(v).clone()).collect(),
            offsets: self.offsets.iter().map(|&v| g.value(v).clone()).collect(),
            strides: self.strides.clone(),
            valid,
        }
    }
}

fn branch_specs(cfg: &ModelConfig, branch: &str, out: usize, out_bias: f64) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let k = cfg.head_kernel;
    let mut specs = Vec::new();
    for j in 0..cfg.head_layers - 1 {
        specs.extend(conv_specs(&format!("head.{branch}.{j}"), d, d, k));
        specs.extend(norm_specs(&format!("head.{branch}.{j}.norm"), d));
    }
    let [w, _] = conv_specs(&format!("head.{branch}.out"), out, d, k);
    specs.push(w);
    specs.push(ParamSpec::constant(format!("head.{branch}.out.bias"), out, out_bias));
    specs
}

/// Parameters of the classification and regression heads (shared by all
/// pyramid levels).
pub fn head_param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
    let mut specs = branch_specs(cfg, "cls", cfg.num_classes, prior_bias);
    specs.extend(branch_specs(cfg, "reg", 2, REG_BIAS_INIT));
    specs
}

fn branch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    name: &str,
    x: Var,
) -> Result<Var> {
    let mut h = x;
    for j in 0..cfg.head_layers - 1 {
        h = conv_same(g, store, h, &format!("head.{name}.{j}"), cfg.head_kernel, 1)?;
        h = layer_norm(g, store, h, &format!("head.{name}.{j}.norm"), cfg.layer_norm_eps)?;
        h = g.relu(h);
    }
    conv_same(g, store, h, &format!("head.{name}.out"), cfg.head_kernel, 1)
}

/// Runs both heads on every pyramid level with shared weights.
pub fn head_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    pyramid: &PyramidFeatures,
) -> Result<HeadOutputs> {
    let mut class_logits = Vec::with_capacity(pyramid.levels.len());
    let mut offsets = Vec::with_capacity(pyramid.levels.len());
    for &feat in &pyramid.levels {
        class_logits.push(branch(g, store, cfg, "cls", feat)?);
        let raw = branch(g, store, cfg, "reg", feat)?;
        offsets.push(g.relu(raw));
    }
    Ok(HeadOutputs {
        class_logits,
        offsets,
        strides: pyramid.strides.clone(),
    })
}
