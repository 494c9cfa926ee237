use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::{Mask, SeqTensor, Tensor3};
use crate::error::invalid_arg;
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Stride/padding/grouping of a 1D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1 with `(k - 1) / 2` padding; `kernel` must be odd.
    pub fn same(kernel: usize, groups: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(invalid_arg!("same padding needs an odd kernel, got {kernel}"));
        }
        Ok(Self {
            stride: 1,
            padding: kernel / 2,
            groups,
        })
    }
}

/// Operation kinds, used for reporting and for the corrupted-backward hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv1d,
    Linear,
    LayerNorm,
    Activation(Activation),
    ChannelPool(PoolKind),
    TemporalMaxPool,
    Add,
    Mul,
    Scale,
    Concat,
    GatedSum,
    FocalLoss,
    GiouLoss,
    WeightedSum,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Leaf,
        OpKind::Conv1d,
        OpKind::Linear,
        OpKind::LayerNorm,
        OpKind::Activation(Activation::Relu),
        OpKind::Activation(Activation::Gelu),
        OpKind::Activation(Activation::Sigmoid),
        OpKind::ChannelPool(PoolKind::Max),
        OpKind::ChannelPool(PoolKind::Avg),
        OpKind::TemporalMaxPool,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Concat,
        OpKind::GatedSum,
        OpKind::FocalLoss,
        OpKind::GiouLoss,
        OpKind::WeightedSum,
    ];
}

impl std::str::FromStr for OpKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| crate::Error::InvalidArgument(format!("unknown op {s:?}")))
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv1d => "conv1d",
            OpKind::Linear => "linear",
            OpKind::LayerNorm => "layernorm",
            OpKind::Activation(Activation::Relu) => "relu",
            OpKind::Activation(Activation::Gelu) => "gelu",
            OpKind::Activation(Activation::Sigmoid) => "sigmoid",
            OpKind::ChannelPool(PoolKind::Max) => "channel_max_pool",
            OpKind::ChannelPool(PoolKind::Avg) => "channel_avg_pool",
            OpKind::TemporalMaxPool => "temporal_maxpool",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Concat => "concat",
            OpKind::GatedSum => "gated_sum",
            OpKind::FocalLoss => "focal_loss",
            OpKind::GiouLoss => "giou_loss",
            OpKind::WeightedSum => "weighted_sum",
        };
        f.write_str(name)
    }
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        linear: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor3,
        inv_std: Vec<f64>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    ChannelPool {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    GatedSum {
        zs: Vec<Var>,
        w: Var,
    },
    Focal {
        logits: Var,
        targets: Tensor3,
        weights: Vec<f64>,
        gamma: f64,
        alpha: f64,
    },
    Giou {
        offsets: Var,
        targets: Tensor3,
        weights: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        coeffs: Tensor3,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv { linear: true, .. } => OpKind::Linear,
            Op::Conv { .. } => OpKind::Conv1d,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Act { kind, .. } => OpKind::Activation(*kind),
            Op::ChannelPool { kind, .. } => OpKind::ChannelPool(*kind),
            Op::MaxPool { .. } => OpKind::TemporalMaxPool,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Concat(_) => OpKind::Concat,
            Op::GatedSum { .. } => OpKind::GatedSum,
            Op::Focal { .. } => OpKind::FocalLoss,
            Op::Giou { .. } => OpKind::GiouLoss,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
        }
    }
}

struct Node {
    value: Tensor3,
    mask: Option<Rc<Mask>>,
    op: Op,
    requires_grad: bool,
}

/// Single-use reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order; `backward` walks it once in reverse. A graph supports
/// exactly one backward pass; build a new graph for the next forward.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor3>>,
    params: HashMap<String, Var>,
    backward_done: bool,
    corrupt: Option<OpKind>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Public scalar helpers so reference implementations in tests can share
/// the exact same elementwise maths.
pub mod scalar {
    pub fn sigmoid(x: f64) -> f64 {
        super::sigmoid(x)
    }
    pub fn gelu(x: f64) -> f64 {
        super::gelu(x)
    }
    pub fn softplus(x: f64) -> f64 {
        super::softplus(x)
    }
}

/// Focal loss of a single logit against a binary target.
#[inline]
fn focal_term(logit: f64, target: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let positive = target > 0.5;
    let (p_t, log_p_t, alpha_t, sign) = if positive {
        (p, -softplus(-logit), alpha, 1.0)
    } else {
        (1.0 - p, -softplus(logit), 1.0 - alpha, -1.0)
    };
    let q = if positive { 1.0 - p } else { p };
    let q_gamma = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = -alpha_t * q_gamma * log_p_t;
    let grad = alpha_t * sign * q_gamma * (gamma * p_t * log_p_t - q);
    (loss, grad)
}

/// 1D GIoU loss between `[t - ps, t + pe]` and `[t - ts, t + te]` with
/// gradient w.r.t. `(ps, pe)`.
#[inline]
fn giou_term(ps: f64, pe: f64, ts: f64, te: f64) -> (f64, f64, f64) {
    let inter = ps.min(ts) + pe.min(te);
    let union = ps + pe + ts + te - inter;
    let hull = ps.max(ts) + pe.max(te);
    let loss = 2.0 - inter / union - union / hull;
    let d_inter_s = if ps < ts { 1.0 } else { 0.0 };
    let d_inter_e = if pe < te { 1.0 } else { 0.0 };
    let d_hull_s = if ps > ts { 1.0 } else { 0.0 };
    let d_hull_e = if pe > te { 1.0 } else { 0.0 };
    let grad = |di: f64, dh: f64| {
        let du = 1.0 - di;
        -(di * union - inter * du) / (union * union) - (du * hull - union * dh) / (hull * hull)
    };
    (loss, grad(d_inter_s, d_hull_s), grad(d_inter_e, d_hull_e))
}

/// Public forms of the fused loss kernels, for oracles and diagnostics.
pub mod kernels {
    /// `(loss, dloss/dlogit)` of the sigmoid focal loss.
    pub fn focal(logit: f64, target: f64, gamma: f64, alpha: f64) -> (f64, f64) {
        super::focal_term(logit, target, gamma, alpha)
    }
    /// `(loss, dloss/dps, dloss/dpe)` of the 1D GIoU loss.
    pub fn giou(ps: f64, pe: f64, ts: f64, te: f64) -> (f64, f64, f64) {
        super::giou_term(ps, pe, ts, te)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
            corrupt: None,
        }
    }

    /// Test hook: scales the upstream gradient entering every op of `kind`
    /// by 1.5 during backward, producing a detectably wrong gradient.
    pub fn set_corrupt_backward(&mut self, kind: Option<OpKind>) {
        self.corrupt = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor3, mask: Option<Rc<Mask>>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            mask,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor3 {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> [usize; 3] {
        self.nodes[v.0].value.dims()
    }

    pub fn mask(&self, v: Var) -> Option<&Mask> {
        self.nodes[v.0].mask.as_deref()
    }

    fn seq_mask(&self, v: Var) -> Result<Rc<Mask>> {
        self.nodes[v.0]
            .mask
            .clone()
            .ok_or_else(|| invalid_arg!("expected a sequence value, got a parameter or scalar"))
    }

    /// Gradient accumulated for `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor3> {
        self.grads[v.0].as_ref()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Copy of a sequence node as a [`SeqTensor`], with its gradient if any.
    pub fn to_seq(&self, v: Var) -> Result<SeqTensor> {
        let mask = self.seq_mask(v)?;
        Ok(SeqTensor {
            data: self.value(v).clone(),
            mask: (*mask).clone(),
            grad: self.grad(v).cloned(),
            requires_grad: self.rg(v),
        })
    }

    /// Registers a sequence input. Padded positions are zeroed.
    pub fn input(&mut self, x: &SeqTensor) -> Var {
        let mut data = x.data.clone();
        x.mask.apply(&mut data);
        self.push(data, Some(Rc::new(x.mask.clone())), Op::Leaf, x.requires_grad)
    }

    /// A non-differentiable constant; `mask` makes it a sequence value.
    pub fn constant(&mut self, value: Tensor3, mask: Option<Mask>) -> Var {
        let mut value = value;
        if let Some(m) = &mask {
            m.apply(&mut value);
        }
        self.push(value, mask.map(Rc::new), Op::Leaf, false)
    }

    /// Leaf bound to a named parameter; repeated lookups share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))?
            .clone();
        let v = self.push(value, None, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter nodes created so far, by name.
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn finish_seq(&self, mut out: Tensor3, mask: &Rc<Mask>) -> Tensor3 {
        mask.apply(&mut out);
        out
    }

    /// 1D convolution. `w` has shape `(C_out, C_in / groups, K)`, `b` is
    /// `(1, C_out, 1)`. Padded input steps read as zeros.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.conv_impl(x, w, b, spec, false)
    }

    /// Per-time-step affine map; `w` is `(C_out, C_in, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [_, _, k] = self.dims(w);
        if k != 1 {
            return Err(invalid_arg!("linear weight must be (C_out, C_in, 1)"));
        }
        let spec = ConvSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        };
        self.conv_impl(x, w, b, spec, true)
    }

    fn conv_impl(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        linear: bool,
    ) -> Result<Var> {
        let mask = self.seq_mask(x)?;
        let [batch, c_in, t_in] = self.dims(x);
        let [c_out, c_in_g, k] = self.dims(w);
        let ConvSpec {
            stride,
            padding,
            groups,
        } = spec;
        if groups == 0 || stride == 0 || k == 0 {
            return Err(invalid_arg!("conv1d needs positive groups, stride and kernel"));
        }
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(invalid_arg!(
                "channels ({c_in} in, {c_out} out) not divisible by groups {groups}"
            ));
        }
        if c_in / groups != c_in_g {
            return Err(invalid_arg!(
                "weight expects {c_in_g} input channels per group, input gives {}",
                c_in / groups
            ));
        }
        if let Some(b) = b {
            if self.dims(b) != [1, c_out, 1] {
                return Err(invalid_arg!("bias shape {:?} != (1, {c_out}, 1)", self.dims(b)));
            }
        }
        if t_in + 2 * padding < k {
            return Err(invalid_arg!("sequence of length {t_in} too short for kernel {k}"));
        }
        let t_out = (t_in + 2 * padding - k) / stride + 1;
        let out_mask = if linear {
            mask.clone()
        } else {
            Rc::new(mask.downsample(t_out, k, stride, padding))
        };
        let xv = &self.node(x).value;
        let wv = &self.node(w).value;
        let bv = b.map(|b| &self.node(b).value);
        let mut out = Tensor3::zeros([batch, c_out, t_out]);
        let out_per_group = c_out / groups;
        for bi in 0..batch {
            for co in 0..c_out {
                let g = co / out_per_group;
                let row = out.row_mut(bi, co);
                if let Some(bv) = bv {
                    row.fill(bv.get(0, co, 0));
                }
                for cil in 0..c_in_g {
                    let xrow = xv.row(bi, g * c_in_g + cil);
                    let wrow = wv.row(co, cil);
                    for (kk, &wk) in wrow.iter().enumerate() {
                        conv_accumulate(row, xrow, wk, kk, stride, padding);
                    }
                }
            }
        }
        let out = self.finish_seq(out, &out_mask);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Some(out_mask),
            Op::Conv {
                x,
                w,
                b,
                spec,
                linear,
            },
            rg,
        ))
    }

    /// Normalizes over the channel axis at every time step, then applies
    /// `gamma`/`beta` (both `(1, C, 1)`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let mask = self.seq_mask(x)?;
        let [batch, c, t] = self.dims(x);
        if self.dims(gamma) != [1, c, 1] || self.dims(beta) != [1, c, 1] {
            return Err(invalid_arg!("layernorm affine params must be (1, {c}, 1)"));
        }
        let xv = &self.node(x).value;
        let gv = &self.node(gamma).value;
        let bv = &self.node(beta).value;
        let mut xhat = Tensor3::zeros([batch, c, t]);
        let mut inv_std = vec![0.0; batch * t];
        let mut mean = vec![0.0; t];
        let mut var = vec![0.0; t];
        let inv_c = 1.0 / c as f64;
        for bi in 0..batch {
            mean.fill(0.0);
            var.fill(0.0);
            for ci in 0..c {
                for (m, &v) in mean.iter_mut().zip(xv.row(bi, ci)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_c);
            for ci in 0..c {
                for ((s, &v), &m) in var.iter_mut().zip(xv.row(bi, ci)).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            let istd = &mut inv_std[bi * t..(bi + 1) * t];
            for (i, s) in istd.iter_mut().zip(&var) {
                *i = 1.0 / (s * inv_c + eps).sqrt();
            }
            for ci in 0..c {
                let src = xv.row(bi, ci);
                let dst = xhat.row_mut(bi, ci);
                for ti in 0..t {
                    dst[ti] = (src[ti] - mean[ti]) * istd[ti];
                }
            }
        }
        mask.apply(&mut xhat);
        let mut out = Tensor3::zeros([batch, c, t]);
        for bi in 0..batch {
            for ci in 0..c {
                let g = gv.get(0, ci, 0);
                let be = bv.get(0, ci, 0);
                let src = xhat.row(bi, ci);
                for (o, &h) in out.row_mut(bi, ci).iter_mut().zip(src) {
                    *o = g * h + be;
                }
            }
        }
        let out = self.finish_seq(out, &mask);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Some(mask),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| v.max(0.0),
            Activation::Gelu => gelu,
            Activation::Sigmoid => sigmoid,
        };
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let mask = self.node(x).mask.clone();
        if let Some(m) = &mask {
            m.apply(&mut out);
        }
        let rg = self.rg(x);
        self.push(out, mask, Op::Act { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Reduces the channel axis to one channel by max or mean.
    pub fn channel_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let mask = self.seq_mask(x)?;
        let [batch, c, t] = self.dims(x);
        if c == 0 {
            return Err(invalid_arg!("channel_pool needs at least one channel"));
        }
        let xv = &self.node(x).value;
        let mut out = Tensor3::zeros([batch, 1, t]);
        let mut argmax = Vec::new();
        match kind {
            PoolKind::Max => {
                argmax = vec![0usize; batch * t];
                for bi in 0..batch {
                    let arg = &mut argmax[bi * t..(bi + 1) * t];
                    let orow = out.row_mut(bi, 0);
                    orow.copy_from_slice(xv.row(bi, 0));
                    for ci in 1..c {
                        for ((o, a), &v) in orow.iter_mut().zip(arg.iter_mut()).zip(xv.row(bi, ci)) {
                            if v > *o {
                                *o = v;
                                *a = ci;
                            }
                        }
                    }
                }
            }
            PoolKind::Avg => {
                let inv = 1.0 / c as f64;
                for bi in 0..batch {
                    let orow = out.row_mut(bi, 0);
                    for ci in 0..c {
                        for (o, &v) in orow.iter_mut().zip(xv.row(bi, ci)) {
                            *o += v;
                        }
                    }
                    orow.iter_mut().for_each(|o| *o *= inv);
                }
            }
        }
        let out = self.finish_seq(out, &mask);
        let rg = self.rg(x);
        Ok(self.push(out, Some(mask), Op::ChannelPool { x, kind, argmax }, rg))
    }

    /// Max over temporal windows. Padded steps are excluded from every
    /// window; ties go to the earliest index.
    pub fn temporal_max_pool(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let mask = self.seq_mask(x)?;
        if kernel < stride || stride == 0 {
            return Err(invalid_arg!("max pool needs kernel >= stride >= 1"));
        }
        let [batch, c, t] = self.dims(x);
        if t + 2 * padding < kernel {
            return Err(invalid_arg!("sequence of length {t} too short for pool {kernel}"));
        }
        let t_out = (t + 2 * padding - kernel) / stride + 1;
        let out_mask = Rc::new(mask.downsample(t_out, kernel, stride, padding));
        let xv = &self.node(x).value;
        let mut out = Tensor3::zeros([batch, c, t_out]);
        let mut argmax = vec![usize::MAX; batch * c * t_out];
        for bi in 0..batch {
            let len = mask.len_of(bi);
            for ci in 0..c {
                let xrow = xv.row(bi, ci);
                let base = (bi * c + ci) * t_out;
                for j in 0..out_mask.len_of(bi) {
                    let lo = (j * stride).saturating_sub(padding);
                    let hi = (j * stride + kernel).saturating_sub(padding).min(len);
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = usize::MAX;
                    for (i, &v) in xrow.iter().enumerate().take(hi).skip(lo) {
                        if v > best {
                            best = v;
                            arg = i;
                        }
                    }
                    if arg != usize::MAX {
                        out.set(bi, ci, j, best);
                        argmax[base + j] = arg;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Some(out_mask), Op::MaxPool { x, argmax }, rg))
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(invalid_arg!(
                "{what}: shapes {:?} and {:?} differ",
                self.dims(a),
                self.dims(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let mask = self.node(a).mask.clone().or_else(|| self.node(b).mask.clone());
        if let Some(m) = &mask {
            m.apply(&mut out);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, mask, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let mask = self.node(a).mask.clone().or_else(|| self.node(b).mask.clone());
        if let Some(m) = &mask {
            m.apply(&mut out);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, mask, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(factor);
        let mask = self.node(x).mask.clone();
        let rg = self.rg(x);
        self.push(out, mask, Op::Scale(x, factor), rg)
    }

    /// Concatenates sequence values along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| invalid_arg!("concat of nothing"))?;
        let mask = self.seq_mask(first)?;
        let [batch, _, t] = self.dims(first);
        let mut total = 0;
        for &x in xs {
            let [b, c, tt] = self.dims(x);
            if b != batch || tt != t {
                return Err(invalid_arg!("concat inputs disagree on batch/time"));
            }
            total += c;
        }
        let mut out = Tensor3::zeros([batch, total, t]);
        for bi in 0..batch {
            let mut off = 0;
            for &x in xs {
                let xv = self.value(x);
                let c = xv.dims()[1];
                for ci in 0..c {
                    out.row_mut(bi, off + ci).copy_from_slice(xv.row(bi, ci));
                }
                off += c;
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(out, Some(mask), Op::Concat(xs.to_vec()), rg))
    }

    /// `sum_m zs[m] * w[:, m, :]`, with each gate row broadcast over the
    /// channels of its branch.
    pub fn gated_sum(&mut self, zs: &[Var], w: Var) -> Result<Var> {
        let first = *zs.first().ok_or_else(|| invalid_arg!("gated_sum of nothing"))?;
        let mask = self.seq_mask(first)?;
        let dims = self.dims(first);
        let [batch, c, t] = dims;
        if self.dims(w) != [batch, zs.len(), t] {
            return Err(invalid_arg!(
                "gate shape {:?} != ({batch}, {}, {t})",
                self.dims(w),
                zs.len()
            ));
        }
        for &z in zs {
            if self.dims(z) != dims {
                return Err(invalid_arg!("gated_sum branches disagree in shape"));
            }
        }
        let wv = self.value(w);
        let mut out = Tensor3::zeros(dims);
        for (m, &z) in zs.iter().enumerate() {
            let zv = self.value(z);
            for bi in 0..batch {
                let wrow = wv.row(bi, m);
                for ci in 0..c {
                    let zrow = zv.row(bi, ci);
                    for ((o, &zz), &ww) in out.row_mut(bi, ci).iter_mut().zip(zrow).zip(wrow) {
                        *o += zz * ww;
                    }
                }
            }
        }
        let out = self.finish_seq(out, &mask);
        let rg = self.rg(w) || zs.iter().any(|&z| self.rg(z));
        Ok(self.push(
            out,
            Some(mask),
            Op::GatedSum {
                zs: zs.to_vec(),
                w,
            },
            rg,
        ))
    }

    /// `sum_{b,t} weights[b*T + t] * sum_c focal(logits[b,c,t], targets[b,c,t])`.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: Tensor3,
        weights: Vec<f64>,
        gamma: f64,
        alpha: f64,
    ) -> Result<Var> {
        let [batch, c, t] = self.dims(logits);
        if targets.dims() != [batch, c, t] || weights.len() != batch * t {
            return Err(invalid_arg!("focal targets/weights do not match logits"));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for bi in 0..batch {
            for ti in 0..t {
                let wgt = weights[bi * t + ti];
                if wgt == 0.0 {
                    continue;
                }
                let mut s = 0.0;
                for ci in 0..c {
                    s += focal_term(lv.get(bi, ci, ti), targets.get(bi, ci, ti), gamma, alpha).0;
                }
                total += wgt * s;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor3::scalar(total),
            None,
            Op::Focal {
                logits,
                targets,
                weights,
                gamma,
                alpha,
            },
            rg,
        ))
    }

    /// `sum_{b,t} weights[b*T + t] * giou(offsets[b,:,t], targets[b,:,t])`;
    /// positions with zero weight are skipped.
    pub fn giou_loss(&mut self, offsets: Var, targets: Tensor3, weights: Vec<f64>) -> Result<Var> {
        let [batch, two, t] = self.dims(offsets);
        if two != 2 || targets.dims() != [batch, 2, t] || weights.len() != batch * t {
            return Err(invalid_arg!("giou offsets/targets/weights do not match"));
        }
        let ov = self.value(offsets);
        let mut total = 0.0;
        for bi in 0..batch {
            for ti in 0..t {
                let wgt = weights[bi * t + ti];
                if wgt == 0.0 {
                    continue;
                }
                let (ts, te) = (targets.get(bi, 0, ti), targets.get(bi, 1, ti));
                if ts + te <= 0.0 {
                    return Err(invalid_arg!("degenerate zero-length regression target"));
                }
                let (ps, pe) = (ov.get(bi, 0, ti), ov.get(bi, 1, ti));
                if ps < 0.0 || pe < 0.0 || ts < 0.0 || te < 0.0 {
                    return Err(invalid_arg!("negative offsets in giou loss"));
                }
                total += wgt * giou_term(ps, pe, ts, te).0;
            }
        }
        let rg = self.rg(offsets);
        Ok(self.push(
            Tensor3::scalar(total),
            None,
            Op::Giou {
                offsets,
                targets,
                weights,
            },
            rg,
        ))
    }

    /// `sum(coeffs * x)` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, coeffs: Tensor3) -> Result<Var> {
        if coeffs.dims() != self.dims(x) {
            return Err(invalid_arg!("weighted_sum coefficients do not match input"));
        }
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(coeffs.data())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor3::scalar(total), None, Op::WeightedSum { x, coeffs }, rg))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let coeffs = Tensor3::filled(self.dims(x), 1.0);
        self.weighted_sum(x, coeffs)
    }

    fn accumulate(&mut self, v: Var, g: Tensor3) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar `loss`. Errors if this graph was already
    /// differentiated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; run a new forward first".into(),
            ));
        }
        if self.dims(loss) != [1, 1, 1] {
            return Err(invalid_arg!("backward needs a scalar loss, got {:?}", self.dims(loss)));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Tensor3::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(mut g) = self.grads[i].take() else {
                continue;
            };
            if let Some(m) = &self.nodes[i].mask {
                m.apply(&mut g);
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            if self.corrupt == Some(self.nodes[i].op.kind()) {
                g.scale(1.5);
            }
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &Tensor3) {
        let mut pending: Vec<(Var, Tensor3)> = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec, .. } => {
                let (x, w, b, spec) = (*x, *w, *b, *spec);
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let [batch, c_in, _] = xv.dims();
                let [c_out, c_in_g, k] = wv.dims();
                let groups = spec.groups;
                let out_per_group = c_out / groups;
                let want_x = self.rg(x);
                let want_w = self.rg(w);
                let mut gx = Tensor3::zeros([batch, c_in, xv.dims()[2]]);
                let mut gw = Tensor3::zeros(wv.dims());
                for bi in 0..batch {
                    for co in 0..c_out {
                        let grp = co / out_per_group;
                        let grow = g.row(bi, co);
                        for cil in 0..c_in_g {
                            let ci = grp * c_in_g + cil;
                            for kk in 0..k {
                                if want_w {
                                    let xrow = xv.row(bi, ci);
                                    let s = conv_dot(grow, xrow, kk, spec.stride, spec.padding);
                                    let idx = gw.index(co, cil, kk);
                                    gw.data_mut()[idx] += s;
                                }
                                if want_x {
                                    let wk = wv.get(co, cil, kk);
                                    conv_scatter(
                                        gx.row_mut(bi, ci),
                                        grow,
                                        wk,
                                        kk,
                                        spec.stride,
                                        spec.padding,
                                    );
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if self.rg(b) {
                        let mut gb = Tensor3::zeros([1, c_out, 1]);
                        for bi in 0..batch {
                            for co in 0..c_out {
                                let s: f64 = g.row(bi, co).iter().sum();
                                let idx = gb.index(0, co, 0);
                                gb.data_mut()[idx] += s;
                            }
                        }
                        pending.push((b, gb));
                    }
                }
                if want_x {
                    pending.push((x, gx));
                }
                if want_w {
                    pending.push((w, gw));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let [batch, c, t] = xhat.dims();
                let gv = &self.nodes[gamma.0].value;
                let mut ggamma = Tensor3::zeros([1, c, 1]);
                let mut gbeta = Tensor3::zeros([1, c, 1]);
                let mut gx = Tensor3::zeros([batch, c, t]);
                let mut sum_d = vec![0.0; t];
                let mut sum_dx = vec![0.0; t];
                let inv_c = 1.0 / c as f64;
                for bi in 0..batch {
                    sum_d.fill(0.0);
                    sum_dx.fill(0.0);
                    for ci in 0..c {
                        let gr = g.row(bi, ci);
                        let hr = xhat.row(bi, ci);
                        let gm = gv.get(0, ci, 0);
                        let mut sg = 0.0;
                        let mut sb = 0.0;
                        for ti in 0..t {
                            sg += gr[ti] * hr[ti];
                            sb += gr[ti];
                            let d = gr[ti] * gm;
                            sum_d[ti] += d;
                            sum_dx[ti] += d * hr[ti];
                        }
                        ggamma.data_mut()[ci] += sg;
                        gbeta.data_mut()[ci] += sb;
                    }
                    let istd = &inv_std[bi * t..(bi + 1) * t];
                    for ci in 0..c {
                        let gm = gv.get(0, ci, 0);
                        let gr = g.row(bi, ci);
                        let hr = xhat.row(bi, ci);
                        let out = gx.row_mut(bi, ci);
                        for ti in 0..t {
                            let d = gr[ti] * gm;
                            out[ti] = istd[ti] * (d - inv_c * sum_d[ti] - hr[ti] * inv_c * sum_dx[ti]);
                        }
                    }
                }
                pending.push((x, gx));
                pending.push((gamma, ggamma));
                pending.push((beta, gbeta));
            }
            Op::Act { x, kind } => {
                let x = *x;
                let xv = &self.nodes[x.0].value;
                let yv = &node.value;
                let mut gx = g.clone();
                match kind {
                    Activation::Relu => {
                        for (gg, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                            if v <= 0.0 {
                                *gg = 0.0;
                            }
                        }
                    }
                    Activation::Gelu => {
                        for (gg, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                            *gg *= gelu_grad(v);
                        }
                    }
                    Activation::Sigmoid => {
                        for (gg, &y) in gx.data_mut().iter_mut().zip(yv.data()) {
                            *gg *= y * (1.0 - y);
                        }
                    }
                }
                pending.push((x, gx));
            }
            Op::ChannelPool { x, kind, argmax } => {
                let x = *x;
                let [batch, c, t] = self.nodes[x.0].value.dims();
                let mut gx = Tensor3::zeros([batch, c, t]);
                match kind {
                    PoolKind::Max => {
                        for bi in 0..batch {
                            let gr = g.row(bi, 0);
                            for ti in 0..t {
                                let ci = argmax[bi * t + ti];
                                gx.set(bi, ci, ti, gr[ti]);
                            }
                        }
                    }
                    PoolKind::Avg => {
                        let inv = 1.0 / c as f64;
                        for bi in 0..batch {
                            for ci in 0..c {
                                let src = g.row(bi, 0);
                                for (o, &v) in gx.row_mut(bi, ci).iter_mut().zip(src) {
                                    *o = v * inv;
                                }
                            }
                        }
                    }
                }
                pending.push((x, gx));
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                let [batch, c, t] = self.nodes[x.0].value.dims();
                let t_out = g.dims()[2];
                let mut gx = Tensor3::zeros([batch, c, t]);
                for bi in 0..batch {
                    for ci in 0..c {
                        let base = (bi * c + ci) * t_out;
                        let gr = g.row(bi, ci);
                        let out = gx.row_mut(bi, ci);
                        for j in 0..t_out {
                            let a = argmax[base + j];
                            if a != usize::MAX {
                                out[a] += gr[j];
                            }
                        }
                    }
                }
                pending.push((x, gx));
            }
            Op::Add(a, b) => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let mut ga = g.clone();
                for (v, &o) in ga.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                    *v *= o;
                }
                let mut gb = g.clone();
                for (v, &o) in gb.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                    *v *= o;
                }
                pending.push((a, ga));
                pending.push((b, gb));
            }
            Op::Scale(x, factor) => {
                let mut gx = g.clone();
                gx.scale(*factor);
                pending.push((*x, gx));
            }
            Op::Concat(xs) => {
                let [batch, _, t] = g.dims();
                let mut off = 0;
                for &x in xs {
                    let c = self.nodes[x.0].value.dims()[1];
                    let mut gx = Tensor3::zeros([batch, c, t]);
                    for bi in 0..batch {
                        for ci in 0..c {
                            gx.row_mut(bi, ci).copy_from_slice(g.row(bi, off + ci));
                        }
                    }
                    off += c;
                    pending.push((x, gx));
                }
            }
            Op::GatedSum { zs, w } => {
                let w = *w;
                let wv = &self.nodes[w.0].value;
                let [batch, c, t] = g.dims();
                let mut gw = Tensor3::zeros(wv.dims());
                for (m, &z) in zs.iter().enumerate() {
                    let zv = &self.nodes[z.0].value;
                    let mut gz = Tensor3::zeros([batch, c, t]);
                    for bi in 0..batch {
                        let wrow = wv.row(bi, m);
                        let mut acc = vec![0.0; t];
                        for ci in 0..c {
                            let gr = g.row(bi, ci);
                            let zr = zv.row(bi, ci);
                            let out = gz.row_mut(bi, ci);
                            for ti in 0..t {
                                out[ti] = gr[ti] * wrow[ti];
                                acc[ti] += gr[ti] * zr[ti];
                            }
                        }
                        gw.row_mut(bi, m).copy_from_slice(&acc);
                    }
                    pending.push((z, gz));
                }
                pending.push((w, gw));
            }
            Op::Focal {
                logits,
                targets,
                weights,
                gamma,
                alpha,
            } => {
                let lv = &self.nodes[logits.0].value;
                let [batch, c, t] = lv.dims();
                let up = g.item();
                let mut gl = Tensor3::zeros([batch, c, t]);
                for bi in 0..batch {
                    for ti in 0..t {
                        let wgt = weights[bi * t + ti];
                        if wgt == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            let (_, d) =
                                focal_term(lv.get(bi, ci, ti), targets.get(bi, ci, ti), *gamma, *alpha);
                            gl.set(bi, ci, ti, up * wgt * d);
                        }
                    }
                }
                pending.push((*logits, gl));
            }
            Op::Giou {
                offsets,
                targets,
                weights,
            } => {
                let ov = &self.nodes[offsets.0].value;
                let [batch, _, t] = ov.dims();
                let up = g.item();
                let mut go = Tensor3::zeros([batch, 2, t]);
                for bi in 0..batch {
                    for ti in 0..t {
                        let wgt = weights[bi * t + ti];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (_, ds, de) = giou_term(
                            ov.get(bi, 0, ti),
                            ov.get(bi, 1, ti),
                            targets.get(bi, 0, ti),
                            targets.get(bi, 1, ti),
                        );
                        go.set(bi, 0, ti, up * wgt * ds);
                        go.set(bi, 1, ti, up * wgt * de);
                    }
                }
                pending.push((*offsets, go));
            }
            Op::WeightedSum { x, coeffs } => {
                let mut gx = coeffs.clone();
                gx.scale(g.item());
                pending.push((*x, gx));
            }
        }
        for (v, gv) in pending {
            self.accumulate(v, gv);
        }
    }
}

/// `row[j] += w * x[j*stride + k - padding]` over every in-range `j`.
#[inline]
fn conv_accumulate(row: &mut [f64], x: &[f64], w: f64, k: usize, stride: usize, padding: usize) {
    let t_in = x.len() as isize;
    if stride == 1 {
        let shift = k as isize - padding as isize;
        let j_lo = (-shift).max(0) as usize;
        let j_hi = ((t_in - shift).max(0) as usize).min(row.len());
        if j_lo >= j_hi {
            return;
        }
        let src = &x[(j_lo as isize + shift) as usize..(j_hi as isize + shift) as usize];
        for (o, &v) in row[j_lo..j_hi].iter_mut().zip(src) {
            *o += w * v;
        }
    } else {
        for (j, o) in row.iter_mut().enumerate() {
            let idx = (j * stride + k) as isize - padding as isize;
            if idx >= 0 && idx < t_in {
                *o += w * x[idx as usize];
            }
        }
    }
}

/// `sum_j g[j] * x[j*stride + k - padding]`.
#[inline]
fn conv_dot(g: &[f64], x: &[f64], k: usize, stride: usize, padding: usize) -> f64 {
    let t_in = x.len() as isize;
    let mut s = 0.0;
    for (j, &gv) in g.iter().enumerate() {
        let idx = (j * stride + k) as isize - padding as isize;
        if idx >= 0 && idx < t_in {
            s += gv * x[idx as usize];
        }
    }
    s
}

/// `gx[j*stride + k - padding] += w * g[j]`.
#[inline]
fn conv_scatter(gx: &mut [f64], g: &[f64], w: f64, k: usize, stride: usize, padding: usize) {
    let t_in = gx.len() as isize;
    if stride == 1 {
        let shift = k as isize - padding as isize;
        let j_lo = (-shift).max(0) as usize;
        let j_hi = ((t_in - shift).max(0) as usize).min(g.len());
        if j_lo >= j_hi {
            return;
        }
        let dst = &mut gx[(j_lo as isize + shift) as usize..(j_hi as isize + shift) as usize];
        for (o, &v) in dst.iter_mut().zip(&g[j_lo..j_hi]) {
            *o += w * v;
        }
    } else {
        for (j, &gv) in g.iter().enumerate() {
            let idx = (j * stride + k) as isize - padding as isize;
            if idx >= 0 && idx < t_in {
                gx[idx as usize] += w * gv;
            }
        }
    }
}
