//! Finite-difference verification of analytic gradients.
//!
//! The helpers here perturb one scalar at a time, rebuild the whole graph and
//! compare central differences against the backward pass. [`run_suite`]
//! exercises every differentiable op plus the full detector and is what the
//! `gradcheck` CLI command runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{
    Activation, ConvSpec, Graph, Mask, OpKind, ParamStore, PoolKind, SeqTensor, Tensor3, Var,
};
use crate::Result;

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are compared on an absolute scale of this size.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Builds a scalar loss from one sequence input.
pub trait InputFn: Fn(&mut Graph, Var) -> Result<Var> {}
impl<F: Fn(&mut Graph, Var) -> Result<Var>> InputFn for F {}

/// Builds a scalar loss from the parameters in a store.
pub trait ParamFn: Fn(&mut Graph, &ParamStore) -> Result<Var> {}
impl<F: Fn(&mut Graph, &ParamStore) -> Result<Var>> ParamFn for F {}

fn eval_input(x: &SeqTensor, f: &impl InputFn, corrupt: Option<OpKind>) -> Result<(f64, Option<Tensor3>)> {
    let mut g = Graph::new();
    g.set_corrupt_backward(corrupt);
    let mut x = x.clone();
    x.requires_grad = true;
    let v = g.input(&x);
    let loss = f(&mut g, v)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    Ok((value, g.grad(v).cloned()))
}

fn loss_only_input(x: &SeqTensor, f: &impl InputFn) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.input(x);
    let loss = f(&mut g, v)?;
    Ok(g.value(loss).item())
}

/// Max relative error of d loss / d input over every valid input coordinate.
pub fn check_input(x: &SeqTensor, f: impl InputFn, corrupt: Option<OpKind>) -> Result<f64> {
    let (_, grad) = eval_input(x, &f, corrupt)?;
    let grad = grad.unwrap_or_else(|| Tensor3::zeros(x.data.dims()));
    let [b, c, t] = x.data.dims();
    let mut worst = 0.0f64;
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..x.mask.len_of(bi).min(t) {
                let idx = x.data.index(bi, ci, ti);
                let mut plus = x.clone();
                plus.data.data_mut()[idx] += STEP;
                let mut minus = x.clone();
                minus.data.data_mut()[idx] -= STEP;
                let numeric =
                    (loss_only_input(&plus, &f)? - loss_only_input(&minus, &f)?) / (2.0 * STEP);
                worst = worst.max(relative_error(grad.data()[idx], numeric));
            }
        }
    }
    Ok(worst)
}

fn loss_only_params(store: &ParamStore, f: &impl ParamFn) -> Result<f64> {
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    Ok(g.value(loss).item())
}

/// Per-parameter max relative error of d loss / d param.
///
/// `coords` limits how many coordinates of each parameter are probed
/// (chosen at random with `seed`); `None` probes all of them.
pub fn check_params(
    store: &ParamStore,
    f: impl ParamFn,
    coords: Option<usize>,
    seed: u64,
    corrupt: Option<OpKind>,
) -> Result<Vec<(String, f64)>> {
    let mut g = Graph::new();
    g.set_corrupt_backward(corrupt);
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let mut grads = store.clone();
    grads.zero_grad();
    grads.accumulate_grads(&g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut out = Vec::new();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.value(&name).map_or(0, Tensor3::len);
        let picks: Vec<usize> = match coords {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let analytic = grads.grad(&name).cloned().unwrap_or_else(|| Tensor3::zeros([1, 1, n]));
        let mut worst = 0.0f64;
        for idx in picks {
            let orig = work.value(&name).expect("param exists").data()[idx];
            work.value_mut(&name).expect("param exists").data_mut()[idx] = orig + STEP;
            let lp = loss_only_params(&work, &f)?;
            work.value_mut(&name).expect("param exists").data_mut()[idx] = orig - STEP;
            let lm = loss_only_params(&work, &f)?;
            work.value_mut(&name).expect("param exists").data_mut()[idx] = orig;
            let numeric = (lp - lm) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[idx], numeric));
        }
        out.push((name, worst));
    }
    Ok(out)
}

/// Random tensor with entries uniform in `[-scale, scale]`.
pub fn random_tensor(rng: &mut impl Rng, dims: [usize; 3], scale: f64) -> Tensor3 {
    Tensor3::from_fn(dims, |_, _, _| rng.random_range(-scale..scale))
}

/// Random projection loss `sum(coeffs * x)`; makes every output coordinate
/// matter with a distinct weight.
pub fn projection_loss(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs = random_tensor(&mut rng, g.dims(x), 1.0);
    g.weighted_sum(x, coeffs)
}

/// One line of a gradient-check report.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    fn push(&mut self, name: &str, err: f64, tolerance: f64) {
        self.results.push(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
            tolerance,
            passed: err < tolerance,
        });
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            s.push_str(&format!(
                "{:<28} max_rel_err={:.3e} tol={:.0e} {}\n",
                r.name,
                r.max_rel_error,
                r.tolerance,
                if r.passed { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

/// Settings of the gradient suite.
#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub embed_dim: usize,
    pub time: usize,
    pub levels: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Coordinates probed per parameter tensor in the full-network check.
    pub coords_per_param: Option<usize>,
    pub tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            time: 32,
            levels: 4,
            num_classes: 3,
            seed: 7,
            coords_per_param: None,
            tolerance: 1e-4,
        }
    }
}

fn random_seq(rng: &mut ChaCha8Rng, dims: [usize; 3], lengths: Option<Vec<usize>>) -> SeqTensor {
    let data = random_tensor(rng, dims, 1.0);
    let mask = match lengths {
        Some(l) => Mask::new(l, dims[2]).expect("valid lengths"),
        None => Mask::full(dims[0], dims[2]),
    };
    SeqTensor::new(data, mask).expect("matching mask")
}

fn weight_const(g: &mut Graph, rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Var {
    let t = random_tensor(rng, dims, 0.7);
    g.constant(t, None)
}

/// Runs the op-level and full-network finite-difference checks.
///
/// `corrupt` scales the backward of one op kind, to confirm the suite
/// catches a wrong gradient and names the op.
pub fn run_suite(cfg: &SuiteConfig, corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let mut report = GradCheckReport { results: Vec::new() };
    let tol = cfg.tolerance;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shapes: [([usize; 3], Option<Vec<usize>>); 3] =
        [([1, 3, 9], None), ([2, 4, 16], Some(vec![16, 11])), ([1, 5, 7], None)];

    let op_check = |name: &str,
                        report: &mut GradCheckReport,
                        rng: &mut ChaCha8Rng,
                        f: &dyn Fn(&mut Graph, Var, &mut ChaCha8Rng) -> Result<Var>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for (i, (dims, lens)) in shapes.iter().enumerate() {
            let x = random_seq(rng, *dims, lens.clone());
            let seed: u64 = rng.random();
            let err = check_input(
                &x,
                |g: &mut Graph, v: Var| {
                    let mut local = ChaCha8Rng::seed_from_u64(seed);
                    let y = f(g, v, &mut local)?;
                    if g.dims(y) == [1, 1, 1] {
                        Ok(y)
                    } else {
                        projection_loss(g, y, seed ^ i as u64)
                    }
                },
                corrupt,
            )?;
            worst = worst.max(err);
        }
        report.push(name, worst, tol);
        Ok(())
    };

    op_check("conv1d", &mut report, &mut rng, &|g, x, r| {
        let c = g.dims(x)[1];
        let w = weight_const(g, r, [2, c, 3]);
        let b = weight_const(g, r, [1, 2, 1]);
        g.conv1d(x, w, Some(b), ConvSpec::same(3, 1)?)
    })?;
    op_check("conv1d_depthwise", &mut report, &mut rng, &|g, x, r| {
        let c = g.dims(x)[1];
        let w = weight_const(g, r, [c, 1, 5]);
        g.conv1d(x, w, None, ConvSpec::same(5, c)?)
    })?;
    op_check("conv1d_strided", &mut report, &mut rng, &|g, x, r| {
        let c = g.dims(x)[1];
        let w = weight_const(g, r, [c, 1, 3]);
        let spec = ConvSpec {
            stride: 2,
            padding: 1,
            groups: c,
        };
        g.conv1d(x, w, None, spec)
    })?;
    op_check("linear", &mut report, &mut rng, &|g, x, r| {
        let c = g.dims(x)[1];
        let w = weight_const(g, r, [3, c, 1]);
        let b = weight_const(g, r, [1, 3, 1]);
        g.linear(x, w, Some(b))
    })?;
    op_check("layernorm", &mut report, &mut rng, &|g, x, r| {
        let c = g.dims(x)[1];
        let gamma = weight_const(g, r, [1, c, 1]);
        let beta = weight_const(g, r, [1, c, 1]);
        g.layer_norm(x, gamma, beta, 1e-5)
    })?;
    op_check("relu", &mut report, &mut rng, &|g, x, _| Ok(g.activation(x, Activation::Relu)))?;
    op_check("gelu", &mut report, &mut rng, &|g, x, _| Ok(g.activation(x, Activation::Gelu)))?;
    op_check("sigmoid", &mut report, &mut rng, &|g, x, _| {
        Ok(g.activation(x, Activation::Sigmoid))
    })?;
    op_check("channel_max_pool", &mut report, &mut rng, &|g, x, _| {
        g.channel_pool(x, PoolKind::Max)
    })?;
    op_check("channel_avg_pool", &mut report, &mut rng, &|g, x, _| {
        g.channel_pool(x, PoolKind::Avg)
    })?;
    op_check("temporal_maxpool", &mut report, &mut rng, &|g, x, _| {
        g.temporal_max_pool(x, 3, 2, 1)
    })?;
    op_check("mul", &mut report, &mut rng, &|g, x, _| g.mul(x, x))?;
    op_check("concat", &mut report, &mut rng, &|g, x, _| {
        let y = g.scale(x, -2.0);
        g.concat_channels(&[x, y])
    })?;
    op_check("gated_sum", &mut report, &mut rng, &|g, x, r| {
        let [b, _, t] = g.dims(x);
        let y = g.mul(x, x)?;
        let gate = g.channel_pool(x, PoolKind::Avg)?;
        let other = weight_const(g, r, [b, 1, t]);
        let other = g.mul(other, gate)?;
        let w = g.concat_channels(&[gate, other])?;
        g.gated_sum(&[x, y], w)
    })?;
    op_check("focal_loss", &mut report, &mut rng, &|g, x, r| {
        let [b, c, t] = g.dims(x);
        let targets = Tensor3::from_fn([b, c, t], |_, _, _| f64::from(r.random_bool(0.3)));
        let weights = (0..b * t).map(|_| r.random_range(0.1..1.0)).collect();
        g.focal_loss(x, targets, weights, 2.0, 0.25)
    })?;
    op_check("giou_loss", &mut report, &mut rng, &|g, x, r| {
        let [b, c, t] = g.dims(x);
        let w = weight_const(g, r, [2, c, 1]);
        let y = g.linear(x, w, None)?;
        // softplus-free positive offsets: square then shift
        let sq = g.mul(y, y)?;
        let shift = g.constant(Tensor3::filled([b, 2, t], 0.3), None);
        let off = g.add(sq, shift)?;
        let targets = Tensor3::from_fn([b, 2, t], |_, _, _| r.random_range(0.2..2.0));
        let weights = (0..b * t).map(|_| r.random_range(0.1..1.0)).collect();
        g.giou_loss(off, targets, weights)
    })?;

    full_network_check(cfg, corrupt, &mut report)?;
    Ok(report)
}

fn full_network_check(
    cfg: &SuiteConfig,
    corrupt: Option<OpKind>,
    report: &mut GradCheckReport,
) -> Result<()> {
    use crate::detection::{assign_targets, HeadOutputs, LossConfig, PyramidShape, QualityWeights};
    use crate::model::{ContextDet, ModelConfig};

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let model_cfg = ModelConfig {
        input_dim: 6,
        embed_dim: cfg.embed_dim,
        pyramid_levels: cfg.levels,
        num_classes: cfg.num_classes,
        lcm_large_kernel_max: 9,
        ..ModelConfig::default()
    };
    let model = ContextDet::new(model_cfg, cfg.seed)?;
    let mut store = model.params().clone();
    // perturb so no parameter sits at an exact symmetric init value
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        for v in store.value_mut(name).expect("exists").data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let features = random_seq(&mut rng, [1, 6, cfg.time], None);
    let gts = crate::detection::random_segments(&mut rng, cfg.time as f64, cfg.num_classes, 2);
    let loss_cfg = LossConfig::default();
    let shape = PyramidShape::new(cfg.levels, cfg.time, &[cfg.time]);
    let targets = assign_targets(&[gts], &shape, &loss_cfg, cfg.num_classes)?;

    // freeze the quality weights at the base point; they are stop-gradient
    let quality = {
        let mut g = Graph::new();
        let out = model.forward_with(&mut g, &store, &features)?;
        QualityWeights::from_outputs(&g, &out, &targets)
    };
    let loss_fn = |g: &mut Graph, params: &ParamStore| -> Result<Var> {
        let out: HeadOutputs = model.forward_with(g, params, &features)?;
        crate::detection::total_loss_weighted(g, &out, &targets, &loss_cfg, &quality)
    };
    let per_param = check_params(&store, loss_fn, cfg.coords_per_param, cfg.seed, corrupt)?;
    let worst = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    report.push("full_network", worst, cfg.tolerance);
    Ok(())
}
