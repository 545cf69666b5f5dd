//! Finite-difference verification of reverse-mode gradients.
//!
//! Every operator the model uses is registered here under a name. A check
//! builds the operator on random inputs, contracts its output with a fixed
//! random tensor to obtain a scalar, and compares the analytic gradient of
//! that scalar with central differences. Differences are always evaluated in
//! 64-bit so that 32-bit runs are compared against a well-conditioned
//! reference.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, NodeId, Precision, Scalar, Tensor};
use crate::error::{Error, Result};

/// Central-difference step.
pub const STEP: f64 = 1e-4;

/// Tensors with more coordinates than this are spot-checked.
const FULL_CHECK_LIMIT: usize = 64;
const SAMPLED_COORDS: usize = 48;

/// Names of every operator covered by [`grad_check`].
pub const REGISTERED_OPS: &[&str] = &[
    "conv2d",
    "conv2d_strided",
    "conv2d_pointwise",
    "conv2d_depthwise",
    "attention",
    "layer_norm",
    "batch_norm",
    "batch_norm_eval",
    "bilinear_upsample",
    "relu",
    "gelu",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "add",
    "sub",
    "mul",
    "div",
    "add_scalar",
    "mul_scalar",
    "pow_scalar",
    "sum",
    "mean",
    "global_avg_pool",
    "linear",
    "reshape",
    "permute",
    "concat",
    "slice",
];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Domain {
    /// Uniform in [-1, 1].
    Signed,
    /// Uniform in [-1, 1] with magnitudes of at least 0.05 (keeps clear of kinks).
    AwayFromZero,
    /// Uniform in [0.5, 1.5].
    Positive,
}

fn domains(op: &str, inputs: usize) -> Vec<Domain> {
    match op {
        "relu" => vec![Domain::AwayFromZero],
        "log" | "pow_scalar" => vec![Domain::Positive],
        "div" => vec![Domain::Signed, Domain::Positive],
        _ => vec![Domain::Signed; inputs],
    }
}

/// Shapes used when the caller does not supply any.
pub fn default_shapes(op: &str) -> Result<Vec<Vec<usize>>> {
    let s: &[&[usize]] = match op {
        "conv2d" => &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]],
        "conv2d_strided" => &[&[1, 3, 8, 8], &[4, 3, 3, 3], &[4]],
        "conv2d_pointwise" => &[&[2, 4, 3, 3], &[3, 4, 1, 1], &[3]],
        "conv2d_depthwise" => &[&[2, 3, 4, 4], &[3, 1, 3, 3], &[3]],
        "attention" => &[&[1, 2, 4, 8], &[1, 2, 6, 8], &[1, 2, 6, 8]],
        "layer_norm" => &[&[2, 5], &[5], &[5]],
        "batch_norm" | "batch_norm_eval" => &[&[2, 3, 3, 3], &[3], &[3]],
        "bilinear_upsample" => &[&[1, 2, 3, 3]],
        "relu" => &[&[2, 3]],
        "gelu" | "sigmoid" | "exp" | "log" | "add_scalar" | "mul_scalar" | "pow_scalar" => {
            &[&[2, 3, 4]]
        }
        "softmax" | "log_softmax" => &[&[3, 4]],
        "add" | "sub" | "mul" | "div" => &[&[2, 3, 4], &[3, 1]],
        "sum" | "mean" => &[&[3, 4]],
        "global_avg_pool" => &[&[2, 3, 4, 4]],
        "linear" => &[&[2, 3, 5], &[4, 5], &[4]],
        "reshape" => &[&[2, 6]],
        "permute" => &[&[2, 3, 4]],
        "concat" => &[&[2, 3, 2], &[2, 1, 2]],
        "slice" => &[&[2, 5, 3]],
        _ => return Err(Error::UnknownOp(op.to_string())),
    };
    Ok(s.iter().map(|v| v.to_vec()).collect())
}

/// Applies a registered operator to already-recorded inputs.
pub fn build_op<T: Scalar>(op: &str, g: &mut Graph<T>, x: &[NodeId]) -> Result<NodeId> {
    let arity = default_shapes(op)?.len();
    if x.len() != arity {
        return Err(Error::InvalidArgument(format!(
            "{op} takes {arity} inputs, got {}",
            x.len()
        )));
    }
    match op {
        "conv2d" => g.conv2d(x[0], x[1], Some(x[2]), (1, 1), (1, 1), 1),
        "conv2d_strided" => g.conv2d(x[0], x[1], Some(x[2]), (2, 2), (1, 1), 1),
        "conv2d_pointwise" => g.conv2d(x[0], x[1], Some(x[2]), (1, 1), (0, 0), 1),
        "conv2d_depthwise" => {
            let c = g.shape(x[0])[1];
            g.conv2d(x[0], x[1], Some(x[2]), (1, 1), (1, 1), c)
        }
        "attention" => g.attention(x[0], x[1], x[2]),
        "layer_norm" => {
            let n = *g.shape(x[0]).last().unwrap();
            g.layer_norm(x[0], n, x[1], x[2], 1e-5)
        }
        "batch_norm" => Ok(g.batch_norm_train(x[0], x[1], x[2], 1e-5)?.0),
        "batch_norm_eval" => {
            let c = g.shape(x[0])[1];
            let mean: Vec<T> = (0..c).map(|i| T::of(0.1 * i as f64 - 0.05)).collect();
            let var: Vec<T> = (0..c).map(|i| T::of(0.5 + 0.25 * i as f64)).collect();
            g.batch_norm_eval(x[0], x[1], x[2], &mean, &var, 1e-5)
        }
        "bilinear_upsample" => g.bilinear_upsample(x[0], 2),
        "relu" => Ok(g.relu(x[0])),
        "gelu" => Ok(g.gelu(x[0])),
        "sigmoid" => Ok(g.sigmoid(x[0])),
        "exp" => Ok(g.exp(x[0])),
        "log" => g.log(x[0]),
        "softmax" => {
            let axis = g.shape(x[0]).len() - 1;
            g.softmax(x[0], axis)
        }
        "log_softmax" => {
            let axis = g.shape(x[0]).len() - 1;
            g.log_softmax(x[0], axis)
        }
        "add" => g.add(x[0], x[1]),
        "sub" => g.sub(x[0], x[1]),
        "mul" => g.mul(x[0], x[1]),
        "div" => g.div(x[0], x[1]),
        "add_scalar" => Ok(g.add_scalar(x[0], 0.75)),
        "mul_scalar" => Ok(g.mul_scalar(x[0], -1.5)),
        "pow_scalar" => g.pow_scalar(x[0], 2.5),
        "sum" => Ok(g.sum(x[0])),
        "mean" => Ok(g.mean(x[0])),
        "global_avg_pool" => g.global_avg_pool(x[0]),
        "linear" => g.linear(x[0], x[1], Some(x[2])),
        "reshape" => {
            let n = g.value(x[0]).numel();
            let first = if n % 3 == 0 { 3 } else { 1 };
            g.reshape(x[0], &[first, n / first])
        }
        "permute" => {
            let r = g.shape(x[0]).len();
            let perm: Vec<usize> = (0..r).map(|i| (i + r - 1) % r).collect();
            g.permute(x[0], &perm)
        }
        "concat" => g.concat(&x[..2], 1),
        "slice" => {
            let extent = g.shape(x[0])[1];
            g.slice(x[0], 1, 1, extent.saturating_sub(2).max(1))
        }
        _ => Err(Error::UnknownOp(op.to_string())),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub precision: Precision,
    pub seed: u64,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Error measure used by every check: `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn random_input(shape: &[usize], domain: Domain, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    let mut t = Tensor::<f64>::uniform(shape, -1.0, 1.0, rng)?;
    for v in t.data_mut() {
        match domain {
            Domain::Signed => {}
            Domain::AwayFromZero => {
                if v.abs() < 0.05 {
                    *v = 0.05_f64.copysign(*v);
                }
            }
            Domain::Positive => *v = 1.0 + 0.5 * *v,
        }
    }
    Ok(t)
}

/// Evaluates a scalar-valued graph builder on 64-bit inputs.
pub fn eval_scalar<F>(build: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    g.value(root).item()
}

/// Central differences of a scalar builder at selected `(input, coordinate)` pairs.
pub fn numeric_gradient<F>(build: &F, inputs: &[Tensor<f64>], coords: &[(usize, usize)], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut work = inputs.to_vec();
    coords
        .iter()
        .map(|&(i, j)| {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval_scalar(build, &work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval_scalar(build, &work)?;
            work[i].data_mut()[j] = orig;
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// Reverse-mode gradients of a scalar builder with respect to all inputs.
pub fn analytic_gradient<T, F>(build: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    g.backward(root)?;
    ids.iter()
        .zip(inputs)
        .map(|(&id, t)| Ok(g.grad(id).cloned().unwrap_or(Tensor::zeros(t.shape())?)))
        .collect()
}

/// Picks every coordinate of small inputs and a random subset of large ones.
pub fn select_coords(inputs: &[Tensor<f64>], rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        if t.numel() <= FULL_CHECK_LIMIT {
            coords.extend((0..t.numel()).map(|j| (i, j)));
        } else {
            let mut picked: Vec<usize> = sample(rng, t.numel(), SAMPLED_COORDS).into_vec();
            picked.sort_unstable();
            coords.extend(picked.into_iter().map(|j| (i, j)));
        }
    }
    coords
}

fn contract<T: Scalar>(op: &str, g: &mut Graph<T>, x: &[NodeId], weights: &Tensor<f64>) -> Result<NodeId> {
    let out = build_op(op, g, x)?;
    let w = g.constant(weights.cast());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn analytic_for_op<T: Scalar>(op: &str, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
    let cast: Vec<Tensor<T>> = inputs.iter().map(|t| t.cast()).collect();
    let build = |g: &mut Graph<T>, x: &[NodeId]| contract(op, g, x, weights);
    Ok(analytic_gradient(&build, &cast)?
        .iter()
        .map(|t| t.cast())
        .collect())
}

/// Compares the analytic gradient of a registered operator against central
/// differences (step [`STEP`]).
pub fn grad_check(
    op: &str,
    precision: Precision,
    input_shapes: &[Vec<usize>],
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let doms = domains(op, default_shapes(op)?.len());
    if input_shapes.len() != doms.len() {
        return Err(Error::InvalidArgument(format!(
            "{op} takes {} inputs, got {} shapes",
            doms.len(),
            input_shapes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = input_shapes
        .iter()
        .zip(&doms)
        .map(|(s, &d)| random_input(s, d, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    // The numeric side must see exactly the values the analytic side sees.
    if precision == Precision::F32 {
        inputs = inputs.iter().map(|t| t.cast::<f32>().cast()).collect();
    }
    let probe = {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build_op(op, &mut g, &ids)?;
        g.value(out).shape().to_vec()
    };
    let mut weights = Tensor::<f64>::uniform(&probe, -1.0, 1.0, &mut rng)?;
    if precision == Precision::F32 {
        weights = weights.cast::<f32>().cast();
    }

    let analytic = match precision {
        Precision::F32 => analytic_for_op::<f32>(op, &inputs, &weights)?,
        Precision::F64 => analytic_for_op::<f64>(op, &inputs, &weights)?,
    };
    let coords = select_coords(&inputs, &mut rng);
    let build = |g: &mut Graph<f64>, x: &[NodeId]| contract(op, g, x, &weights);
    let numeric = numeric_gradient(&build, &inputs, &coords, STEP)?;

    let max_rel_err = coords
        .iter()
        .zip(&numeric)
        .map(|(&(i, j), &n)| relative_error(analytic[i].data()[j], n))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        op: op.to_string(),
        precision,
        seed,
        coords_checked: coords.len(),
        max_rel_err,
        tolerance,
        pass: max_rel_err <= tolerance,
    })
}

/// Runs [`grad_check`] over every registered operator with default shapes.
pub fn sweep(precision: Precision, tolerance: f64, seeds: &[u64]) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for op in REGISTERED_OPS {
        let shapes = default_shapes(op)?;
        for &seed in seeds {
            reports.push(grad_check(op, precision, &shapes, tolerance, seed)?);
        }
    }
    Ok(reports)
}
