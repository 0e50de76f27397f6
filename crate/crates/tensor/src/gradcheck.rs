//! Central finite-difference verification of tape gradients.
//!
//! The checked scalar is `sum(out ⊙ R)` for a fixed random projection `R`, so
//! every output element contributes. Inputs and projections are dyadic
//! rationals and the step is a power of two, which makes the perturbation
//! itself exact; the numeric derivative of an op that is linear in the
//! perturbed element is then exact as well.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step, `2^-17 ≈ 7.6e-6`.
pub const FD_STEP: f64 = 1.0 / 131072.0;

/// Denominator floor in the relative error `|a - n| / max(|n|, floor)`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub floor: f64,
    pub seed: u64,
    /// Upper bound on checked elements per tensor; larger tensors are strided.
    pub max_elements: usize,
    /// Scales every analytic gradient by 1.5. Used to confirm the checker
    /// actually fails on a broken derivative.
    pub corrupt_analytic: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: FD_STEP,
            floor: REL_FLOOR,
            seed: 0x5eed,
            max_elements: usize::MAX,
            corrupt_analytic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Where the maximum occurred, e.g. `input 0 [3]` or `param w [12]`.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Random dyadic values with magnitude in `[0.05, 1]`.
pub fn dyadic_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = (rng.gen_range(0.05..1.0f64) * 1048576.0).round() / 1048576.0;
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape product")
}

fn eval_loss<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], proj: &Tensor<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let o = tape.value(out);
    Ok(o.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
}

fn strided(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let stride = len.div_ceil(max);
        (0..len).step_by(stride).collect()
    }
}

/// Compares analytic gradients of `f` against central differences, over every
/// input tensor and every parameter in `store`.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);

    // analytic pass
    let mut tape = Tape::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        tape.param(id);
    }
    let out = f(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let proj = dyadic_tensor(&out_shape, &mut rng);
    let pv = tape.constant(proj.clone());
    let weighted = tape.mul(out, pv)?;
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss)?;
    let scale = if opts.corrupt_analytic { 1.5 } else { 1.0 };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |analytic: f64, numeric: f64, at: String| {
        let err = (analytic * scale - numeric).abs() / numeric.abs().max(opts.floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = at;
        }
    };

    let h = opts.step;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        for j in strided(input.len(), opts.max_elements) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval_loss(store, &plus, &proj, &f)? - eval_loss(store, &minus, &proj, &f)?) / (2.0 * h);
            record(analytic[j], numeric, format!("input {k} [{j}]"));
        }
    }

    for (id, analytic) in grads.params() {
        let len = store.get(*id).len();
        for j in strided(len, opts.max_elements) {
            let mut plus = store.clone();
            plus.get_mut(*id).data_mut()[j] += h;
            let mut minus = store.clone();
            minus.get_mut(*id).data_mut()[j] -= h;
            let numeric = (eval_loss(&plus, inputs, &proj, &f)? - eval_loss(&minus, inputs, &proj, &f)?) / (2.0 * h);
            record(analytic[j], numeric, format!("param {} [{j}]", store.name(*id)));
        }
    }
    Ok(report)
}

/// Every op name accepted by [`grad_check`].
pub const CATALOGUE: &[&str] = &[
    "matmul",
    "matmul_nt",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "add_scalar",
    "concat",
    "reshape",
    "transpose",
    "relu",
    "softmax",
    "max_reduce",
    "mean_reduce",
    "sum",
    "linear",
    "conv_transpose_1d",
    "sinusoidal",
    "gather",
    "row_norm",
    "row_sq_norm",
];

/// Default input shapes used when exercising `op` over the catalogue.
pub fn default_shapes(op: &str) -> Vec<Vec<usize>> {
    let base = op.split(':').next().unwrap_or(op);
    match base {
        "matmul" => vec![vec![3, 4], vec![4, 2]],
        "matmul_nt" => vec![vec![3, 4], vec![5, 4]],
        "add_row" => vec![vec![4, 3], vec![3]],
        "concat" => vec![vec![2, 3], vec![4, 3]],
        "linear" => vec![vec![5, 3], vec![3, 4]],
        "conv_transpose_1d" => vec![vec![2, 3], vec![3, 2, 4]],
        "sinusoidal" => vec![vec![5]],
        "softmax" | "max_reduce" | "mean_reduce" => vec![vec![3, 5]],
        "row_norm" | "row_sq_norm" => vec![vec![6, 3]],
        _ => vec![vec![3, 4]],
    }
}

/// Five op variants and input shapes per catalogue entry.
pub fn instantiations(op: &str) -> Vec<(String, Vec<Vec<usize>>)> {
    let v = |s: &[&[usize]]| s.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    match op {
        "matmul" => (1..=5).map(|i| (op.into(), v(&[&[i, i + 2], &[i + 2, 6 - i]]))).collect(),
        "matmul_nt" => (1..=5).map(|i| (op.into(), v(&[&[i, 3], &[7 - i, 3]]))).collect(),
        "add_row" => (1..=5).map(|i| (op.into(), v(&[&[i, 2, i + 1], &[i + 1]]))).collect(),
        "linear" => (1..=5).map(|i| (op.into(), v(&[&[i + 1, i], &[i, 6 - i]]))).collect(),
        "concat" => vec![
            ("concat:0".into(), v(&[&[2, 3], &[1, 3]])),
            ("concat:1".into(), v(&[&[2, 3], &[2, 1], &[2, 2]])),
            ("concat:0".into(), v(&[&[1, 2, 2], &[3, 2, 2]])),
            ("concat:1".into(), v(&[&[2, 1, 3], &[2, 4, 3]])),
            ("concat:2".into(), v(&[&[2, 2, 1], &[2, 2, 3]])),
        ],
        "softmax" | "max_reduce" | "mean_reduce" => vec![
            (format!("{op}:0"), v(&[&[5]])),
            (format!("{op}:1"), v(&[&[3, 4]])),
            (format!("{op}:0"), v(&[&[3, 4]])),
            (format!("{op}:1"), v(&[&[2, 5, 3]])),
            (format!("{op}:2"), v(&[&[2, 3, 4]])),
        ],
        "conv_transpose_1d" => vec![
            ("conv_transpose_1d:1".into(), v(&[&[1, 4], &[4, 3, 5]])),
            ("conv_transpose_1d:2".into(), v(&[&[3, 2], &[2, 2, 3]])),
            ("conv_transpose_1d:1".into(), v(&[&[2, 3], &[3, 2, 2]])),
            ("conv_transpose_1d:3".into(), v(&[&[3, 1], &[1, 4, 2]])),
            ("conv_transpose_1d:2".into(), v(&[&[4, 2], &[2, 1, 4]])),
        ],
        "sinusoidal" => (1..=5).map(|i| (format!("sinusoidal:{}", 2 * i), v(&[&[i + 1]]))).collect(),
        "row_norm" | "row_sq_norm" | "transpose" => (1..=5).map(|i| (op.into(), v(&[&[i + 1, 6 - i]]))).collect(),
        _ => (1..=5).map(|i| (op.into(), v(&[&[i, 7 - i]]))).collect(),
    }
}

/// Finite-difference check of a single catalogue op.
///
/// `op` may carry an integer argument after a colon: the axis for `softmax`,
/// `max_reduce`, `mean_reduce` and `concat`, the stride for
/// `conv_transpose_1d`, or the channel count for `sinusoidal`.
/// Returns the maximum relative error.
pub fn grad_check(op: &str, input_shapes: &[Vec<usize>], tolerance: f64) -> Result<f64> {
    grad_check_with(op, input_shapes, tolerance, &GradCheckOptions::default()).map(|r| r.max_rel_error)
}

pub fn grad_check_with(
    op: &str,
    input_shapes: &[Vec<usize>],
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(tolerance > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            msg: format!("tolerance must be positive, got {tolerance}"),
        });
    }
    let (name, arg) = match op.split_once(':') {
        Some((n, a)) => (
            n,
            Some(a.parse::<usize>().map_err(|_| TensorError::UnknownOp(op.to_string()))?),
        ),
        None => (op, None),
    };
    if !CATALOGUE.contains(&name) {
        return Err(TensorError::UnknownOp(op.to_string()));
    }
    let need = |n: usize| -> Result<()> {
        if input_shapes.len() < n {
            return Err(TensorError::InvalidArgument {
                op: "grad_check",
                msg: format!("`{name}` needs {n} input shapes, got {}", input_shapes.len()),
            });
        }
        Ok(())
    };
    need(1)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut inputs: Vec<Tensor<f64>> = input_shapes.iter().map(|s| dyadic_tensor(s, &mut rng)).collect();
    let store = ParamStore::new();
    let last_axis = input_shapes[0].len().saturating_sub(1);

    let report = match name {
        "matmul" => {
            need(2)?;
            check_gradients(&store, &inputs[..2], |t, v| t.matmul(v[0], v[1]), opts)?
        }
        "matmul_nt" => {
            need(2)?;
            check_gradients(&store, &inputs[..2], |t, v| t.matmul_nt(v[0], v[1]), opts)?
        }
        "add" | "sub" | "mul" => {
            if inputs.len() < 2 {
                inputs.push(dyadic_tensor(&input_shapes[0], &mut rng));
            }
            check_gradients(
                &store,
                &inputs[..2],
                |t, v| match name {
                    "add" => t.add(v[0], v[1]),
                    "sub" => t.sub(v[0], v[1]),
                    _ => t.mul(v[0], v[1]),
                },
                opts,
            )?
        }
        "add_row" => {
            need(2)?;
            check_gradients(&store, &inputs[..2], |t, v| t.add_row(v[0], v[1]), opts)?
        }
        "scale" => check_gradients(&store, &inputs[..1], |t, v| Ok(t.scale(v[0], 0.75)), opts)?,
        "add_scalar" => check_gradients(&store, &inputs[..1], |t, v| Ok(t.add_scalar(v[0], 0.5)), opts)?,
        "concat" => {
            let axis = arg.unwrap_or(0);
            check_gradients(&store, &inputs, |t, v| t.concat(v, axis), opts)?
        }
        "reshape" => {
            let n = inputs[0].len();
            check_gradients(&store, &inputs[..1], |t, v| t.reshape(v[0], &[n]), opts)?
        }
        "transpose" => check_gradients(&store, &inputs[..1], |t, v| t.transpose(v[0]), opts)?,
        "relu" => check_gradients(&store, &inputs[..1], |t, v| Ok(t.relu(v[0])), opts)?,
        "softmax" => {
            let axis = arg.unwrap_or(last_axis);
            check_gradients(&store, &inputs[..1], |t, v| t.softmax(v[0], axis), opts)?
        }
        "max_reduce" => {
            let axis = arg.unwrap_or(last_axis);
            check_gradients(&store, &inputs[..1], |t, v| t.max_reduce(v[0], axis), opts)?
        }
        "mean_reduce" => {
            let axis = arg.unwrap_or(last_axis);
            check_gradients(&store, &inputs[..1], |t, v| t.mean_reduce(v[0], axis), opts)?
        }
        "sum" => check_gradients(&store, &inputs[..1], |t, v| Ok(t.sum(v[0])), opts)?,
        "linear" => {
            need(2)?;
            let cout = input_shapes[1].get(1).copied().unwrap_or(1);
            inputs.truncate(2);
            inputs.push(dyadic_tensor(&[cout], &mut rng));
            check_gradients(&store, &inputs, |t, v| t.linear(v[0], v[1], Some(v[2])), opts)?
        }
        "conv_transpose_1d" => {
            need(2)?;
            let stride = arg.unwrap_or(1);
            check_gradients(&store, &inputs[..2], |t, v| t.conv_transpose_1d(v[0], v[1], stride), opts)?
        }
        "sinusoidal" => {
            let channels = arg.unwrap_or(8);
            check_gradients(&store, &inputs[..1], |t, v| t.sinusoidal(v[0], channels), opts)?
        }
        "gather" => {
            let rows = input_shapes[0].first().copied().unwrap_or(1);
            let mut index: Vec<Option<usize>> = (0..rows + 2).map(|_| Some(rng.gen_range(0..rows))).collect();
            index.push(None);
            check_gradients(&store, &inputs[..1], |t, v| t.gather(v[0], index.clone()), opts)?
        }
        "row_norm" => check_gradients(&store, &inputs[..1], |t, v| t.row_norm(v[0]), opts)?,
        "row_sq_norm" => check_gradients(&store, &inputs[..1], |t, v| t.row_sq_norm(v[0]), opts)?,
        _ => unreachable!("catalogue checked above"),
    };
    Ok(report)
}
