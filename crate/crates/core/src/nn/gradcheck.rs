//! Central finite-difference gradient checks.
//!
//! The numeric derivative of each checked coordinate is taken over a short
//! ladder of step sizes, each giving a central and two one-sided estimates,
//! and the best-agreeing one is kept. A ReLU or max-pool kink just beside the
//! point spoils the central estimate and the slope on its side, while the
//! analytic gradient still equals the slope on the other side; a wrong
//! analytic gradient disagrees with all of them.

use super::ops::{Mode, RunningStats};
use super::{LayerSpec, NnError, NodeId, Rng, Scalar, Tape, Tensor};

/// Denominator floor of the relative error.
pub const REL_EPS: f64 = 1e-6;
/// At most this many coordinates of each tensor are perturbed.
pub const MAX_COORDS_PER_TENSOR: usize = 48;
const EARLY_EXIT: f64 = 1e-7;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Name of the tensor holding the worst coordinate.
    pub worst: String,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_EPS)
}

fn step_ladder<T: Scalar>() -> &'static [f64] {
    if T::DTYPE == "f64" {
        &[1e-5, 1e-6, 1e-7, 1e-3]
    } else {
        &[1e-2, 3e-3, 1e-3]
    }
}

/// Checks `eval`, which maps named tensors to `(loss, d loss / d tensor)`.
pub fn check_function<T: Scalar>(
    tensors: &mut [(String, Tensor<T>)],
    rng: &mut Rng,
    eval: impl FnMut(&[(String, Tensor<T>)]) -> Result<(f64, Vec<Tensor<T>>), NnError>,
) -> Result<GradCheckReport, NnError> {
    check_function_sampled(tensors, MAX_COORDS_PER_TENSOR, rng, eval)
}

/// [`check_function`] perturbing at most `max_coords` coordinates per tensor.
pub fn check_function_sampled<T: Scalar>(
    tensors: &mut [(String, Tensor<T>)],
    max_coords: usize,
    rng: &mut Rng,
    mut eval: impl FnMut(&[(String, Tensor<T>)]) -> Result<(f64, Vec<Tensor<T>>), NnError>,
) -> Result<GradCheckReport, NnError> {
    let (f0, analytic) = eval(tensors)?;
    if analytic.len() != tensors.len() {
        return Err(NnError::Invalid("gradient count differs from tensor count".into()));
    }
    let mut report = GradCheckReport::default();
    for t in 0..tensors.len() {
        let n = tensors[t].1.len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > max_coords {
            rng.shuffle(&mut coords);
            coords.truncate(max_coords);
        }
        for &k in &coords {
            let orig = tensors[t].1.data()[k];
            let a = analytic[t].data()[k].as_f64();
            let mut best = f64::INFINITY;
            for &h in step_ladder::<T>() {
                let step = h * orig.as_f64().abs().max(1.0);
                let xp = T::from_f64(orig.as_f64() + step);
                let xm = T::from_f64(orig.as_f64() - step);
                tensors[t].1.data_mut()[k] = xp;
                let plus = eval(tensors)?.0;
                tensors[t].1.data_mut()[k] = xm;
                let minus = eval(tensors)?.0;
                tensors[t].1.data_mut()[k] = orig;
                // divide by the step actually representable in T
                let central = (plus - minus) / (xp.as_f64() - xm.as_f64());
                let right = (plus - f0) / (xp.as_f64() - orig.as_f64());
                let left = (f0 - minus) / (orig.as_f64() - xm.as_f64());
                best = best.min(relative_error(a, central)).min(relative_error(a, right)).min(relative_error(a, left));
                if best < EARLY_EXIT {
                    break;
                }
            }
            report.checked += 1;
            if best > report.max_rel_error {
                report.max_rel_error = best;
                report.worst = tensors[t].0.clone();
            }
        }
    }
    Ok(report)
}

fn rand_tensor<T: Scalar>(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.uniform_range(-scale, scale)).collect::<Vec<_>>())
        .expect("valid shape")
}

/// Values bounded away from zero, for kink-sensitive layers.
fn rand_away_from_zero<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.uniform_range(0.1, 1.0);
            if rng.uniform() < 0.5 { -m } else { m }
        })
        .collect();
    Tensor::from_f64(shape, &v).expect("valid shape")
}

/// Distinct values on a grid with spacing 0.01, in random order.
fn rand_distinct<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.005 * n as f64).collect();
    rng.shuffle(&mut v);
    Tensor::from_f64(shape, &v).expect("valid shape")
}

/// Reduces `out` to a scalar by a fixed random projection; the upstream
/// gradient is then dense and O(1).
pub fn project_to_scalar<T: Scalar>(tape: &mut Tape<T>, out: NodeId, rng: &mut Rng) -> Result<NodeId, NnError> {
    let len = tape.value(out).len();
    let flat = tape.reshape(out, &[1, len])?;
    let proj = tape.input(rand_tensor(&[len, 1], rng, 1.0));
    let y = tape.linear(flat, proj, None)?;
    Ok(tape.sum(y))
}

/// Max relative error between analytic and finite-difference gradients of a
/// single layer, over its parameters and inputs, at a random point.
pub fn grad_check<T: Scalar>(layer: &LayerSpec, rng: &mut Rng) -> Result<f64, NnError> {
    Ok(grad_check_report::<T>(layer, rng)?.max_rel_error)
}

pub fn grad_check_report<T: Scalar>(layer: &LayerSpec, rng: &mut Rng) -> Result<GradCheckReport, NnError> {
    layer.validate()?;
    let batch = 3;
    let mut tensors: Vec<(String, Tensor<T>)> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    match *layer {
        LayerSpec::Conv2d { in_channels, kernel, .. } => {
            let side = kernel + 3;
            tensors.push(("x".into(), rand_tensor(&[batch, in_channels, side, side], rng, 1.0)));
        }
        LayerSpec::Batchnorm { channels } => {
            tensors.push(("x".into(), rand_tensor(&[4, channels, 3, 3], rng, 2.0)));
        }
        LayerSpec::Relu => tensors.push(("x".into(), rand_away_from_zero(&[batch, 2, 3, 3], rng))),
        LayerSpec::Sigmoid => tensors.push(("x".into(), rand_tensor(&[batch, 5], rng, 3.0))),
        LayerSpec::Softmax => tensors.push(("x".into(), rand_tensor(&[batch, 5], rng, 3.0))),
        LayerSpec::Maxpool2d { kernel, .. } => {
            let side = kernel * 3;
            tensors.push(("x".into(), rand_distinct(&[2, 2, side, side], rng)));
        }
        LayerSpec::Linear { inputs, .. } => tensors.push(("x".into(), rand_tensor(&[batch, inputs], rng, 1.0))),
        LayerSpec::Concat => {
            tensors.push(("a".into(), rand_tensor(&[batch, 2], rng, 1.0)));
            tensors.push(("b".into(), rand_tensor(&[batch, 3], rng, 1.0)));
        }
        LayerSpec::Incorporator { classes, features, .. } => {
            tensors.push(("f".into(), rand_tensor(&[batch, features], rng, 1.0)));
            labels = (0..batch).map(|_| rng.below(classes)).collect();
        }
    }
    let n_inputs = tensors.len();
    for (name, shape) in layer.param_shapes() {
        tensors.push((name.to_string(), rand_tensor(&shape, rng, 1.0)));
    }
    let running = match *layer {
        LayerSpec::Batchnorm { channels } => Some(RunningStats::<T>::new(channels)),
        _ => None,
    };
    let proj_rng = rng.split(0xC0FFEE);
    check_function(&mut tensors, rng, |ts| {
        let mut tape = Tape::new();
        let mut inputs: Vec<NodeId> = ts[..n_inputs].iter().map(|(_, t)| tape.input(t.clone())).collect();
        if let LayerSpec::Incorporator { classes, .. } = *layer {
            inputs.push(tape.input(one_hot(&labels, classes)));
        }
        let params: Vec<NodeId> = ts[n_inputs..]
            .iter()
            .enumerate()
            .map(|(i, (_, t))| tape.param(i, t.clone()))
            .collect();
        let mut rs = running.clone();
        let out = layer.apply(&mut tape, &inputs, &params, rs.as_mut(), Mode::Train)?;
        let loss = project_to_scalar(&mut tape, out, &mut proj_rng.clone())?;
        let grads = tape.backward(loss)?;
        let mut all: Vec<Tensor<T>> = inputs[..n_inputs]
            .iter()
            .map(|&id| grads.node(id).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(id).shape())))
            .collect();
        for &p in &params {
            all.push(grads.node(p).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(p).shape())));
        }
        Ok((tape.value(loss).data()[0].as_f64(), all))
    })
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = T::one();
    }
    Tensor::new(&[labels.len(), classes], data).expect("one-hot shape")
}
