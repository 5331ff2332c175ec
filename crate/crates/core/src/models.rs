//! Multi-layer perceptrons over a flat parameter vector, and their losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Mat, ParamVector, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Self {
        MlpSpec { layer_widths, activation, init_seed: 0, init_scale: 1.0 }
    }

    /// `[1, 40, 40, 1]`, relu.
    pub fn sine_default() -> Self {
        Self::new(vec![1, 40, 40, 1], Activation::Relu)
    }

    /// `[2, 64, 64, classes]`, relu.
    pub fn classifier_default(classes: usize) -> Self {
        Self::new(vec![2, 64, 64, classes], Activation::Relu)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::config("model.layer_widths", "need at least input and output widths"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::config("model.layer_widths", "widths must be positive"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("model.init_scale", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Weights (`in x out`, row-major) then bias (`out`) per layer.
    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.layer_widths.windows(2).map(move |w| {
            let here = offset;
            offset += (w[0] + 1) * w[1];
            (here, w[0], w[1])
        })
    }
}

/// Per-layer uniform in `[-s, s]` with `s = init_scale / sqrt(fan_in)`.
pub fn init_params(spec: &MlpSpec) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut out = Vec::with_capacity(spec.num_params());
    for (_, fan_in, fan_out) in spec.layers() {
        let s = spec.init_scale / (fan_in as f64).sqrt();
        for _ in 0..(fan_in + 1) * fan_out {
            let u: f64 = rng.random_range(-1.0..=1.0);
            out.push(u * s);
        }
    }
    ParamVector::new(out)
}

/// Network outputs, `n x out`, for the parameter row `p`.
pub fn forward(tape: &mut Tape, spec: &MlpSpec, p: Var, inputs: Var) -> Var {
    let depth = spec.layer_widths.len() - 1;
    let mut h = inputs;
    for (li, (offset, fan_in, fan_out)) in spec.layers().enumerate() {
        let w = tape.slice(p, offset, fan_in, fan_out);
        let b = tape.slice(p, offset + fan_in * fan_out, 1, fan_out);
        let z = tape.matmul(h, w);
        h = tape.add_row(z, b);
        if li + 1 < depth {
            h = match spec.activation {
                Activation::Tanh => tape.tanh(h),
                Activation::Relu => tape.relu(h),
            };
        }
    }
    h
}

pub fn check_shapes(spec: &MlpSpec, dim: usize, inputs: &Mat, targets: &Mat, loss: LossKind) -> Result<()> {
    if dim != spec.num_params() {
        return Err(Error::Shape(format!("parameter dim {dim}, model expects {}", spec.num_params())));
    }
    if inputs.cols != spec.input_dim() {
        return Err(Error::Shape(format!("input width {}, model expects {}", inputs.cols, spec.input_dim())));
    }
    if targets.rows != inputs.rows {
        return Err(Error::Shape(format!("{} inputs but {} targets", inputs.rows, targets.rows)));
    }
    if inputs.rows == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    match loss {
        LossKind::Mse if targets.cols != spec.output_dim() => Err(Error::Shape(format!(
            "target width {}, model output {}",
            targets.cols,
            spec.output_dim()
        ))),
        LossKind::CrossEntropy => {
            if targets.cols != 1 {
                return Err(Error::Shape("cross-entropy targets must be one class id per row".into()));
            }
            let classes = spec.output_dim();
            for &t in &targets.data {
                if t.fract() != 0.0 || t < 0.0 || t >= classes as f64 {
                    return Err(Error::Shape(format!("class target {t} outside [0, {classes})")));
                }
            }
            Ok(())
        }
        LossKind::Mse => Ok(()),
    }
}

/// Per-instance losses as an `n x 1` column, recorded on `tape`.
///
/// Shapes are assumed valid; see [`check_shapes`].
pub fn instance_losses_on(
    tape: &mut Tape,
    spec: &MlpSpec,
    p: Var,
    inputs: &Mat,
    targets: &Mat,
    loss: LossKind,
) -> Var {
    let x = tape.constant(inputs.clone());
    let out = forward(tape, spec, p, x);
    match loss {
        LossKind::Mse => {
            let y = tape.constant(targets.clone());
            let diff = tape.sub(out, y);
            let sq = tape.square(diff);
            let rows = tape.sum_rows(sq);
            let width = targets.cols;
            if width == 1 {
                rows
            } else {
                tape.scale(rows, 1.0 / width as f64)
            }
        }
        LossKind::CrossEntropy => {
            // log-sum-exp with a constant per-row shift; the shift cancels in
            // value and gradient.
            let logits = tape.value(out).clone();
            let classes = logits.cols;
            let mut shift = Mat::zeros(logits.rows, classes);
            let mut onehot = Mat::zeros(logits.rows, classes);
            for r in 0..logits.rows {
                let row = &logits.data[r * classes..(r + 1) * classes];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                shift.data[r * classes..(r + 1) * classes].fill(m);
                onehot.data[r * classes + targets.data[r] as usize] = 1.0;
            }
            let shift = tape.constant(shift);
            let onehot = tape.constant(onehot);
            let z = tape.sub(out, shift);
            let e = tape.exp(z);
            let se = tape.sum_rows(e);
            let lse = tape.log(se);
            let picked = tape.mul(z, onehot);
            let picked = tape.sum_rows(picked);
            tape.sub(lse, picked)
        }
    }
}

/// Mean loss over instances, recorded on `tape`.
pub fn model_loss_on(
    tape: &mut Tape,
    spec: &MlpSpec,
    p: Var,
    inputs: &Mat,
    targets: &Mat,
    loss: LossKind,
) -> Var {
    let l = instance_losses_on(tape, spec, p, inputs, targets, loss);
    tape.mean(l)
}

pub fn model_loss(spec: &MlpSpec, p: &ParamVector, inputs: &Mat, targets: &Mat, loss: LossKind) -> Result<f64> {
    check_shapes(spec, p.dim(), inputs, targets, loss)?;
    let mut tape = Tape::new();
    let pv = tape.constant(p.to_row());
    let l = model_loss_on(&mut tape, spec, pv, inputs, targets, loss);
    tape.check_finite()?;
    Ok(tape.scalar(l))
}

pub fn instance_losses(
    spec: &MlpSpec,
    p: &ParamVector,
    inputs: &Mat,
    targets: &Mat,
    loss: LossKind,
) -> Result<Vec<f64>> {
    check_shapes(spec, p.dim(), inputs, targets, loss)?;
    let mut tape = Tape::new();
    let pv = tape.constant(p.to_row());
    let l = instance_losses_on(&mut tape, spec, pv, inputs, targets, loss);
    tape.check_finite()?;
    Ok(tape.value(l).data.clone())
}

/// Raw network outputs, `n x out`.
pub fn predict(spec: &MlpSpec, p: &ParamVector, inputs: &Mat) -> Result<Mat> {
    if inputs.cols != spec.input_dim() || p.dim() != spec.num_params() {
        return Err(Error::Shape("predict: inputs or params do not match model".into()));
    }
    let mut tape = Tape::new();
    let pv = tape.constant(p.to_row());
    let x = tape.constant(inputs.clone());
    let out = forward(&mut tape, spec, pv, x);
    tape.check_finite()?;
    Ok(tape.value(out).clone())
}

/// Fraction of rows whose arg-max output equals the class target.
pub fn accuracy(spec: &MlpSpec, p: &ParamVector, inputs: &Mat, targets: &Mat) -> Result<f64> {
    let out = predict(spec, p, inputs)?;
    let mut hit = 0usize;
    for r in 0..out.rows {
        let row = &out.data[r * out.cols..(r + 1) * out.cols];
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if best as f64 == targets.data[r] {
            hit += 1;
        }
    }
    Ok(hit as f64 / out.rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_of_sine_net() {
        assert_eq!(MlpSpec::sine_default().num_params(), 1761);
        assert_eq!(init_params(&MlpSpec::sine_default()).dim(), 1761);
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let mut spec = MlpSpec::new(vec![3, 7, 2], Activation::Tanh);
        spec.init_seed = 11;
        assert_eq!(init_params(&spec), init_params(&spec));
        let p = init_params(&spec);
        let first_layer = &p.as_slice()[..(3 + 1) * 7];
        let bound = 1.0 / 3f64.sqrt();
        assert!(first_layer.iter().all(|v| v.abs() <= bound));
        spec.init_scale = 0.0;
        assert!(init_params(&spec).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perfect_fit_has_zero_mse() {
        let spec = MlpSpec::new(vec![1, 5, 1], Activation::Tanh);
        let p = init_params(&spec);
        let x = Mat::col(vec![-1.0, 0.5, 2.0]);
        let y = predict(&spec, &p, &x).unwrap();
        assert_eq!(model_loss(&spec, &p, &x, &y, LossKind::Mse).unwrap(), 0.0);
    }

    #[test]
    fn single_class_cross_entropy_is_zero() {
        let spec = MlpSpec::new(vec![2, 4, 1], Activation::Relu);
        let p = init_params(&spec);
        let x = Mat::new(2, 2, vec![0.1, 0.2, -1.0, 3.0]);
        let y = Mat::col(vec![0.0, 0.0]);
        assert_eq!(model_loss(&spec, &p, &x, &y, LossKind::CrossEntropy).unwrap(), 0.0);
    }

    #[test]
    fn shape_errors() {
        let spec = MlpSpec::new(vec![1, 5, 1], Activation::Tanh);
        let p = init_params(&spec);
        let x = Mat::col(vec![1.0, 2.0]);
        let short = Mat::col(vec![1.0]);
        assert!(matches!(model_loss(&spec, &p, &x, &short, LossKind::Mse), Err(Error::Shape(_))));
        let wide = Mat::new(2, 2, vec![0.0; 4]);
        assert!(matches!(model_loss(&spec, &p, &wide, &x, LossKind::Mse), Err(Error::Shape(_))));
        let cls = MlpSpec::new(vec![1, 3, 3], Activation::Tanh);
        let bad = Mat::col(vec![0.0, 3.0]);
        assert!(matches!(
            model_loss(&cls, &init_params(&cls), &x, &bad, LossKind::CrossEntropy),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn identical_instances_have_identical_losses() {
        let spec = MlpSpec::new(vec![2, 6, 3], Activation::Relu);
        let p = init_params(&spec);
        let x = Mat::new(3, 2, vec![0.3, -0.7, 0.3, -0.7, 0.3, -0.7]);
        let y = Mat::col(vec![2.0, 2.0, 2.0]);
        let l = instance_losses(&spec, &p, &x, &y, LossKind::CrossEntropy).unwrap();
        assert!(l.iter().all(|&v| v == l[0]));
    }
}
