//! Brute-force reference computations for tests: finite differences and a
//! plain-loop MLP with hand-written backpropagation. Nothing here goes
//! through the tape.

use crate::diffcore::{Mat, ParamVector};
use crate::error::{Error, Result};
use crate::meta::{Learner, MetaConfig};
use crate::models::{Activation, LossKind, MlpSpec};
use crate::reweight::{HyperGradient, WeightMatrix};
use crate::tasks::TaskData;

/// Largest parameter dimension [`fd_gradient`] accepts.
pub const MAX_FD_DIM: usize = 5000;
/// Largest weight count [`fd_hypergradient`] accepts.
pub const MAX_FD_ENTRIES: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdMode {
    Central,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdSpec {
    pub epsilon: f64,
    pub mode: FdMode,
}

impl FdSpec {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(1e-8..=1e-2).contains(&epsilon) {
            return Err(Error::config("fd.epsilon", format!("{epsilon} outside [1e-8, 1e-2]")));
        }
        Ok(FdSpec { epsilon, mode: FdMode::Central })
    }

    /// For gradients of losses.
    pub fn first_order() -> Self {
        FdSpec { epsilon: 1e-5, mode: FdMode::Central }
    }

    /// For hypergradients.
    pub fn hypergrad() -> Self {
        FdSpec { epsilon: 1e-4, mode: FdMode::Central }
    }
}

/// Central differences, one coordinate at a time.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, p: &[f64], fd: FdSpec) -> Result<ParamVector> {
    if p.len() > MAX_FD_DIM {
        return Err(Error::Shape(format!("finite differences limited to {MAX_FD_DIM} coordinates")));
    }
    let mut x = p.to_vec();
    let mut g = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = x[i];
        x[i] = orig + fd.epsilon;
        let hi = f(&x);
        x[i] = orig - fd.epsilon;
        let lo = f(&x);
        x[i] = orig;
        g.push((hi - lo) / (2.0 * fd.epsilon));
    }
    Ok(ParamVector::new(g))
}

// ---- plain-loop MLP ----

fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Tanh => z.tanh(),
        Activation::Relu => z.max(0.0),
    }
}

fn act_deriv(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Tanh => 1.0 - z.tanh().powi(2),
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Pre-activations of every layer for one input row.
fn forward_row(spec: &MlpSpec, p: &[f64], x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let widths = &spec.layer_widths;
    let mut inputs = vec![x.to_vec()];
    let mut pre = Vec::new();
    let mut off = 0;
    for l in 0..widths.len() - 1 {
        let (fi, fo) = (widths[l], widths[l + 1]);
        let h = inputs.last().unwrap();
        let mut z = vec![0.0; fo];
        for j in 0..fo {
            let mut s = p[off + fi * fo + j];
            for i in 0..fi {
                s += h[i] * p[off + i * fo + j];
            }
            z[j] = s;
        }
        off += (fi + 1) * fo;
        if l + 2 < widths.len() {
            inputs.push(z.iter().map(|&v| act(spec.activation, v)).collect());
        }
        pre.push(z);
    }
    (inputs, pre)
}

/// Loss of one instance and its derivative with respect to the outputs.
fn row_loss(out: &[f64], target: &[f64], loss: LossKind) -> (f64, Vec<f64>) {
    match loss {
        LossKind::Mse => {
            let w = out.len() as f64;
            let mut l = 0.0;
            let mut d = vec![0.0; out.len()];
            for j in 0..out.len() {
                let r = out[j] - target[j];
                l += r * r / w;
                d[j] = 2.0 * r / w;
            }
            (l, d)
        }
        LossKind::CrossEntropy => {
            let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = out.iter().map(|o| (o - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let y = target[0] as usize;
            let l = z.ln() + m - out[y];
            let mut d: Vec<f64> = exps.iter().map(|e| e / z).collect();
            d[y] -= 1.0;
            (l, d)
        }
    }
}

fn row(m: &Mat, r: usize) -> &[f64] {
    &m.data[r * m.cols..(r + 1) * m.cols]
}

/// Per-instance losses.
pub fn instance_losses(spec: &MlpSpec, p: &[f64], inputs: &Mat, targets: &Mat, loss: LossKind) -> Vec<f64> {
    (0..inputs.rows)
        .map(|r| {
            let (_, pre) = forward_row(spec, p, row(inputs, r));
            row_loss(pre.last().unwrap(), row(targets, r), loss).0
        })
        .collect()
}

pub fn mean_loss(spec: &MlpSpec, p: &[f64], inputs: &Mat, targets: &Mat, loss: LossKind) -> f64 {
    let l = instance_losses(spec, p, inputs, targets, loss);
    l.iter().sum::<f64>() / l.len() as f64
}

/// Mean loss and its gradient by backpropagation.
pub fn loss_and_grad(spec: &MlpSpec, p: &[f64], inputs: &Mat, targets: &Mat, loss: LossKind) -> (f64, Vec<f64>) {
    let widths = &spec.layer_widths;
    let nl = widths.len() - 1;
    let mut offsets = Vec::with_capacity(nl);
    let mut off = 0;
    for l in 0..nl {
        offsets.push(off);
        off += (widths[l] + 1) * widths[l + 1];
    }
    let n = inputs.rows as f64;
    let mut total = 0.0;
    let mut g = vec![0.0; p.len()];
    for r in 0..inputs.rows {
        let (ins, pre) = forward_row(spec, p, row(inputs, r));
        let (l, mut delta) = row_loss(pre.last().unwrap(), row(targets, r), loss);
        total += l;
        for layer in (0..nl).rev() {
            let (fi, fo) = (widths[layer], widths[layer + 1]);
            let o = offsets[layer];
            let h = &ins[layer];
            for j in 0..fo {
                g[o + fi * fo + j] += delta[j] / n;
                for i in 0..fi {
                    g[o + i * fo + j] += h[i] * delta[j] / n;
                }
            }
            if layer > 0 {
                let z = &pre[layer - 1];
                delta = (0..fi)
                    .map(|i| {
                        let s: f64 = (0..fo).map(|j| p[o + i * fo + j] * delta[j]).sum();
                        s * act_deriv(spec.activation, z[i])
                    })
                    .collect();
            }
        }
    }
    (total / n, g)
}

/// Inner adaptation with the hand-written gradient.
pub fn adapt(spec: &MlpSpec, p: &[f64], inputs: &Mat, targets: &Mat, loss: LossKind, alpha: f64, steps: usize) -> Vec<f64> {
    let mut phi = p.to_vec();
    for _ in 0..steps {
        let (_, g) = loss_and_grad(spec, &phi, inputs, targets, loss);
        for (x, d) in phi.iter_mut().zip(g) {
            *x -= alpha * d;
        }
    }
    phi
}

/// Per-instance query losses after adaptation.
pub fn adapted_instance_losses(learner: &Learner, p: &[f64], task: &TaskData) -> Vec<f64> {
    let a = &learner.adapt;
    let phi = adapt(&learner.spec, p, &task.support_inputs, &task.support_targets, learner.loss, a.alpha, a.inner_steps);
    instance_losses(&learner.spec, &phi, &task.query_inputs, &task.query_targets, learner.loss)
}

/// `(1/n) sum_j mean_k l(Alg(p, V_j^S), V_jk^Q)`.
pub fn validation_meta_loss(learner: &Learner, p: &[f64], val: &[&TaskData]) -> f64 {
    let per: Vec<f64> = val
        .iter()
        .map(|t| {
            let l = adapted_instance_losses(learner, p, t);
            l.iter().sum::<f64>() / l.len() as f64
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// `(1/m) sum_i sum_k w_ik l_ik(Alg(p, D_i^S))` with effective weights.
pub fn weighted_meta_loss(learner: &Learner, p: &[f64], batch: &[&TaskData], w: &WeightMatrix) -> Result<f64> {
    let mut total = 0.0;
    for t in batch {
        let e = w.effective(t.task_id, t.query_len())?;
        let l = adapted_instance_losses(learner, p, t);
        total += e.iter().zip(&l).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Central-difference hypergradient. The per-instance meta-gradients
/// `J_ik = d l_ik(Alg(p, D_i^S)) / dp` are themselves taken by central
/// differences of the composed scalar map; each weight entry is then
/// perturbed, the virtual step recomputed from the `J_ik`, and the
/// validation meta-loss re-evaluated.
pub fn fd_hypergradient(
    learner: &Learner,
    p: &ParamVector,
    train: &[&TaskData],
    val: &[&TaskData],
    w: &WeightMatrix,
    meta: &MetaConfig,
    fd: FdSpec,
) -> Result<HyperGradient> {
    if w.num_entries() > MAX_FD_ENTRIES {
        return Err(Error::UnsupportedConfig(format!("oracle limited to {MAX_FD_ENTRIES} weight entries")));
    }
    let inner = FdSpec::first_order();
    let mut jac: Vec<Vec<Vec<f64>>> = Vec::with_capacity(train.len());
    for t in train {
        let mut per = Vec::with_capacity(t.query_len());
        for k in 0..t.query_len() {
            let f = |x: &[f64]| adapted_instance_losses(learner, x, t)[k];
            per.push(fd_gradient(f, p.as_slice(), inner)?.into_vec());
        }
        jac.push(per);
    }

    let m = train.len() as f64;
    let theta_w = |storage: &[f64]| -> Result<Vec<f64>> {
        let mut x = p.as_slice().to_vec();
        for (t, per) in train.iter().zip(&jac) {
            let entries = w.entries(t.task_id)?;
            let s = w.unit_scale(t.task_id)?;
            for (k, j) in per.iter().enumerate() {
                let e = s * storage[entries[k]];
                for (xi, ji) in x.iter_mut().zip(j) {
                    *xi -= meta.eta / m * e * ji;
                }
            }
        }
        Ok(x)
    };

    let mut storage = w.storage().to_vec();
    let mut out = Vec::with_capacity(storage.len());
    for c in 0..storage.len() {
        let orig = storage[c];
        storage[c] = orig + fd.epsilon;
        let hi = validation_meta_loss(learner, &theta_w(&storage)?, val);
        storage[c] = orig - fd.epsilon;
        let lo = validation_meta_loss(learner, &theta_w(&storage)?, val);
        storage[c] = orig;
        out.push((hi - lo) / (2.0 * fd.epsilon));
    }
    Ok(HyperGradient { values: out })
}

/// A copy of `w` in which every query instance of `tasks` owns its own entry,
/// holding the value of the entry it shared. Also returns, for each new
/// entry, the original entry it was cloned from.
pub fn unshare(w: &WeightMatrix, tasks: &[&TaskData]) -> Result<(WeightMatrix, Vec<usize>)> {
    let mut index = vec![Vec::new(); w.num_tasks()];
    let mut scale = Vec::with_capacity(w.num_tasks());
    let mut storage = Vec::new();
    let mut origin = Vec::new();
    for id in 0..w.num_tasks() {
        scale.push(w.unit_scale(id)?);
    }
    for t in tasks {
        for &c in w.entries(t.task_id)? {
            index[t.task_id].push(storage.len());
            storage.push(w.storage()[c]);
            origin.push(c);
        }
    }
    let unused = storage.len();
    storage.push(0.0);
    for (id, idx) in index.iter_mut().enumerate() {
        if idx.is_empty() {
            *idx = vec![unused; w.entries(id)?.len()];
        }
    }
    origin.push(usize::MAX);
    Ok((WeightMatrix::from_parts(w.scheme(), index, scale, storage)?, origin))
}

/// Sums per-clone hypergradient entries back onto the entries they came from.
pub fn fold_unshared(hg: &HyperGradient, origin: &[usize], len: usize) -> HyperGradient {
    let mut out = HyperGradient::zeros(len);
    for (v, &o) in hg.values.iter().zip(origin) {
        if o != usize::MAX {
            out.values[o] += v;
        }
    }
    out
}
