//! Reweighted MAML: virtual parameter step, hypergradients with respect to
//! the sample weights, rectified weight updates, weight sharing and the full
//! training loop.

pub mod cluster;
mod weights;

use std::time::Instant;

use rayon::prelude::*;

pub use crate::config::{HypergradMode, WeightInit};
use crate::config::ExperimentConfig;
use crate::diffcore::{self, ParamVector, Tape, Var};
use crate::error::{Error, Result};
use crate::meta::{self, Learner, MetaConfig, MetricRecord, Observer, TaskGraph, TrainOutput};
use crate::models;
use crate::tasks::{TaskData, TaskPool};
pub use cluster::{cluster_units, kmeans, ClusterAssignment};
pub use weights::{weight_step, weight_step_in_place, HyperGradient, Scheme, WeightMatrix};

/// Initial weight value for a scheme under the default initialization.
pub fn default_init(scheme: Scheme) -> f64 {
    match scheme {
        Scheme::Task => 1.0,
        Scheme::Instance => 0.005,
    }
}

/// One training task's recorded pass for the current iteration.
struct TaskStep {
    graph: TaskGraph,
    task_id: usize,
    shared: Option<usize>,
    /// Gradient at unit weight when all instances share one entry, otherwise
    /// the weighted gradient at the current weights.
    grad: ParamVector,
}

fn prepare(learner: &Learner, p: &ParamVector, batch: &[&TaskData], w: &WeightMatrix) -> Result<Vec<TaskStep>> {
    batch
        .par_iter()
        .map(|task| {
            let id = task.task_id;
            let k = task.query_len();
            let e = w.effective(id, k)?;
            let shared = w.shared_entry(id)?;
            let graph = learner.task_graph(p, task)?;
            let grad = match shared {
                Some(_) => graph.weighted_grad(&vec![w.unit_scale(id)?; k]),
                None => graph.weighted_grad(&e),
            };
            Ok(TaskStep { graph, task_id: id, shared, grad })
        })
        .collect()
}

/// Per-task weighted gradients `G_i` under the weights `w`.
fn task_grads(steps: &[TaskStep], w: &WeightMatrix, refresh: bool) -> Result<Vec<ParamVector>> {
    steps
        .par_iter()
        .map(|s| match s.shared {
            Some(c) => Ok(s.grad.scaled(w.storage()[c])),
            None if refresh => Ok(s.graph.weighted_grad(&w.effective(s.task_id, s.graph.losses().len())?)),
            None => Ok(s.grad.clone()),
        })
        .collect()
}

/// `sum_j (g_j - alpha H_j g_j)` over validation tasks, where `g_j` is the
/// query-loss gradient at the adapted parameters and `H_j` the Hessian of the
/// support loss at `theta_w`. Approximate mode (and `alpha = 0`) drops the
/// Hessian term.
fn validation_direction(
    learner: &Learner,
    theta_w: &ParamVector,
    val: &[&TaskData],
    mode: HypergradMode,
) -> Result<ParamVector> {
    if mode == HypergradMode::Exact && learner.adapt.inner_steps != 1 {
        return Err(Error::UnsupportedConfig(format!(
            "exact hypergradient needs one inner step, got {}",
            learner.adapt.inner_steps
        )));
    }
    let alpha = learner.adapt.alpha;
    let parts = val
        .par_iter()
        .map(|task| {
            let (_, g) = learner.adapted_query_grad(theta_w, task)?;
            if mode == HypergradMode::Approx || alpha == 0.0 {
                return Ok(g);
            }
            let support = |tape: &mut Tape, p: Var| {
                models::model_loss_on(tape, &learner.spec, p, &task.support_inputs, &task.support_targets, learner.loss)
            };
            let h = diffcore::hvp(&support, theta_w, &g)?;
            Ok(g.axpy(-alpha, &h))
        })
        .collect::<Result<Vec<_>>>()?;
    meta::sum_in_order(theta_w.dim(), &parts).ensure_finite("validation direction")
}

fn assemble(steps: &[TaskStep], w: &WeightMatrix, u: &ParamVector, coef: f64) -> Result<HyperGradient> {
    let parts = steps
        .par_iter()
        .map(|s| match s.shared {
            Some(_) => vec![s.grad.dot(u)],
            None => s.graph.directional(u),
        })
        .collect::<Vec<_>>();
    let mut hg = HyperGradient::zeros(w.num_entries());
    for (s, part) in steps.iter().zip(parts) {
        match s.shared {
            Some(c) => hg.values[c] += coef * part[0],
            None => {
                let scale = w.unit_scale(s.task_id)?;
                for (&c, t) in w.entries(s.task_id)?.iter().zip(part) {
                    hg.values[c] += coef * scale * t;
                }
            }
        }
    }
    if let Some(node) = hg.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { node, op: "hypergradient" });
    }
    Ok(hg)
}

/// `p - (eta/m) sum_i sum_k w_ik grad l_ik(Alg(p, D_i^S))`: the parameters
/// one weighted meta-step would reach.
pub fn virtual_theta(
    learner: &Learner,
    p: &ParamVector,
    batch: &[&TaskData],
    w: &WeightMatrix,
    meta: &MetaConfig,
) -> Result<ParamVector> {
    let steps = prepare(learner, p, batch, w)?;
    let grads = task_grads(&steps, w, false)?;
    meta::meta_step(p, &grads, meta.eta).ensure_finite("virtual step")
}

/// Gradient of the validation meta-loss
/// `(1/n) sum_j L_Vj(Alg(theta_W, V_j^S))` with respect to every weight entry,
/// where `theta_W` is [`virtual_theta`]. Entries not touched by `train` are zero.
pub fn hypergrad(
    learner: &Learner,
    p: &ParamVector,
    train: &[&TaskData],
    val: &[&TaskData],
    w: &WeightMatrix,
    meta: &MetaConfig,
    mode: HypergradMode,
) -> Result<HyperGradient> {
    let steps = prepare(learner, p, train, w)?;
    let grads = task_grads(&steps, w, false)?;
    let theta_w = meta::meta_step(p, &grads, meta.eta).ensure_finite("virtual step")?;
    let u = validation_direction(learner, &theta_w, val, mode)?;
    assemble(&steps, w, &u, hypergrad_coef(meta.eta, train.len(), val.len()))
}

/// With the Hessian-vector term.
pub fn hypergrad_exact(
    learner: &Learner,
    p: &ParamVector,
    train: &[&TaskData],
    val: &[&TaskData],
    w: &WeightMatrix,
    meta: &MetaConfig,
) -> Result<HyperGradient> {
    hypergrad(learner, p, train, val, w, meta, HypergradMode::Exact)
}

/// Without the Hessian-vector term.
pub fn hypergrad_approx(
    learner: &Learner,
    p: &ParamVector,
    train: &[&TaskData],
    val: &[&TaskData],
    w: &WeightMatrix,
    meta: &MetaConfig,
) -> Result<HyperGradient> {
    hypergrad(learner, p, train, val, w, meta, HypergradMode::Approx)
}

fn hypergrad_coef(eta: f64, m: usize, n: usize) -> f64 {
    -eta / (m.max(1) * n.max(1)) as f64
}

/// Weights for a run, including clustering and initialization.
pub fn init_weights(cfg: &ExperimentConfig, pool: &TaskPool, learner: &Learner, theta0: &ParamVector) -> Result<WeightMatrix> {
    let r = &cfg.reweight;
    let seed = cfg.seed.wrapping_add(cfg.run.seed_offset);
    let clusters = if r.clusters > 0 {
        let mut rng = meta::stream(seed, meta::CLUSTER_STREAM);
        Some(cluster_units(&pool.train, r.scheme, r.clusters, learner, theta0, &mut rng)?)
    } else {
        None
    };
    let init = match r.weight_init {
        WeightInit::Default => default_init(r.scheme),
        WeightInit::Constant => r.init_value,
        WeightInit::UniformRandom => 0.0,
    };
    let mut w = WeightMatrix::new(r.scheme, &pool.train, clusters.as_ref(), init)?;
    if r.weight_init == WeightInit::UniformRandom {
        w.fill_uniform(&mut meta::stream(seed, meta::WEIGHT_STREAM));
    }
    Ok(w)
}

/// Mean stored weight over (ID tasks, OOD tasks, clean instances, noisy
/// instances). Absent groups report 0.
pub fn group_means(tasks: &[TaskData], w: &WeightMatrix) -> Result<[f64; 4]> {
    let mut acc = [(0.0, 0usize); 4];
    let mut add = |g: usize, v: f64| {
        acc[g].0 += v;
        acc[g].1 += 1;
    };
    for t in tasks {
        let units = w.unit_weights(t.task_id)?;
        for &v in &units {
            add(if t.is_ood { 1 } else { 0 }, v);
        }
        for k in 0..t.query_len() {
            let v = if units.len() == 1 { units[0] } else { units[k] };
            add(if t.noise_mask.get(k).copied().unwrap_or(false) { 3 } else { 2 }, v);
        }
    }
    Ok(acc.map(|(s, n)| if n == 0 { 0.0 } else { s / n as f64 }))
}

/// One line of a weight dump.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct WeightRow {
    pub unit_id: usize,
    pub cluster_id: usize,
    pub weight: f64,
    pub is_ood: bool,
    pub is_noisy: bool,
}

/// Every weighted unit with its storage entry and provenance flags.
pub fn weight_rows(tasks: &[TaskData], w: &WeightMatrix) -> Result<Vec<WeightRow>> {
    let mut rows = Vec::new();
    let mut unit = 0;
    for t in tasks {
        let entries = w.entries(t.task_id)?;
        match w.scheme() {
            Scheme::Task => {
                rows.push(WeightRow {
                    unit_id: unit,
                    cluster_id: entries[0],
                    weight: w.storage()[entries[0]],
                    is_ood: t.is_ood,
                    is_noisy: t.noisy_count() > 0,
                });
                unit += 1;
            }
            Scheme::Instance => {
                for (k, &c) in entries.iter().enumerate() {
                    rows.push(WeightRow {
                        unit_id: unit,
                        cluster_id: c,
                        weight: w.storage()[c],
                        is_ood: t.is_ood,
                        is_noisy: t.noise_mask.get(k).copied().unwrap_or(false),
                    });
                    unit += 1;
                }
            }
        }
    }
    Ok(rows)
}

/// The reweighted training loop. Per iteration: sample a training and a
/// validation batch, take the virtual step, update the batch weights by a
/// rectified hypergradient step, then update the meta-parameters with the
/// new weights.
pub fn train_rwmaml(pool: &TaskPool, cfg: &ExperimentConfig, obs: &mut dyn Observer) -> Result<TrainOutput> {
    cfg.validate()?;
    let learner = Learner::from_config(cfg);
    let theta = models::init_params(&learner.spec);
    let w = init_weights(cfg, pool, &learner, &theta)?;
    train_rwmaml_from(pool, cfg, w, obs)
}

/// [`train_rwmaml`] starting from the given weights instead of the configured
/// clustering and initialization.
pub fn train_rwmaml_from(
    pool: &TaskPool,
    cfg: &ExperimentConfig,
    mut w: WeightMatrix,
    obs: &mut dyn Observer,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if w.num_tasks() != pool.train.len() {
        return Err(Error::Alignment { expected: pool.train.len(), got: w.num_tasks() });
    }
    let learner = Learner::from_config(cfg);
    let mut theta = models::init_params(&learner.spec);
    let mut streams = meta::Streams::new(cfg);
    let total = cfg.run.iterations;
    let (m, n) = (cfg.meta.batch_m, cfg.meta.batch_n);
    let coef = hypergrad_coef(cfg.meta.eta, m, n);
    let mut records = Vec::new();
    let mut norms = Vec::with_capacity(total);
    let mut train_seconds = 0.0;

    for t in 0..total {
        let start = Instant::now();
        let idx = meta::sample_batch(&mut streams.train, pool.train.len(), m);
        let vidx = meta::sample_batch(&mut streams.val, pool.val.len(), n);
        let batch: Vec<&TaskData> = idx.iter().map(|&i| &pool.train[i]).collect();
        let val: Vec<&TaskData> = vidx.iter().map(|&j| &pool.val[j]).collect();

        let mut step = || -> Result<(f64, f64, ParamVector)> {
            let steps = prepare(&learner, &theta, &batch, &w)?;
            let losses: Vec<f64> = steps.iter().map(|s| s.graph.mean_loss()).collect();
            let train_loss = meta::mean(&losses);
            meta::check_divergence(t, train_loss)?;
            let grads = task_grads(&steps, &w, false)?;
            let theta_w = meta::meta_step(&theta, &grads, cfg.meta.eta).ensure_finite("virtual step")?;
            let u = validation_direction(&learner, &theta_w, &val, cfg.reweight.hypergrad)?;
            let hg = assemble(&steps, &w, &u, coef)?;
            weight_step_in_place(&mut w, &hg, cfg.reweight.gamma)?;
            if cfg.reweight.normalize_weights {
                w.normalize();
            }
            let grads = task_grads(&steps, &w, true)?;
            let next = meta::meta_step(&theta, &grads, cfg.meta.eta).ensure_finite("meta update")?;
            Ok((train_loss, hg.norm_sq(), next))
        };
        let (train_loss, norm_sq, next) = step().map_err(meta::as_divergence(t))?;
        theta = next;
        norms.push(norm_sq);
        train_seconds += start.elapsed().as_secs_f64();

        let iter = t + 1;
        if meta::should_record(iter, cfg.run.eval_every, total) {
            let [id, ood, clean, noisy] = group_means(&pool.train, &w)?;
            let rec = MetricRecord {
                iter,
                train_meta_loss: train_loss,
                val_meta_loss: learner.meta_loss(&theta, &pool.val)?,
                test_metric: learner.evaluate(&theta, &pool.test)?,
                hypergrad_norm_sq: norm_sq,
                mean_weight_id: id,
                mean_weight_ood: ood,
                mean_weight_clean: clean,
                mean_weight_noisy: noisy,
                wallclock_seconds: train_seconds,
            };
            meta::check_divergence(t, rec.val_meta_loss)?;
            obs.record(&rec)?;
            records.push(rec);
        }
        if meta::should_record(iter, cfg.run.dump_every, total) {
            obs.weights(iter, &w)?;
        }
    }
    Ok(TrainOutput { params: theta, weights: Some(w), records, hypergrad_norm_sq: norms, train_seconds })
}
