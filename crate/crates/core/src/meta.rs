//! MAML: inner adaptation, weighted meta-objectives, the meta-update and the
//! plain / skyline training loops.

use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use crate::config::{AdaptConfig, MetaConfig};
use crate::config::{Baseline, ExperimentConfig};
use crate::diffcore::{Mat, ParamVector, Tape, Var};
use crate::error::{Error, Result};
use crate::models::{self, LossKind, MlpSpec};
use crate::reweight::WeightMatrix;
use crate::tasks::{TaskData, TaskPool};

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// A model, its loss, and the inner-loop rule used to adapt it to a task.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub spec: MlpSpec,
    pub loss: LossKind,
    pub adapt: AdaptConfig,
}

impl Learner {
    pub fn new(spec: MlpSpec, loss: LossKind, adapt: AdaptConfig) -> Self {
        Learner { spec, loss, adapt }
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Learner::new(cfg.mlp_spec(), cfg.loss(), cfg.adapt)
    }

    pub fn check_task(&self, dim: usize, task: &TaskData) -> Result<()> {
        models::check_shapes(&self.spec, dim, &task.support_inputs, &task.support_targets, self.loss)?;
        models::check_shapes(&self.spec, dim, &task.query_inputs, &task.query_targets, self.loss)
    }

    /// Records `inner_steps` gradient steps on the given data starting from
    /// `theta`, so that the adapted parameters stay differentiable in `theta`.
    pub fn adapt_on(&self, tape: &mut Tape, theta: Var, inputs: &Mat, targets: &Mat) -> Var {
        let mut phi = theta;
        for _ in 0..self.adapt.inner_steps {
            let l = models::model_loss_on(tape, &self.spec, phi, inputs, targets, self.loss);
            let g = tape.grad(l, &[phi])[0];
            let step = tape.scale(g, self.adapt.alpha);
            phi = tape.sub(phi, step);
        }
        phi
    }

    /// Adapted parameter values; nothing is kept for differentiation.
    pub fn inner_adapt(&self, p: &ParamVector, inputs: &Mat, targets: &Mat) -> Result<ParamVector> {
        if inputs.rows == 0 {
            return Err(Error::Shape("empty support set".into()));
        }
        models::check_shapes(&self.spec, p.dim(), inputs, targets, self.loss)?;
        let mut phi = p.clone();
        for _ in 0..self.adapt.inner_steps {
            let mut tape = Tape::new();
            let pv = tape.param(phi.to_row());
            let l = models::model_loss_on(&mut tape, &self.spec, pv, inputs, targets, self.loss);
            tape.check_finite()?;
            let g = tape.grad_values(l, &Mat::scalar(1.0), &[pv]).remove(0);
            let g = ParamVector::from_mat(&g).ensure_finite("inner gradient")?;
            phi = phi.axpy(-self.adapt.alpha, &g);
        }
        Ok(phi)
    }

    /// Records support adaptation and the per-instance query losses.
    pub fn task_graph(&self, p: &ParamVector, task: &TaskData) -> Result<TaskGraph> {
        self.check_task(p.dim(), task)?;
        let mut tape = Tape::new();
        let theta = tape.param(p.to_row());
        let phi = self.adapt_on(&mut tape, theta, &task.support_inputs, &task.support_targets);
        let losses =
            models::instance_losses_on(&mut tape, &self.spec, phi, &task.query_inputs, &task.query_targets, self.loss);
        tape.check_finite()?;
        Ok(TaskGraph { tape, theta, phi, losses })
    }

    /// `L_i(Alg(p, support))`, one entry per query instance.
    pub fn task_query_losses(&self, p: &ParamVector, task: &TaskData) -> Result<Vec<f64>> {
        Ok(self.task_graph(p, task)?.losses().to_vec())
    }

    /// Mean query loss after adaptation, and its gradient with respect to the
    /// adapted parameters.
    pub fn adapted_query_grad(&self, p: &ParamVector, task: &TaskData) -> Result<(f64, ParamVector)> {
        let phi = self.inner_adapt(p, &task.support_inputs, &task.support_targets)?;
        models::check_shapes(&self.spec, p.dim(), &task.query_inputs, &task.query_targets, self.loss)?;
        let mut tape = Tape::new();
        let pv = tape.param(phi.to_row());
        let l = models::model_loss_on(&mut tape, &self.spec, pv, &task.query_inputs, &task.query_targets, self.loss);
        tape.check_finite()?;
        let g = tape.grad_values(l, &Mat::scalar(1.0), &[pv]).remove(0);
        Ok((tape.scalar(l), ParamVector::from_mat(&g).ensure_finite("query gradient")?))
    }

    /// Post-adaptation query loss.
    pub fn adapted_loss(&self, p: &ParamVector, task: &TaskData) -> Result<f64> {
        let phi = self.inner_adapt(p, &task.support_inputs, &task.support_targets)?;
        models::model_loss(&self.spec, &phi, &task.query_inputs, &task.query_targets, self.loss)
    }

    /// Post-adaptation test metric: MSE for regression, accuracy for classification.
    pub fn adapted_metric(&self, p: &ParamVector, task: &TaskData) -> Result<f64> {
        let phi = self.inner_adapt(p, &task.support_inputs, &task.support_targets)?;
        match self.loss {
            LossKind::Mse => models::model_loss(&self.spec, &phi, &task.query_inputs, &task.query_targets, self.loss),
            LossKind::CrossEntropy => models::accuracy(&self.spec, &phi, &task.query_inputs, &task.query_targets),
        }
    }

    /// Mean post-adaptation metric over `tasks`.
    pub fn evaluate(&self, p: &ParamVector, tasks: &[TaskData]) -> Result<f64> {
        let vals = tasks.par_iter().map(|t| self.adapted_metric(p, t)).collect::<Result<Vec<_>>>()?;
        Ok(mean(&vals))
    }

    /// Mean post-adaptation query loss over `tasks` (the unweighted meta-loss).
    pub fn meta_loss(&self, p: &ParamVector, tasks: &[TaskData]) -> Result<f64> {
        let vals = tasks.par_iter().map(|t| self.adapted_loss(p, t)).collect::<Result<Vec<_>>>()?;
        Ok(mean(&vals))
    }
}

/// The recorded computation `theta -> phi -> per-instance query losses`.
pub struct TaskGraph {
    pub tape: Tape,
    pub theta: Var,
    pub phi: Var,
    /// `K x 1` column.
    pub losses: Var,
}

impl TaskGraph {
    pub fn losses(&self) -> &[f64] {
        &self.tape.value(self.losses).data
    }

    pub fn mean_loss(&self) -> f64 {
        mean(self.losses())
    }

    /// `d/dtheta sum_k c_k l_k`, through the inner step.
    pub fn weighted_grad(&self, coefs: &[f64]) -> ParamVector {
        let seed = Mat::col(coefs.to_vec());
        let g = self.tape.grad_values(self.losses, &seed, &[self.theta]).remove(0);
        ParamVector::from_mat(&g)
    }

    /// `grad_theta l_k . v` for every instance `k`.
    pub fn directional(&self, v: &ParamVector) -> Vec<f64> {
        let dir = v.to_row();
        self.tape.jvp(&[(self.theta, &dir)], &[self.losses]).remove(0).data
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `(1/m) sum_i <w_i, L_i(Alg(p, D_i^S))>` using the effective per-instance weights.
pub fn weighted_meta_loss(learner: &Learner, p: &ParamVector, batch: &[&TaskData], w: &WeightMatrix) -> Result<f64> {
    let mut total = 0.0;
    for task in batch {
        let e = w.effective(task.task_id, task.query_len())?;
        let losses = learner.task_query_losses(p, task)?;
        total += e.iter().zip(&losses).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Gradient of [`weighted_meta_loss`] with respect to `p`.
pub fn weighted_meta_gradient(
    learner: &Learner,
    p: &ParamVector,
    batch: &[&TaskData],
    w: &WeightMatrix,
) -> Result<ParamVector> {
    let grads = batch
        .par_iter()
        .map(|task| {
            let e = w.effective(task.task_id, task.query_len())?;
            Ok(learner.task_graph(p, task)?.weighted_grad(&e))
        })
        .collect::<Result<Vec<_>>>()?;
    let sum = sum_in_order(p.dim(), &grads);
    Ok(sum.scaled(1.0 / batch.len().max(1) as f64))
}

/// `p - (eta/m) sum_i w_i . grad L_i(Alg(p, D_i^S))`.
pub fn meta_update(
    learner: &Learner,
    p: &ParamVector,
    batch: &[&TaskData],
    w: &WeightMatrix,
    meta: &MetaConfig,
) -> Result<ParamVector> {
    let grads = batch
        .par_iter()
        .map(|task| {
            let e = w.effective(task.task_id, task.query_len())?;
            Ok(learner.task_graph(p, task)?.weighted_grad(&e))
        })
        .collect::<Result<Vec<_>>>()?;
    meta_step(p, &grads, meta.eta).ensure_finite("meta update")
}

pub(crate) fn sum_in_order(dim: usize, grads: &[ParamVector]) -> ParamVector {
    let mut sum = vec![0.0; dim];
    for g in grads {
        for (s, v) in sum.iter_mut().zip(g.as_slice()) {
            *s += v;
        }
    }
    ParamVector::new(sum)
}

/// `p - (eta/m) sum_i g_i`, summed in batch order.
pub(crate) fn meta_step(p: &ParamVector, grads: &[ParamVector], eta: f64) -> ParamVector {
    if grads.is_empty() {
        return p.clone();
    }
    let sum = sum_in_order(p.dim(), grads);
    p.axpy(-(eta / grads.len() as f64), &sum)
}

/// One row of the per-run metrics file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricRecord {
    pub iter: usize,
    pub train_meta_loss: f64,
    pub val_meta_loss: f64,
    pub test_metric: f64,
    pub hypergrad_norm_sq: f64,
    pub mean_weight_id: f64,
    pub mean_weight_ood: f64,
    pub mean_weight_clean: f64,
    pub mean_weight_noisy: f64,
    pub wallclock_seconds: f64,
}

/// Receives metric records and weight snapshots while a run progresses.
pub trait Observer {
    fn record(&mut self, _rec: &MetricRecord) -> Result<()> {
        Ok(())
    }

    fn weights(&mut self, _iter: usize, _w: &WeightMatrix) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ParamVector,
    pub weights: Option<WeightMatrix>,
    pub records: Vec<MetricRecord>,
    /// Squared norm of the validation hypergradient at every iteration
    /// (empty for plain MAML).
    pub hypergrad_norm_sq: Vec<f64>,
    /// Time spent in training iterations, excluding evaluation.
    pub train_seconds: f64,
}

/// Independent random streams for one run.
pub(crate) struct Streams {
    pub train: ChaCha8Rng,
    pub val: ChaCha8Rng,
}

pub(crate) const TRAIN_STREAM: u64 = 1;
pub(crate) const VAL_STREAM: u64 = 2;
pub(crate) const WEIGHT_STREAM: u64 = 3;
pub(crate) const CLUSTER_STREAM: u64 = 4;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Streams {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let s = cfg.seed.wrapping_add(cfg.run.seed_offset);
        Streams { train: stream(s, TRAIN_STREAM), val: stream(s, VAL_STREAM) }
    }
}

/// Uniform sample of `size` distinct indices in `0..len`.
pub fn sample_batch(rng: &mut ChaCha8Rng, len: usize, size: usize) -> Vec<usize> {
    index::sample(rng, len, size.min(len)).into_vec()
}

/// Training pool with the ground-truth corrupt data removed: OOD tasks, or
/// noise-masked query instances (tasks left without query instances are dropped).
pub fn skyline_pool(pool: &TaskPool) -> TaskPool {
    if pool.ood_count() > 0 {
        return pool.without_ood();
    }
    let mut out = pool.without_noisy();
    out.train.retain(|t| t.query_len() > 0);
    for (i, t) in out.train.iter_mut().enumerate() {
        t.task_id = i;
    }
    out
}

pub(crate) fn as_divergence(iter: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFiniteValue { .. } => Error::Divergence { iter, loss: f64::INFINITY },
        e => e,
    }
}

pub(crate) fn check_divergence(iter: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Divergence { iter, loss });
    }
    Ok(())
}

pub(crate) fn should_record(iter: usize, every: usize, total: usize) -> bool {
    iter == total || (every > 0 && iter.is_multiple_of(every))
}

/// Plain MAML (uniform weights `1/K`), or the skyline when
/// `run.baseline = skyline`.
pub fn train_maml(pool: &TaskPool, cfg: &ExperimentConfig, obs: &mut dyn Observer) -> Result<TrainOutput> {
    cfg.validate()?;
    let filtered;
    let pool = if cfg.run.baseline == Baseline::Skyline {
        filtered = skyline_pool(pool);
        &filtered
    } else {
        pool
    };
    if pool.train.len() < cfg.meta.batch_m {
        return Err(Error::config("meta.batch_m", "larger than the (filtered) training pool"));
    }
    let learner = Learner::from_config(cfg);
    let mut theta = models::init_params(&learner.spec);
    let mut streams = Streams::new(cfg);
    let total = cfg.run.iterations;
    let mut records = Vec::new();
    let mut train_seconds = 0.0;

    for t in 0..total {
        let start = Instant::now();
        let idx = sample_batch(&mut streams.train, pool.train.len(), cfg.meta.batch_m);
        let graphs = idx
            .par_iter()
            .map(|&i| learner.task_graph(&theta, &pool.train[i]))
            .collect::<Result<Vec<_>>>()
            .map_err(as_divergence(t))?;
        let train_loss = mean(&graphs.iter().map(TaskGraph::mean_loss).collect::<Vec<_>>());
        check_divergence(t, train_loss)?;
        let grads: Vec<ParamVector> = graphs
            .par_iter()
            .map(|g| {
                let k = g.losses().len();
                g.weighted_grad(&vec![1.0 / k as f64; k])
            })
            .collect();
        theta = meta_step(&theta, &grads, cfg.meta.eta).ensure_finite("meta update").map_err(as_divergence(t))?;
        train_seconds += start.elapsed().as_secs_f64();

        let iter = t + 1;
        if should_record(iter, cfg.run.eval_every, total) {
            let rec = MetricRecord {
                iter,
                train_meta_loss: train_loss,
                val_meta_loss: learner.meta_loss(&theta, &pool.val)?,
                test_metric: learner.evaluate(&theta, &pool.test)?,
                wallclock_seconds: train_seconds,
                ..MetricRecord::default()
            };
            check_divergence(t, rec.val_meta_loss)?;
            obs.record(&rec)?;
            records.push(rec);
        }
    }
    Ok(TrainOutput { params: theta, weights: None, records, hypergrad_norm_sq: Vec::new(), train_seconds })
}
