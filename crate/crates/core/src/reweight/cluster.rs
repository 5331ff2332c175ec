//! k-means weight sharing over tasks or query instances.

use rand::Rng;
use rayon::prelude::*;

use crate::diffcore::{Mat, ParamVector};
use crate::error::{Error, Result};
use crate::meta::Learner;
use crate::tasks::TaskData;

use super::weights::Scheme;

pub const MAX_LLOYD_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Cluster id per unit.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

impl ClusterAssignment {
    /// Sum of squared distances from each point to its centroid.
    pub fn inertia(&self, points: &[Vec<f64>]) -> f64 {
        points.iter().zip(&self.labels).map(|(p, &c)| sq_dist(p, &self.centroids[c])).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(p, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// Lloyd iterations from a k-means++ seeding. Empty clusters keep their
/// previous centroid.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<ClusterAssignment> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::config("reweight.clusters", format!("need 1 <= k <= {n} units, got {k}")));
    }
    if k == n {
        return Ok(ClusterAssignment { k, labels: (0..n).collect(), centroids: points.to_vec() });
    }

    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let dim = points[0].len();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITERS {
        let next: Vec<usize> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        if next == labels {
            break;
        }
        labels = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(ClusterAssignment { k, labels, centroids })
}

/// Column-wise z-scores; constant columns become zero.
pub fn standardize(points: &mut [Vec<f64>]) {
    let Some(dim) = points.first().map(Vec::len) else { return };
    let n = points.len() as f64;
    for j in 0..dim {
        let mean = points.iter().map(|p| p[j]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for p in points.iter_mut() {
            p[j] = if sd > 0.0 { (p[j] - mean) / sd } else { 0.0 };
        }
    }
}

fn moments(m: &Mat, out: &mut Vec<f64>) {
    for c in 0..m.cols {
        let col: Vec<f64> = (0..m.rows).map(|r| m.at(r, c)).collect();
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        out.push(mean);
        out.push(sd);
        out.push(col.iter().copied().fold(f64::INFINITY, f64::min));
        out.push(col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
}

/// Mean, std, min and max of every column of the support and query inputs
/// and targets.
pub fn task_features(task: &TaskData) -> Vec<f64> {
    let mut f = Vec::new();
    moments(&task.support_inputs, &mut f);
    moments(&task.support_targets, &mut f);
    moments(&task.query_inputs, &mut f);
    moments(&task.query_targets, &mut f);
    f
}

/// Per query instance: input coordinates, target, and the loss of the model
/// adapted from `theta0` on the task's support set.
pub fn instance_features(learner: &Learner, theta0: &ParamVector, task: &TaskData) -> Result<Vec<Vec<f64>>> {
    let losses = learner.task_query_losses(theta0, task)?;
    Ok((0..task.query_len())
        .map(|k| {
            let mut f: Vec<f64> = (0..task.query_inputs.cols).map(|c| task.query_inputs.at(k, c)).collect();
            f.extend((0..task.query_targets.cols).map(|c| task.query_targets.at(k, c)));
            f.push(losses[k]);
            f
        })
        .collect())
}

/// Standardized feature vectors for every weighted unit, task-major.
pub fn unit_features(tasks: &[TaskData], scheme: Scheme, learner: &Learner, theta0: &ParamVector) -> Result<Vec<Vec<f64>>> {
    let mut pts = match scheme {
        Scheme::Task => tasks.iter().map(task_features).collect(),
        Scheme::Instance => tasks
            .par_iter()
            .map(|t| instance_features(learner, theta0, t))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect::<Vec<_>>(),
    };
    standardize(&mut pts);
    Ok(pts)
}

/// Clusters the training tasks (task scheme) or their query instances
/// (instance scheme) into `k` weight-sharing groups.
pub fn cluster_units<R: Rng + ?Sized>(
    tasks: &[TaskData],
    scheme: Scheme,
    k: usize,
    learner: &Learner,
    theta0: &ParamVector,
    rng: &mut R,
) -> Result<ClusterAssignment> {
    let pts = unit_features(tasks, scheme, learner, theta0)?;
    kmeans(&pts, k, rng)
}
