use rand::Rng;

pub use crate::config::Scheme;
use crate::error::{Error, Result};
use crate::tasks::TaskData;

use super::cluster::ClusterAssignment;

/// Persistent weights over the training pool.
///
/// Query instance `k` of training task `i` reads storage entry `index[i][k]`
/// and contributes with effective weight `scale[i] * storage[index[i][k]]`.
/// The task scheme maps all of a task's instances to one entry with scale
/// `1/K` (the task loss is the mean over its query instances); the instance
/// scheme uses scale 1.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    storage: Vec<f64>,
    scheme: Scheme,
    index: Vec<Vec<usize>>,
    scale: Vec<f64>,
}

/// Gradient of the validation meta-loss with respect to each storage entry.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperGradient {
    pub values: Vec<f64>,
}

impl HyperGradient {
    pub fn zeros(len: usize) -> Self {
        HyperGradient { values: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl WeightMatrix {
    /// Weights for `tasks`, one entry per unit or per cluster of units, all
    /// set to `init`.
    pub fn new(scheme: Scheme, tasks: &[TaskData], clusters: Option<&ClusterAssignment>, init: f64) -> Result<Self> {
        let units = match scheme {
            Scheme::Task => tasks.len(),
            Scheme::Instance => tasks.iter().map(TaskData::query_len).sum(),
        };
        let (entries, label) = match clusters {
            Some(c) => {
                if c.labels.len() != units {
                    return Err(Error::Alignment { expected: units, got: c.labels.len() });
                }
                (c.k, c.labels.clone())
            }
            None => (units, (0..units).collect()),
        };
        let mut index = Vec::with_capacity(tasks.len());
        let mut scale = Vec::with_capacity(tasks.len());
        let mut unit = 0;
        for t in tasks {
            let k = t.query_len();
            match scheme {
                Scheme::Task => {
                    index.push(vec![label[unit]; k]);
                    scale.push(1.0 / k as f64);
                    unit += 1;
                }
                Scheme::Instance => {
                    index.push(label[unit..unit + k].to_vec());
                    scale.push(1.0);
                    unit += k;
                }
            }
        }
        Self::from_parts(scheme, index, scale, vec![init; entries])
    }

    pub fn from_parts(scheme: Scheme, index: Vec<Vec<usize>>, scale: Vec<f64>, storage: Vec<f64>) -> Result<Self> {
        if index.len() != scale.len() {
            return Err(Error::Alignment { expected: index.len(), got: scale.len() });
        }
        if let Some(&bad) = index.iter().flatten().find(|&&c| c >= storage.len()) {
            return Err(Error::Alignment { expected: storage.len(), got: bad + 1 });
        }
        Ok(WeightMatrix { storage, scheme, index, scale })
    }

    pub fn fill_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for w in &mut self.storage {
            *w = rng.random_range(0.0..1.0);
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn num_entries(&self) -> usize {
        self.storage.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.index.len()
    }

    pub fn storage(&self) -> &[f64] {
        &self.storage
    }

    pub fn storage_mut(&mut self) -> &mut [f64] {
        &mut self.storage
    }

    pub fn min(&self) -> f64 {
        self.storage.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Storage indices of the query instances of `task_id`.
    pub fn entries(&self, task_id: usize) -> Result<&[usize]> {
        self.index
            .get(task_id)
            .map(Vec::as_slice)
            .ok_or(Error::WeightLookup { task_id, instance: 0 })
    }

    pub fn entry(&self, task_id: usize, instance: usize) -> Result<usize> {
        self.entries(task_id)?.get(instance).copied().ok_or(Error::WeightLookup { task_id, instance })
    }

    pub fn unit_scale(&self, task_id: usize) -> Result<f64> {
        self.scale.get(task_id).copied().ok_or(Error::WeightLookup { task_id, instance: 0 })
    }

    /// Effective per-instance weights of a task with `k` query instances.
    pub fn effective(&self, task_id: usize, k: usize) -> Result<Vec<f64>> {
        let entries = self.entries(task_id)?;
        if entries.len() < k {
            return Err(Error::WeightLookup { task_id, instance: entries.len() });
        }
        let s = self.scale[task_id];
        Ok(entries[..k].iter().map(|&c| s * self.storage[c]).collect())
    }

    /// The single entry shared by all of a task's instances, if there is one.
    pub fn shared_entry(&self, task_id: usize) -> Result<Option<usize>> {
        let e = self.entries(task_id)?;
        Ok(match e.first() {
            Some(&c) if e.iter().all(|&x| x == c) => Some(c),
            _ => None,
        })
    }

    /// Stored weight seen by each unit (task or instance) of the given tasks,
    /// in task-major order.
    pub fn unit_weights(&self, task_id: usize) -> Result<Vec<f64>> {
        let e = self.entries(task_id)?;
        Ok(match self.scheme {
            Scheme::Task => vec![self.storage[e[0]]],
            Scheme::Instance => e.iter().map(|&c| self.storage[c]).collect(),
        })
    }

    /// Rescales the storage to unit Euclidean norm (no-op on an all-zero vector).
    pub fn normalize(&mut self) {
        let n = self.storage.iter().map(|w| w * w).sum::<f64>().sqrt();
        if n > 0.0 {
            for w in &mut self.storage {
                *w /= n;
            }
        }
    }
}

/// `W <- max(0, W - gamma * hg)`, in place.
pub fn weight_step_in_place(w: &mut WeightMatrix, hg: &HyperGradient, gamma: f64) -> Result<()> {
    if hg.len() != w.num_entries() {
        return Err(Error::Alignment { expected: w.num_entries(), got: hg.len() });
    }
    if let Some(node) = hg.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { node, op: "hypergradient" });
    }
    for (x, g) in w.storage.iter_mut().zip(&hg.values) {
        *x = (*x - gamma * g).max(0.0);
    }
    Ok(())
}

/// Descent step on the weights followed by rectification.
pub fn weight_step(w: &WeightMatrix, hg: &HyperGradient, gamma: f64) -> Result<WeightMatrix> {
    let mut out = w.clone();
    weight_step_in_place(&mut out, hg, gamma)?;
    Ok(out)
}
