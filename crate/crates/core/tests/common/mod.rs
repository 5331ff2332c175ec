#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rwmeta::config::{AdaptConfig, MetaConfig, Scheme};
use rwmeta::diffcore::ParamVector;
use rwmeta::meta::Learner;
use rwmeta::models::{self, Activation, LossKind, MlpSpec};
use rwmeta::reweight::WeightMatrix;
use rwmeta::tasks::{sample_sine_task, TaskData};

/// A small tanh network and a handful of sine tasks.
pub struct Tiny {
    pub learner: Learner,
    pub theta: ParamVector,
    pub train: Vec<TaskData>,
    pub val: Vec<TaskData>,
    pub weights: WeightMatrix,
    pub meta: MetaConfig,
}

impl Tiny {
    pub fn new(seed: u64, alpha: f64, scheme: Scheme) -> Tiny {
        Tiny::sized(seed, alpha, scheme, 2, 2, 3)
    }

    pub fn sized(seed: u64, alpha: f64, scheme: Scheme, m: usize, n: usize, k: usize) -> Tiny {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = MlpSpec::new(vec![1, 8, 1], Activation::Tanh);
        spec.init_seed = seed;
        let learner = Learner::new(spec, LossKind::Mse, AdaptConfig { alpha, inner_steps: 1 });
        let theta = models::init_params(&learner.spec);
        let mut train: Vec<TaskData> = (0..m).map(|_| sample_sine_task(&mut rng, k, k)).collect();
        for (i, t) in train.iter_mut().enumerate() {
            t.task_id = i;
        }
        let mut val: Vec<TaskData> = (0..n).map(|_| sample_sine_task(&mut rng, k, k)).collect();
        for (j, t) in val.iter_mut().enumerate() {
            t.task_id = j;
        }
        let mut weights = WeightMatrix::new(scheme, &train, None, 0.0).unwrap();
        weights.fill_uniform(&mut rng);
        Tiny { learner, theta, train, val, weights, meta: MetaConfig { eta: 0.5, batch_m: m, batch_n: n } }
    }

    pub fn train_refs(&self) -> Vec<&TaskData> {
        self.train.iter().collect()
    }

    pub fn val_refs(&self) -> Vec<&TaskData> {
        self.val.iter().collect()
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}
