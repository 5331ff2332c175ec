mod common;

use common::Tiny;
use proptest::prelude::*;
use rwmeta::config::{Baseline, ExperimentConfig, MetaConfig, Scheme};
use rwmeta::harness::{per_task_instance_weights, vec_rel_err};
use rwmeta::meta;
use rwmeta::models;
use rwmeta::oracle;
use rwmeta::reweight::{
    self, hypergrad_approx, hypergrad_exact, weight_step, ClusterAssignment, HyperGradient, WeightMatrix,
};
use rwmeta::tasks::build_pool;
use rwmeta::Error;

fn hg(values: Vec<f64>) -> HyperGradient {
    HyperGradient { values }
}

#[test]
fn zero_gamma_leaves_weights_unchanged() {
    let t = Tiny::new(0, 0.1, Scheme::Instance);
    let g = hg(vec![3.0; t.weights.num_entries()]);
    assert_eq!(weight_step(&t.weights, &g, 0.0).unwrap(), t.weights);
}

#[test]
fn negative_results_are_rectified_to_zero() {
    let t = Tiny::new(0, 0.1, Scheme::Task);
    let mut w = t.weights.clone();
    w.storage_mut().copy_from_slice(&[0.2, 0.2]);
    // 0.2 - 1.0 * 0.5 = -0.3 -> 0
    let out = weight_step(&w, &hg(vec![0.5, -0.5]), 1.0).unwrap();
    assert_eq!(out.storage(), &[0.0, 0.7]);
}

#[test]
fn misaligned_hypergradient_is_rejected() {
    let t = Tiny::new(0, 0.1, Scheme::Instance);
    let err = weight_step(&t.weights, &hg(vec![0.0; 2]), 0.1).unwrap_err();
    assert!(matches!(err, Error::Alignment { .. }));
}

proptest! {
    #[test]
    fn weight_step_output_is_nonnegative(
        storage in proptest::collection::vec(0.0f64..5.0, 1..20),
        grads in proptest::collection::vec(-50.0f64..50.0, 20),
        gamma in 0.0f64..10.0,
    ) {
        let n = storage.len();
        let w = WeightMatrix::from_parts(Scheme::Instance, vec![(0..n).collect()], vec![1.0], storage).unwrap();
        let out = weight_step(&w, &hg(grads[..n].to_vec()), gamma).unwrap();
        prop_assert!(out.min() >= 0.0);
        for (i, &v) in out.storage().iter().enumerate() {
            prop_assert_eq!(v, (w.storage()[i] - gamma * grads[i]).max(0.0));
        }
    }
}

#[test]
fn shared_weight_hypergradient_is_the_sum_over_its_clones() {
    let t = Tiny::sized(11, 0.1, Scheme::Instance, 3, 2, 4);
    // 12 instances in 3 clusters that cut across tasks
    let labels: Vec<usize> = (0..12).map(|u| (u * 7) % 3).collect();
    let clusters = ClusterAssignment { k: 3, labels, centroids: vec![vec![]; 3] };
    let mut w = WeightMatrix::new(Scheme::Instance, &t.train, Some(&clusters), 0.0).unwrap();
    w.storage_mut().copy_from_slice(&[0.3, 1.1, 0.6]);
    let (tr, va) = (t.train_refs(), t.val_refs());
    let shared = hypergrad_exact(&t.learner, &t.theta, &tr, &va, &w, &t.meta).unwrap();
    let (clones, origin) = oracle::unshare(&w, &tr).unwrap();
    let per_clone = hypergrad_exact(&t.learner, &t.theta, &tr, &va, &clones, &t.meta).unwrap();
    let folded = oracle::fold_unshared(&per_clone, &origin, w.num_entries());
    for (a, b) in shared.values.iter().zip(&folded.values) {
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-3), "{a} vs {b}");
    }
}

#[test]
fn approximation_gap_shrinks_linearly_in_alpha() {
    let mut gaps = Vec::new();
    for alpha in [1e-1, 1e-2, 1e-3] {
        let t = Tiny::new(21, alpha, Scheme::Instance);
        let (tr, va) = (t.train_refs(), t.val_refs());
        let e = hypergrad_exact(&t.learner, &t.theta, &tr, &va, &t.weights, &t.meta).unwrap();
        let a = hypergrad_approx(&t.learner, &t.theta, &tr, &va, &t.weights, &t.meta).unwrap();
        gaps.push(vec_rel_err(&a.values, &e.values));
    }
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    // roughly tenfold per decade once alpha is small
    let ratio = gaps[1] / gaps[2];
    assert!((5.0..20.0).contains(&ratio), "{gaps:?}");
}

#[test]
fn validation_tasks_fit_exactly_give_zero_hypergradient() {
    let t = Tiny::new(4, 0.0, Scheme::Task);
    let zero = WeightMatrix::new(Scheme::Task, &t.train, None, 0.0).unwrap();
    // with zero weights theta_W = theta; with alpha = 0 the validation tasks are scored at theta
    let mut val = t.val.clone();
    for v in &mut val {
        v.query_targets = models::predict(&t.learner.spec, &t.theta, &v.query_inputs).unwrap();
    }
    let va: Vec<_> = val.iter().collect();
    let g = hypergrad_exact(&t.learner, &t.theta, &t.train_refs(), &va, &zero, &t.meta).unwrap();
    assert!(g.values.iter().all(|&v| v == 0.0));
}

#[test]
fn untouched_entries_have_zero_hypergradient() {
    let t = Tiny::sized(5, 0.1, Scheme::Task, 4, 2, 3);
    let w = WeightMatrix::new(Scheme::Task, &t.train, None, 1.0).unwrap();
    let batch = vec![&t.train[1], &t.train[3]];
    let g = hypergrad_approx(&t.learner, &t.theta, &batch, &t.val_refs(), &w, &t.meta).unwrap();
    assert_eq!((g.values[0], g.values[2]), (0.0, 0.0));
    assert!(g.values[1] != 0.0 && g.values[3] != 0.0);
}

fn small_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.pool.m = 60;
    cfg.pool.n = 6;
    cfg.pool.m_test = 10;
    cfg.pool.ood_ratio = 0.5;
    cfg.model.layer_widths = vec![1, 10, 1];
    cfg.meta = MetaConfig { eta: 0.01, batch_m: 5, batch_n: 4 };
    cfg.run.iterations = 100;
    cfg.run.eval_every = 50;
    cfg
}

#[test]
fn zero_gamma_reproduces_maml_bitwise() {
    let mut cfg = small_cfg();
    let pool = build_pool(&cfg.pool, cfg.seed).unwrap();
    cfg.run.baseline = Baseline::Maml;
    let maml = meta::train_maml(&pool, &cfg, &mut ()).unwrap();
    cfg.run.baseline = Baseline::Rwmaml;
    cfg.reweight.gamma = 0.0;
    for scheme in [Scheme::Task, Scheme::Instance] {
        let w = per_task_instance_weights(&pool.train, 1.0).unwrap();
        let w = if scheme == Scheme::Task { WeightMatrix::new(Scheme::Task, &pool.train, None, 1.0).unwrap() } else { w };
        let rw = reweight::train_rwmaml_from(&pool, &cfg, w, &mut ()).unwrap();
        assert_eq!(rw.params, maml.params, "{scheme:?}");
        for (a, b) in rw.records.iter().zip(&maml.records) {
            assert_eq!((a.val_meta_loss, a.test_metric), (b.val_meta_loss, b.test_metric));
        }
    }
}

#[test]
fn instance_scheme_with_one_entry_per_task_matches_task_scheme() {
    let mut cfg = small_cfg();
    cfg.run.iterations = 30;
    cfg.reweight.gamma = 0.5;
    let pool = build_pool(&cfg.pool, cfg.seed).unwrap();
    cfg.reweight.scheme = Scheme::Task;
    let task = reweight::train_rwmaml(&pool, &cfg, &mut ()).unwrap();
    cfg.reweight.scheme = Scheme::Instance;
    let w = per_task_instance_weights(&pool.train, 1.0).unwrap();
    let inst = reweight::train_rwmaml_from(&pool, &cfg, w, &mut ()).unwrap();
    assert_eq!(task.params, inst.params);
    assert_eq!(task.weights.unwrap().storage(), inst.weights.unwrap().storage());
}

#[test]
fn weights_stay_nonnegative_and_group_means_are_reported() {
    let mut cfg = small_cfg();
    cfg.reweight.gamma = 5.0;
    let pool = build_pool(&cfg.pool, cfg.seed).unwrap();
    let out = reweight::train_rwmaml(&pool, &cfg, &mut ()).unwrap();
    let w = out.weights.unwrap();
    assert!(w.min() >= 0.0);
    assert_eq!(out.hypergrad_norm_sq.len(), cfg.run.iterations);
    let means = reweight::group_means(&pool.train, &w).unwrap();
    assert!(means[0] > 0.0 && means[1] >= 0.0);
    assert_eq!(means[3], 0.0);
}

#[test]
fn cluster_count_above_units_is_a_config_error() {
    let mut cfg = small_cfg();
    cfg.reweight.clusters = 61;
    let pool = build_pool(&cfg.pool, cfg.seed).unwrap();
    assert!(matches!(reweight::train_rwmaml(&pool, &cfg, &mut ()), Err(Error::Config { .. })));
}

#[test]
fn task_clusters_share_one_weight() {
    let mut cfg = small_cfg();
    cfg.reweight.clusters = 4;
    let pool = build_pool(&cfg.pool, cfg.seed).unwrap();
    let learner = meta::Learner::from_config(&cfg);
    let theta = models::init_params(&learner.spec);
    let w = reweight::init_weights(&cfg, &pool, &learner, &theta).unwrap();
    assert_eq!(w.num_entries(), 4);
    let rows = reweight::weight_rows(&pool.train, &w).unwrap();
    assert_eq!(rows.len(), 60);
    assert!(rows.iter().all(|r| r.cluster_id < 4 && r.weight == 1.0));
}

#[test]
fn instance_init_defaults_to_small_shared_value() {
    assert_eq!(reweight::default_init(Scheme::Instance), 0.005);
    assert_eq!(reweight::default_init(Scheme::Task), 1.0);
    let t = Tiny::new(0, 0.1, Scheme::Instance);
    assert_eq!(t.weights.unit_weights(0).unwrap().len(), 3);
}

#[test]
fn one_training_iteration_composes_the_public_steps() {
    for clusters in [0, 7] {
        let mut cfg = small_cfg();
        cfg.pool.task_kind = rwmeta::tasks::TaskKind::ClassifyNoise;
        cfg.pool.ood_ratio = 0.0;
        cfg.pool.noise_ratio = 0.5;
        cfg.pool.m = 20;
        cfg.pool.n = 2;
        cfg.model.layer_widths = vec![2, 6, 5];
        cfg.meta = MetaConfig { eta: 0.05, batch_m: 20, batch_n: 2 };
        cfg.reweight.scheme = Scheme::Instance;
        cfg.reweight.clusters = clusters;
        cfg.reweight.weight_init = rwmeta::config::WeightInit::UniformRandom;
        cfg.reweight.gamma = 3.0;
        cfg.run.iterations = 1;
        cfg.run.eval_every = 1;
        let pool = build_pool(&cfg.pool, cfg.seed).unwrap();
        let learner = meta::Learner::from_config(&cfg);
        let theta = models::init_params(&learner.spec);
        let w0 = reweight::init_weights(&cfg, &pool, &learner, &theta).unwrap();
        let out = reweight::train_rwmaml(&pool, &cfg, &mut ()).unwrap();

        let tr: Vec<_> = pool.train.iter().collect();
        let va: Vec<_> = pool.val.iter().collect();
        let g = hypergrad_approx(&learner, &theta, &tr, &va, &w0, &cfg.meta).unwrap();
        let w1 = weight_step(&w0, &g, cfg.reweight.gamma).unwrap();
        let theta1 = meta::meta_update(&learner, &theta, &tr, &w1, &cfg.meta).unwrap();
        assert!(vec_rel_err(out.weights.unwrap().storage(), w1.storage()) <= 1e-10);
        assert!(vec_rel_err(out.params.as_slice(), theta1.as_slice()) <= 1e-10);
    }
}
