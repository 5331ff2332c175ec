//! Acceptance suite. Runs every criterion at its stated threshold and prints
//! one PASS/FAIL line per criterion; exits non-zero if any criterion fails.
//!
//! `RWMETA_ACCEPTANCE=1,3,9` restricts the run to the listed criteria. Run
//! directories are kept under the cargo target tmp dir for inspection.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use common::{max_rel_err, Tiny};
use rwmeta::config::{Baseline, ExperimentConfig, HypergradMode, MetaConfig, Scheme};
use rwmeta::harness::{self, vec_rel_err, RunSummary};
use rwmeta::meta::{self, MetricRecord};
use rwmeta::models::Activation;
use rwmeta::oracle::{self, FdSpec};
use rwmeta::reweight::{self, hypergrad_approx, hypergrad_exact};
use rwmeta::tasks::{build_pool, TaskKind};

const SEEDS: [u64; 3] = [0, 1, 2];
const OOD_RATIOS: [f64; 4] = [0.0, 0.3, 0.6, 0.9];
const CLUSTER_COUNTS: [usize; 4] = [10, 50, 200, 1000];

/// Sinusoid pool with linear OOD tasks: M = 1000, K = 10.
fn sine_cfg(seed: u64, ood_ratio: f64, baseline: Baseline) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.pool.m = 1000;
    cfg.pool.k_support = 10;
    cfg.pool.k_query = 10;
    cfg.pool.ood_ratio = ood_ratio;
    cfg.meta = MetaConfig { eta: 0.01, batch_m: 40, batch_n: 20 };
    cfg.reweight.gamma = 10.0;
    cfg.reweight.scheme = Scheme::Task;
    cfg.reweight.hypergrad = HypergradMode::Approx;
    cfg.run.iterations = 5000;
    cfg.run.eval_every = 1000;
    cfg.run.dump_every = 1000;
    cfg.run.baseline = baseline;
    cfg
}

/// 5-way classification, half of every query set relabelled.
fn noisy_cfg(seed: u64, baseline: Baseline) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.pool.task_kind = TaskKind::ClassifyNoise;
    cfg.pool.ways = 5;
    cfg.pool.noise_ratio = 0.5;
    cfg.adapt.alpha = 0.5;
    cfg.meta = MetaConfig { eta: 0.05, batch_m: 10, batch_n: 10 };
    cfg.reweight.scheme = Scheme::Instance;
    cfg.reweight.clusters = 200;
    cfg.reweight.gamma = 10.0;
    cfg.reweight.hypergrad = HypergradMode::Exact;
    cfg.run.iterations = 3000;
    cfg.run.eval_every = 1000;
    cfg.run.dump_every = 1000;
    cfg.run.baseline = baseline;
    cfg
}

struct Suite {
    root: PathBuf,
    runs: BTreeMap<String, RunSummary>,
}

impl Suite {
    fn run(&mut self, name: &str, mut cfg: ExperimentConfig) -> rwmeta::Result<RunSummary> {
        if let Some(s) = self.runs.get(name) {
            return Ok(s.clone());
        }
        cfg.run.out_dir = self.root.join(name).to_string_lossy().into_owned();
        let s = harness::run_experiment(&cfg)?;
        self.runs.insert(name.to_string(), s.clone());
        Ok(s)
    }
}

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

const INSTANCES: u64 = 20;

fn c1_exact_vs_fd(_: &mut Suite) -> rwmeta::Result<Verdict> {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let t = Tiny::new(seed, 0.1, Scheme::Instance);
        assert!(t.theta.dim() <= 50);
        let (tr, va) = (t.train_refs(), t.val_refs());
        let exact = hypergrad_exact(&t.learner, &t.theta, &tr, &va, &t.weights, &t.meta)?;
        let fd = oracle::fd_hypergradient(&t.learner, &t.theta, &tr, &va, &t.weights, &t.meta, FdSpec::hypergrad())?;
        worst = worst.max(max_rel_err(&exact.values, &fd.values));
    }
    Ok(verdict(worst <= 1e-3, format!("worst per-entry relative error {worst:.2e} over {INSTANCES} instances (<= 1e-3)")))
}

fn c2_approx_vs_exact(_: &mut Suite) -> rwmeta::Result<Verdict> {
    const ALPHAS: [f64; 3] = [1e-1, 1e-2, 1e-3];
    let mut bitwise = 0;
    let mut per_instance = 0;
    let mut sums = [0.0; 3];
    for seed in 0..INSTANCES {
        let t = Tiny::new(seed, 0.0, Scheme::Instance);
        let (tr, va) = (t.train_refs(), t.val_refs());
        let e = hypergrad_exact(&t.learner, &t.theta, &tr, &va, &t.weights, &t.meta)?;
        let a = hypergrad_approx(&t.learner, &t.theta, &tr, &va, &t.weights, &t.meta)?;
        bitwise += usize::from(e.values.iter().zip(&a.values).all(|(x, y)| x.to_bits() == y.to_bits()));

        let mut gaps = [0.0; 3];
        for (g, alpha) in gaps.iter_mut().zip(ALPHAS) {
            let t = Tiny::new(seed, alpha, Scheme::Instance);
            let (tr, va) = (t.train_refs(), t.val_refs());
            let e = hypergrad_exact(&t.learner, &t.theta, &tr, &va, &t.weights, &t.meta)?;
            let a = hypergrad_approx(&t.learner, &t.theta, &tr, &va, &t.weights, &t.meta)?;
            *g = vec_rel_err(&a.values, &e.values);
        }
        per_instance += usize::from(gaps[0] > gaps[1] && gaps[1] > gaps[2]);
        for (s, g) in sums.iter_mut().zip(gaps) {
            *s += g;
        }
    }
    let n = INSTANCES as usize;
    let avg = sums.map(|s| s / n as f64);
    Ok(verdict(
        bitwise == n && avg[0] > avg[1] && avg[1] > avg[2],
        format!(
            "alpha=0 bitwise equal on {bitwise}/{n}; mean relative gap at alpha 1e-1, 1e-2, 1e-3: {:.2e} {:.2e} {:.2e} \
             (monotone on {per_instance}/{n} single instances)",
            avg[0], avg[1], avg[2]
        ),
    ))
}

fn without_wallclock(rs: &[MetricRecord]) -> Vec<MetricRecord> {
    rs.iter().map(|r| MetricRecord { wallclock_seconds: 0.0, ..r.clone() }).collect()
}

fn c3_gamma_zero_is_maml(_: &mut Suite) -> rwmeta::Result<Verdict> {
    let mut cfg = sine_cfg(0, 0.6, Baseline::Maml);
    cfg.run.iterations = 100;
    cfg.run.eval_every = 10;
    let pool = build_pool(&cfg.pool, cfg.seed)?;
    let maml = meta::train_maml(&pool, &cfg, &mut ())?;
    cfg.run.baseline = Baseline::Rwmaml;
    cfg.reweight.gamma = 0.0;
    let rw = reweight::train_rwmaml(&pool, &cfg, &mut ())?;
    let same_params = rw.params.as_slice().iter().zip(maml.params.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
    let maml_recs: Vec<_> = without_wallclock(&maml.records)
        .into_iter()
        .map(|r| (r.iter, r.train_meta_loss.to_bits(), r.val_meta_loss.to_bits(), r.test_metric.to_bits()))
        .collect();
    let rw_recs: Vec<_> = without_wallclock(&rw.records)
        .into_iter()
        .map(|r| (r.iter, r.train_meta_loss.to_bits(), r.val_meta_loss.to_bits(), r.test_metric.to_bits()))
        .collect();
    let same_records = maml_recs == rw_recs;
    Ok(verdict(
        same_params && same_records,
        format!("100 iterations: parameters identical {same_params}, recorded losses identical {same_records}"),
    ))
}

fn sine_runs(s: &mut Suite, seed: u64) -> rwmeta::Result<[RunSummary; 3]> {
    Ok([
        s.run(&format!("sine_ood0.6_maml_s{seed}"), sine_cfg(seed, 0.6, Baseline::Maml))?,
        s.run(&format!("sine_ood0.6_rwmaml_s{seed}"), sine_cfg(seed, 0.6, Baseline::Rwmaml))?,
        s.run(&format!("sine_ood0.6_skyline_s{seed}"), sine_cfg(seed, 0.6, Baseline::Skyline))?,
    ])
}

fn c4_ood_mse(s: &mut Suite) -> rwmeta::Result<Verdict> {
    let (mut maml, mut rw, mut sky) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let [m, r, k] = sine_runs(s, seed)?;
        maml.push(m.final_test_metric);
        rw.push(r.final_test_metric);
        sky.push(k.final_test_metric);
    }
    let (m, r, k) = (mean(&maml), mean(&rw), mean(&sky));
    Ok(verdict(
        r <= 0.8 * m && r >= k,
        format!("test MSE rwmaml {r:.3}, maml {m:.3} (ratio {:.2} <= 0.8), skyline {k:.3} (<= rwmaml)", r / m),
    ))
}

fn c5_id_vs_ood_weights(s: &mut Suite) -> rwmeta::Result<Verdict> {
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let [_, r, _] = sine_runs(s, seed)?;
        id.push(r.mean_weight_id);
        ood.push(r.mean_weight_ood);
    }
    let (i, o) = (mean(&id), mean(&ood));
    Ok(verdict(i >= 2.0 * o, format!("mean ID weight {i:.3}, mean OOD weight {o:.3} (ratio {:.2} >= 2)", i / o)))
}

fn c6_maml_ood_trend(s: &mut Suite) -> rwmeta::Result<Verdict> {
    let mut avgs = Vec::new();
    for ratio in OOD_RATIOS {
        let mut xs = Vec::new();
        for seed in SEEDS {
            let name = format!("sine_ood{ratio}_maml_s{seed}");
            xs.push(s.run(&name, sine_cfg(seed, ratio, Baseline::Maml))?.final_test_metric);
        }
        avgs.push(mean(&xs));
    }
    // ties within 5% count as non-decreasing
    let ok = avgs.windows(2).all(|w| w[1] >= 0.95 * w[0]);
    let shown: Vec<String> = OOD_RATIOS.iter().zip(&avgs).map(|(r, a)| format!("{r}: {a:.3}")).collect();
    Ok(verdict(ok, format!("maml test MSE by OOD ratio {}", shown.join(", "))))
}

fn c7_noisy_labels(s: &mut Suite) -> rwmeta::Result<Verdict> {
    let (mut clean, mut noisy, mut rw_acc, mut maml_acc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let m = s.run(&format!("noisy_maml_s{seed}"), noisy_cfg(seed, Baseline::Maml))?;
        let r = s.run(&format!("noisy_rwmaml_s{seed}"), noisy_cfg(seed, Baseline::Rwmaml))?;
        maml_acc.push(m.final_test_metric);
        rw_acc.push(r.final_test_metric);
        clean.push(r.mean_weight_clean);
        noisy.push(r.mean_weight_noisy);
    }
    let (c, n, r, m) = (mean(&clean), mean(&noisy), mean(&rw_acc), mean(&maml_acc));
    Ok(verdict(
        c > n && r >= m,
        format!("clean weight {c:.4} vs flipped {n:.4}; test accuracy rwmaml {r:.3} vs maml {m:.3}"),
    ))
}

fn c8_nonnegative_weights(s: &mut Suite) -> rwmeta::Result<Verdict> {
    let mut dumps = 0;
    let mut lowest = f64::INFINITY;
    for r in s.runs.values() {
        dumps += r.weight_dumps;
        if let Some(m) = r.min_dumped_weight {
            lowest = lowest.min(m);
        }
    }
    if dumps == 0 {
        // nothing ran yet in a filtered invocation
        let mut cfg = sine_cfg(0, 0.6, Baseline::Rwmaml);
        cfg.run.iterations = 500;
        cfg.run.dump_every = 100;
        let r = s.run("sine_ood0.6_rwmaml_short", cfg)?;
        dumps = r.weight_dumps;
        lowest = r.min_dumped_weight.unwrap_or(f64::NAN);
    }
    Ok(verdict(lowest >= 0.0, format!("minimum over {dumps} weight dumps: {lowest:.3e}")))
}

fn c9_convex_diagnostic(_: &mut Suite) -> rwmeta::Result<Verdict> {
    const T: usize = 2000;
    // step sizes of the convergence result for horizon T, with the constants
    // L = 10, C = 1, sigma = 1 and a warm-up constant of 20 for eta
    let (l, c, sigma, k) = (10.0f64, 1.0f64, 1.0f64, 20.0f64);
    let eta = (k / T as f64).min(1.0);
    let gamma = (1.0 / l).min(c / (sigma * (T as f64).sqrt()));
    let mut cfg = sine_cfg(0, 0.6, Baseline::Rwmaml);
    cfg.model.layer_widths = vec![1, 1];
    cfg.model.activation = Activation::Relu;
    cfg.meta.eta = eta;
    cfg.reweight.gamma = gamma;
    cfg.run.iterations = T;
    cfg.run.eval_every = T;
    cfg.run.dump_every = 0;
    let pool = build_pool(&cfg.pool, cfg.seed)?;
    let out = reweight::train_rwmaml(&pool, &cfg, &mut ())?;
    let first = out.hypergrad_norm_sq[0];
    let best = out.hypergrad_norm_sq.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(verdict(
        best <= 0.5 * first,
        format!("eta {eta}, gamma {gamma:.4}: running min |grad_W L_V|^2 {best:.3e} vs iteration 1 {first:.3e} (<= 0.5x)"),
    ))
}

fn c10_wallclock(s: &mut Suite) -> rwmeta::Result<Verdict> {
    let (mut rw, mut maml) = (0.0, 0.0);
    for seed in SEEDS {
        let [m, r, _] = sine_runs(s, seed)?;
        maml += m.train_seconds;
        rw += r.train_seconds;
    }
    let ratio = rw / maml;
    Ok(verdict(ratio <= 2.5, format!("rwmaml/maml training time {ratio:.2} (<= 2.5)")))
}

fn c11_cluster_sweep(s: &mut Suite) -> rwmeta::Result<Verdict> {
    let mut base = sine_cfg(0, 0.6, Baseline::Rwmaml);
    base.run.out_dir = s.root.join("cluster_sweep").to_string_lossy().into_owned();
    let values: Vec<String> = CLUSTER_COUNTS.iter().map(|k| k.to_string()).collect();
    let rows = harness::run_sweep(&base, "reweight.clusters", &values)?;
    let best = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.final_test_metric.total_cmp(&b.1.final_test_metric))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let shown: Vec<String> = rows.iter().map(|r| format!("{}: {:.3}", r.value, r.final_test_metric)).collect();
    Ok(verdict(
        best != 0 && best + 1 != rows.len(),
        format!("test MSE by cluster count {} (best {})", shown.join(", "), rows[best].value),
    ))
}

type Criterion = fn(&mut Suite) -> rwmeta::Result<Verdict>;

fn main() -> ExitCode {
    let criteria: [(u32, &str, f64, Criterion); 11] = [
        (1, "exact hypergradient matches finite differences", 60.0, c1_exact_vs_fd),
        (2, "approximate hypergradient equals exact at alpha=0, gap shrinks with alpha", 60.0, c2_approx_vs_exact),
        (3, "gamma=0 with uniform weights reproduces MAML bit for bit", f64::INFINITY, c3_gamma_zero_is_maml),
        (4, "60% OOD sinusoids: rwmaml <= 0.8x maml and >= skyline", 900.0, c4_ood_mse),
        (5, "60% OOD sinusoids: mean ID weight >= 2x mean OOD weight", f64::INFINITY, c5_id_vs_ood_weights),
        (6, "maml test MSE non-decreasing in OOD ratio", 1200.0, c6_maml_ood_trend),
        (7, "noisy labels: clean weight > flipped weight, rwmaml accuracy >= maml", 900.0, c7_noisy_labels),
        (8, "weights non-negative at every dump", f64::INFINITY, c8_nonnegative_weights),
        (9, "convex toy: hypergradient norm running min halves", 120.0, c9_convex_diagnostic),
        (10, "rwmaml training time <= 2.5x maml", f64::INFINITY, c10_wallclock),
        (11, "cluster-count sweep is best at an interior value", 1800.0, c11_cluster_sweep),
    ];
    let only: Option<BTreeSet<u32>> = std::env::var("RWMETA_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    let mut suite = Suite { root, runs: BTreeMap::new() };

    let mut failed = 0;
    let mut ran = 0;
    for (id, name, budget, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = check(&mut suite);
        let secs = start.elapsed().as_secs_f64();
        let (passed, detail) = match result {
            Ok(v) if secs > budget => (false, format!("{} (took {secs:.0}s, budget {budget:.0}s)", v.detail)),
            Ok(v) => (v.passed, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!passed);
        println!("{} criterion {id:>2}: {name}: {detail} [{secs:.1}s]", if passed { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
