//! Run directories, metrics files, sweeps and the gradient-check report.

use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Baseline, ExperimentConfig, MetaConfig, Scheme};
use crate::diffcore::{self, ParamVector, Tape, Var};
use crate::error::{Error, Result};
use crate::meta::{self, Learner, MetricRecord, Observer, TrainOutput};
use crate::models;
use crate::oracle::{self, FdSpec};
use crate::reweight::{self, HyperGradient, WeightMatrix};
use crate::tasks::{build_pool, TaskData, TaskPool};

pub const METRICS_HEADER: [&str; 10] = [
    "iter",
    "train_meta_loss",
    "val_meta_loss",
    "test_metric",
    "hypergrad_norm_sq",
    "mean_weight_id",
    "mean_weight_ood",
    "mean_weight_clean",
    "mean_weight_noisy",
    "wallclock_seconds",
];

fn record_fields(r: &MetricRecord) -> [String; 10] {
    [
        r.iter.to_string(),
        r.train_meta_loss.to_string(),
        r.val_meta_loss.to_string(),
        r.test_metric.to_string(),
        r.hypergrad_norm_sq.to_string(),
        r.mean_weight_id.to_string(),
        r.mean_weight_ood.to_string(),
        r.mean_weight_clean.to_string(),
        r.mean_weight_noisy.to_string(),
        r.wallclock_seconds.to_string(),
    ]
}

/// Reads a metrics file back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let f = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("metrics column {i} in {}", path.display())))
        };
        out.push(MetricRecord {
            iter: f(0)? as usize,
            train_meta_loss: f(1)?,
            val_meta_loss: f(2)?,
            test_metric: f(3)?,
            hypergrad_norm_sq: f(4)?,
            mean_weight_id: f(5)?,
            mean_weight_ood: f(6)?,
            mean_weight_clean: f(7)?,
            mean_weight_noisy: f(8)?,
            wallclock_seconds: f(9)?,
        });
    }
    Ok(out)
}

/// Streams metrics and weight dumps into a run directory as training runs.
struct RunWriter<'a> {
    dir: PathBuf,
    metrics: csv::Writer<File>,
    tasks: &'a [TaskData],
    min_dumped_weight: Option<f64>,
    dumps: usize,
}

impl<'a> RunWriter<'a> {
    fn new(dir: &Path, tasks: &'a [TaskData]) -> Result<Self> {
        let mut metrics = csv::Writer::from_path(dir.join("metrics.csv"))?;
        metrics.write_record(METRICS_HEADER)?;
        metrics.flush()?;
        Ok(RunWriter { dir: dir.to_path_buf(), metrics, tasks, min_dumped_weight: None, dumps: 0 })
    }
}

impl Observer for RunWriter<'_> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        self.metrics.write_record(record_fields(rec))?;
        self.metrics.flush()?;
        Ok(())
    }

    fn weights(&mut self, iter: usize, w: &WeightMatrix) -> Result<()> {
        let dir = self.dir.join("weights");
        fs::create_dir_all(&dir)?;
        let mut wr = csv::Writer::from_path(dir.join(format!("iter_{iter:06}.csv")))?;
        for row in reweight::weight_rows(self.tasks, w)? {
            wr.serialize(row)?;
        }
        wr.flush()?;
        let m = w.min();
        self.min_dumped_weight = Some(self.min_dumped_weight.map_or(m, |x| x.min(m)));
        self.dumps += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamsFile {
    pub dim: usize,
    pub values: Vec<f64>,
}

pub fn write_params(path: &Path, p: &ParamVector) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer(f, &ParamsFile { dim: p.dim(), values: p.as_slice().to_vec() })?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<ParamVector> {
    let pf: ParamsFile = serde_json::from_reader(File::open(path)?)?;
    if pf.values.len() != pf.dim {
        return Err(Error::Format(format!("params file declares dim {} but has {}", pf.dim, pf.values.len())));
    }
    Ok(ParamVector::new(pf.values))
}

/// What a finished (or diverged) run reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub baseline: Baseline,
    pub iterations: usize,
    pub final_test_metric: f64,
    pub final_val_meta_loss: f64,
    pub mean_weight_id: f64,
    pub mean_weight_ood: f64,
    pub mean_weight_clean: f64,
    pub mean_weight_noisy: f64,
    pub train_seconds: f64,
    pub weight_dumps: usize,
    /// Smallest weight over all dumps, if any were written.
    pub min_dumped_weight: Option<f64>,
    pub diverged_at: Option<usize>,
}

fn write_series(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    wr.write_record(header)?;
    for r in rows {
        wr.write_record(r.iter().map(f64::to_string))?;
    }
    wr.flush()?;
    Ok(())
}

/// Per-figure series: test metric, group weight means and hypergradient norm
/// against iteration, and the final weight histogram per group.
fn write_plot_data(dir: &Path, out: &TrainOutput, tasks: &[TaskData]) -> Result<()> {
    let dir = dir.join("plot_data");
    fs::create_dir_all(&dir)?;
    let recs = &out.records;
    write_series(
        &dir.join("test_metric.csv"),
        &["iter", "test_metric", "val_meta_loss"],
        recs.iter().map(|r| vec![r.iter as f64, r.test_metric, r.val_meta_loss]),
    )?;
    if out.weights.is_none() {
        return Ok(());
    }
    write_series(
        &dir.join("weight_means.csv"),
        &["iter", "mean_weight_id", "mean_weight_ood", "mean_weight_clean", "mean_weight_noisy"],
        recs.iter()
            .map(|r| vec![r.iter as f64, r.mean_weight_id, r.mean_weight_ood, r.mean_weight_clean, r.mean_weight_noisy]),
    )?;
    write_series(
        &dir.join("hypergrad_norm_sq.csv"),
        &["iter", "hypergrad_norm_sq", "running_min"],
        out.hypergrad_norm_sq.iter().enumerate().scan(f64::INFINITY, |lo, (i, &v)| {
            *lo = lo.min(v);
            Some(vec![(i + 1) as f64, v, *lo])
        }),
    )?;
    if let Some(w) = &out.weights {
        let rows = reweight::weight_rows(tasks, w)?;
        let hi = rows.iter().map(|r| r.weight).fold(0.0, f64::max).max(1e-12);
        const BINS: usize = 20;
        let mut counts = vec![[0.0; 4]; BINS];
        for r in &rows {
            let b = ((r.weight / hi * BINS as f64) as usize).min(BINS - 1);
            counts[b][if r.is_ood { 1 } else { 0 }] += 1.0;
            counts[b][if r.is_noisy { 3 } else { 2 }] += 1.0;
        }
        write_series(
            &dir.join("weight_histogram.csv"),
            &["bin_lo", "bin_hi", "count_id", "count_ood", "count_clean", "count_noisy"],
            counts.iter().enumerate().map(|(b, c)| {
                let lo = hi * b as f64 / BINS as f64;
                vec![lo, lo + hi / BINS as f64, c[0], c[1], c[2], c[3]]
            }),
        )?;
    }
    Ok(())
}

/// Builds the pool from the config and runs it; see [`run_experiment_on`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let pool = build_pool(&cfg.pool, cfg.seed)?;
    run_experiment_on(&pool, cfg)
}

/// Runs one experiment into `cfg.run.out_dir`: the config copy, metrics,
/// weight dumps, final parameters, plot data and a summary. On divergence
/// the files written so far are kept and the error is returned.
pub fn run_experiment_on(pool: &TaskPool, cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = PathBuf::from(&cfg.run.out_dir);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_flat_string())?;
    let mut writer = RunWriter::new(&dir, &pool.train)?;
    let result = match cfg.run.baseline {
        Baseline::Maml | Baseline::Skyline => meta::train_maml(pool, cfg, &mut writer),
        Baseline::Rwmaml => reweight::train_rwmaml(pool, cfg, &mut writer),
    };
    let out = match result {
        Ok(out) => out,
        Err(Error::Divergence { iter, loss }) => {
            let summary = RunSummary {
                baseline: cfg.run.baseline,
                iterations: iter,
                final_test_metric: f64::NAN,
                final_val_meta_loss: f64::NAN,
                mean_weight_id: 0.0,
                mean_weight_ood: 0.0,
                mean_weight_clean: 0.0,
                mean_weight_noisy: 0.0,
                train_seconds: 0.0,
                weight_dumps: writer.dumps,
                min_dumped_weight: writer.min_dumped_weight,
                diverged_at: Some(iter),
            };
            fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            return Err(Error::Divergence { iter, loss });
        }
        Err(e) => return Err(e),
    };
    write_params(&dir.join("params.json"), &out.params)?;
    write_plot_data(&dir, &out, &pool.train)?;
    let last = out.records.last().cloned().unwrap_or_default();
    let summary = RunSummary {
        baseline: cfg.run.baseline,
        iterations: cfg.run.iterations,
        final_test_metric: last.test_metric,
        final_val_meta_loss: last.val_meta_loss,
        mean_weight_id: last.mean_weight_id,
        mean_weight_ood: last.mean_weight_ood,
        mean_weight_clean: last.mean_weight_clean,
        mean_weight_noisy: last.mean_weight_noisy,
        train_seconds: out.train_seconds,
        weight_dumps: writer.dumps,
        min_dumped_weight: writer.min_dumped_weight,
        diverged_at: None,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub final_test_metric: f64,
    pub final_val_meta_loss: f64,
    pub mean_weight_id: f64,
    pub mean_weight_ood: f64,
    pub mean_weight_clean: f64,
    pub mean_weight_noisy: f64,
    pub train_seconds: f64,
}

/// One run per value of `axis` (a dotted config key), each in
/// `<out_dir>/<axis>=<value>`. All runs share the base seed and streams, so
/// they differ only in the swept value.
/// Writes `sweep_summary.csv` into `out_dir`; when the axis is
/// `run.baseline` and both `maml` and `rwmaml` ran, also `wallclock_ratio.txt`.
pub fn run_sweep(base: &ExperimentConfig, axis: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    let root = PathBuf::from(&base.run.out_dir);
    fs::create_dir_all(&root)?;
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.with_overrides(&[format!("{axis}={v}")])?;
        cfg.run.out_dir = root.join(format!("{axis}={v}")).to_string_lossy().into_owned();
        let s = run_experiment(&cfg)?;
        rows.push(SweepRow {
            value: v.clone(),
            final_test_metric: s.final_test_metric,
            final_val_meta_loss: s.final_val_meta_loss,
            mean_weight_id: s.mean_weight_id,
            mean_weight_ood: s.mean_weight_ood,
            mean_weight_clean: s.mean_weight_clean,
            mean_weight_noisy: s.mean_weight_noisy,
            train_seconds: s.train_seconds,
        });
    }
    let mut wr = csv::Writer::from_path(root.join("sweep_summary.csv"))?;
    if rows.is_empty() {
        wr.write_record(["value", "final_test_metric"])?;
    }
    for r in &rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    if axis == "run.baseline" {
        let secs = |name: &str| rows.iter().find(|r| r.value == name).map(|r| r.train_seconds);
        if let (Some(rw), Some(ml)) = (secs("rwmaml"), secs("maml")) {
            fs::write(root.join("wallclock_ratio.txt"), format!("{}\n", rw / ml))?;
        }
    }
    Ok(rows)
}

/// Evaluates stored parameters on the config's test tasks.
pub fn eval(cfg: &ExperimentConfig, params: &ParamVector) -> Result<f64> {
    cfg.validate()?;
    let pool = build_pool(&cfg.pool, cfg.seed)?;
    let learner = Learner::from_config(cfg);
    if params.dim() != learner.spec.num_params() {
        return Err(Error::Shape(format!("params have dim {}, model needs {}", params.dim(), learner.spec.num_params())));
    }
    learner.evaluate(params, &pool.test)
}

// ---- gradient checks ----

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &'static str, error: f64, tolerance: f64) {
        self.checks.push(CheckResult { name, error, tolerance, passed: error <= tolerance });
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{tag} {:<26} error {:.3e} (tolerance {:.1e})", c.name, c.error, c.tolerance)?;
        }
        write!(f, "{}", if self.passed() { "all checks passed" } else { "some checks FAILED" })
    }
}

/// Signature shared by the hypergradient routines.
pub type HypergradFn =
    dyn Fn(&Learner, &ParamVector, &[&TaskData], &[&TaskData], &WeightMatrix, &MetaConfig) -> Result<HyperGradient> + Sync;

/// `|a - b| / max(|a|, |b|)` over whole vectors (infinity norms).
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Largest per-entry `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn entry_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / x.abs().max(y.abs()).max(1e-12)))
}

/// First `batch_m` training and `batch_n` validation tasks, renumbered.
fn check_batches(pool: &TaskPool, cfg: &ExperimentConfig) -> (Vec<TaskData>, Vec<TaskData>) {
    let take = |ts: &[TaskData], n: usize| {
        ts.iter()
            .take(n)
            .enumerate()
            .map(|(i, t)| TaskData { task_id: i, ..t.clone() })
            .collect::<Vec<_>>()
    };
    (take(&pool.train, cfg.meta.batch_m), take(&pool.val, cfg.meta.batch_n))
}

pub fn gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckReport> {
    gradcheck_with(cfg, &reweight::hypergrad_approx)
}

/// Runs the oracle comparisons on one batch drawn from the configured pool,
/// using `approx` as the first-order hypergradient under test.
pub fn gradcheck_with(cfg: &ExperimentConfig, approx: &HypergradFn) -> Result<GradcheckReport> {
    cfg.validate()?;
    if cfg.adapt.inner_steps != 1 {
        return Err(Error::UnsupportedConfig("gradcheck needs adapt.inner_steps = 1".into()));
    }
    let pool = build_pool(&cfg.pool, cfg.seed)?;
    let learner = Learner::from_config(cfg);
    let spec = &learner.spec;
    if spec.num_params() > oracle::MAX_FD_DIM {
        return Err(Error::UnsupportedConfig(format!("model has more than {} parameters", oracle::MAX_FD_DIM)));
    }
    let (train, val) = check_batches(&pool, cfg);
    let (tr, va): (Vec<&TaskData>, Vec<&TaskData>) = (train.iter().collect(), val.iter().collect());
    let theta = models::init_params(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = WeightMatrix::new(Scheme::Instance, &train, None, 0.0)?;
    if w.num_entries() > oracle::MAX_FD_ENTRIES {
        return Err(Error::UnsupportedConfig(format!(
            "{} weight entries exceed the oracle limit of {}",
            w.num_entries(),
            oracle::MAX_FD_ENTRIES
        )));
    }
    w.fill_uniform(&mut rng);
    let meta = cfg.meta;
    let mut report = GradcheckReport::default();

    // first and second order on one support loss
    let t0 = &train[0];
    let support = |tape: &mut Tape, p: Var| {
        models::model_loss_on(tape, spec, p, &t0.support_inputs, &t0.support_targets, learner.loss)
    };
    let g = diffcore::gradient(&support, &theta)?;
    let manual = |x: &[f64]| oracle::mean_loss(spec, x, &t0.support_inputs, &t0.support_targets, learner.loss);
    let fd = oracle::fd_gradient(manual, theta.as_slice(), FdSpec::first_order())?;
    report.push("gradient", vec_rel_err(g.as_slice(), fd.as_slice()), 1e-5);

    let v = ParamVector::new((0..theta.dim()).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect());
    let hv = diffcore::hvp(&support, &theta, &v)?;
    let eps = FdSpec::first_order().epsilon;
    let g_at = |s: f64| {
        let x = theta.axpy(s * eps, &v);
        oracle::loss_and_grad(spec, x.as_slice(), &t0.support_inputs, &t0.support_targets, learner.loss).1
    };
    let (hi, lo) = (g_at(1.0), g_at(-1.0));
    let fd_hv: Vec<f64> = hi.iter().zip(&lo).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    report.push("hvp", vec_rel_err(hv.as_slice(), &fd_hv), 1e-4);

    let mg = meta::weighted_meta_gradient(&learner, &theta, &tr, &w)?;
    let fd_mg = oracle::fd_gradient(
        |x| oracle::weighted_meta_loss(&learner, x, &tr, &w).unwrap_or(f64::NAN),
        theta.as_slice(),
        FdSpec::first_order(),
    )?;
    report.push("meta_gradient", vec_rel_err(mg.as_slice(), fd_mg.as_slice()), 1e-4);

    // hypergradients
    let exact = reweight::hypergrad_exact(&learner, &theta, &tr, &va, &w, &meta)?;
    let fd_hg = oracle::fd_hypergradient(&learner, &theta, &tr, &va, &w, &meta, FdSpec::hypergrad())?;
    report.push("hypergrad_exact_vs_fd", entry_rel_err(&exact.values, &fd_hg.values), 1e-3);

    let mut flat = learner.clone();
    flat.adapt.alpha = 0.0;
    let ex0 = reweight::hypergrad_exact(&flat, &theta, &tr, &va, &w, &meta)?;
    let ap0 = approx(&flat, &theta, &tr, &va, &w, &meta)?;
    let fd0 = oracle::fd_hypergradient(&flat, &theta, &tr, &va, &w, &meta, FdSpec::hypergrad())?;
    report.push("hypergrad_approx_vs_fd_a0", entry_rel_err(&ap0.values, &fd0.values), 1e-3);
    report.push("exact_eq_approx_a0", if ex0 == ap0 { 0.0 } else { 1.0 }, 0.0);

    let mut gaps = Vec::new();
    for a in [1e-1, 1e-2, 1e-3] {
        let mut l = learner.clone();
        l.adapt.alpha = a;
        let e = reweight::hypergrad_exact(&l, &theta, &tr, &va, &w, &meta)?;
        let p = approx(&l, &theta, &tr, &va, &w, &meta)?;
        gaps.push(vec_rel_err(&e.values, &p.values));
    }
    let shrinking = gaps.windows(2).all(|g| g[1] < g[0]);
    report.push("approx_gap_shrinks_with_a", if shrinking { 0.0 } else { 1.0 }, 0.0);

    // weight sharing: pairs of consecutive instances share an entry
    let units = w.num_entries();
    let labels: Vec<usize> = (0..units).map(|u| u / 2).collect();
    let k = labels.last().map_or(0, |l| l + 1);
    let assign = reweight::ClusterAssignment { k, labels, centroids: vec![Vec::new(); k] };
    let mut shared = WeightMatrix::new(Scheme::Instance, &train, Some(&assign), 0.0)?;
    shared.fill_uniform(&mut rng);
    let hg_shared = approx(&learner, &theta, &tr, &va, &shared, &meta)?;
    let (clone, origin) = oracle::unshare(&shared, &tr)?;
    let hg_clone = approx(&learner, &theta, &tr, &va, &clone, &meta)?;
    let folded = oracle::fold_unshared(&hg_clone, &origin, shared.num_entries());
    report.push("shared_eq_sum_of_clones", vec_rel_err(&hg_shared.values, &folded.values), 1e-10);

    // scheme consistency: task scheme vs per-task shared instance weights
    let mut short = cfg.clone();
    short.run.iterations = 3;
    short.run.eval_every = 3;
    short.reweight.scheme = Scheme::Task;
    short.reweight.clusters = 0;
    short.reweight.weight_init = reweight::WeightInit::Default;
    let task_w = reweight::init_weights(&short, &pool, &learner, &theta)?;
    let a = reweight::train_rwmaml_from(&pool, &short, task_w, &mut ())?;
    let b = reweight::train_rwmaml_from(&pool, &short, per_task_instance_weights(&pool.train, 1.0)?, &mut ())?;
    let same = a.params == b.params && a.weights.as_ref().map(|w| w.storage()) == b.weights.as_ref().map(|w| w.storage());
    report.push("task_eq_per_task_instance", if same { 0.0 } else { 1.0 }, 0.0);

    Ok(report)
}

/// Instance-scheme weights constrained to one shared entry per task, with
/// instance losses averaged within the task.
pub fn per_task_instance_weights(tasks: &[TaskData], init: f64) -> Result<WeightMatrix> {
    let index = tasks.iter().map(|t| vec![t.task_id; t.query_len()]).collect();
    let scale = tasks.iter().map(|t| 1.0 / t.query_len() as f64).collect();
    WeightMatrix::from_parts(Scheme::Instance, index, scale, vec![init; tasks.len()])
}

