//! Few-shot task generators and the persistent train/validation/test pool.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Mat;
use crate::error::{Error, Result};

/// One few-shot task: a support split for adaptation and a query split for
/// evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task_id: usize,
    pub support_inputs: Mat,
    pub support_targets: Mat,
    pub query_inputs: Mat,
    pub query_targets: Mat,
    pub is_ood: bool,
    /// `true` where the query label was flipped.
    pub noise_mask: Vec<bool>,
    /// `None` for regression.
    pub num_classes: Option<usize>,
}

impl TaskData {
    pub fn query_len(&self) -> usize {
        self.query_inputs.rows
    }

    pub fn support_len(&self) -> usize {
        self.support_inputs.rows
    }

    pub fn is_clean(&self) -> bool {
        !self.is_ood && !self.noise_mask.iter().any(|&b| b)
    }

    pub fn noisy_count(&self) -> usize {
        self.noise_mask.iter().filter(|&&b| b).count()
    }

    /// Copy with the noise-masked query instances dropped.
    pub fn without_noisy(&self) -> TaskData {
        let keep: Vec<usize> = (0..self.query_len()).filter(|&k| !self.noise_mask[k]).collect();
        let pick = |m: &Mat| {
            let mut data = Vec::with_capacity(keep.len() * m.cols);
            for &k in &keep {
                data.extend_from_slice(&m.data[k * m.cols..(k + 1) * m.cols]);
            }
            Mat::new(keep.len(), m.cols, data)
        };
        TaskData {
            query_inputs: pick(&self.query_inputs),
            query_targets: pick(&self.query_targets),
            noise_mask: vec![false; keep.len()],
            ..self.clone()
        }
    }
}

/// `y = amplitude * sin(x + phase)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineWave {
    pub amplitude: f64,
    pub phase: f64,
}

pub const SINE_AMPLITUDE: (f64, f64) = (0.1, 5.0);
pub const SINE_PHASE: (f64, f64) = (0.0, std::f64::consts::PI);
pub const INPUT_RANGE: (f64, f64) = (-5.0, 5.0);
pub const LINEAR_COEF_RANGE: (f64, f64) = (-3.0, 3.0);
pub const CLASS_CENTER_RANGE: (f64, f64) = (-4.0, 4.0);
pub const CLASS_SIGMA: f64 = 0.5;

impl SineWave {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        SineWave {
            amplitude: rng.random_range(SINE_AMPLITUDE.0..=SINE_AMPLITUDE.1),
            phase: rng.random_range(SINE_PHASE.0..=SINE_PHASE.1),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }
}

/// `y = slope * x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFn {
    pub slope: f64,
    pub intercept: f64,
}

impl LinearFn {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        LinearFn {
            slope: rng.random_range(LINEAR_COEF_RANGE.0..=LINEAR_COEF_RANGE.1),
            intercept: rng.random_range(LINEAR_COEF_RANGE.0..=LINEAR_COEF_RANGE.1),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

fn regression_task<R: Rng + ?Sized>(
    rng: &mut R,
    k_support: usize,
    k_query: usize,
    f: impl Fn(f64) -> f64,
    is_ood: bool,
) -> TaskData {
    let mut draw = |n: usize| {
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(INPUT_RANGE.0..=INPUT_RANGE.1)).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        (Mat::col(xs), Mat::col(ys))
    };
    let (sx, sy) = draw(k_support);
    let (qx, qy) = draw(k_query);
    TaskData {
        task_id: 0,
        support_inputs: sx,
        support_targets: sy,
        query_inputs: qx,
        query_targets: qy,
        is_ood,
        noise_mask: vec![false; k_query],
        num_classes: None,
    }
}

pub fn sample_sine_task<R: Rng + ?Sized>(rng: &mut R, k_support: usize, k_query: usize) -> TaskData {
    let wave = SineWave::random(rng);
    regression_task(rng, k_support, k_query, |x| wave.eval(x), false)
}

pub fn sample_linear_ood_task<R: Rng + ?Sized>(rng: &mut R, k_support: usize, k_query: usize) -> TaskData {
    let line = LinearFn::random(rng);
    regression_task(rng, k_support, k_query, |x| line.eval(x), true)
}

/// Isotropic Gaussian classes in the plane.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianClasses {
    pub centers: Vec<[f64; 2]>,
    pub sigma: f64,
}

impl GaussianClasses {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, ways: usize) -> Self {
        let centers = (0..ways)
            .map(|_| {
                [
                    rng.random_range(CLASS_CENTER_RANGE.0..=CLASS_CENTER_RANGE.1),
                    rng.random_range(CLASS_CENTER_RANGE.0..=CLASS_CENTER_RANGE.1),
                ]
            })
            .collect();
        GaussianClasses { centers, sigma: CLASS_SIGMA }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, labels: &[usize]) -> (Mat, Mat) {
        let noise = Normal::new(0.0, self.sigma).expect("sigma is positive");
        let mut xs = Vec::with_capacity(labels.len() * 2);
        for &c in labels {
            xs.push(self.centers[c][0] + noise.sample(rng));
            xs.push(self.centers[c][1] + noise.sample(rng));
        }
        (Mat::new(labels.len(), 2, xs), Mat::col(labels.iter().map(|&c| c as f64).collect()))
    }
}

/// `ways` classes with `shots` support points each; the query holds
/// `k_query` points with classes assigned round-robin, then shuffled.
pub fn sample_classification_task<R: Rng + ?Sized>(
    rng: &mut R,
    ways: usize,
    shots: usize,
    k_query: usize,
) -> Result<TaskData> {
    if ways < 2 {
        return Err(Error::config("pool.ways", "classification needs at least 2 ways"));
    }
    let classes = GaussianClasses::random(rng, ways);
    let support_labels: Vec<usize> = (0..ways).flat_map(|c| std::iter::repeat_n(c, shots)).collect();
    let mut query_labels: Vec<usize> = (0..k_query).map(|k| k % ways).collect();
    query_labels.shuffle(rng);
    let (sx, sy) = classes.draw(rng, &support_labels);
    let (qx, qy) = classes.draw(rng, &query_labels);
    Ok(TaskData {
        task_id: 0,
        support_inputs: sx,
        support_targets: sy,
        query_inputs: qx,
        query_targets: qy,
        is_ood: false,
        noise_mask: vec![false; k_query],
        num_classes: Some(ways),
    })
}

/// Flips `round(ratio * K)` query labels to a uniformly drawn different class.
pub fn inject_label_noise<R: Rng + ?Sized>(task: &TaskData, ratio: f64, rng: &mut R) -> Result<TaskData> {
    let Some(ways) = task.num_classes else {
        return Err(Error::UnsupportedTask("label noise needs a classification task".into()));
    };
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config("pool.noise_ratio", "must lie in [0, 1)"));
    }
    let k = task.query_len();
    let flips = (ratio * k as f64).round() as usize;
    let mut out = task.clone();
    for i in index::sample(rng, k, flips).into_vec() {
        let orig = out.query_targets.data[i] as usize;
        let shift = 1 + rng.random_range(0..ways - 1);
        out.query_targets.data[i] = ((orig + shift) % ways) as f64;
        out.noise_mask[i] = true;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SineOod,
    ClassifyNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub m: usize,
    pub n: usize,
    pub m_test: usize,
    pub task_kind: TaskKind,
    pub ood_ratio: f64,
    pub noise_ratio: f64,
    pub ways: usize,
    pub shots: usize,
    pub k_support: usize,
    pub k_query: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            m: 1000,
            n: 50,
            m_test: 100,
            task_kind: TaskKind::SineOod,
            ood_ratio: 0.0,
            noise_ratio: 0.0,
            ways: 5,
            shots: 3,
            k_support: 10,
            k_query: 10,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("pool.m", "need at least one training task"));
        }
        if self.n == 0 || self.n * 10 > self.m {
            return Err(Error::config("pool.n", format!("need 1 <= n <= m/10 (m = {})", self.m)));
        }
        if self.k_query == 0 || self.k_support == 0 {
            return Err(Error::config("pool.k_query", "support and query sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ood_ratio) {
            return Err(Error::config("pool.ood_ratio", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return Err(Error::config("pool.noise_ratio", "must lie in [0, 1)"));
        }
        if self.ood_ratio > 0.0 && self.noise_ratio > 0.0 {
            return Err(Error::config("pool.noise_ratio", "ood_ratio and noise_ratio are mutually exclusive"));
        }
        match self.task_kind {
            TaskKind::SineOod if self.noise_ratio > 0.0 => {
                Err(Error::config("pool.noise_ratio", "label noise needs task_kind = classify_noise"))
            }
            TaskKind::ClassifyNoise if self.ood_ratio > 0.0 => {
                Err(Error::config("pool.ood_ratio", "OOD tasks need task_kind = sine_ood"))
            }
            TaskKind::ClassifyNoise if self.ways < 2 || self.shots == 0 => {
                Err(Error::config("pool.ways", "need ways >= 2 and shots >= 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn support_size(&self) -> usize {
        match self.task_kind {
            TaskKind::SineOod => self.k_support,
            TaskKind::ClassifyNoise => self.ways * self.shots,
        }
    }
}

/// Training pool plus clean validation and test tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPool {
    pub train: Vec<TaskData>,
    pub val: Vec<TaskData>,
    pub test: Vec<TaskData>,
    pub seed: u64,
}

impl TaskPool {
    pub fn ood_count(&self) -> usize {
        self.train.iter().filter(|t| t.is_ood).count()
    }

    /// Copy with OOD training tasks removed (renumbered).
    pub fn without_ood(&self) -> TaskPool {
        let mut out = self.clone();
        out.train = self.train.iter().filter(|t| !t.is_ood).cloned().collect();
        renumber(&mut out.train);
        out
    }

    /// Copy with noise-masked query instances removed from training tasks.
    pub fn without_noisy(&self) -> TaskPool {
        let mut out = self.clone();
        out.train = self.train.iter().map(TaskData::without_noisy).collect();
        out
    }
}

fn renumber(tasks: &mut [TaskData]) {
    for (i, t) in tasks.iter_mut().enumerate() {
        t.task_id = i;
    }
}

pub fn build_pool(cfg: &PoolConfig, seed: u64) -> Result<TaskPool> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh = |rng: &mut ChaCha8Rng| -> Result<TaskData> {
        match cfg.task_kind {
            TaskKind::SineOod => Ok(sample_sine_task(rng, cfg.k_support, cfg.k_query)),
            TaskKind::ClassifyNoise => sample_classification_task(rng, cfg.ways, cfg.shots, cfg.k_query),
        }
    };

    let n_ood = (cfg.ood_ratio * cfg.m as f64).round() as usize;
    let mut ood = vec![false; cfg.m];
    for i in index::sample(&mut rng, cfg.m, n_ood).into_vec() {
        ood[i] = true;
    }
    let mut train = Vec::with_capacity(cfg.m);
    for &is_ood in &ood {
        let t = if is_ood {
            sample_linear_ood_task(&mut rng, cfg.k_support, cfg.k_query)
        } else {
            let t = fresh(&mut rng)?;
            if cfg.noise_ratio > 0.0 {
                inject_label_noise(&t, cfg.noise_ratio, &mut rng)?
            } else {
                t
            }
        };
        train.push(t);
    }
    let val = (0..cfg.n).map(|_| fresh(&mut rng)).collect::<Result<Vec<_>>>()?;
    let test = (0..cfg.m_test).map(|_| fresh(&mut rng)).collect::<Result<Vec<_>>>()?;
    let mut pool = TaskPool { train, val, test, seed };
    renumber(&mut pool.train);
    renumber(&mut pool.val);
    renumber(&mut pool.test);
    Ok(pool)
}

// ---- serialization ----

#[derive(Serialize, Deserialize)]
struct PoolHeader {
    format: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    split: String,
    task_id: usize,
    is_ood: bool,
    num_classes: usize,
    input_dim: usize,
    target_dim: usize,
    support_inputs: String,
    support_targets: String,
    query_inputs: String,
    query_targets: String,
    noise_mask: String,
}

const POOL_FORMAT: &str = "rwmeta-pool-v1";

fn encode_f64s(xs: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64s(s: &str) -> Result<Vec<f64>> {
    let bytes = B64.decode(s).map_err(|e| Error::Format(format!("base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("array byte length not a multiple of 8".into()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn decode_mat(s: &str, cols: usize) -> Result<Mat> {
    let data = decode_f64s(s)?;
    if cols == 0 || data.len() % cols != 0 {
        return Err(Error::Format(format!("array of {} values does not split into width {cols}", data.len())));
    }
    Ok(Mat::new(data.len() / cols, cols, data))
}

/// One header line, then one line per task.
pub fn write_pool<W: Write>(pool: &TaskPool, mut out: W) -> Result<()> {
    let header = PoolHeader { format: POOL_FORMAT.into(), seed: pool.seed };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (split, tasks) in [("train", &pool.train), ("val", &pool.val), ("test", &pool.test)] {
        for t in tasks {
            let rec = TaskRecord {
                split: split.into(),
                task_id: t.task_id,
                is_ood: t.is_ood,
                num_classes: t.num_classes.unwrap_or(0),
                input_dim: t.support_inputs.cols,
                target_dim: t.support_targets.cols,
                support_inputs: encode_f64s(&t.support_inputs.data),
                support_targets: encode_f64s(&t.support_targets.data),
                query_inputs: encode_f64s(&t.query_inputs.data),
                query_targets: encode_f64s(&t.query_targets.data),
                noise_mask: t.noise_mask.iter().map(|&b| if b { '1' } else { '0' }).collect(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_pool<R: BufRead>(input: R) -> Result<TaskPool> {
    let mut lines = input.lines();
    let header: PoolHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Format("empty pool file".into())),
    };
    if header.format != POOL_FORMAT {
        return Err(Error::Format(format!("unknown pool format `{}`", header.format)));
    }
    let mut pool = TaskPool { train: vec![], val: vec![], test: vec![], seed: header.seed };
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord = serde_json::from_str(&line)?;
        let noise_mask = rec
            .noise_mask
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Format(format!("bad noise_mask character `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let task = TaskData {
            task_id: rec.task_id,
            support_inputs: decode_mat(&rec.support_inputs, rec.input_dim)?,
            support_targets: decode_mat(&rec.support_targets, rec.target_dim)?,
            query_inputs: decode_mat(&rec.query_inputs, rec.input_dim)?,
            query_targets: decode_mat(&rec.query_targets, rec.target_dim)?,
            is_ood: rec.is_ood,
            noise_mask,
            num_classes: (rec.num_classes > 0).then_some(rec.num_classes),
        };
        if task.noise_mask.len() != task.query_len() {
            return Err(Error::Format(format!("task {}: noise_mask length mismatch", task.task_id)));
        }
        match rec.split.as_str() {
            "train" => pool.train.push(task),
            "val" => pool.val.push(task),
            "test" => pool.test.push(task),
            other => return Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sine_task_follows_its_wave() {
        let task = sample_sine_task(&mut rng(3), 10, 10);
        let wave = SineWave::random(&mut rng(3));
        for (x, y) in task.support_inputs.data.iter().zip(&task.support_targets.data) {
            assert!((wave.eval(*x) - y).abs() <= 1e-12);
        }
        for (x, y) in task.query_inputs.data.iter().zip(&task.query_targets.data) {
            assert!((wave.eval(*x) - y).abs() <= 1e-12);
            assert!((-5.0..=5.0).contains(x));
        }
        assert!(!task.is_ood);
        assert_eq!(task, sample_sine_task(&mut rng(3), 10, 10));
    }

    #[test]
    fn amplitude_and_phase_bounds() {
        let mut r = rng(0);
        for _ in 0..10_000 {
            let w = SineWave::random(&mut r);
            assert!((0.1..=5.0).contains(&w.amplitude));
            assert!((0.0..=std::f64::consts::PI).contains(&w.phase));
        }
    }

    #[test]
    fn linear_task_is_collinear() {
        let task = sample_linear_ood_task(&mut rng(9), 10, 10);
        assert!(task.is_ood);
        let (xs, ys) = (&task.query_inputs.data, &task.query_targets.data);
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = sxy / sxx;
        let resid: f64 = xs.iter().zip(ys).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
        assert!(resid <= 1e-10);
        assert_eq!(task, sample_linear_ood_task(&mut rng(9), 10, 10));
    }

    #[test]
    fn classification_shapes() {
        let t = sample_classification_task(&mut rng(1), 5, 3, 10).unwrap();
        assert_eq!(t.support_len(), 15);
        assert_eq!(t.query_len(), 10);
        let t = sample_classification_task(&mut rng(1), 2, 1, 2).unwrap();
        assert!(t.query_targets.data.iter().chain(&t.support_targets.data).all(|&y| y == 0.0 || y == 1.0));
        assert_eq!(t, sample_classification_task(&mut rng(1), 2, 1, 2).unwrap());
        assert!(sample_classification_task(&mut rng(1), 1, 1, 2).is_err());
    }

    #[test]
    fn label_noise_counts() {
        let t = sample_classification_task(&mut rng(5), 5, 3, 10).unwrap();
        let same = inject_label_noise(&t, 0.0, &mut rng(0)).unwrap();
        assert_eq!(same, t);
        for (ratio, want) in [(0.5, 5), (0.2, 2), (0.3, 3)] {
            let noisy = inject_label_noise(&t, ratio, &mut rng(7)).unwrap();
            assert_eq!(noisy.noisy_count(), want);
            for k in 0..10 {
                let changed = noisy.query_targets.data[k] != t.query_targets.data[k];
                assert_eq!(changed, noisy.noise_mask[k]);
            }
        }
        let reg = sample_sine_task(&mut rng(0), 5, 5);
        assert!(matches!(inject_label_noise(&reg, 0.2, &mut rng(0)), Err(Error::UnsupportedTask(_))));
    }

    fn small_cfg() -> PoolConfig {
        PoolConfig { m: 1000, n: 50, m_test: 20, ood_ratio: 0.3, ..PoolConfig::default() }
    }

    #[test]
    fn pool_ood_count_and_clean_holdouts() {
        let pool = build_pool(&small_cfg(), 42).unwrap();
        assert_eq!(pool.ood_count(), 300);
        assert!(pool.val.iter().chain(&pool.test).all(TaskData::is_clean));
        let none = build_pool(&PoolConfig { ood_ratio: 0.0, ..small_cfg() }, 42).unwrap();
        assert_eq!(none.ood_count(), 0);
    }

    #[test]
    fn pool_rejects_large_validation_split() {
        let cfg = PoolConfig { m: 100, n: 11, ..PoolConfig::default() };
        assert!(matches!(build_pool(&cfg, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn pool_serialization_is_deterministic_and_round_trips() {
        let cfg = PoolConfig {
            m: 40,
            n: 4,
            m_test: 3,
            task_kind: TaskKind::ClassifyNoise,
            noise_ratio: 0.5,
            ..PoolConfig::default()
        };
        let pool = build_pool(&cfg, 8).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_pool(&pool, &mut a).unwrap();
        write_pool(&build_pool(&cfg, 8).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let back = read_pool(std::io::Cursor::new(a)).unwrap();
        assert_eq!(back, pool);
    }

    #[test]
    fn skyline_filters() {
        let pool = build_pool(&small_cfg(), 1).unwrap();
        let clean = pool.without_ood();
        assert_eq!(clean.train.len(), 700);
        assert_eq!(clean.ood_count(), 0);

        let cfg = PoolConfig { m: 50, n: 5, m_test: 2, task_kind: TaskKind::ClassifyNoise, noise_ratio: 0.3, ..PoolConfig::default() };
        let noisy = build_pool(&cfg, 2).unwrap();
        let stripped = noisy.without_noisy();
        for (a, b) in noisy.train.iter().zip(&stripped.train) {
            assert_eq!(b.query_len(), a.query_len() - a.noisy_count());
            assert_eq!(b.noisy_count(), 0);
            assert_eq!(a.support_inputs, b.support_inputs);
        }
    }
}
