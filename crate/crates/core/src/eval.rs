//! Confusion matrices, the metric suite, t-tests, multi-seed experiments
//! and hyperparameter sweeps.

use std::path::PathBuf;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cotrain::{train_knowd_teacher, train_with_teacher, LabelScheme, TrainConfig};
use crate::data::{make_ind_split, synth_clusters, Benchmark, Example, SplitSpec, SynthConfig};
use crate::detector::{detect, fit_boundaries, msp_baseline, AdbConfig};
use crate::error::{Error, Result};
use crate::oodgen::{generate, PseudoOodConfig};
use crate::rng::seeded;

/// Rows are gold classes, columns predictions; index `k` is OOD.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if n < 2 || counts.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("confusion matrix must be square with at least two classes"));
        }
        Ok(Self { k: n - 1, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k + 1
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion(golds: &[usize], preds: &[usize], k: usize) -> Result<ConfusionMatrix> {
    crate::error::ensure_dim("predictions", golds.len(), preds.len())?;
    if golds.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut counts = vec![vec![0u64; k + 1]; k + 1];
    for (&g, &p) in golds.iter().zip(preds) {
        if g > k || p > k {
            return Err(Error::invalid(format!("label {} out of range for k = {k}", g.max(p))));
        }
        counts[g][p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc_all: f64,
    /// Macro F1 over all `k + 1` classes.
    pub f1_all: f64,
    /// Macro F1 over the `k` IND classes.
    pub f1_ind: f64,
    pub f1_ood: f64,
    /// Equal to `acc_all` for single-label predictions.
    pub micro_f1_all: f64,
    pub per_class: Vec<ClassScore>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Empty precision or recall denominators count as 0, so a class that is
/// neither present nor predicted scores F1 = 0.
pub fn metrics(m: &ConfusionMatrix) -> MetricReport {
    let c = m.num_classes();
    let per_class: Vec<ClassScore> = (0..c)
        .map(|i| {
            let tp = m.counts[i][i];
            let predicted: u64 = (0..c).map(|r| m.counts[r][i]).sum();
            let support: u64 = m.counts[i].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScore { precision, recall, f1, support }
        })
        .collect();
    let acc_all = ratio(m.trace(), m.total());
    let f1_ind = per_class[..m.k].iter().map(|s| s.f1).sum::<f64>() / m.k as f64;
    let f1_all = per_class.iter().map(|s| s.f1).sum::<f64>() / c as f64;
    MetricReport {
        acc_all,
        f1_all,
        f1_ind,
        f1_ood: per_class[m.k].f1,
        micro_f1_all: micro_f1(m),
        per_class,
        seed: None,
        config_hash: None,
    }
}

/// Pooled-count F1 over all classes.
fn micro_f1(m: &ConfusionMatrix) -> f64 {
    let tp = m.trace();
    // every error is one false positive and one false negative
    let errors = m.total() - tp;
    let p = ratio(tp, tp + errors);
    let r = ratio(tp, tp + errors);
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    AccAll,
    F1All,
    F1Ood,
    F1Ind,
}

impl Metric {
    /// Report column order.
    pub const COLUMNS: [Metric; 4] = [Metric::AccAll, Metric::F1All, Metric::F1Ood, Metric::F1Ind];

    pub fn of(self, r: &MetricReport) -> f64 {
        match self {
            Metric::AccAll => r.acc_all,
            Metric::F1All => r.f1_all,
            Metric::F1Ood => r.f1_ood,
            Metric::F1Ind => r.f1_ind,
        }
    }

    pub fn header(self) -> &'static str {
        match self {
            Metric::AccAll => "acc_all",
            Metric::F1All => "f1_all",
            Metric::F1Ood => "f1_ood",
            Metric::F1Ind => "f1_ind",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub mean_diff: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn two_sided(t: f64, df: f64, mean_diff: f64, se: f64) -> Result<TTest> {
    if se == 0.0 {
        let (t, p_value) = if mean_diff == 0.0 { (0.0, 1.0) } else { (mean_diff.signum() * f64::INFINITY, 0.0) };
        return Ok(TTest { t, df, p_value, mean_diff });
    }
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest { t, df, p_value, mean_diff })
}

/// Two-sided unequal-variance t-test of `mean(a) − mean(b)`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("t-test needs at least two samples per group"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    let df = if se2 == 0.0 {
        na + nb - 2.0
    } else {
        se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0))
    };
    let se = se2.sqrt();
    two_sided((ma - mb) / se, df, ma - mb, se)
}

/// Two-sided paired t-test on per-seed differences `a_i − b_i`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    crate::error::ensure_dim("paired samples", a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (md, vd) = mean_var(&d);
    let se = (vd / d.len() as f64).sqrt();
    two_sided(md / se, d.len() as f64 - 1.0, md, se)
}

/// Hex SHA-256 of the compact JSON form of a value.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Regenerated per seed with the run seed.
    Synthetic(SynthConfig),
    /// A fixed benchmark directory.
    Dir { path: PathBuf },
}

impl DatasetSource {
    fn materialize(&self, seed: u64) -> Result<Benchmark> {
        match self {
            DatasetSource::Synthetic(cfg) => synth_clusters(&SynthConfig { seed, ..cfg.clone() }),
            DatasetSource::Dir { path } => Benchmark::load(path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub ind_ratio: f64,
    pub oodgen: PseudoOodConfig,
    pub train: TrainConfig,
    pub adb: AdbConfig,
    pub n_seeds: usize,
    pub first_seed: u64,
    /// Also run the max-softmax baseline.
    pub msp: bool,
    /// Validation OOD examples the baseline may use to pick its threshold.
    pub msp_valid_ood: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            dataset: DatasetSource::Synthetic(SynthConfig::default()),
            ind_ratio: 0.5,
            oodgen: PseudoOodConfig::default(),
            train: TrainConfig::desk(),
            adb: AdbConfig::default(),
            n_seeds: 10,
            first_seed: 0,
            msp: false,
            msp_valid_ood: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.first_seed + i).collect()
    }

    pub fn with_scheme(&self, scheme: LabelScheme) -> Self {
        let mut c = self.clone();
        c.train.label_scheme = scheme;
        c.name = format!("{}-{}", self.name, scheme);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: MetricReport,
    pub msp: Option<MetricReport>,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub boundary_converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acc_all: f64,
    pub f1_all: f64,
    pub f1_ood: f64,
    pub f1_ind: f64,
}

impl Summary {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::AccAll => self.acc_all,
            Metric::F1All => self.f1_all,
            Metric::F1Ood => self.f1_ood,
            Metric::F1Ind => self.f1_ind,
        }
    }

    fn from_fn(f: impl Fn(Metric) -> f64) -> Self {
        Self {
            acc_all: f(Metric::AccAll),
            f1_all: f(Metric::F1All),
            f1_ood: f(Metric::F1Ood),
            f1_ind: f(Metric::F1Ind),
        }
    }
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    pub crate_version: String,
    pub name: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
    pub failures: Vec<SeedFailure>,
    pub mean: Summary,
    pub std: Summary,
    pub msp_mean: Option<Summary>,
}

impl ExperimentReport {
    pub fn values(&self, m: Metric) -> Vec<f64> {
        self.runs.iter().map(|r| m.of(&r.report)).collect()
    }

    /// One row per seed, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed");
        for m in Metric::COLUMNS {
            out.push(',');
            out.push_str(m.header());
        }
        out.push('\n');
        for r in &self.runs {
            out.push_str(&r.seed.to_string());
            for m in Metric::COLUMNS {
                out.push_str(&format!(",{}", m.of(&r.report)));
            }
            out.push('\n');
        }
        out.push_str("mean");
        for m in Metric::COLUMNS {
            out.push_str(&format!(",{}", self.mean.get(m)));
        }
        out.push('\n');
        out
    }
}

fn summarize(reports: &[&MetricReport]) -> (Summary, Summary) {
    let n = reports.len() as f64;
    let mean = Summary::from_fn(|m| reports.iter().map(|r| m.of(r)).sum::<f64>() / n);
    let std = Summary::from_fn(|m| {
        if reports.len() < 2 {
            return 0.0;
        }
        let mu = mean.get(m);
        (reports.iter().map(|r| (m.of(r) - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    (mean, std)
}

/// One full pipeline run: split, pseudo-OOD generation, training, boundary
/// fitting, detection and scoring. Every stage is seeded with `seed`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let bench = cfg.dataset.materialize(seed)?;
    let split = make_ind_split(&bench, SplitSpec { ind_ratio: cfg.ind_ratio, seed })?;
    let pseudo = generate(&split.train, &PseudoOodConfig { seed, ..cfg.oodgen.clone() })?;
    let tcfg = TrainConfig { seed, ..cfg.train.clone() };
    let needs_teacher = cfg.msp || tcfg.label_scheme == LabelScheme::Knowd;
    let teacher = if needs_teacher {
        Some(train_knowd_teacher(&split.train, &split.valid, &tcfg)?)
    } else {
        None
    };
    let outcome = train_with_teacher(&split.train, &pseudo, &split.valid, &tcfg, teacher.as_ref())?;
    let boundaries = fit_boundaries(&outcome.model, &split.train, &pseudo, &cfg.adb, seed)?;
    let k = split.space.k();
    let golds = split.test.gold_indices();
    let preds = split
        .test
        .examples
        .iter()
        .map(|x| Ok(detect(&outcome.model, &boundaries, &x.features)?.label))
        .collect::<Result<Vec<_>>>()?;
    let hash = config_hash(cfg)?;
    let mut report = metrics(&confusion(&golds, &preds, k)?);
    report.seed = Some(seed);
    report.config_hash = Some(hash.clone());
    let msp = match (&teacher, cfg.msp) {
        (Some(t), true) => {
            let mut pool: Vec<Example> = split.valid_ood.examples.clone();
            pool.shuffle(&mut seeded(seed, 0x0355_0001));
            pool.truncate(cfg.msp_valid_ood);
            let (_, mp) = msp_baseline(t, &split.valid.examples, &pool, &split.test.examples)?;
            let mut r = metrics(&confusion(&golds, &mp, k)?);
            r.seed = Some(seed);
            r.config_hash = Some(hash);
            Some(r)
        }
        _ => None,
    };
    Ok(SeedRun {
        seed,
        report,
        msp,
        epochs: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        boundary_converged: boundaries.fitted_on.converged,
    })
}

/// Runs `f` over `items` on up to `jobs` threads, returning results in
/// input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every item processed")).collect()
}

pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    if cfg.n_seeds == 0 {
        return Err(Error::invalid("n_seeds must be at least 1"));
    }
    cfg.train.validate()?;
    cfg.oodgen.validate()?;
    let seeds = cfg.seeds();
    let results = parallel_map(&seeds, jobs, |&s| run_seed(cfg, s));
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(run) => {
                info!(
                    "{} seed {seed}: acc {:.4} f1-all {:.4} f1-ood {:.4} f1-ind {:.4}",
                    cfg.name, run.report.acc_all, run.report.f1_all, run.report.f1_ood, run.report.f1_ind
                );
                runs.push(run)
            }
            Err(e) => {
                warn!("{} seed {seed} failed: {e}", cfg.name);
                failures.push(SeedFailure { seed: *seed, error: e.to_string() });
            }
        }
    }
    if runs.is_empty() {
        return Err(Error::AllSeedsFailed(seeds.len()));
    }
    let (mean, std) = summarize(&runs.iter().map(|r| &r.report).collect::<Vec<_>>());
    let msp_reports: Vec<&MetricReport> = runs.iter().filter_map(|r| r.msp.as_ref()).collect();
    let msp_mean = (!msp_reports.is_empty()).then(|| summarize(&msp_reports).0);
    Ok(ExperimentReport {
        format_version: REPORT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        name: cfg.name.clone(),
        config_hash: config_hash(cfg)?,
        config: cfg.clone(),
        runs,
        failures,
        mean,
        std,
        msp_mean,
    })
}

/// Compares one metric between two reports over the seeds both completed.
pub fn compare(a: &ExperimentReport, b: &ExperimentReport, metric: Metric, paired: bool) -> Result<TTest> {
    if paired {
        let mut xa = Vec::new();
        let mut xb = Vec::new();
        for ra in &a.runs {
            if let Some(rb) = b.runs.iter().find(|r| r.seed == ra.seed) {
                xa.push(metric.of(&ra.report));
                xb.push(metric.of(&rb.report));
            }
        }
        paired_t_test(&xa, &xb)
    } else {
        welch_t_test(&a.values(metric), &b.values(metric))
    }
}

/// Table with one row per label scheme, columns in report order.
pub fn scheme_table(reports: &[(LabelScheme, ExperimentReport)]) -> String {
    let mut out = String::from("scheme");
    for m in Metric::COLUMNS {
        out.push(',');
        out.push_str(m.header());
    }
    out.push('\n');
    for (s, r) in reports {
        out.push_str(s.as_str());
        for m in Metric::COLUMNS {
            out.push_str(&format!(",{}", r.mean.get(m)));
        }
        out.push('\n');
    }
    out
}

/// Runs every scheme on shared seeds.
pub fn ablate(base: &ExperimentConfig, schemes: &[LabelScheme], jobs: usize) -> Result<Vec<(LabelScheme, ExperimentReport)>> {
    schemes
        .iter()
        .map(|&s| Ok((s, run_experiment(&base.with_scheme(s), jobs)?)))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub tau: Vec<f64>,
    pub dropout: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub dropout: f64,
    pub alpha: f64,
    pub beta: f64,
    pub report: ExperimentReport,
}

impl SweepGrid {
    /// Cartesian product in (τ, dropout, α, β) order; an empty axis keeps
    /// the base value.
    pub fn points(&self, base: &TrainConfig) -> Result<Vec<[f64; 4]>> {
        if self.tau.is_empty() && self.dropout.is_empty() && self.alpha.is_empty() && self.beta.is_empty() {
            return Err(Error::invalid("sweep grid is empty"));
        }
        let axis = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let mut out = Vec::new();
        for &t in &axis(&self.tau, base.tau) {
            for &d in &axis(&self.dropout, base.dropout) {
                for &a in &axis(&self.alpha, base.alpha) {
                    for &b in &axis(&self.beta, base.beta) {
                        out.push([t, d, a, b]);
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid, jobs: usize) -> Result<Vec<SweepRow>> {
    grid.points(&base.train)?
        .into_iter()
        .map(|[tau, dropout, alpha, beta]| {
            let mut cfg = base.clone();
            cfg.train.tau = tau;
            cfg.train.dropout = dropout;
            cfg.train.alpha = alpha;
            cfg.train.beta = beta;
            Ok(SweepRow { tau, dropout, alpha, beta, report: run_experiment(&cfg, jobs)? })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("tau,dropout,alpha,beta");
    for m in Metric::COLUMNS {
        out.push(',');
        out.push_str(m.header());
    }
    out.push_str(",seeds\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}", r.tau, r.dropout, r.alpha, r.beta));
        for m in Metric::COLUMNS {
            out.push_str(&format!(",{}", r.report.mean.get(m)));
        }
        out.push_str(&format!(",{}\n", r.report.runs.len()));
    }
    out
}
