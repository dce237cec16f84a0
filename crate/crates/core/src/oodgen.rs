//! Pseudo-OOD set construction.
//!
//! Feature mixup, open-domain sampling and latent low-density sampling run
//! natively on feature vectors; phrase-distortion samples are produced
//! elsewhere and only ingested here.
//!
//! The latent generator approximates low-density sampling without a
//! generative model: fit a diagonal Gaussian per IND class, propose from the
//! pooled Gaussian, and keep proposals whose best class density is below the
//! `q`-quantile of the training points' best class densities.

use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{load_records, Dataset, Example, IntentSpace, Label, Provenance, PseudoLabels};
use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodMethod {
    Fm,
    Os,
    Lg,
    PdIngest,
}

impl OodMethod {
    pub fn provenance(self) -> Provenance {
        match self {
            OodMethod::Fm => Provenance::PseudoFm,
            OodMethod::Os => Provenance::PseudoOs,
            OodMethod::Lg => Provenance::PseudoLg,
            OodMethod::PdIngest => Provenance::PseudoPd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoOodConfig {
    pub method: OodMethod,
    /// Number of samples; `None` means the IND train size.
    #[serde(default)]
    pub count: Option<usize>,
    pub seed: u64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub cross_class_only: bool,
    pub rejection_quantile: f64,
    #[serde(default)]
    pub source: Option<PathBuf>,
}

impl Default for PseudoOodConfig {
    fn default() -> Self {
        Self {
            method: OodMethod::Fm,
            count: None,
            seed: 0,
            lambda_lo: 0.3,
            lambda_hi: 0.7,
            cross_class_only: true,
            rejection_quantile: 0.05,
            source: None,
        }
    }
}

impl PseudoOodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lo > 0.0 && self.lambda_lo <= self.lambda_hi && self.lambda_hi < 1.0) {
            return Err(Error::invalid("mixup range must satisfy 0 < λ_lo ≤ λ_hi < 1"));
        }
        if !(self.rejection_quantile > 0.0 && self.rejection_quantile < 1.0) {
            return Err(Error::invalid("rejection quantile must lie in (0, 1)"));
        }
        if self.count == Some(0) {
            return Err(Error::invalid("pseudo-OOD count must be at least 1"));
        }
        Ok(())
    }

    fn resolved_count(&self, ind_train: &Dataset) -> usize {
        self.count.unwrap_or(ind_train.len())
    }
}

fn pseudo(id: String, features: Vector, provenance: Provenance) -> Example {
    Example {
        id,
        features,
        label: Label::Pseudo,
        provenance,
        text: None,
    }
}

fn by_class(ind: &Dataset) -> Vec<Vec<&Example>> {
    let mut classes = vec![Vec::new(); ind.space.k()];
    for e in &ind.examples {
        if let Label::Ind(i) = e.label {
            classes[i].push(e);
        }
    }
    classes
}

/// A mixup output together with the pair and weight that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupSample {
    pub example: Example,
    pub first: String,
    pub second: String,
    pub lambda: f64,
}

/// Convex combinations `λ·f_a + (1 − λ)·f_b` of seeded random IND pairs.
pub fn feature_mixup(ind_train: &Dataset, cfg: &PseudoOodConfig) -> Result<Vec<MixupSample>> {
    cfg.validate()?;
    let classes = by_class(ind_train);
    let populated: Vec<usize> = (0..classes.len()).filter(|&c| !classes[c].is_empty()).collect();
    if cfg.cross_class_only && populated.len() < 2 {
        return Err(Error::invalid(
            "cross-class mixup needs at least two populated IND classes",
        ));
    }
    if ind_train.is_empty() {
        return Err(Error::Empty("IND train set".into()));
    }
    let n = cfg.resolved_count(ind_train);
    let mut rng = seeded(cfg.seed, 0xF3A7_0001);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = if cfg.cross_class_only {
            let pair: Vec<&usize> = populated.choose_multiple(&mut rng, 2).collect();
            let a = *classes[*pair[0]].choose(&mut rng).expect("populated");
            let b = *classes[*pair[1]].choose(&mut rng).expect("populated");
            (a, b)
        } else {
            let a = ind_train.examples.choose(&mut rng).expect("non-empty");
            let b = ind_train.examples.choose(&mut rng).expect("non-empty");
            (a, b)
        };
        let lambda = if cfg.lambda_lo == cfg.lambda_hi {
            cfg.lambda_lo
        } else {
            rng.random_range(cfg.lambda_lo..cfg.lambda_hi)
        };
        let features = mix(lambda, &a.features, &b.features);
        out.push(MixupSample {
            example: pseudo(format!("fm-{i:06}"), features, Provenance::PseudoFm),
            first: a.id.clone(),
            second: b.id.clone(),
            lambda,
        });
    }
    Ok(out)
}

pub fn mix(lambda: f64, a: &[f64], b: &[f64]) -> Vector {
    a.iter()
        .zip(b)
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect()
}

/// Uniform draw without replacement from an external corpus file.
pub fn open_domain_sample(
    source: &Path,
    space: &IntentSpace,
    feature_dim: usize,
    cfg: &PseudoOodConfig,
    count: usize,
) -> Result<Vec<Example>> {
    cfg.validate()?;
    // External corpora may carry their own labels; they are discarded.
    let mut pool = load_records(source, space, feature_dim, PseudoLabels::Overwrite)
        .or_else(|_| load_foreign(source, feature_dim))?
        .dataset
        .examples;
    if pool.len() < count {
        return Err(Error::invalid(format!(
            "open-domain source holds {} examples, {count} requested",
            pool.len()
        )));
    }
    pool.shuffle(&mut seeded(cfg.seed, 0x05_0002));
    pool.truncate(count);
    Ok(pool
        .into_iter()
        .map(|mut e| {
            e.label = Label::Pseudo;
            e.provenance = Provenance::PseudoOs;
            e
        })
        .collect())
}

/// Loads a corpus whose labels are outside the current intent space.
fn load_foreign(path: &Path, feature_dim: usize) -> Result<crate::data::LoadOutcome> {
    #[derive(Deserialize)]
    struct Loose {
        id: String,
        features: Vec<f64>,
        #[serde(default)]
        text: Option<String>,
    }
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Loose = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.features.len() != feature_dim {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!(
                    "feature dimension {} does not match {feature_dim}",
                    rec.features.len()
                ),
            });
        }
        examples.push(Example {
            id: rec.id,
            features: rec.features,
            label: Label::Pseudo,
            provenance: Provenance::PseudoOs,
            text: rec.text,
        });
    }
    Ok(crate::data::LoadOutcome {
        dataset: Dataset {
            space: IntentSpace::new(vec!["_".into()])?,
            feature_dim,
            examples,
        },
        overwritten_labels: 0,
    })
}

#[derive(Clone, Debug)]
struct DiagGaussian {
    mean: Vector,
    var: Vector,
}

impl DiagGaussian {
    fn fit(points: &[&[f64]]) -> Self {
        let n = points.len() as f64;
        let dim = points[0].len();
        let mut mean = vec![0.0; dim];
        for p in points {
            mean.iter_mut().zip(*p).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; dim];
        for p in points {
            var.iter_mut()
                .zip(*p)
                .zip(&mean)
                .for_each(|((v, x), m)| *v += (x - m) * (x - m) / (n - 1.0).max(1.0));
        }
        // Variance floor keeps degenerate coordinates from producing −∞.
        var.iter_mut().for_each(|v| *v = v.max(1e-12));
        Self { mean, var }
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        -0.5 * x
            .iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((x, m), v)| (x - m) * (x - m) / v + v.ln() + ln2pi)
            .sum::<f64>()
    }
}

pub struct LowDensitySampler {
    classes: Vec<DiagGaussian>,
    pooled: DiagGaussian,
    /// Log of the q-quantile of training max-class densities.
    pub log_threshold: f64,
}

impl LowDensitySampler {
    pub fn fit(ind_train: &Dataset, quantile: f64) -> Result<Self> {
        let classes = by_class(ind_train);
        if classes.iter().filter(|c| !c.is_empty()).count() == 0 {
            return Err(Error::Empty("IND train set".into()));
        }
        if classes.iter().any(|c| c.len() == 1) {
            return Err(Error::invalid("low-density sampling needs at least two examples per class"));
        }
        let gaussians: Vec<DiagGaussian> = classes
            .iter()
            .filter(|c| !c.is_empty())
            .map(|c| DiagGaussian::fit(&c.iter().map(|e| e.features.as_slice()).collect::<Vec<_>>()))
            .collect();
        let all: Vec<&[f64]> = ind_train.examples.iter().map(|e| e.features.as_slice()).collect();
        let pooled = DiagGaussian::fit(&all);
        let mut scores: Vec<f64> = all
            .iter()
            .map(|x| max_log_density(&gaussians, x))
            .collect();
        scores.sort_by(f64::total_cmp);
        let log_threshold = empirical_quantile(&scores, quantile);
        Ok(Self {
            classes: gaussians,
            pooled,
            log_threshold,
        })
    }

    pub fn max_log_density(&self, x: &[f64]) -> f64 {
        max_log_density(&self.classes, x)
    }

    pub fn accepts(&self, x: &[f64]) -> bool {
        self.max_log_density(x) < self.log_threshold
    }

    fn propose<R: Rng>(&self, rng: &mut R) -> Vector {
        self.pooled
            .mean
            .iter()
            .zip(&self.pooled.var)
            .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

fn max_log_density(classes: &[DiagGaussian], x: &[f64]) -> f64 {
    classes
        .iter()
        .map(|g| g.log_density(x))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Linear-interpolated quantile of sorted values.
pub(crate) fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn latent_lowdensity_sample(ind_train: &Dataset, cfg: &PseudoOodConfig) -> Result<Vec<Example>> {
    cfg.validate()?;
    let sampler = LowDensitySampler::fit(ind_train, cfg.rejection_quantile)?;
    let n = cfg.resolved_count(ind_train);
    let budget = 1000 * n;
    let mut rng = seeded(cfg.seed, 0x1A7E_0003);
    let mut out = Vec::with_capacity(n);
    let mut proposals = 0;
    while out.len() < n {
        if proposals >= budget {
            return Err(Error::AcceptanceFailure {
                accepted: out.len(),
                wanted: n,
                proposals,
            });
        }
        proposals += 1;
        let x = sampler.propose(&mut rng);
        if sampler.accepts(&x) {
            out.push(pseudo(format!("lg-{:06}", out.len()), x, Provenance::PseudoLg));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PdIngest {
    pub examples: Vec<Example>,
    pub overwritten_labels: usize,
}

/// Loads externally generated phrase-distortion samples.
pub fn ingest_pd(path: &Path, space: &IntentSpace, feature_dim: usize) -> Result<PdIngest> {
    let out = load_records(path, space, feature_dim, PseudoLabels::Overwrite)?;
    if out.dataset.is_empty() {
        return Err(Error::Empty(format!("{}", path.display())));
    }
    if let Some(bad) = out
        .dataset
        .examples
        .iter()
        .find(|e| e.provenance != Provenance::PseudoPd)
    {
        return Err(Error::Validation {
            path: path.to_path_buf(),
            message: format!(
                "`{}` has provenance {}, expected pseudo-pd",
                bad.id,
                bad.provenance.as_str()
            ),
        });
    }
    if out.overwritten_labels > 0 {
        warn!(
            "{}: overwrote {} labels on pseudo-pd examples",
            path.display(),
            out.overwritten_labels
        );
    }
    Ok(PdIngest {
        examples: out.dataset.examples,
        overwritten_labels: out.overwritten_labels,
    })
}

/// Runs the configured generator against an IND train set.
pub fn generate(ind_train: &Dataset, cfg: &PseudoOodConfig) -> Result<Vec<Example>> {
    match cfg.method {
        OodMethod::Fm => Ok(feature_mixup(ind_train, cfg)?
            .into_iter()
            .map(|s| s.example)
            .collect()),
        OodMethod::Lg => latent_lowdensity_sample(ind_train, cfg),
        OodMethod::Os => {
            let src = cfg
                .source
                .as_deref()
                .ok_or_else(|| Error::invalid("open-domain sampling needs a source file"))?;
            open_domain_sample(
                src,
                &ind_train.space,
                ind_train.feature_dim,
                cfg,
                cfg.resolved_count(ind_train),
            )
        }
        OodMethod::PdIngest => {
            let src = cfg
                .source
                .as_deref()
                .ok_or_else(|| Error::invalid("phrase-distortion ingest needs a source file"))?;
            let mut ex = ingest_pd(src, &ind_train.space, ind_train.feature_dim)?.examples;
            if let Some(n) = cfg.count {
                ex.truncate(n);
            }
            Ok(ex)
        }
    }
}
