//! Dataset model, JSON-Lines ingestion, IND-ratio splitting and synthetic
//! intent clusters.
//!
//! On disk a dataset is a directory holding `manifest.json` plus one
//! `train.jsonl` / `valid.jsonl` / `test.jsonl` file per split. Every line is
//!
//! ```text
//! {"id": str, "label": str|null, "features": [number…], "text": str (optional), "provenance": str}
//! ```
//!
//! `label` is an intent name, the reserved [`OOD_LABEL`], or `null` for
//! pseudo/unlabeled samples.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, Vector};
use crate::rng::seeded;

/// Label string that marks an example of the single OOD class.
pub const OOD_LABEL: &str = "ood";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Ind,
    PseudoFm,
    PseudoOs,
    PseudoLg,
    PseudoPd,
    Test,
}

impl Provenance {
    pub fn is_pseudo(self) -> bool {
        matches!(
            self,
            Provenance::PseudoFm | Provenance::PseudoOs | Provenance::PseudoLg | Provenance::PseudoPd
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Ind => "ind",
            Provenance::PseudoFm => "pseudo-fm",
            Provenance::PseudoOs => "pseudo-os",
            Provenance::PseudoLg => "pseudo-lg",
            Provenance::PseudoPd => "pseudo-pd",
            Provenance::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Ind(usize),
    Ood,
    Pseudo,
}

impl Label {
    /// Class index in a space with `k` IND intents; `None` for pseudo.
    pub fn class_index(self, k: usize) -> Option<usize> {
        match self {
            Label::Ind(i) => Some(i),
            Label::Ood => Some(k),
            Label::Pseudo => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Vector,
    pub label: Label,
    pub provenance: Provenance,
    pub text: Option<String>,
}

/// The `k` IND intents; the OOD class always sits at index `k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentSpace {
    ind_names: Vec<String>,
}

impl IntentSpace {
    pub fn new(ind_names: Vec<String>) -> Result<Self> {
        if ind_names.is_empty() {
            return Err(Error::invalid("an intent space needs at least one IND intent"));
        }
        let unique: BTreeSet<&String> = ind_names.iter().collect();
        if unique.len() != ind_names.len() {
            return Err(Error::invalid("intent names must be unique"));
        }
        if ind_names.iter().any(|n| n == OOD_LABEL) {
            return Err(Error::invalid(format!("`{OOD_LABEL}` is reserved for the OOD class")));
        }
        Ok(Self { ind_names })
    }

    pub fn k(&self) -> usize {
        self.ind_names.len()
    }

    pub fn ood_index(&self) -> usize {
        self.ind_names.len()
    }

    pub fn num_classes(&self) -> usize {
        self.ind_names.len() + 1
    }

    pub fn ind_names(&self) -> &[String] {
        &self.ind_names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        if name == OOD_LABEL {
            return Some(self.ood_index());
        }
        self.ind_names.iter().position(|n| n == name)
    }

    pub fn name_of(&self, idx: usize) -> &str {
        if idx == self.ood_index() {
            OOD_LABEL
        } else {
            &self.ind_names[idx]
        }
    }

    fn label_from_name(&self, name: Option<&str>) -> Option<Label> {
        match name {
            None => Some(Label::Pseudo),
            Some(OOD_LABEL) => Some(Label::Ood),
            Some(n) => self.ind_names.iter().position(|x| x == n).map(Label::Ind),
        }
    }

    fn label_to_name(&self, label: Label) -> Option<String> {
        match label {
            Label::Ind(i) => Some(self.ind_names[i].clone()),
            Label::Ood => Some(OOD_LABEL.to_string()),
            Label::Pseudo => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub space: IntentSpace,
    pub feature_dim: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Class indices (IND index or `k` for OOD); pseudo examples are skipped.
    pub fn gold_indices(&self) -> Vec<usize> {
        let k = self.space.k();
        self.examples
            .iter()
            .filter_map(|e| e.label.class_index(k))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub feature_dim: usize,
    pub classes: Vec<String>,
    pub counts: SplitCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub format_version: u32,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Validation {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Validation {
                path: path.to_path_buf(),
                message: format!("unsupported format_version {}", m.format_version),
            });
        }
        if m.feature_dim == 0 {
            return Err(Error::Validation {
                path: path.to_path_buf(),
                message: "feature_dim must be positive".into(),
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn space(&self) -> Result<IntentSpace> {
        IntentSpace::new(self.classes.clone())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    label: Option<String>,
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    provenance: Provenance,
}

/// How strictly pseudo-provenance lines with a label are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum PseudoLabels {
    Reject,
    /// Overwrite with [`Label::Pseudo`] and count.
    Overwrite,
}

pub(crate) struct LoadOutcome {
    pub dataset: Dataset,
    pub overwritten_labels: usize,
}

pub(crate) fn load_records(
    path: &Path,
    space: &IntentSpace,
    feature_dim: usize,
    pseudo_labels: PseudoLabels,
) -> Result<LoadOutcome> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut examples = Vec::new();
    let mut overwritten = 0;
    let mut seen_ids = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, format!("malformed record: {e}")))?;
        if rec.features.len() != feature_dim {
            return Err(parse_err(
                lineno,
                format!(
                    "feature dimension {} does not match manifest dimension {feature_dim}",
                    rec.features.len()
                ),
            ));
        }
        if rec.features.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(lineno, "non-finite feature value".into()));
        }
        if !seen_ids.insert(rec.id.clone()) {
            return Err(parse_err(lineno, format!("duplicate id `{}`", rec.id)));
        }
        let label = if rec.provenance.is_pseudo() {
            if rec.label.is_some() {
                match pseudo_labels {
                    PseudoLabels::Reject => {
                        return Err(parse_err(lineno, "pseudo example must have a null label".into()))
                    }
                    PseudoLabels::Overwrite => overwritten += 1,
                }
            }
            Label::Pseudo
        } else {
            let name = rec
                .label
                .as_deref()
                .ok_or_else(|| parse_err(lineno, "labeled provenance with a null label".into()))?;
            match space.label_from_name(Some(name)) {
                Some(Label::Ood) if rec.provenance == Provenance::Ind => {
                    return Err(parse_err(lineno, "an `ind` example cannot carry the OOD label".into()))
                }
                Some(l) => l,
                None => return Err(parse_err(lineno, format!("unknown label `{name}`"))),
            }
        };
        examples.push(Example {
            id: rec.id,
            features: rec.features,
            label,
            provenance: rec.provenance,
            text: rec.text,
        });
    }
    Ok(LoadOutcome {
        dataset: Dataset {
            space: space.clone(),
            feature_dim,
            examples,
        },
        overwritten_labels: overwritten,
    })
}

/// Loads one JSON-Lines file, validated against the manifest. When
/// `expected_count` is given the number of examples must match it exactly.
pub fn load_dataset(
    path: &Path,
    manifest: &DatasetManifest,
    expected_count: Option<usize>,
) -> Result<Dataset> {
    let space = manifest.space()?;
    let out = load_records(path, &space, manifest.feature_dim, PseudoLabels::Reject)?;
    if let Some(n) = expected_count {
        if out.dataset.len() != n {
            return Err(Error::Validation {
                path: path.to_path_buf(),
                message: format!("manifest declares {n} examples, file holds {}", out.dataset.len()),
            });
        }
    }
    Ok(out.dataset)
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in &dataset.examples {
        let rec = Record {
            id: e.id.clone(),
            label: dataset.space.label_to_name(e.label),
            features: e.features.clone(),
            text: e.text.clone(),
            provenance: e.provenance,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|err| Error::io(path, err))
}

/// SHA-256 over ids, labels and the exact bits of every feature.
pub fn content_hash<'a>(examples: impl IntoIterator<Item = &'a Example>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for e in examples {
        h.update(e.id.as_bytes());
        h.update([0u8]);
        h.update(format!("{:?}", e.label).as_bytes());
        for v in &e.features {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// A manifest plus its three splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub manifest: DatasetManifest,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

impl Benchmark {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
        let c = manifest.counts;
        let train = load_dataset(&split_path(dir, "train"), &manifest, Some(c.train))?;
        let valid = load_dataset(&split_path(dir, "valid"), &manifest, Some(c.valid))?;
        let test = load_dataset(&split_path(dir, "test"), &manifest, Some(c.test))?;
        Ok(Self {
            manifest,
            train,
            valid,
            test,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.manifest.save(&dir.join(MANIFEST_FILE))?;
        write_dataset(&split_path(dir, "train"), &self.train)?;
        write_dataset(&split_path(dir, "valid"), &self.valid)?;
        write_dataset(&split_path(dir, "test"), &self.test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub ind_ratio: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// `round(ratio × total)`, at least one.
    pub fn num_ind(&self, total: usize) -> usize {
        ((self.ind_ratio * total as f64).round() as usize).max(1)
    }
}

/// Result of selecting IND intents: train/valid are IND-only, test keeps
/// every example with unselected intents folded into the OOD class.
#[derive(Clone, Debug, PartialEq)]
pub struct IndSplit {
    pub space: IntentSpace,
    pub train: Dataset,
    pub valid: Dataset,
    /// Validation examples of unselected intents; only threshold baselines
    /// may look at these.
    pub valid_ood: Dataset,
    pub test: Dataset,
}

/// File stem of the validation OOD examples in a saved split.
pub const VALID_OOD_SPLIT: &str = "valid_ood";

impl IndSplit {
    /// Writes the split as a benchmark directory over the IND intents plus a
    /// `valid_ood.jsonl` file.
    pub fn save(&self, dir: &Path, name: &str, seed: Option<u64>) -> Result<()> {
        let bench = Benchmark {
            manifest: DatasetManifest {
                name: name.to_string(),
                feature_dim: self.train.feature_dim,
                classes: self.space.ind_names().to_vec(),
                counts: SplitCounts {
                    train: self.train.len(),
                    valid: self.valid.len(),
                    test: self.test.len(),
                },
                seed,
                format_version: FORMAT_VERSION,
            },
            train: self.train.clone(),
            valid: self.valid.clone(),
            test: self.test.clone(),
        };
        bench.save(dir)?;
        write_dataset(&split_path(dir, VALID_OOD_SPLIT), &self.valid_ood)
    }

    /// Loads a directory written by [`IndSplit::save`]. A missing
    /// `valid_ood.jsonl` yields an empty set.
    pub fn load(dir: &Path) -> Result<Self> {
        let bench = Benchmark::load(dir)?;
        let path = split_path(dir, VALID_OOD_SPLIT);
        let valid_ood = if path.exists() {
            load_dataset(&path, &bench.manifest, None)?
        } else {
            Dataset {
                space: bench.train.space.clone(),
                feature_dim: bench.manifest.feature_dim,
                examples: Vec::new(),
            }
        };
        if bench.train.examples.iter().chain(&bench.valid.examples).any(|e| !matches!(e.label, Label::Ind(_))) {
            return Err(Error::Validation {
                path: dir.to_path_buf(),
                message: "train and valid splits must hold IND examples only".into(),
            });
        }
        Ok(Self {
            space: bench.train.space.clone(),
            train: bench.train,
            valid: bench.valid,
            valid_ood,
            test: bench.test,
        })
    }
}

pub fn make_ind_split(full: &Benchmark, spec: SplitSpec) -> Result<IndSplit> {
    if !(spec.ind_ratio > 0.0 && spec.ind_ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "IND ratio must lie in (0, 1], got {}",
            spec.ind_ratio
        )));
    }
    let total = full.train.space.k();
    if total < 2 {
        return Err(Error::invalid("splitting needs at least two intents"));
    }
    let k = spec.num_ind(total);
    if k == 0 {
        return Err(Error::invalid("split selects no IND intents"));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut seeded(spec.seed, 0x5EED_5B17));
    let mut selected: Vec<usize> = order[..k].to_vec();
    selected.sort_unstable();
    let remap: HashMap<usize, usize> = selected
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();
    let names: Vec<String> = selected
        .iter()
        .map(|&i| full.train.space.ind_names()[i].clone())
        .collect();
    let space = IntentSpace::new(names)?;

    let relabel = |label: Label| -> Label {
        match label {
            Label::Ind(i) => remap.get(&i).map_or(Label::Ood, |&j| Label::Ind(j)),
            other => other,
        }
    };
    let make = |examples: Vec<Example>| Dataset {
        space: space.clone(),
        feature_dim: full.train.feature_dim,
        examples,
    };
    let ind_only = |d: &Dataset| -> (Vec<Example>, Vec<Example>) {
        let mut ind = Vec::new();
        let mut ood = Vec::new();
        for e in &d.examples {
            let mut e = e.clone();
            e.label = relabel(e.label);
            match e.label {
                Label::Ind(_) => ind.push(e),
                // held out from training, like the test split
                Label::Ood => ood.push(Example {
                    provenance: Provenance::Test,
                    ..e
                }),
                Label::Pseudo => {}
            }
        }
        (ind, ood)
    };
    let (train, _) = ind_only(&full.train);
    let (valid, valid_ood) = ind_only(&full.valid);
    let test = full
        .test
        .examples
        .iter()
        .map(|e| Example {
            label: relabel(e.label),
            ..e.clone()
        })
        .collect();
    Ok(IndSplit {
        train: make(train),
        valid: make(valid),
        valid_ood: make(valid_ood),
        test: make(test),
        space,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_intents: usize,
    pub dim: usize,
    pub n_per_intent: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_intents: 8,
            dim: 16,
            n_per_intent: 100,
            center_scale: 4.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

/// Per-intent 70/10/20 stratified split sizes.
pub fn stratified_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    let valid = ((0.1 * n as f64).round() as usize).min(n - train);
    (train, valid, n - train - valid)
}

/// Gaussian intent clusters with centers spread uniformly over a sphere.
pub fn synth_clusters(cfg: &SynthConfig) -> Result<Benchmark> {
    if cfg.n_intents == 0 || cfg.n_per_intent == 0 {
        return Err(Error::invalid("intent and per-intent counts must be positive"));
    }
    if cfg.dim < 2 {
        return Err(Error::invalid("synthetic clusters need dim >= 2"));
    }
    if !(cfg.noise_sigma > 0.0) || !(cfg.center_scale >= 0.0) {
        return Err(Error::invalid("noise_sigma must be positive and center_scale non-negative"));
    }
    let mut rng = seeded(cfg.seed, 0xC1A5_7E25);
    let names: Vec<String> = (0..cfg.n_intents).map(|i| format!("intent_{i:02}")).collect();
    let space = IntentSpace::new(names)?;
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    let (n_train, n_valid, _) = stratified_sizes(cfg.n_per_intent);
    for intent in 0..cfg.n_intents {
        let center: Vector = loop {
            let g: Vector = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = norm(&g);
            if n > 1e-9 {
                break g.into_iter().map(|v| v / n * cfg.center_scale).collect();
            }
        };
        for j in 0..cfg.n_per_intent {
            let features: Vector = center
                .iter()
                .map(|&c| c + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let (split, bucket, provenance) = if j < n_train {
                ("train", &mut train, Provenance::Ind)
            } else if j < n_train + n_valid {
                ("valid", &mut valid, Provenance::Ind)
            } else {
                ("test", &mut test, Provenance::Test)
            };
            bucket.push(Example {
                id: format!("{split}-{intent:02}-{j:04}"),
                features,
                label: Label::Ind(intent),
                provenance,
                text: None,
            });
        }
    }
    let mk = |examples| Dataset {
        space: space.clone(),
        feature_dim: cfg.dim,
        examples,
    };
    let manifest = DatasetManifest {
        name: format!("synth-{}x{}", cfg.n_intents, cfg.dim),
        feature_dim: cfg.dim,
        classes: space.ind_names().to_vec(),
        counts: SplitCounts {
            train: train.len(),
            valid: valid.len(),
            test: test.len(),
        },
        seed: Some(cfg.seed),
        format_version: FORMAT_VERSION,
    };
    Ok(Benchmark {
        manifest,
        train: mk(train),
        valid: mk(valid),
        test: mk(test),
    })
}
