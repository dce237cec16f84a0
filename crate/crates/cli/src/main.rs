//! `softood`: command-line pipeline for soft pseudo-labeled OOD intent
//! detection over fixed feature vectors.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use softood::cotrain::{smooth_pseudo_labels, train_knowd_teacher, train_with_teacher, history_csv, LabelScheme};
use softood::data::{
    load_dataset, make_ind_split, synth_clusters, write_dataset, Benchmark, Dataset, DatasetManifest, Example,
    IndSplit, Label, SplitCounts, SplitSpec, SynthConfig, FORMAT_VERSION, OOD_LABEL,
};
use softood::detector::{detect, fit_boundaries, Checkpoint};
use softood::eval::{
    ablate, compare, confusion, metrics, run_experiment, scheme_table, sweep, sweep_csv, ExperimentConfig,
    ExperimentReport, Metric, SweepGrid,
};
use softood::graph::prior_label;
use softood::oodgen::{generate, ingest_pd, OodMethod, PseudoOodConfig};
use softood::project::Pca2;

#[derive(Parser, Debug)]
#[command(name = "softood", version, about = "Soft pseudo-labeling for out-of-domain intent detection")]
struct Cli {
    /// Run configuration (TOML), layered over the file in SOFTOOD_CONFIG.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Base configuration file, applied before --config.
    #[arg(long = "base-config", env = config::ENV_VAR, global = true, value_name = "FILE", hide_env_values = true)]
    base_config: Option<PathBuf>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a Gaussian-cluster intent benchmark.
    #[command(after_help = "Errors: invalid-argument (zero intents, dimension or count; non-positive scale or noise), io.")]
    Synth(SynthArgs),
    /// Select IND intents and write train/valid/test/valid_ood splits.
    #[command(after_help = "Errors: validation (malformed manifest or split files), invalid-argument (ind ratio leaving no IND or no OOD intent), io.")]
    Split(SplitArgs),
    /// Build a pseudo-OOD set for an IND split.
    #[command(after_help = "Errors: invalid-argument (bad mixing range or quantile; os/pd without --source), dimension-mismatch (source width), validation, io.")]
    GenOod(GenOodArgs),
    /// Train a detector and fit its decision boundaries.
    #[command(after_help = "Errors: invalid-argument (out-of-range hyperparameter), validation (non-IND rows in train/valid, non-pseudo rows in --pseudo), diverged, io.")]
    Train(TrainArgs),
    /// Predict labels for a JSON-Lines file with a trained checkpoint.
    #[command(after_help = "Errors: validation (unknown label or wrong width in --input; checkpoint without boundaries), non-finite, io.")]
    Detect(DetectArgs),
    /// Score predictions, run seeded experiments, or compare two reports.
    #[command(after_help = "Errors: validation (missing, duplicate or unknown predictions), invalid-argument (fewer than two seeds for a t-test), all-seeds-failed, io.")]
    Eval(EvalArgs),
    /// Run several label schemes on shared seeds.
    #[command(after_help = "Errors: invalid-argument (unknown scheme, zero seeds), all-seeds-failed, io.")]
    Ablate(AblateArgs),
    /// Grid over τ, dropout, α and β.
    #[command(after_help = "Errors: invalid-argument (no axis given, out-of-range grid value, zero seeds). An omitted axis keeps the configured value., all-seeds-failed, io.")]
    Sweep(SweepArgs),
    /// Write prior and graph-smoothed labels of every pseudo example.
    #[command(after_help = "Errors: validation (split intents differ from the checkpoint; non-pseudo rows), io.")]
    DumpLabels(DumpLabelsArgs),
    /// Project examples onto their first two principal components.
    #[command(after_help = "Errors: invalid-argument (fewer than two points, width below two), dimension-mismatch, validation, io.")]
    Project2d(Project2dArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of intents.
    #[arg(long, default_value_t = 8)]
    intents: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Examples per intent, split 70/10/20.
    #[arg(long, default_value_t = 100)]
    per_intent: usize,
    /// Radius of the sphere the cluster centers are drawn from.
    #[arg(long, default_value_t = SynthConfig::default().center_scale)]
    center_scale: f64,
    /// Per-coordinate noise standard deviation.
    #[arg(long, default_value_t = SynthConfig::default().noise_sigma)]
    noise: f64,
    /// Random seed.
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Benchmark directory (manifest plus train/valid/test).
    #[arg(long)]
    data: PathBuf,
    /// Fraction of intents kept as IND [config: ind_ratio].
    #[arg(long)]
    ind_ratio: Option<f64>,
    /// Random seed.
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    /// Feature mixup of IND pairs.
    Fm,
    /// Open-domain sampling from --source.
    Os,
    /// Low-density latent sampling.
    Lg,
    /// Ingest phrase-distortion samples from --source.
    Pd,
}

impl From<MethodArg> for OodMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Fm => OodMethod::Fm,
            MethodArg::Os => OodMethod::Os,
            MethodArg::Lg => OodMethod::Lg,
            MethodArg::Pd => OodMethod::PdIngest,
        }
    }
}

#[derive(Args, Debug)]
struct GenOodArgs {
    /// Split directory written by `split`.
    #[arg(long)]
    data: PathBuf,
    /// Generation method [config: oodgen.method].
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Number of samples; defaults to the IND train size [config: oodgen.count].
    #[arg(long)]
    count: Option<usize>,
    /// Source JSON-Lines file for `os` and `pd` [config: oodgen.source].
    #[arg(long)]
    source: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    seed: u64,
    /// Output JSON-Lines file.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Split directory written by `split`.
    #[arg(long)]
    data: PathBuf,
    /// Pseudo-OOD JSON-Lines file written by `gen-ood`.
    #[arg(long)]
    pseudo: PathBuf,
    /// Label scheme for pseudo-OOD targets [config: train.label_scheme].
    #[arg(long)]
    scheme: Option<LabelScheme>,
    /// Maximum epochs [config: train.max_epochs].
    #[arg(long)]
    epochs: Option<usize>,
    /// Random seed.
    #[arg(long)]
    seed: u64,
    /// Also write the per-epoch history as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Output checkpoint (JSON).
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Examples to classify (JSON-Lines).
    #[arg(long)]
    input: PathBuf,
    /// Output CSV (id, label, max_prob, min_boundary_margin); stdout if absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    AccAll,
    F1All,
    F1Ood,
    F1Ind,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::AccAll => Metric::AccAll,
            MetricArg::F1All => Metric::F1All,
            MetricArg::F1Ood => Metric::F1Ood,
            MetricArg::F1Ind => Metric::F1Ind,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predictions CSV with `id` and `label` columns.
    #[arg(long, requires = "gold", conflicts_with_all = ["seeds", "compare"])]
    pred: Option<PathBuf>,
    /// Gold JSON-Lines file.
    #[arg(long, requires = "pred")]
    gold: Option<PathBuf>,
    /// Manifest for the gold file; defaults to manifest.json beside it.
    #[arg(long, requires = "gold")]
    manifest: Option<PathBuf>,
    /// Run the configured experiment over this many seeds [config: n_seeds].
    #[arg(long, conflicts_with = "compare")]
    seeds: Option<usize>,
    /// First seed of an experiment run.
    #[arg(long, requires = "seeds")]
    seed: Option<u64>,
    /// Label scheme for an experiment run [config: train.label_scheme].
    #[arg(long, requires = "seeds")]
    scheme: Option<LabelScheme>,
    /// Also run the max-softmax baseline [config: msp].
    #[arg(long, requires = "seeds")]
    msp: bool,
    /// Worker threads for independent seeds.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Compare two experiment reports with a t-test.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    compare: Option<Vec<PathBuf>>,
    /// Metric for --compare.
    #[arg(long, value_enum, default_value = "f1-ood")]
    metric: MetricArg,
    /// Pair seeds in --compare instead of Welch's unequal-variance test.
    #[arg(long)]
    paired: bool,
    /// Output JSON; stdout if absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Comma-separated label schemes.
    #[arg(long, value_delimiter = ',', default_value = "asoul,asoul-ct,asoul-gs,usoul,knowd,onehot")]
    schemes: Vec<LabelScheme>,
    /// Number of seeds [config: n_seeds].
    #[arg(long)]
    seeds: Option<usize>,
    /// First seed.
    #[arg(long)]
    seed: u64,
    /// Worker threads for independent seeds.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Directory for one JSON report per scheme.
    #[arg(long)]
    reports: Option<PathBuf>,
    /// Output CSV (scheme, metrics); stdout if absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Graph temperatures τ (comma-separated).
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
    /// Dropout rates (comma-separated).
    #[arg(long, value_delimiter = ',')]
    dropout: Vec<f64>,
    /// Smoothing weights α (comma-separated).
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    /// Co-training weights β (comma-separated).
    #[arg(long, value_delimiter = ',')]
    beta: Vec<f64>,
    /// Number of seeds per grid point [config: n_seeds].
    #[arg(long)]
    seeds: Option<usize>,
    /// First seed.
    #[arg(long)]
    seed: u64,
    /// Worker threads for independent seeds.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output CSV; stdout if absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DumpLabelsArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Split directory the model was trained on.
    #[arg(long)]
    data: PathBuf,
    /// Pseudo-OOD JSON-Lines file.
    #[arg(long)]
    pseudo: PathBuf,
    /// Output CSV; stdout if absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Project2dArgs {
    /// JSON-Lines files to project together.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Project encoder representations of this checkpoint instead of raw features.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Manifest for the inputs when no checkpoint is given; defaults to
    /// manifest.json beside the first input.
    #[arg(long, conflicts_with = "model")]
    manifest: Option<PathBuf>,
    /// Output CSV (id, label, provenance, x, y); stdout if absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    kind: &'a str,
    message: String,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use softood::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::DimensionMismatch { .. } => "dimension-mismatch",
                E::NonFinite(_) => "non-finite",
                E::InvalidArgument(_) => "invalid-argument",
                E::DegenerateEmbedding(_) => "degenerate-embedding",
                E::MissingGradients(_) => "missing-gradients",
                E::Parse { .. } => "parse",
                E::Validation { .. } => "validation",
                E::Empty(_) => "empty-input",
                E::NotInGraph(_) => "not-in-graph",
                E::AcceptanceFailure { .. } => "acceptance-failure",
                E::Diverged { .. } => "diverged",
                E::AllSeedsFailed(_) => "all-seeds-failed",
                E::Io { .. } => "io",
                E::Json(_) => "json",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "config";
        }
    }
    "error"
}

/// The context chain joined by ": ", skipping causes already spelled out
/// by the message above them.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn emit_error(kind: &str, message: String) {
    let body = ErrorBody { error: ErrorDetail { kind, message } };
    eprintln!("{}", serde_json::to_string(&body).expect("error body serializes"));
}

/// One line on stderr naming the command and its resolved settings.
fn summary(command: &str, resolved: &impl Serialize) -> Result<()> {
    eprintln!("softood {command}: {}", serde_json::to_string(resolved)?);
    Ok(())
}

fn write_out(path: Option<&Path>, body: &[u8]) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(body)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn json_pretty(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| anyhow!("{e}"))
}

fn manifest_beside(file: &Path) -> PathBuf {
    file.parent().unwrap_or(Path::new(".")).join(softood::data::MANIFEST_FILE)
}

/// A manifest over given intents, used to load free-standing files.
fn ad_hoc_manifest(classes: Vec<String>, feature_dim: usize) -> DatasetManifest {
    DatasetManifest {
        name: "input".into(),
        feature_dim,
        classes,
        counts: SplitCounts { train: 0, valid: 0, test: 0 },
        seed: None,
        format_version: FORMAT_VERSION,
    }
}

fn split_manifest(dir: &Path) -> Result<DatasetManifest> {
    Ok(DatasetManifest::load(&dir.join(softood::data::MANIFEST_FILE))?)
}

fn load_pseudo(path: &Path, manifest: &DatasetManifest) -> Result<Vec<Example>> {
    let ds = load_dataset(path, manifest, None)?;
    if let Some(x) = ds.examples.iter().find(|x| x.label != Label::Pseudo) {
        bail!("{}: `{}` is not a pseudo-OOD example", path.display(), x.id);
    }
    if ds.is_empty() {
        bail!("{}: no pseudo-OOD examples", path.display());
    }
    Ok(ds.examples)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_intents: a.intents,
        dim: a.dim,
        n_per_intent: a.per_intent,
        center_scale: a.center_scale,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    summary("synth", &cfg)?;
    synth_clusters(&cfg)?.save(&a.out)?;
    Ok(())
}

fn cmd_split(a: SplitArgs, base: &ExperimentConfig) -> Result<()> {
    let spec = SplitSpec { ind_ratio: a.ind_ratio.unwrap_or(base.ind_ratio), seed: a.seed };
    summary("split", &spec)?;
    let full = Benchmark::load(&a.data)?;
    let split = make_ind_split(&full, spec)?;
    let name = format!("{}-ind{}", full.manifest.name, split.space.k());
    split.save(&a.out, &name, Some(a.seed))?;
    Ok(())
}

fn cmd_gen_ood(a: GenOodArgs, base: &ExperimentConfig) -> Result<()> {
    let mut cfg = PseudoOodConfig { seed: a.seed, ..base.oodgen.clone() };
    if let Some(m) = a.method {
        cfg.method = m.into();
    }
    if a.count.is_some() {
        cfg.count = a.count;
    }
    if a.source.is_some() {
        cfg.source = a.source;
    }
    cfg.validate()?;
    summary("gen-ood", &cfg)?;
    let split = IndSplit::load(&a.data)?;
    let examples = match cfg.method {
        OodMethod::PdIngest => {
            let src = cfg.source.as_deref().ok_or_else(|| anyhow!("--method pd needs --source"))?;
            ingest_pd(src, &split.space, split.train.feature_dim)?.examples
        }
        _ => generate(&split.train, &cfg)?,
    };
    let ds = Dataset { space: split.space.clone(), feature_dim: split.train.feature_dim, examples };
    write_dataset(&a.out, &ds)?;
    Ok(())
}

fn cmd_train(a: TrainArgs, base: &ExperimentConfig) -> Result<()> {
    let mut cfg = base.train.clone();
    cfg.seed = a.seed;
    if let Some(s) = a.scheme {
        cfg.label_scheme = s;
    }
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    cfg.validate()?;
    summary("train", &serde_json::json!({ "train": cfg, "adb": base.adb }))?;
    let split = IndSplit::load(&a.data)?;
    let pseudo = load_pseudo(&a.pseudo, &split_manifest(&a.data)?)?;
    let teacher = if cfg.label_scheme == LabelScheme::Knowd {
        Some(train_knowd_teacher(&split.train, &split.valid, &cfg)?)
    } else {
        None
    };
    let out = train_with_teacher(&split.train, &pseudo, &split.valid, &cfg, teacher.as_ref())?;
    let boundaries = fit_boundaries(&out.model, &split.train, &pseudo, &base.adb, a.seed)?;
    if let Some(h) = &a.history {
        write_out(Some(h), history_csv(&out.history).as_bytes())?;
    }
    log::info!(
        "trained {} epochs (best {:?}); boundary fit converged: {}",
        out.history.len(),
        out.best_epoch,
        boundaries.fitted_on.converged
    );
    Checkpoint::new(cfg, split.space.ind_names().to_vec(), out.model, Some(boundaries)).save(&a.out)?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let boundaries = ck
        .boundaries
        .as_ref()
        .ok_or_else(|| anyhow!("checkpoint {} has no decision boundaries", a.model.display()))?;
    summary("detect", &serde_json::json!({ "model": a.model, "input": a.input, "intents": ck.intents }))?;
    let manifest = ad_hoc_manifest(ck.intents.clone(), ck.model.input_dim());
    let space = manifest.space()?;
    let input = load_dataset(&a.input, &manifest, None)?;
    let rows = input
        .examples
        .iter()
        .map(|x| {
            let p = detect(&ck.model, boundaries, &x.features)?;
            Ok(vec![
                x.id.clone(),
                space.name_of(p.label).to_string(),
                p.max_prob().to_string(),
                p.min_boundary_margin.to_string(),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let header = ["id", "label", "max_prob", "min_boundary_margin"].map(String::from);
    write_out(a.out.as_deref(), &csv_bytes(&header, rows)?)
}

fn read_predictions(path: &Path) -> Result<std::collections::HashMap<String, String>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("{}: missing `{name}` column", path.display()))
    };
    let (id, label) = (col("id")?, col("label")?);
    let mut out = std::collections::HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let key = rec.get(id).unwrap_or_default().to_string();
        if out.insert(key.clone(), rec.get(label).unwrap_or_default().to_string()).is_some() {
            bail!("{}: duplicate prediction for `{key}` (row {})", path.display(), i + 2);
        }
    }
    Ok(out)
}

fn eval_predictions(pred: &Path, gold: &Path, manifest: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let mpath = manifest.map(Path::to_path_buf).unwrap_or_else(|| manifest_beside(gold));
    summary("eval", &serde_json::json!({ "pred": pred, "gold": gold, "manifest": mpath }))?;
    let manifest = DatasetManifest::load(&mpath)?;
    let gold = load_dataset(gold, &manifest, None)?;
    let space = &gold.space;
    let preds = read_predictions(pred)?;
    let k = space.k();
    let mut g = Vec::with_capacity(gold.len());
    let mut p = Vec::with_capacity(gold.len());
    for x in &gold.examples {
        let Some(gi) = x.label.class_index(k) else { continue };
        let name = preds.get(&x.id).ok_or_else(|| anyhow!("no prediction for `{}`", x.id))?;
        let pi = if name == OOD_LABEL {
            k
        } else {
            space.index_of(name).ok_or_else(|| anyhow!("unknown predicted label `{name}` for `{}`", x.id))?
        };
        g.push(gi);
        p.push(pi);
    }
    let report = metrics(&confusion(&g, &p, k)?);
    write_out(out, &json_pretty(&report)?)
}

fn experiment_config(base: &ExperimentConfig, seeds: Option<usize>, first: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    if let Some(n) = seeds {
        cfg.n_seeds = n;
    }
    cfg.first_seed = first;
    cfg
}

fn cmd_eval(a: EvalArgs, base: &ExperimentConfig) -> Result<()> {
    if let (Some(pred), Some(gold)) = (&a.pred, &a.gold) {
        return eval_predictions(pred, gold, a.manifest.as_deref(), a.out.as_deref());
    }
    if let Some(paths) = &a.compare {
        let load = |p: &PathBuf| -> Result<ExperimentReport> {
            let body = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&body).with_context(|| format!("parsing report {}", p.display()))
        };
        let (ra, rb) = (load(&paths[0])?, load(&paths[1])?);
        let metric: Metric = a.metric.into();
        summary("eval", &serde_json::json!({ "compare": paths, "metric": metric.header(), "paired": a.paired }))?;
        let t = compare(&ra, &rb, metric, a.paired)?;
        let body = serde_json::json!({
            "a": ra.name, "b": rb.name, "metric": metric.header(), "paired": a.paired,
            "mean_a": ra.mean.get(metric), "mean_b": rb.mean.get(metric), "test": t,
        });
        return write_out(a.out.as_deref(), &json_pretty(&body)?);
    }
    if a.seeds.is_some() {
        let first = a.seed.ok_or_else(|| anyhow!("an experiment run needs --seed"))?;
        let mut cfg = experiment_config(base, a.seeds, first);
        if let Some(s) = a.scheme {
            cfg = cfg.with_scheme(s);
        }
        cfg.msp |= a.msp;
        summary("eval", &cfg)?;
        let report = run_experiment(&cfg, a.jobs)?;
        return write_out(a.out.as_deref(), &json_pretty(&report)?);
    }
    bail!("eval needs --pred/--gold, --seeds, or --compare")
}

fn cmd_ablate(a: AblateArgs, base: &ExperimentConfig) -> Result<()> {
    let cfg = experiment_config(base, a.seeds, a.seed);
    summary("ablate", &serde_json::json!({ "schemes": a.schemes, "experiment": cfg }))?;
    let reports = ablate(&cfg, &a.schemes, a.jobs)?;
    if let Some(dir) = &a.reports {
        std::fs::create_dir_all(dir)?;
        for (s, r) in &reports {
            write_out(Some(&dir.join(format!("{s}.json"))), &json_pretty(r)?)?;
        }
    }
    let soft = reports.iter().find(|(s, _)| *s == LabelScheme::Asoul);
    let hard = reports.iter().find(|(s, _)| *s == LabelScheme::Onehot);
    if let (Some((_, sa)), Some((_, oh))) = (soft, hard) {
        let t = compare(sa, oh, Metric::F1Ood, false)?;
        log::info!("F1-OOD asoul vs onehot: t {:.3}, p {:.4}", t.t, t.p_value);
    }
    write_out(a.out.as_deref(), scheme_table(&reports).as_bytes())
}

fn cmd_sweep(a: SweepArgs, base: &ExperimentConfig) -> Result<()> {
    let cfg = experiment_config(base, a.seeds, a.seed);
    let grid = SweepGrid { tau: a.tau, dropout: a.dropout, alpha: a.alpha, beta: a.beta };
    summary("sweep", &serde_json::json!({ "grid": grid, "experiment": cfg }))?;
    let rows = sweep(&cfg, &grid, a.jobs)?;
    write_out(a.out.as_deref(), sweep_csv(&rows).as_bytes())
}

fn cmd_dump_labels(a: DumpLabelsArgs) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    summary("dump-labels", &serde_json::json!({ "model": a.model, "data": a.data, "graph": ck.config.graph_config() }))?;
    let split = IndSplit::load(&a.data)?;
    if split.space.ind_names() != ck.intents.as_slice() {
        bail!("split intents do not match the checkpoint");
    }
    let pseudo = load_pseudo(&a.pseudo, &split_manifest(&a.data)?)?;
    let smoothed = smooth_pseudo_labels(&ck.model, &split.train, &pseudo, ck.config.graph_config())?;
    let classes: Vec<String> = (0..split.space.num_classes()).map(|i| split.space.name_of(i).to_string()).collect();
    let mut header = vec!["id".to_string()];
    header.extend(classes.iter().map(|c| format!("lp_{c}")));
    header.extend(classes.iter().map(|c| format!("lg_{c}")));
    let rows = pseudo
        .iter()
        .map(|x| {
            let lp = prior_label(x, &split.space)?.to_vec();
            let lg = smoothed.get(&x.id).ok_or_else(|| anyhow!("no smoothed label for `{}`", x.id))?;
            let mut row = vec![x.id.clone()];
            row.extend(lp.iter().chain(lg).map(f64::to_string));
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    write_out(a.out.as_deref(), &csv_bytes(&header, rows)?)
}

fn cmd_project2d(a: Project2dArgs) -> Result<()> {
    let ck = a.model.as_deref().map(load_checkpoint).transpose()?;
    let manifest = match &ck {
        Some(ck) => ad_hoc_manifest(ck.intents.clone(), ck.model.input_dim()),
        None => {
            let m = DatasetManifest::load(&a.manifest.clone().unwrap_or_else(|| manifest_beside(&a.input[0])))?;
            ad_hoc_manifest(m.classes, m.feature_dim)
        }
    };
    summary("project2d", &serde_json::json!({ "input": a.input, "model": a.model, "feature_dim": manifest.feature_dim }))?;
    let space = manifest.space()?;
    let mut examples = Vec::new();
    for p in &a.input {
        examples.extend(load_dataset(p, &manifest, None)?.examples);
    }
    let points = examples
        .iter()
        .map(|x| match &ck {
            Some(ck) => Ok(ck.model.encode(&x.features)?),
            None => Ok(x.features.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    let pca = Pca2::fit(&points)?;
    let rows = examples.iter().zip(&points).map(|(x, p)| {
        let [u, v] = pca.project(p);
        let label = match x.label.class_index(space.k()) {
            Some(i) => space.name_of(i).to_string(),
            None => "pseudo".to_string(),
        };
        vec![x.id.clone(), label, x.provenance.as_str().to_string(), u.to_string(), v.to_string()]
    });
    let header = ["id", "label", "provenance", "x", "y"].map(String::from);
    write_out(a.out.as_deref(), &csv_bytes(&header, rows)?)
}

fn run(cli: Cli) -> Result<()> {
    let needs_config = !matches!(
        cli.command,
        Command::Synth(_) | Command::Detect(_) | Command::DumpLabels(_) | Command::Project2d(_)
    );
    let base = if needs_config {
        config::resolve(cli.base_config.as_deref(), cli.config.as_deref())?
    } else {
        ExperimentConfig::default()
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a, &base),
        Command::GenOod(a) => cmd_gen_ood(a, &base),
        Command::Train(a) => cmd_train(a, &base),
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a, &base),
        Command::Ablate(a) => cmd_ablate(a, &base),
        Command::Sweep(a) => cmd_sweep(a, &base),
        Command::DumpLabels(a) => cmd_dump_labels(a),
        Command::Project2d(a) => cmd_project2d(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit_error("usage", e.render().to_string().trim_end().to_string());
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            emit_error(error_kind(&e), message(&e));
            ExitCode::FAILURE
        }
    }
}
