//! Two dropout-diverse classification heads over a shared encoder, the
//! soft-target rules for pseudo-OOD examples, and the training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, Label};
use crate::embedding::{contrastive_loss, EmbeddingNet, EncoderConfig, Reduction};
use crate::error::{Error, Result};
use crate::graph::{EmbeddingGraph, GraphConfig};
use crate::numerics::{
    argmax, cross_entropy, interpolate, is_probability_vector, one_hot, optimizer_step, softmax,
    softmax_cross_entropy_grad, AdamConfig, Dropout, Mlp, MlpSpec, ParamStore, SoftLabel, Vector,
};
use crate::rng::{mix_seed, seeded};

/// Tolerance used when checking target inputs are distributions.
const PROB_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelScheme {
    Asoul,
    Onehot,
    AsoulCt,
    AsoulGs,
    Usoul,
    Knowd,
}

impl LabelScheme {
    /// Ablation table order.
    pub const ALL: [LabelScheme; 6] = [
        LabelScheme::Asoul,
        LabelScheme::AsoulCt,
        LabelScheme::AsoulGs,
        LabelScheme::Usoul,
        LabelScheme::Knowd,
        LabelScheme::Onehot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelScheme::Asoul => "asoul",
            LabelScheme::Onehot => "onehot",
            LabelScheme::AsoulCt => "asoul-ct",
            LabelScheme::AsoulGs => "asoul-gs",
            LabelScheme::Usoul => "usoul",
            LabelScheme::Knowd => "knowd",
        }
    }

    /// Whether the contrastive loss, projection and embedding graph are active.
    pub fn uses_graph(self) -> bool {
        matches!(self, LabelScheme::Asoul | LabelScheme::AsoulCt)
    }

    pub fn num_heads(self) -> usize {
        match self {
            LabelScheme::AsoulCt => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LabelScheme::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown label scheme `{s}` (expected one of asoul, onehot, asoul-ct, asoul-gs, usoul, knowd)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub label_scheme: LabelScheme,
    pub alpha: f64,
    pub beta: f64,
    /// Contrastive temperature `t`.
    pub temperature: f64,
    /// Graph attention temperature `τ`.
    pub tau: f64,
    pub include_self: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_m: Option<usize>,
    /// Rebuild the graph every this many epochs.
    pub graph_refresh: usize,
    pub usoul_epsilon: f64,
    /// Dropout rate on every head layer input.
    pub dropout: f64,
    pub lr_encoder: f64,
    pub lr_heads: f64,
    pub weight_decay: f64,
    pub batch_ind: usize,
    pub batch_ood: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Minimum validation-loss improvement that resets patience.
    pub min_delta: f64,
    pub seed: u64,
    pub feature_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: usize,
    pub proj_dim: usize,
    pub negative_slope: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            label_scheme: LabelScheme::Asoul,
            alpha: 0.11,
            beta: 0.9,
            temperature: 0.1,
            tau: 0.1,
            include_self: false,
            top_m: None,
            graph_refresh: 1,
            usoul_epsilon: 0.1,
            dropout: 0.6,
            lr_encoder: 1e-5,
            lr_heads: 1e-4,
            weight_decay: 0.01,
            batch_ind: 100,
            batch_ood: 100,
            max_epochs: 30,
            patience: 3,
            min_delta: 1e-4,
            seed: 0,
            feature_dim: 64,
            encoder_hidden: Vec::new(),
            head_hidden: 64,
            proj_dim: 32,
            negative_slope: 0.01,
        }
    }
}

impl TrainConfig {
    /// Settings for the small synthetic benchmark: the default loss weights
    /// and temperatures, with step sizes and batches scaled for a randomly
    /// initialized encoder on a few hundred examples.
    pub fn desk() -> Self {
        Self {
            lr_encoder: 3e-3,
            lr_heads: 3e-3,
            batch_ind: 32,
            batch_ood: 32,
            max_epochs: 30,
            patience: 5,
            feature_dim: 32,
            head_hidden: 32,
            proj_dim: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.usoul_epsilon >= 0.0 && self.usoul_epsilon <= 1.0) {
            return Err(Error::invalid("usoul_epsilon must lie in [0, 1]"));
        }
        if !(self.temperature > 0.0 && self.tau > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if !(self.lr_encoder > 0.0 && self.lr_heads > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::invalid("learning rates must be positive and weight decay non-negative"));
        }
        if self.patience == 0 || self.graph_refresh == 0 {
            return Err(Error::invalid("patience and graph_refresh must be at least 1"));
        }
        if self.batch_ind == 0 || self.batch_ood == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if self.feature_dim == 0 || self.head_hidden == 0 || self.proj_dim == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.encoder_hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        self.graph_config().validate()
    }

    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            tau: self.tau,
            alpha: self.alpha,
            include_self: self.include_self,
            top_m: self.top_m,
        }
    }

    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        let mut widths = vec![input_dim];
        widths.extend(&self.encoder_hidden);
        widths.push(self.feature_dim);
        EncoderConfig {
            encoder: MlpSpec::new(widths, true).with_negative_slope(self.negative_slope),
            projection: MlpSpec::new(vec![self.feature_dim, self.feature_dim, self.proj_dim], false)
                .with_negative_slope(self.negative_slope),
            temperature: self.temperature,
        }
    }

    pub fn head_spec(&self, outputs: usize) -> MlpSpec {
        MlpSpec::new(vec![self.feature_dim, self.head_hidden, outputs], false)
            .with_negative_slope(self.negative_slope)
            .with_dropout(self.dropout)
    }

    fn encoder_optimizer(&self) -> AdamConfig {
        AdamConfig::adamw(self.lr_encoder, self.weight_decay)
    }

    fn head_optimizer(&self) -> AdamConfig {
        AdamConfig::adam(self.lr_heads)
    }
}

/// Source of dropout masks for one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stochasticity {
    Off,
    /// Masks derived from a per-step seed, the head's stream, the batch kind
    /// and the example's position in the batch.
    Step(u64),
}

const PHASE_IND: u64 = 1;
const PHASE_OOD: u64 = 2;

impl Stochasticity {
    fn dropout(self, stream: u64, phase: u64, pos: usize) -> Dropout {
        match self {
            Stochasticity::Off => Dropout::Off,
            Stochasticity::Step(s) => {
                Dropout::Seeded(mix_seed(mix_seed(mix_seed(s, stream), phase), pos as u64))
            }
        }
    }
}

/// Softmax distribution of one head over `k + 1` classes.
pub fn head_predict(head: &Mlp, features: &[f64], dropout: Dropout) -> Result<SoftLabel> {
    softmax(&head.forward(features, dropout)?.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub mlp: Mlp,
    /// Dropout stream identifier; travels with the parameters.
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub net: EmbeddingNet,
    pub heads: Vec<Head>,
}

impl DetectorModel {
    pub fn new(cfg: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::invalid("a detector needs at least one IND class plus OOD"));
        }
        let net = EmbeddingNet::new(&cfg.encoder_config(input_dim), mix_seed(cfg.seed, 0xE2C0))?;
        let heads = (0..cfg.label_scheme.num_heads())
            .map(|h| {
                let stream = h as u64 + 1;
                Ok(Head {
                    mlp: Mlp::new(cfg.head_spec(num_classes), mix_seed(cfg.seed, 0x4EAD_0000 + stream))?,
                    stream,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { net, heads })
    }

    pub fn validate(&self) -> Result<()> {
        self.net.config().validate()?;
        let first = self
            .heads
            .first()
            .ok_or_else(|| Error::invalid("model has no classification heads"))?;
        for h in &self.heads {
            h.mlp.validate()?;
            if h.mlp.spec.input_dim() != self.feature_dim() {
                return Err(Error::invalid("head input must equal encoder feature_dim"));
            }
            if h.mlp.spec.output_dim() != first.mlp.spec.output_dim() {
                return Err(Error::invalid("heads disagree on the number of classes"));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.heads[0].mlp.spec.output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.net.encoder.spec.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.net.encoder.spec.input_dim()
    }

    pub fn encode(&self, features: &[f64]) -> Result<Vector> {
        self.net.encode(features)
    }

    /// Every head's distribution for a representation, dropout off.
    pub fn head_distributions(&self, representation: &[f64]) -> Result<Vec<SoftLabel>> {
        self.heads
            .iter()
            .map(|h| head_predict(&h.mlp, representation, Dropout::Off))
            .collect()
    }

    /// Mean of the head distributions for a representation.
    pub fn average_distribution(&self, representation: &[f64]) -> Result<SoftLabel> {
        let dists = self.head_distributions(representation)?;
        let n = dists.len() as f64;
        let mut avg = vec![0.0; self.num_classes()];
        for d in &dists {
            avg.iter_mut().zip(d).for_each(|(a, v)| *a += v / n);
        }
        Ok(avg)
    }

    /// Exchanges the two heads together with their dropout streams.
    pub fn swap_heads(&mut self) {
        if self.heads.len() == 2 {
            self.heads.swap(0, 1);
        }
    }

    fn stores(&self) -> Vec<&ParamStore> {
        let mut s = vec![&self.net.encoder.params, &self.net.projection.params];
        s.extend(self.heads.iter().map(|h| &h.mlp.params));
        s
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut s = vec![&mut self.net.encoder.params, &mut self.net.projection.params];
        s.extend(self.heads.iter_mut().map(|h| &mut h.mlp.params));
        s
    }

    /// All parameters: encoder, projection, then heads in order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.stores().iter().flat_map(|s| s.flat_values()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.stores().iter().flat_map(|s| s.flat_grads()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.stores().iter().map(|s| s.num_params()).sum();
        crate::error::ensure_dim("flat parameters", total, flat.len())?;
        let mut offset = 0;
        for s in self.stores_mut() {
            let n = s.num_params();
            s.set_flat_values(&flat[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for s in self.stores_mut() {
            s.zero_grads();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.stores().iter().all(|s| s.is_finite())
    }
}

/// Inputs to the pseudo-OOD target rule for one example and one producing head.
#[derive(Clone, Copy, Debug)]
pub struct TargetInputs<'a> {
    /// One-hot prior `l_p`.
    pub prior: &'a [f64],
    /// Graph-smoothed label `l_g`.
    pub smoothed: Option<&'a [f64]>,
    /// Producing head's prediction, treated as a constant.
    pub head_pred: &'a [f64],
    /// k-way teacher prediction (not yet lifted).
    pub teacher: Option<&'a [f64]>,
}

fn check_distribution(what: &str, p: &[f64], len: usize) -> Result<()> {
    crate::error::ensure_dim("soft target input", len, p.len())?;
    if !is_probability_vector(p, PROB_TOL) {
        return Err(Error::invalid(format!("{what} is not a probability vector")));
    }
    Ok(())
}

/// Appends a zero OOD entry to a k-way distribution.
pub fn lift_teacher(pred: &[f64]) -> SoftLabel {
    let mut v = pred.to_vec();
    v.push(0.0);
    v
}

pub fn make_soft_target(
    scheme: LabelScheme,
    inputs: &TargetInputs<'_>,
    beta: f64,
    usoul_epsilon: f64,
) -> Result<SoftLabel> {
    let n = inputs.head_pred.len();
    if n < 2 {
        return Err(Error::invalid("targets need at least one IND class plus OOD"));
    }
    let k = n - 1;
    check_distribution("head prediction", inputs.head_pred, n)?;
    check_distribution("prior label", inputs.prior, n)?;
    let smoothed = || -> Result<&[f64]> {
        let l = inputs
            .smoothed
            .ok_or_else(|| Error::invalid(format!("scheme {scheme} needs a graph-smoothed label")))?;
        check_distribution("graph-smoothed label", l, n)?;
        Ok(l)
    };
    match scheme {
        LabelScheme::Asoul => interpolate(beta, smoothed()?, inputs.head_pred),
        LabelScheme::AsoulCt => Ok(smoothed()?.to_vec()),
        LabelScheme::AsoulGs => interpolate(beta, inputs.prior, inputs.head_pred),
        LabelScheme::Onehot => Ok(one_hot(n, k)),
        LabelScheme::Usoul => {
            let mut v = vec![usoul_epsilon / k as f64; n];
            v[k] = 1.0 - usoul_epsilon;
            Ok(v)
        }
        LabelScheme::Knowd => {
            let t = inputs
                .teacher
                .ok_or_else(|| Error::invalid("scheme knowd needs a teacher prediction"))?;
            check_distribution("teacher prediction", t, k)?;
            interpolate(beta, &one_hot(n, k), &lift_teacher(t))
        }
    }
}

/// Per-example labels that feed the target rule, keyed by example id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoAux {
    pub smoothed: BTreeMap<String, SoftLabel>,
    pub teacher: BTreeMap<String, SoftLabel>,
}

/// `targets[n][j]` is the label head `j` is fit to on the `n`-th example;
/// with two heads it is produced by the peer head.
pub type CoTargets = Vec<Vec<SoftLabel>>;

/// Classification term for one example: mean over heads of `CE(l_p, g_i)`.
pub fn cls_term(prior: &[f64], preds: &[SoftLabel]) -> Result<f64> {
    let mut total = 0.0;
    for p in preds {
        total += cross_entropy(prior, p)?;
    }
    Ok(total / preds.len() as f64)
}

/// Co-training term for one example: mean over heads of `CE(target_j, g_j)`.
pub fn co_term(targets: &[SoftLabel], preds: &[SoftLabel]) -> Result<f64> {
    crate::error::ensure_dim("co-training targets", preds.len(), targets.len())?;
    let mut total = 0.0;
    for (t, p) in targets.iter().zip(preds) {
        total += cross_entropy(t, p)?;
    }
    Ok(total / preds.len() as f64)
}

fn require_ind(batch: &[&Example]) -> Result<Vec<usize>> {
    batch
        .iter()
        .map(|x| match x.label {
            Label::Ind(i) => Ok(i),
            _ => Err(Error::invalid(format!(
                "`{}` is not an IND example; the classification loss only sees labeled IND data",
                x.id
            ))),
        })
        .collect()
}

fn require_pseudo(batch: &[&Example]) -> Result<()> {
    match batch.iter().find(|x| x.label != Label::Pseudo) {
        Some(x) => Err(Error::invalid(format!("`{}` is not a pseudo-OOD example", x.id))),
        None => Ok(()),
    }
}

/// Fits every head to per-example targets, accumulating gradients into the
/// heads and the encoder. Returns the batch mean of the per-example terms.
fn fit_heads(
    model: &mut DetectorModel,
    batch: &[&Example],
    targets: &[Vec<SoftLabel>],
    mode: Stochasticity,
    phase: u64,
) -> Result<f64> {
    let n = batch.len() as f64;
    let h = model.heads.len() as f64;
    let mut total = 0.0;
    for (pos, (x, tgt)) in batch.iter().zip(targets).enumerate() {
        crate::error::ensure_dim("targets per example", model.heads.len(), tgt.len())?;
        let (f, fcache) = model.net.encoder.forward(&x.features, Dropout::Off)?;
        let mut grad_f = vec![0.0; f.len()];
        for (head, t) in model.heads.iter_mut().zip(tgt) {
            let (logits, hcache) = head.mlp.forward(&f, mode.dropout(head.stream, phase, pos))?;
            let p = softmax(&logits, 1.0)?;
            total += cross_entropy(t, &p)? / h;
            let g: Vector = softmax_cross_entropy_grad(t, &p)?
                .into_iter()
                .map(|v| v / (h * n))
                .collect();
            let gf = head.mlp.backward(&hcache, &g)?;
            grad_f.iter_mut().zip(&gf).for_each(|(a, b)| *a += b);
        }
        model.net.encoder.backward(&fcache, &grad_f)?;
    }
    Ok(total / n)
}

/// IND classification loss (batch mean), gradients into encoder and heads.
pub fn ind_cls_loss(model: &mut DetectorModel, batch: &[&Example], mode: Stochasticity) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("IND batch".into()));
    }
    let c = model.num_classes();
    let labels = require_ind(batch)?;
    if let Some(&bad) = labels.iter().find(|&&y| y + 1 >= c) {
        return Err(Error::invalid(format!("IND label {bad} is out of range for {c} classes")));
    }
    let targets: Vec<Vec<SoftLabel>> = labels
        .iter()
        .map(|&y| vec![one_hot(c, y); model.heads.len()])
        .collect();
    fit_heads(model, batch, &targets, mode, PHASE_IND)
}

/// Builds each head's target for a pseudo-OOD batch from the current head
/// predictions under the same dropout masks the loss will use.
pub fn co_targets(
    model: &DetectorModel,
    batch: &[&Example],
    aux: &PseudoAux,
    cfg: &TrainConfig,
    mode: Stochasticity,
) -> Result<CoTargets> {
    require_pseudo(batch)?;
    let c = model.num_classes();
    let prior = one_hot(c, c - 1);
    let heads = model.heads.len();
    batch
        .iter()
        .enumerate()
        .map(|(pos, x)| {
            let f = model.encode(&x.features)?;
            let smoothed = aux.smoothed.get(&x.id).map(Vec::as_slice);
            if cfg.label_scheme.uses_graph() && smoothed.is_none() {
                return Err(Error::invalid(format!("no graph-smoothed label for `{}`", x.id)));
            }
            let teacher = aux.teacher.get(&x.id).map(Vec::as_slice);
            let produced = model
                .heads
                .iter()
                .map(|h| {
                    let pred = head_predict(&h.mlp, &f, mode.dropout(h.stream, PHASE_OOD, pos))?;
                    make_soft_target(
                        cfg.label_scheme,
                        &TargetInputs {
                            prior: &prior,
                            smoothed,
                            head_pred: &pred,
                            teacher,
                        },
                        cfg.beta,
                        cfg.usoul_epsilon,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((0..heads).map(|j| produced[(j + 1) % heads].clone()).collect())
        })
        .collect()
}

/// Co-training loss against fixed targets (batch mean).
pub fn co_loss_frozen(
    model: &mut DetectorModel,
    batch: &[&Example],
    targets: &CoTargets,
    mode: Stochasticity,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("pseudo-OOD batch".into()));
    }
    require_pseudo(batch)?;
    crate::error::ensure_dim("co-training targets", batch.len(), targets.len())?;
    fit_heads(model, batch, targets, mode, PHASE_OOD)
}

/// Co-training loss with targets built from the current heads.
pub fn co_loss(
    model: &mut DetectorModel,
    batch: &[&Example],
    aux: &PseudoAux,
    cfg: &TrainConfig,
    mode: Stochasticity,
) -> Result<f64> {
    let targets = co_targets(model, batch, aux, cfg, mode)?;
    co_loss_frozen(model, batch, &targets, mode)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ctr: f64,
    pub cls: f64,
    pub co: f64,
    pub total: f64,
    pub skipped_anchors: usize,
}

/// Sum of the three batch-mean components; gradients accumulate into the
/// model. The contrastive term is active only for graph-based schemes and
/// IND batches with at least two examples.
pub fn total_loss(
    model: &mut DetectorModel,
    ind: &[&Example],
    ood: &[&Example],
    targets: &CoTargets,
    scheme: LabelScheme,
    mode: Stochasticity,
) -> Result<LossBreakdown> {
    let (ctr, skipped_anchors) = if scheme.uses_graph() && ind.len() >= 2 {
        let r = contrastive_loss(&mut model.net, ind, Reduction::Mean)?;
        (r.mean, r.skipped_anchors)
    } else {
        (0.0, 0)
    };
    let cls = ind_cls_loss(model, ind, mode)?;
    let co = if ood.is_empty() {
        0.0
    } else {
        co_loss_frozen(model, ood, targets, mode)?
    };
    Ok(LossBreakdown {
        ctr,
        cls,
        co,
        total: ctr + cls + co,
        skipped_anchors,
    })
}

/// Mean IND cross-entropy and accuracy of the averaged prediction, dropout off.
pub fn validation_metrics(model: &DetectorModel, valid: &[Example]) -> Result<(f64, f64)> {
    if valid.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let c = model.num_classes();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for x in valid {
        let y = match x.label {
            Label::Ind(y) => y,
            _ => return Err(Error::invalid(format!("validation example `{}` is not IND", x.id))),
        };
        let f = model.encode(&x.features)?;
        let preds = model.head_distributions(&f)?;
        loss += cls_term(&one_hot(c, y), &preds)?;
        let n = preds.len() as f64;
        let avg: Vec<f64> = (0..c).map(|i| preds.iter().map(|p| p[i]).sum::<f64>() / n).collect();
        if argmax(&avg) == y {
            correct += 1;
        }
    }
    let n = valid.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ctr: f64,
    pub cls: f64,
    pub co: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
    pub best_valid_loss: f64,
    pub skipped_anchors: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DetectorModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
}

/// k-way IND classifier used as the distillation teacher and by the
/// max-softmax baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub encoder: Mlp,
    pub head: Mlp,
}

impl Classifier {
    pub fn predict(&self, features: &[f64]) -> Result<SoftLabel> {
        head_predict(&self.head, &self.encoder.predict(features)?, Dropout::Off)
    }

    fn loss(&mut self, batch: &[&Example], labels: &[usize], mode: Stochasticity) -> Result<f64> {
        let k = self.head.spec.output_dim();
        let n = batch.len() as f64;
        let mut total = 0.0;
        for (pos, (x, &y)) in batch.iter().zip(labels).enumerate() {
            let (f, fcache) = self.encoder.forward(&x.features, Dropout::Off)?;
            let (logits, hcache) = self.head.forward(&f, mode.dropout(1, PHASE_IND, pos))?;
            let p = softmax(&logits, 1.0)?;
            let t = one_hot(k, y);
            total += cross_entropy(&t, &p)?;
            let g: Vector = softmax_cross_entropy_grad(&t, &p)?
                .into_iter()
                .map(|v| v / n)
                .collect();
            let gf = self.head.backward(&hcache, &g)?;
            self.encoder.backward(&fcache, &gf)?;
        }
        Ok(total / n)
    }

    fn valid_loss(&self, valid: &[Example]) -> Result<f64> {
        let k = self.head.spec.output_dim();
        let mut total = 0.0;
        for x in valid {
            let y = require_ind(&[x])?[0];
            total += cross_entropy(&one_hot(k, y), &self.predict(&x.features)?)?;
        }
        Ok(total / valid.len() as f64)
    }
}

/// Trains a k-way classifier on IND data with the same optimizers, batch
/// size and early-stopping rule as the detector.
pub fn train_knowd_teacher(train: &Dataset, valid: &Dataset, cfg: &TrainConfig) -> Result<Classifier> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Empty("teacher train or validation set".into()));
    }
    let k = train.space.k();
    let enc = cfg.encoder_config(train.feature_dim);
    let mut model = Classifier {
        encoder: Mlp::new(enc.encoder, mix_seed(cfg.seed, 0x7EAC_0001))?,
        head: Mlp::new(cfg.head_spec(k), mix_seed(cfg.seed, 0x7EAC_0002))?,
    };
    let refs: Vec<&Example> = train.examples.iter().collect();
    let labels_all = require_ind(&refs)?;
    require_ind(&valid.examples.iter().collect::<Vec<_>>())?;
    let mut rng = seeded(cfg.seed, 0x7EAC_0003);
    let mut order: Vec<usize> = (0..refs.len()).collect();
    let mut best = f64::INFINITY;
    let mut best_model = model.clone();
    let mut bad = 0;
    let mut step = 0usize;
    for _epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_ind) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| refs[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| labels_all[i]).collect();
            let mode = Stochasticity::Step(mix_seed(cfg.seed ^ 0x7EAC_57E9, step as u64));
            let loss = model.loss(&batch, &labels, mode)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, what: "teacher loss" });
            }
            optimizer_step(&mut model.encoder.params, &cfg.encoder_optimizer())?;
            optimizer_step(&mut model.head.params, &cfg.head_optimizer())?;
            step += 1;
        }
        let v = model.valid_loss(&valid.examples)?;
        if !v.is_finite() {
            return Err(Error::Diverged { step, what: "teacher validation loss" });
        }
        if v < best - cfg.min_delta {
            best = v;
            best_model = model.clone();
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                break;
            }
        }
    }
    Ok(best_model)
}

/// Rebuilds the embedding graph over IND and pseudo examples and returns
/// the smoothed label of every pseudo example.
pub fn smooth_pseudo_labels(
    model: &DetectorModel,
    train: &Dataset,
    pseudo: &[Example],
    graph: GraphConfig,
) -> Result<BTreeMap<String, SoftLabel>> {
    let nodes: Vec<&Example> = train.examples.iter().chain(pseudo).collect();
    let embeddings = nodes
        .iter()
        .map(|x| model.net.embed(x))
        .collect::<Result<Vec<_>>>()?;
    let g = EmbeddingGraph::build(&nodes, embeddings, &train.space, graph)?;
    g.smooth_all(&pseudo.iter().collect::<Vec<_>>())
}

/// Trains a detector; the distillation scheme trains its own teacher.
pub fn train(train_set: &Dataset, pseudo: &[Example], valid: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let teacher = if cfg.label_scheme == LabelScheme::Knowd {
        Some(train_knowd_teacher(train_set, valid, cfg)?)
    } else {
        None
    };
    train_with_teacher(train_set, pseudo, valid, cfg, teacher.as_ref())
}

pub fn train_with_teacher(
    train_set: &Dataset,
    pseudo: &[Example],
    valid: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<&Classifier>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("IND train set".into()));
    }
    if valid.is_empty() {
        return Err(Error::Empty("IND validation set".into()));
    }
    let scheme = cfg.label_scheme;
    let mut model = DetectorModel::new(cfg, train_set.feature_dim, train_set.space.num_classes())?;
    let ind: Vec<&Example> = train_set.examples.iter().collect();
    require_ind(&ind)?;
    let ood: Vec<&Example> = pseudo.iter().collect();
    require_pseudo(&ood)?;

    let mut aux = PseudoAux::default();
    if scheme == LabelScheme::Knowd {
        let teacher = teacher.ok_or_else(|| Error::invalid("scheme knowd needs a teacher"))?;
        for x in pseudo {
            aux.teacher.insert(x.id.clone(), teacher.predict(&x.features)?);
        }
    }

    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut best_model = model.clone();
    let mut best_epoch = None;
    let mut bad = 0;
    let mut step = 0usize;
    let mut rng = seeded(cfg.seed, 0x7EA1_0001);
    let mut ind_order: Vec<usize> = (0..ind.len()).collect();
    let mut ood_order: Vec<usize> = (0..ood.len()).collect();
    let mut ood_cursor = ood_order.len();
    let step_salt = mix_seed(cfg.seed, 0x57E9_0000);

    for epoch in 0..cfg.max_epochs {
        if scheme.uses_graph() && epoch % cfg.graph_refresh == 0 && !pseudo.is_empty() {
            aux.smoothed = smooth_pseudo_labels(&model, train_set, pseudo, cfg.graph_config())?;
        }
        ind_order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in ind_order.chunks(cfg.batch_ind) {
            let ind_batch: Vec<&Example> = chunk.iter().map(|&i| ind[i]).collect();
            let mut ood_batch = Vec::with_capacity(cfg.batch_ood.min(ood.len()));
            while ood_batch.len() < cfg.batch_ood.min(ood.len()) {
                if ood_cursor == ood_order.len() {
                    ood_order.shuffle(&mut rng);
                    ood_cursor = 0;
                }
                ood_batch.push(ood[ood_order[ood_cursor]]);
                ood_cursor += 1;
            }
            let mode = Stochasticity::Step(mix_seed(step_salt, step as u64));
            model.zero_grads();
            let targets = if ood_batch.is_empty() {
                Vec::new()
            } else {
                co_targets(&model, &ood_batch, &aux, cfg, mode)?
            };
            let b = total_loss(&mut model, &ind_batch, &ood_batch, &targets, scheme, mode)?;
            if !b.total.is_finite() {
                return Err(Error::Diverged { step, what: "training loss" });
            }
            optimizer_step(&mut model.net.encoder.params, &cfg.encoder_optimizer())?;
            if scheme.uses_graph() && model.net.projection.params.grads_ready() {
                optimizer_step(&mut model.net.projection.params, &cfg.head_optimizer())?;
            }
            for h in &mut model.heads {
                optimizer_step(&mut h.mlp.params, &cfg.head_optimizer())?;
            }
            if !model.is_finite() {
                return Err(Error::Diverged { step, what: "model parameters" });
            }
            sums.ctr += b.ctr;
            sums.cls += b.cls;
            sums.co += b.co;
            sums.skipped_anchors += b.skipped_anchors;
            batches += 1;
            step += 1;
        }
        let (valid_loss, valid_accuracy) = validation_metrics(&model, &valid.examples)?;
        if !valid_loss.is_finite() {
            return Err(Error::Diverged { step, what: "validation loss" });
        }
        let improved = valid_loss < best - cfg.min_delta;
        if improved {
            best = valid_loss;
            best_model = model.clone();
            best_epoch = Some(epoch);
            bad = 0;
        } else {
            bad += 1;
        }
        let nb = batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            ctr: sums.ctr / nb,
            cls: sums.cls / nb,
            co: sums.co / nb,
            valid_loss,
            valid_accuracy,
            best_valid_loss: best,
            skipped_anchors: sums.skipped_anchors,
        };
        debug!(
            "epoch {epoch}: ctr {:.4} cls {:.4} co {:.4} valid {:.4} acc {:.3}",
            record.ctr, record.cls, record.co, valid_loss, valid_accuracy
        );
        history.push(record);
        if bad >= cfg.patience {
            info!("early stop after epoch {epoch}; best epoch {best_epoch:?}");
            break;
        }
    }
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
        steps: step,
    })
}

/// History rows as CSV: epoch, L_ctr, L_cls, L_co, validation loss.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,l_ctr,l_cls,l_co,valid_loss,valid_accuracy\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.ctr, r.cls, r.co, r.valid_loss, r.valid_accuracy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IntentSpace, Provenance};
    use crate::numerics::entropy;

    fn ex(id: &str, features: Vec<f64>, label: Label) -> Example {
        let provenance = if label == Label::Pseudo { Provenance::PseudoFm } else { Provenance::Ind };
        Example { id: id.into(), features, label, provenance, text: None }
    }

    fn tiny_cfg(scheme: LabelScheme) -> TrainConfig {
        TrainConfig {
            label_scheme: scheme,
            feature_dim: 6,
            head_hidden: 5,
            proj_dim: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn scheme_round_trip() {
        for s in LabelScheme::ALL {
            assert_eq!(s.as_str().parse::<LabelScheme>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.as_str()));
        }
        assert!("soft".parse::<LabelScheme>().is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta: -0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn uniform_logits_give_uniform_distribution() {
        let spec = MlpSpec::new(vec![3, 4], false);
        let mut head = Mlp::new(spec, 1).unwrap();
        head.params.blocks_mut().iter_mut().for_each(|b| b.value.fill(0.0));
        assert_eq!(head_predict(&head, &[1.0, -2.0, 3.0], Dropout::Off).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn wide_heads_see_distinct_masks() {
        let spec = MlpSpec::new(vec![1024, 3], false).with_dropout(0.6);
        let head = Mlp::new(spec, 2).unwrap();
        let x: Vec<f64> = (0..1024).map(|i| (i as f64 * 0.37).sin()).collect();
        for s in 0..100u64 {
            let a = head_predict(&head, &x, Dropout::Seeded(2 * s)).unwrap();
            let b = head_predict(&head, &x, Dropout::Seeded(2 * s + 1)).unwrap();
            assert_ne!(a, b);
        }
    }

    #[test]
    fn cls_term_examples() {
        let lp = vec![1.0, 0.0];
        assert_eq!(cls_term(&lp, &[lp.clone(), lp.clone()]).unwrap(), 0.0);
        let v = cls_term(&lp, &[vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        assert!((v - 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn co_term_examples() {
        let lg = vec![0.5, 0.5];
        let v = co_term(&[lg.clone(), lg.clone()], &[lg.clone(), lg.clone()]).unwrap();
        assert!((v - entropy(&lg)).abs() < 1e-15);
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let ood = vec![0.0, 1.0];
        assert_eq!(co_term(&[ood.clone(), ood.clone()], &[ood.clone(), ood.clone()]).unwrap(), 0.0);
    }

    fn inputs<'a>(prior: &'a [f64], smoothed: Option<&'a [f64]>, pred: &'a [f64], teacher: Option<&'a [f64]>) -> TargetInputs<'a> {
        TargetInputs { prior, smoothed, head_pred: pred, teacher }
    }

    #[test]
    fn soft_target_examples() {
        let prior = [0.0, 1.0];
        let t = make_soft_target(LabelScheme::Asoul, &inputs(&prior, Some(&[0.5, 0.5]), &[0.2, 0.8], None), 0.9, 0.1).unwrap();
        assert!((t[0] - 0.47).abs() < 1e-12 && (t[1] - 0.53).abs() < 1e-12);
        let t = make_soft_target(LabelScheme::Asoul, &inputs(&prior, Some(&[0.3, 0.7]), &[0.2, 0.8], None), 1.0, 0.1).unwrap();
        assert_eq!(t, vec![0.3, 0.7]);
        let ct = make_soft_target(LabelScheme::AsoulCt, &inputs(&prior, Some(&[0.3, 0.7]), &[0.2, 0.8], None), 0.9, 0.1).unwrap();
        assert_eq!(t, ct);

        let prior5 = [0.0, 0.0, 0.0, 0.0, 1.0];
        let pred5 = [0.2; 5];
        let u = make_soft_target(LabelScheme::Usoul, &inputs(&prior5, None, &pred5, None), 0.9, 0.1).unwrap();
        for (a, b) in u.iter().zip([0.025, 0.025, 0.025, 0.025, 0.9]) {
            assert!((a - b).abs() < 1e-15);
        }

        let prior3 = [0.0, 0.0, 1.0];
        let k = make_soft_target(LabelScheme::Knowd, &inputs(&prior3, None, &[0.3, 0.3, 0.4], Some(&[0.8, 0.2])), 0.9, 0.1).unwrap();
        for (a, b) in k.iter().zip([0.08, 0.02, 0.9]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(lift_teacher(&[0.8, 0.2]), vec![0.8, 0.2, 0.0]);

        let gs = make_soft_target(LabelScheme::AsoulGs, &inputs(&prior, None, &[0.2, 0.8], None), 0.9, 0.1).unwrap();
        assert!((gs[0] - 0.02).abs() < 1e-12 && (gs[1] - 0.98).abs() < 1e-12);
        let oh = make_soft_target(LabelScheme::Onehot, &inputs(&prior, None, &[0.2, 0.8], None), 0.9, 0.1).unwrap();
        assert_eq!(oh, vec![0.0, 1.0]);
    }

    #[test]
    fn soft_target_errors() {
        let prior = [0.0, 1.0];
        assert!(make_soft_target(LabelScheme::Knowd, &inputs(&prior, None, &[0.5, 0.5], None), 0.9, 0.1).is_err());
        assert!(make_soft_target(LabelScheme::Asoul, &inputs(&prior, None, &[0.5, 0.5], None), 0.9, 0.1).is_err());
        assert!(make_soft_target(LabelScheme::Asoul, &inputs(&prior, Some(&[0.5, 0.6]), &[0.5, 0.5], None), 0.9, 0.1).is_err());
    }

    fn toy() -> (Dataset, Vec<Example>, Dataset) {
        let space = IntentSpace::new(vec!["a".into(), "b".into()]).unwrap();
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for i in 0..12 {
            let s = (i as f64 * 0.7).sin() * 0.2;
            train.push(ex(&format!("a{i}"), vec![2.0 + s, -1.0, s], Label::Ind(0)));
            train.push(ex(&format!("b{i}"), vec![-2.0, 1.0 + s, -s], Label::Ind(1)));
        }
        for i in 0..4 {
            let s = (i as f64 * 1.3).cos() * 0.2;
            valid.push(ex(&format!("va{i}"), vec![2.0 - s, -1.0, s], Label::Ind(0)));
            valid.push(ex(&format!("vb{i}"), vec![-2.0, 1.0 - s, s], Label::Ind(1)));
        }
        let pseudo = (0..8)
            .map(|i| ex(&format!("p{i}"), vec![0.1 * i as f64 - 0.4, 0.0, 0.3], Label::Pseudo))
            .collect();
        let d = |examples| Dataset { space: space.clone(), feature_dim: 3, examples };
        (d(train), pseudo, d(valid))
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (train_set, pseudo, valid) = toy();
        let cfg = TrainConfig { max_epochs: 0, ..tiny_cfg(LabelScheme::Asoul) };
        let out = train(&train_set, &pseudo, &valid, &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.model, DetectorModel::new(&cfg, 3, 3).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_best_loss_monotone() {
        let (train_set, pseudo, valid) = toy();
        let cfg = TrainConfig {
            max_epochs: 6,
            batch_ind: 8,
            batch_ood: 4,
            lr_encoder: 1e-2,
            lr_heads: 1e-2,
            ..tiny_cfg(LabelScheme::Asoul)
        };
        let a = train(&train_set, &pseudo, &valid, &cfg).unwrap();
        let b = train(&train_set, &pseudo, &valid, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        for w in a.history.windows(2) {
            assert!(w[1].best_valid_loss <= w[0].best_valid_loss);
        }
    }

    #[test]
    fn every_scheme_trains() {
        let (train_set, pseudo, valid) = toy();
        for scheme in LabelScheme::ALL {
            let cfg = TrainConfig {
                max_epochs: 2,
                batch_ind: 8,
                batch_ood: 4,
                lr_encoder: 1e-2,
                lr_heads: 1e-2,
                ..tiny_cfg(scheme)
            };
            let out = train(&train_set, &pseudo, &valid, &cfg).unwrap();
            assert_eq!(out.model.heads.len(), scheme.num_heads());
            assert_eq!(out.history.len(), 2);
        }
    }

    #[test]
    fn teacher_separates_two_classes() {
        let (train_set, _, valid) = toy();
        let cfg = TrainConfig { lr_encoder: 1e-2, lr_heads: 1e-2, batch_ind: 8, max_epochs: 40, ..tiny_cfg(LabelScheme::Knowd) };
        let t = train_knowd_teacher(&train_set, &valid, &cfg).unwrap();
        for x in train_set.examples.iter().chain(&valid.examples) {
            let Label::Ind(y) = x.label else { unreachable!() };
            assert_eq!(argmax(&t.predict(&x.features).unwrap()), y);
        }
    }

    #[test]
    fn swapping_heads_keeps_the_loss() {
        let (train_set, pseudo, _) = toy();
        let cfg = tiny_cfg(LabelScheme::Asoul);
        let mut model = DetectorModel::new(&cfg, 3, 3).unwrap();
        let aux = PseudoAux {
            smoothed: pseudo.iter().map(|p| (p.id.clone(), vec![0.2, 0.1, 0.7])).collect(),
            teacher: BTreeMap::new(),
        };
        let ind: Vec<&Example> = train_set.examples.iter().take(6).collect();
        let ood: Vec<&Example> = pseudo.iter().collect();
        let mode = Stochasticity::Step(99);
        let eval = |m: &mut DetectorModel| {
            let t = co_targets(m, &ood, &aux, &cfg, mode).unwrap();
            total_loss(m, &ind, &ood, &t, cfg.label_scheme, mode).unwrap().total
        };
        let a = eval(&mut model.clone());
        model.swap_heads();
        let b = eval(&mut model);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn cls_loss_rejects_pseudo() {
        let (_, pseudo, _) = toy();
        let mut model = DetectorModel::new(&tiny_cfg(LabelScheme::Asoul), 3, 3).unwrap();
        assert!(ind_cls_loss(&mut model, &[&pseudo[0]], Stochasticity::Off).is_err());
    }

    #[test]
    fn co_targets_need_smoothed_labels() {
        let (_, pseudo, _) = toy();
        let cfg = tiny_cfg(LabelScheme::Asoul);
        let model = DetectorModel::new(&cfg, 3, 3).unwrap();
        let r = co_targets(&model, &[&pseudo[0]], &PseudoAux::default(), &cfg, Stochasticity::Off);
        assert!(r.is_err());
    }
}
