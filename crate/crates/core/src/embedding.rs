//! Encoder `f`, projection head `h`, the unit-norm embedding space and the
//! supervised contrastive loss that shapes it.

use serde::{Deserialize, Serialize};

use crate::data::{Example, Label};
use crate::error::{Error, Result};
use crate::numerics::{
    dot, l2_normalize, l2_normalize_backward, Dropout, Mlp, MlpCache, MlpSpec, Vector,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub encoder: MlpSpec,
    pub projection: MlpSpec,
    pub temperature: f64,
}

impl EncoderConfig {
    pub fn feature_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn proj_dim(&self) -> usize {
        self.projection.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.projection.validate()?;
        if self.projection.input_dim() != self.encoder.output_dim() {
            return Err(Error::invalid("projection input must equal encoder feature_dim"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("contrastive temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub z: Vector,
}

/// Encoder plus projection head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingNet {
    pub encoder: Mlp,
    pub projection: Mlp,
    pub temperature: f64,
}

/// Forward state kept for the backward pass through `h` and normalization.
pub struct ProjectionCache {
    pub z: Vector,
    raw: Vector,
    cache: MlpCache,
}

impl EmbeddingNet {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: Mlp::new(config.encoder.clone(), crate::rng::mix_seed(seed, 1))?,
            projection: Mlp::new(config.projection.clone(), crate::rng::mix_seed(seed, 2))?,
            temperature: config.temperature,
        })
    }

    pub fn from_parts(encoder: Mlp, projection: Mlp, temperature: f64) -> Result<Self> {
        let net = Self {
            encoder,
            projection,
            temperature,
        };
        net.config().validate()?;
        Ok(net)
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            encoder: self.encoder.spec.clone(),
            projection: self.projection.spec.clone(),
            temperature: self.temperature,
        }
    }

    /// Representation `f(x)`.
    pub fn encode(&self, features: &[f64]) -> Result<Vector> {
        self.encoder.predict(features)
    }

    pub fn project(&self, representation: &[f64]) -> Result<Vector> {
        l2_normalize(&self.projection.predict(representation)?)
    }

    pub fn embed(&self, x: &Example) -> Result<Embedding> {
        Ok(Embedding {
            id: x.id.clone(),
            z: self.project(&self.encode(&x.features)?)?,
        })
    }

    pub(crate) fn project_train(&self, representation: &[f64]) -> Result<ProjectionCache> {
        let (raw, cache) = self.projection.forward(representation, Dropout::Off)?;
        let z = l2_normalize(&raw)?;
        Ok(ProjectionCache { z, raw, cache })
    }

    /// Backpropagates `d loss / d z` through normalization and `h`,
    /// returning `d loss / d f(x)`.
    pub(crate) fn project_backward(&mut self, pc: &ProjectionCache, grad_z: &[f64]) -> Result<Vector> {
        let grad_raw = l2_normalize_backward(&pc.raw, &pc.z, grad_z);
        self.projection.backward(&pc.cache, &grad_raw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    Sum,
    /// Divide by the number of anchors with a non-empty positive set.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveValue {
    pub sum: f64,
    pub mean: f64,
    pub anchors: usize,
    pub skipped_anchors: usize,
    /// Gradient of `sum` with respect to each embedding.
    pub grad_z: Vec<Vector>,
}

/// Supervised contrastive loss over fixed unit embeddings.
///
/// For each anchor `i` with positives `S(i)` (same label, excluding `i`) and
/// candidates `A(i)` (everything except `i`), the term is
/// `−1/|S(i)| · Σ_{j∈S(i)} log(exp(zᵢ·zⱼ/t) / Σ_{k∈A(i)} exp(zᵢ·z_k/t))`.
/// Anchors without positives contribute nothing and are counted in
/// `skipped_anchors`.
pub fn contrastive_from_embeddings(
    z: &[Vector],
    labels: &[usize],
    temperature: f64,
) -> Result<ContrastiveValue> {
    if z.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "contrastive labels",
            expected: z.len(),
            actual: labels.len(),
        });
    }
    if z.len() < 2 {
        return Err(Error::invalid("contrastive batch needs at least two examples"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("contrastive temperature must be positive"));
    }
    let n = z.len();
    let dim = z[0].len();
    let mut grad_z = vec![vec![0.0; dim]; n];
    let mut sum = 0.0;
    let mut anchors = 0;
    let mut skipped = 0;
    for i in 0..n {
        let positives = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        if positives == 0 {
            skipped += 1;
            continue;
        }
        anchors += 1;
        let sims: Vec<f64> = (0..n)
            .map(|k| if k == i { f64::NEG_INFINITY } else { dot(&z[i], &z[k]) / temperature })
            .collect();
        let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = sims.iter().map(|s| (s - max).exp()).sum();
        let lse = max + denom.ln();
        let p = positives as f64;
        let pos_sum: f64 = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .map(|j| sims[j])
            .sum();
        sum += lse - pos_sum / p;
        // d term / d s_ik = softmax_k − [k ∈ S(i)] / |S(i)|
        for k in 0..n {
            if k == i {
                continue;
            }
            let mut c = (sims[k] - max).exp() / denom;
            if labels[k] == labels[i] {
                c -= 1.0 / p;
            }
            let c = c / temperature;
            for d in 0..dim {
                grad_z[i][d] += c * z[k][d];
                grad_z[k][d] += c * z[i][d];
            }
        }
    }
    Ok(ContrastiveValue {
        sum,
        mean: if anchors > 0 { sum / anchors as f64 } else { 0.0 },
        anchors,
        skipped_anchors: skipped,
        grad_z,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveReport {
    pub sum: f64,
    pub mean: f64,
    pub skipped_anchors: usize,
}

/// Contrastive loss over a batch of IND examples, with gradients of the
/// chosen reduction accumulated into both `f` and `h`.
pub fn contrastive_loss(
    net: &mut EmbeddingNet,
    batch: &[&Example],
    reduction: Reduction,
) -> Result<ContrastiveReport> {
    let labels = ind_labels(batch)?;
    let mut enc_caches = Vec::with_capacity(batch.len());
    let mut proj = Vec::with_capacity(batch.len());
    for x in batch {
        let (f, cache) = net.encoder.forward(&x.features, Dropout::Off)?;
        proj.push(net.project_train(&f)?);
        enc_caches.push(cache);
    }
    let z: Vec<Vector> = proj.iter().map(|p| p.z.clone()).collect();
    let value = contrastive_from_embeddings(&z, &labels, net.temperature)?;
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean if value.anchors > 0 => 1.0 / value.anchors as f64,
        Reduction::Mean => 0.0,
    };
    for ((pc, cache), gz) in proj.iter().zip(&enc_caches).zip(&value.grad_z) {
        let gz: Vector = gz.iter().map(|g| g * scale).collect();
        let gf = net.project_backward(pc, &gz)?;
        net.encoder.backward(cache, &gf)?;
    }
    Ok(ContrastiveReport {
        sum: value.sum,
        mean: value.mean,
        skipped_anchors: value.skipped_anchors,
    })
}

pub(crate) fn ind_labels(batch: &[&Example]) -> Result<Vec<usize>> {
    batch
        .iter()
        .map(|x| match x.label {
            Label::Ind(i) => Ok(i),
            _ => Err(Error::invalid(format!(
                "example `{}` is not IND-labeled; the contrastive loss only sees IND examples",
                x.id
            ))),
        })
        .collect()
}
