//! Fully connected embedding graph over IND and pseudo-OOD nodes, prior
//! labels, attention weights and graph-smoothed labels.
//!
//! A pseudo example's smoothed label is
//! `l_g = α · l_p(x) + (1 − α) · Σ_j a_j · l_p(x_j)` with
//! `a_j = softmax_j(z · z_j / τ)`; it is the minimizer of
//! `α·‖l − l_p(x)‖² + (1 − α)·Σ_j a_j·‖l − l_p(x_j)‖²`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{Example, IntentSpace, Label, Provenance};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::numerics::{dot, one_hot, SoftLabel};

/// One-hot annotation: IND intent, or the OOD class for pseudo samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PriorLabel {
    pub hot: usize,
    pub num_classes: usize,
}

impl PriorLabel {
    pub fn to_vec(self) -> SoftLabel {
        one_hot(self.num_classes, self.hot)
    }
}

pub fn prior_label(example: &Example, space: &IntentSpace) -> Result<PriorLabel> {
    if example.provenance == Provenance::Test {
        return Err(Error::invalid(format!(
            "test example `{}` has no prior label",
            example.id
        )));
    }
    let hot = match example.label {
        Label::Ind(i) if i < space.k() => i,
        Label::Pseudo => space.ood_index(),
        _ => {
            return Err(Error::invalid(format!(
                "example `{}` must be IND-labeled or pseudo",
                example.id
            )))
        }
    };
    Ok(PriorLabel {
        hot,
        num_classes: space.num_classes(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub tau: f64,
    pub alpha: f64,
    /// Whether a node counts among its own neighbors.
    pub include_self: bool,
    /// Keep only the `M` most similar neighbors (renormalized); `None` is exact.
    #[serde(default)]
    pub top_m: Option<usize>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            alpha: 0.11,
            include_self: false,
            top_m: None,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid("graph temperature τ must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("α must lie in [0, 1]"));
        }
        if self.top_m == Some(0) {
            return Err(Error::invalid("top_m must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingGraph {
    nodes: Vec<Embedding>,
    priors: Vec<PriorLabel>,
    index: HashMap<String, usize>,
    config: GraphConfig,
}

impl EmbeddingGraph {
    pub fn new(nodes: Vec<Embedding>, priors: Vec<PriorLabel>, config: GraphConfig) -> Result<Self> {
        config.validate()?;
        if nodes.len() != priors.len() {
            return Err(Error::DimensionMismatch {
                context: "graph priors",
                expected: nodes.len(),
                actual: priors.len(),
            });
        }
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate graph node `{}`", n.id)));
            }
            let nn = dot(&n.z, &n.z).sqrt();
            if (nn - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("node `{}` is not unit-norm ({nn})", n.id)));
            }
        }
        Ok(Self {
            nodes,
            priors,
            index,
            config,
        })
    }

    /// Builds the graph over `D_I ∪ D_P` from precomputed embeddings.
    pub fn build(
        examples: &[&Example],
        embeddings: Vec<Embedding>,
        space: &IntentSpace,
        config: GraphConfig,
    ) -> Result<Self> {
        let priors = examples
            .iter()
            .map(|e| prior_label(e, space))
            .collect::<Result<Vec<_>>>()?;
        Self::new(embeddings, priors, config)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn config(&self) -> &GraphConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Embedding] {
        &self.nodes
    }

    pub fn priors(&self) -> &[PriorLabel] {
        &self.priors
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Neighbor weights `(node index, a_j)` for a query embedding. `own`
    /// names the query's own node, excluded unless `include_self` is set.
    pub fn attention_weights(&self, z: &[f64], own: Option<usize>) -> Result<Vec<(usize, f64)>> {
        let mut sims: Vec<(usize, f64)> = (0..self.nodes.len())
            .filter(|&j| self.config.include_self || Some(j) != own)
            .map(|j| (j, dot(z, &self.nodes[j].z) / self.config.tau))
            .collect();
        if sims.is_empty() {
            return Err(Error::Empty("graph neighbor set".into()));
        }
        if let Some(m) = self.config.top_m {
            if m < sims.len() {
                // Stable by index among equal similarities.
                sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                sims.truncate(m);
                sims.sort_by_key(|s| s.0);
            }
        }
        let max = sims.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in &mut sims {
            s.1 = (s.1 - max).exp();
            total += s.1;
        }
        for s in &mut sims {
            s.1 /= total;
        }
        Ok(sims)
    }

    /// Aggregated neighbor prior `Σ_j a_j · l_p(x_j)` for node `idx`.
    fn neighbor_prior(&self, idx: usize) -> Result<SoftLabel> {
        let weights = self.attention_weights(&self.nodes[idx].z, Some(idx))?;
        let mut agg = vec![0.0; self.priors[idx].num_classes];
        for (j, a) in weights {
            agg[self.priors[j].hot] += a;
        }
        Ok(agg)
    }

    pub fn graph_smoothed_label(&self, id: &str) -> Result<SoftLabel> {
        let idx = self
            .node_index(id)
            .ok_or_else(|| Error::NotInGraph(id.to_string()))?;
        let alpha = self.config.alpha;
        let mut lg: SoftLabel = self
            .neighbor_prior(idx)?
            .into_iter()
            .map(|v| (1.0 - alpha) * v)
            .collect();
        lg[self.priors[idx].hot] += alpha;
        Ok(lg)
    }

    /// Smoothed labels for every pseudo example, keyed by id.
    pub fn smooth_all(&self, pseudo: &[&Example]) -> Result<BTreeMap<String, SoftLabel>> {
        pseudo
            .iter()
            .map(|x| {
                if !x.provenance.is_pseudo() {
                    return Err(Error::invalid(format!(
                        "`{}` is not a pseudo-OOD example",
                        x.id
                    )));
                }
                Ok((x.id.clone(), self.graph_smoothed_label(&x.id)?))
            })
            .collect()
    }
}
