//! Inference: averaged head prediction, per-class centroids and radii, the
//! boundary-then-argmax decision rule, the max-softmax baseline and the
//! model checkpoint.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::cotrain::{Classifier, DetectorModel, TrainConfig};
use crate::data::{content_hash, Dataset, Example, Label};
use crate::error::{ensure_dim, Error, Result};
use crate::eval::{confusion, metrics};
use crate::numerics::{argmax, distance, ensure_finite, SoftLabel, Vector};
use crate::oodgen::empirical_quantile;

/// Mean of the head distributions for raw input features, dropout off.
pub fn avg_predict(model: &DetectorModel, features: &[f64]) -> Result<SoftLabel> {
    model.average_distribution(&model.encode(features)?)
}

/// Class index used for fitting: IND label, or `k` for OOD and pseudo.
fn fit_class(x: &Example, k: usize) -> Result<usize> {
    match x.label {
        Label::Ind(i) if i < k => Ok(i),
        Label::Ind(i) => Err(Error::invalid(format!("label {i} out of range for k = {k}"))),
        Label::Ood | Label::Pseudo => Ok(k),
    }
}

/// Representations paired with their fitting class.
pub fn representations(
    model: &DetectorModel,
    examples: &[&Example],
    k: usize,
) -> Result<Vec<(usize, Vector)>> {
    examples
        .iter()
        .map(|x| Ok((fit_class(x, k)?, model.encode(&x.features)?)))
        .collect()
}

/// Per-class means, summed in input order. Every class in `classes` must
/// have at least one point.
pub fn centroids_from_points(points: &[(usize, Vector)], classes: &[usize]) -> Result<Vec<Vector>> {
    let dim = points
        .first()
        .map(|p| p.1.len())
        .ok_or_else(|| Error::Empty("centroid points".into()))?;
    classes
        .iter()
        .map(|&c| {
            let mut sum = vec![0.0; dim];
            let mut n = 0usize;
            for (y, f) in points.iter().filter(|(y, _)| *y == c) {
                ensure_dim("centroid point", dim, f.len())?;
                debug_assert_eq!(*y, c);
                sum.iter_mut().zip(f).for_each(|(s, v)| *s += v);
                n += 1;
            }
            if n == 0 {
                return Err(Error::Empty(format!("class {c} has no examples for its centroid")));
            }
            Ok(sum.into_iter().map(|s| s / n as f64).collect())
        })
        .collect()
}

/// Centroids in representation space for every IND class and, from the
/// pseudo set, the OOD class.
pub fn fit_centroids(model: &DetectorModel, train: &Dataset, pseudo: &[Example]) -> Result<Vec<Vector>> {
    let k = train.space.k();
    let all: Vec<&Example> = train.examples.iter().chain(pseudo).collect();
    let classes: Vec<usize> = (0..=k).collect();
    centroids_from_points(&representations(model, &all, k)?, &classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadiusInit {
    /// Mean same-class distance to the centroid.
    MeanDistance,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdbConfig {
    /// Initial step size on the softplus pre-activations.
    pub lr: f64,
    pub max_iters: usize,
    /// Stop once the loss changes by less than this between iterations.
    pub tol: f64,
    pub init: RadiusInit,
    /// Fit boundaries for IND classes only; the OOD class gets none.
    pub ind_only: bool,
}

impl Default for AdbConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            max_iters: 1000,
            tol: 1e-6,
            init: RadiusInit::MeanDistance,
            ind_only: false,
        }
    }
}

fn softplus(w: f64) -> f64 {
    if w > 30.0 {
        w + (-w).exp().ln_1p()
    } else {
        w.exp().ln_1p()
    }
}

fn softplus_inv(b: f64) -> f64 {
    if b > 30.0 {
        b + (-(-b).exp_m1()).ln()
    } else {
        b.exp_m1().ln()
    }
}

fn sigmoid(w: f64) -> f64 {
    1.0 / (1.0 + (-w).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusFit {
    pub radii: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Boundary loss `mean_n |d_n − b_{y_n}|` for fixed distances.
pub fn boundary_loss(distances: &[(usize, f64)], radii: &[f64]) -> f64 {
    distances
        .iter()
        .map(|&(c, d)| (d - radii[c]).abs())
        .sum::<f64>()
        / distances.len() as f64
}

/// Gradient of [`boundary_loss`] with respect to the softplus
/// pre-activations `w`, using `δ_n = [d_n > b]`.
pub fn boundary_loss_grad(distances: &[(usize, f64)], w: &[f64]) -> Vec<f64> {
    let n = distances.len() as f64;
    let mut g = vec![0.0; w.len()];
    for &(c, d) in distances {
        let b = softplus(w[c]);
        g[c] += if d > b { -1.0 } else { 1.0 } / n;
    }
    g.iter_mut().zip(w).for_each(|(g, &w)| *g *= sigmoid(w));
    g
}

/// Radii by gradient descent on softplus pre-activations. Each class's
/// step halves whenever its gradient changes sign, so iterates settle on
/// the loss kink instead of oscillating across it.
///
/// `distances` pairs a class slot (index into the returned radii) with the
/// point's distance to that slot's centroid.
pub fn fit_radii(distances: &[(usize, f64)], slots: usize, cfg: &AdbConfig) -> Result<RadiusFit> {
    if distances.is_empty() {
        return Err(Error::Empty("boundary fitting points".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::invalid("boundary learning rate must be positive"));
    }
    let mut counts = vec![0usize; slots];
    let mut sums = vec![0.0; slots];
    for &(c, d) in distances {
        if c >= slots {
            return Err(Error::invalid(format!("class slot {c} out of range")));
        }
        if !d.is_finite() {
            return Err(Error::NonFinite("boundary distance"));
        }
        counts[c] += 1;
        sums[c] += d;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Empty(format!("class slot {c} has no points")));
    }
    let mut w: Vec<f64> = (0..slots)
        .map(|c| {
            let b = match cfg.init {
                RadiusInit::MeanDistance => sums[c] / counts[c] as f64,
                RadiusInit::Constant(b) => b,
            };
            softplus_inv(b.max(1e-6))
        })
        .collect();
    let radii = |w: &[f64]| w.iter().map(|&v| softplus(v)).collect::<Vec<_>>();
    let mut steps = vec![cfg.lr; slots];
    let mut prev_sign = vec![0.0f64; slots];
    let mut loss = boundary_loss(distances, &radii(&w));
    let mut best = (loss, radii(&w));
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let g = boundary_loss_grad(distances, &w);
        grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..slots {
            let sign = g[c].signum();
            if prev_sign[c] != 0.0 && sign != prev_sign[c] {
                steps[c] *= 0.5;
            }
            prev_sign[c] = sign;
            w[c] -= steps[c] * g[c];
        }
        let next = boundary_loss(distances, &radii(&w));
        if next < best.0 {
            best = (next, radii(&w));
        }
        let delta = (next - loss).abs();
        loss = next;
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!(
            "boundary fit stopped after {iterations} iterations without converging (gradient norm {grad_norm:.3e})"
        );
    }
    Ok(RadiusFit {
        radii: best.1,
        iterations,
        converged,
        loss: best.0,
        grad_norm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBoundary {
    /// Class index; `k` is the OOD class.
    pub class: usize,
    pub centroid: Vector,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub dataset_hash: String,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub loss: f64,
    pub grad_norm: f64,
    pub ind_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Boundaries {
    pub classes: Vec<ClassBoundary>,
    pub fitted_on: FitMetadata,
}

impl Boundaries {
    pub fn validate(&self, feature_dim: usize, num_classes: usize) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("no decision boundaries"));
        }
        for b in &self.classes {
            ensure_dim("boundary centroid", feature_dim, b.centroid.len())?;
            if b.class >= num_classes {
                return Err(Error::invalid(format!("boundary class {} out of range", b.class)));
            }
            if !(b.radius > 0.0) || !b.radius.is_finite() {
                return Err(Error::invalid(format!("radius of class {} must be positive", b.class)));
            }
        }
        Ok(())
    }
}

/// Fits centroids and radii on frozen representations of the IND train set
/// and the pseudo set.
pub fn fit_boundaries(
    model: &DetectorModel,
    train: &Dataset,
    pseudo: &[Example],
    cfg: &AdbConfig,
    seed: u64,
) -> Result<Boundaries> {
    let k = train.space.k();
    let all: Vec<&Example> = train.examples.iter().chain(pseudo).collect();
    let points = representations(model, &all, k)?;
    for (_, f) in &points {
        ensure_finite("representation", f)?;
    }
    let classes: Vec<usize> = if cfg.ind_only { (0..k).collect() } else { (0..=k).collect() };
    let centroids = centroids_from_points(&points, &classes)?;
    let distances: Vec<(usize, f64)> = points
        .iter()
        .filter(|(c, _)| *c < classes.len())
        .map(|(c, f)| (*c, distance(f, &centroids[*c])))
        .collect();
    let fit = fit_radii(&distances, classes.len(), cfg)?;
    Ok(Boundaries {
        classes: classes
            .iter()
            .zip(centroids)
            .zip(&fit.radii)
            .map(|((&class, centroid), &radius)| ClassBoundary { class, centroid, radius })
            .collect(),
        fitted_on: FitMetadata {
            dataset_hash: content_hash(all.iter().copied()),
            seed,
            iterations: fit.iterations,
            converged: fit.converged,
            loss: fit.loss,
            grad_norm: fit.grad_norm,
            ind_only: cfg.ind_only,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Class index; `k` is OOD.
    pub label: usize,
    pub distribution: SoftLabel,
    /// Distance to each boundary's centroid, in boundary order.
    pub distances: Vec<f64>,
    pub rejected_by_boundary: bool,
    /// `min_i (d_i − b_i)`: negative inside some boundary, positive when
    /// outside all of them.
    pub min_boundary_margin: f64,
}

impl Prediction {
    pub fn max_prob(&self) -> f64 {
        self.distribution.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Decision rule on a representation and its averaged distribution.
pub fn decide(representation: &[f64], distribution: SoftLabel, boundaries: &Boundaries) -> Prediction {
    let ood = distribution.len() - 1;
    let distances: Vec<f64> = boundaries
        .classes
        .iter()
        .map(|b| distance(representation, &b.centroid))
        .collect();
    let min_boundary_margin = distances
        .iter()
        .zip(&boundaries.classes)
        .map(|(d, b)| d - b.radius)
        .fold(f64::INFINITY, f64::min);
    let outside_all = distances
        .iter()
        .zip(&boundaries.classes)
        .all(|(d, b)| *d > b.radius);
    let label = if outside_all { ood } else { argmax(&distribution) };
    Prediction {
        label,
        distribution,
        distances,
        rejected_by_boundary: outside_all,
        min_boundary_margin,
    }
}

pub fn detect(model: &DetectorModel, boundaries: &Boundaries, features: &[f64]) -> Result<Prediction> {
    let f = model.encode(features)?;
    Ok(decide(&f, model.average_distribution(&f)?, boundaries))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MspThreshold {
    pub threshold: f64,
    pub valid_f1_all: f64,
}

/// OOD (index `k`) when the top probability is below `threshold`.
pub fn msp_decide(probs: &[f64], threshold: f64) -> usize {
    let top = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top < threshold {
        probs.len()
    } else {
        argmax(probs)
    }
}

/// Picks the threshold among 99 quantiles of validation max-probabilities
/// that maximizes validation F1-All; ties keep the lowest threshold.
pub fn msp_fit(classifier: &Classifier, valid_ind: &[Example], valid_ood: &[Example]) -> Result<MspThreshold> {
    if valid_ood.is_empty() {
        return Err(Error::Empty("MSP validation OOD set".into()));
    }
    let k = classifier.head.spec.output_dim();
    let mut probs = Vec::new();
    let mut golds = Vec::new();
    for x in valid_ind.iter().chain(valid_ood) {
        probs.push(classifier.predict(&x.features)?);
        golds.push(fit_class(x, k)?);
    }
    let mut tops: Vec<f64> = probs
        .iter()
        .map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    tops.sort_by(f64::total_cmp);
    let mut best: Option<MspThreshold> = None;
    for q in 1..=99 {
        let threshold = empirical_quantile(&tops, q as f64 / 100.0);
        let preds: Vec<usize> = probs.iter().map(|p| msp_decide(p, threshold)).collect();
        let f1 = metrics(&confusion(&golds, &preds, k)?).f1_all;
        if best.as_ref().is_none_or(|b| f1 > b.valid_f1_all) {
            best = Some(MspThreshold { threshold, valid_f1_all: f1 });
        }
    }
    Ok(best.expect("99 candidates"))
}

/// Fits the threshold on validation data and labels the test set.
pub fn msp_baseline(
    classifier: &Classifier,
    valid_ind: &[Example],
    valid_ood: &[Example],
    test: &[Example],
) -> Result<(MspThreshold, Vec<usize>)> {
    let t = msp_fit(classifier, valid_ind, valid_ood)?;
    let preds = test
        .iter()
        .map(|x| Ok(msp_decide(&classifier.predict(&x.features)?, t.threshold)))
        .collect::<Result<Vec<_>>>()?;
    Ok((t, preds))
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub crate_version: String,
    pub config: TrainConfig,
    pub intents: Vec<String>,
    pub model: DetectorModel,
    pub boundaries: Option<Boundaries>,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, intents: Vec<String>, model: DetectorModel, boundaries: Option<Boundaries>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            intents,
            model,
            boundaries,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        self.model.validate()?;
        if self.model.num_classes() != self.intents.len() + 1 {
            return Err(Error::invalid("checkpoint intents do not match the head width"));
        }
        if let Some(b) = &self.boundaries {
            b.validate(self.model.feature_dim(), self.model.num_classes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self)?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&body)?;
        ck.validate()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cotrain::LabelScheme;
    use crate::numerics::{is_probability_vector, Mlp, MlpSpec, Tensor2D};

    fn boundaries(entries: &[(usize, Vec<f64>, f64)]) -> Boundaries {
        Boundaries {
            classes: entries
                .iter()
                .map(|(c, centroid, radius)| ClassBoundary { class: *c, centroid: centroid.clone(), radius: *radius })
                .collect(),
            fitted_on: FitMetadata {
                dataset_hash: String::new(),
                seed: 0,
                iterations: 0,
                converged: true,
                loss: 0.0,
                grad_norm: 0.0,
                ind_only: false,
            },
        }
    }

    #[test]
    fn rule_branches() {
        let b = boundaries(&[(0, vec![0.0, 0.0], 1.0), (1, vec![5.0, 0.0], 1.0), (2, vec![0.0, 5.0], 1.0)]);
        let p = decide(&[0.2, 0.1], vec![0.8, 0.1, 0.1], &b);
        assert_eq!((p.label, p.rejected_by_boundary), (0, false));
        assert!(p.min_boundary_margin < 0.0);
        let p = decide(&[10.0, 10.0], vec![0.8, 0.1, 0.1], &b);
        assert_eq!((p.label, p.rejected_by_boundary), (2, true));
        assert!(p.min_boundary_margin > 0.0);
        let p = decide(&[5.0, 0.5], vec![0.1, 0.2, 0.7], &b);
        assert_eq!((p.label, p.rejected_by_boundary), (2, false));
        // on the boundary counts as inside
        let p = decide(&[1.0, 0.0], vec![0.5, 0.5, 0.0], &b);
        assert_eq!((p.label, p.rejected_by_boundary), (0, false));
    }

    #[test]
    fn centroid_examples() {
        let pts = vec![(0, vec![0.0, 0.0]), (0, vec![2.0, 2.0]), (1, vec![3.0, -1.0])];
        let c = centroids_from_points(&pts, &[0, 1]).unwrap();
        assert_eq!(c, vec![vec![1.0, 1.0], vec![3.0, -1.0]]);
        assert!(centroids_from_points(&pts, &[0, 1, 2]).is_err());
    }

    #[test]
    fn radius_converges_to_shared_distance() {
        let distances: Vec<(usize, f64)> = (0..9).map(|i| (i % 3, [0.5, 2.0, 7.0][i % 3])).collect();
        for init in [RadiusInit::MeanDistance, RadiusInit::Constant(1.0), RadiusInit::Constant(3.0)] {
            let fit = fit_radii(&distances, 3, &AdbConfig { init, ..Default::default() }).unwrap();
            for (r, want) in fit.radii.iter().zip([0.5, 2.0, 7.0]) {
                assert!((r - want).abs() < 1e-3, "{init:?}: {r} vs {want}");
            }
        }
    }

    #[test]
    fn radius_settles_on_the_median() {
        let distances: Vec<(usize, f64)> = [1.0, 2.0, 4.0, 8.0, 9.0].iter().map(|&d| (0, d)).collect();
        let fit = fit_radii(&distances, 1, &AdbConfig::default()).unwrap();
        assert!((fit.radii[0] - 4.0).abs() < 1e-3, "{:?}", fit);
        assert!(fit.converged);
    }

    #[test]
    fn radius_is_scale_equivariant() {
        let base: Vec<(usize, f64)> = [0.3, 0.9, 1.4, 2.2, 3.1, 0.7, 1.1, 1.6]
            .iter()
            .enumerate()
            .map(|(i, &d)| (i % 2, d))
            .collect();
        let doubled: Vec<(usize, f64)> = base.iter().map(|&(c, d)| (c, 2.0 * d)).collect();
        let a = fit_radii(&base, 2, &AdbConfig::default()).unwrap();
        let b = fit_radii(&doubled, 2, &AdbConfig::default()).unwrap();
        for (x, y) in a.radii.iter().zip(&b.radii) {
            assert!((y / x - 2.0).abs() < 1e-2, "{x} {y}");
        }
    }

    #[test]
    fn softplus_inverse() {
        for b in [1e-6, 0.1, 1.0, 5.0, 40.0] {
            assert!((softplus(softplus_inv(b)) - b).abs() <= 1e-9 * b.max(1.0));
        }
    }

    #[test]
    fn msp_thresholds() {
        assert_eq!(msp_decide(&[0.6, 0.4], 0.0), 0);
        assert_eq!(msp_decide(&[0.6, 0.4], 1.0 + 1e-9), 2);
        assert_eq!(msp_decide(&[1.0, 0.0], 1.0 + 1e-9), 2);
    }

    fn fixed_head(rows: Vec<f64>, outputs: usize, inputs: usize) -> Mlp {
        Mlp::from_layers(
            MlpSpec::new(vec![inputs, outputs], false),
            vec![(Tensor2D::from_vec(outputs, inputs, rows).unwrap(), vec![0.0; outputs])],
        )
        .unwrap()
    }

    #[test]
    fn averaged_prediction() {
        let cfg = TrainConfig { feature_dim: 2, head_hidden: 2, proj_dim: 2, label_scheme: LabelScheme::Asoul, ..Default::default() };
        let mut model = DetectorModel::new(&cfg, 2, 2).unwrap();
        model.heads[0].mlp = fixed_head(vec![50.0, 0.0, 0.0, 0.0], 2, 2);
        model.heads[1].mlp = fixed_head(vec![0.0, 0.0, 50.0, 0.0], 2, 2);
        let f = [1.0, 0.0];
        let avg = model.average_distribution(&f).unwrap();
        assert!((avg[0] - 0.5).abs() < 1e-12 && (avg[1] - 0.5).abs() < 1e-12);
        assert!(is_probability_vector(&avg, 1e-12));
        let mut swapped = model.clone();
        swapped.swap_heads();
        assert_eq!(argmax(&swapped.average_distribution(&f).unwrap()), argmax(&avg));
        let dists = model.head_distributions(&f).unwrap();
        model.heads[1].mlp = model.heads[0].mlp.clone();
        assert_eq!(model.average_distribution(&f).unwrap(), dists[0]);
    }
}
