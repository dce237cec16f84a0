use super::tensor::{norm, Vector};
use crate::error::{ensure_dim, Error, Result};

/// Probability vector over the `k + 1` classes.
pub type SoftLabel = Vec<f64>;

/// Lower clamp applied to predictions before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Norm below which a vector cannot be normalized.
pub const NORM_FLOOR: f64 = 1e-12;

pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vector> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Empty("softmax logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vector = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// `−Σ target · log(max(pred, LOG_FLOOR))`.
pub fn cross_entropy(target: &[f64], pred: &[f64]) -> Result<f64> {
    ensure_dim("cross-entropy prediction", target.len(), pred.len())?;
    Ok(-target
        .iter()
        .zip(pred)
        .filter(|(&t, _)| t != 0.0)
        .map(|(&t, &p)| t * p.max(LOG_FLOOR).ln())
        .sum::<f64>())
}

/// Gradient of `cross_entropy(target, softmax(logits))` with respect to the
/// logits, given the already computed `probs = softmax(logits)`.
pub fn softmax_cross_entropy_grad(target: &[f64], probs: &[f64]) -> Result<Vector> {
    ensure_dim("cross-entropy prediction", target.len(), probs.len())?;
    // dCE/dp_i = −t_i / p_i where p_i is above the clamp, zero otherwise.
    let dp: Vector = target
        .iter()
        .zip(probs)
        .map(|(&t, &p)| if p > LOG_FLOOR { -t / p } else { 0.0 })
        .collect();
    let inner: f64 = dp.iter().zip(probs).map(|(d, p)| d * p).sum();
    Ok(probs
        .iter()
        .zip(&dp)
        .map(|(&p, &d)| p * (d - inner))
        .collect())
}

pub fn l2_normalize(v: &[f64]) -> Result<Vector> {
    let n = norm(v);
    if !(n > NORM_FLOOR) {
        return Err(Error::DegenerateEmbedding(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Backward of `z = v / ‖v‖`: `(g − (g·z) z) / ‖v‖`.
pub fn l2_normalize_backward(v: &[f64], z: &[f64], grad_z: &[f64]) -> Vector {
    let n = norm(v);
    let gz: f64 = grad_z.iter().zip(z).map(|(g, z)| g * z).sum();
    grad_z
        .iter()
        .zip(z)
        .map(|(g, z)| (g - gz * z) / n)
        .collect()
}

pub fn is_probability_vector(p: &[f64], tol: f64) -> bool {
    !p.is_empty()
        && p.iter().all(|&v| v.is_finite() && v >= -tol)
        && (p.iter().sum::<f64>() - 1.0).abs() <= tol
}

pub fn one_hot(len: usize, hot: usize) -> SoftLabel {
    let mut v = vec![0.0; len];
    v[hot] = 1.0;
    v
}

/// `w · a + (1 − w) · b`, elementwise.
pub fn interpolate(w: f64, a: &[f64], b: &[f64]) -> Result<Vector> {
    ensure_dim("interpolation operand", a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| w * x + (1.0 - w) * y).collect())
}
