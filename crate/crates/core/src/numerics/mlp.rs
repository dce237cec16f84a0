//! Fully connected network with leaky-rectifier activations and inverted
//! dropout, plus the matching backward pass.
//!
//! Layer `i` maps `widths[i] -> widths[i + 1]`. Dropout rate `dropout[i]` is
//! applied to the *input* of layer `i`. Every hidden layer is activated; the
//! last layer is activated only when `activate_output` is set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{ensure_finite, Tensor2D, Vector};
use crate::error::{ensure_dim, Error, Result};
use crate::rng::mix_seed;

pub const DEFAULT_NEGATIVE_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub negative_slope: f64,
    pub dropout: Vec<f64>,
    pub activate_output: bool,
}

impl MlpSpec {
    /// A spec without dropout.
    pub fn new(widths: Vec<usize>, activate_output: bool) -> Self {
        let layers = widths.len().saturating_sub(1);
        Self {
            widths,
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
            dropout: vec![0.0; layers],
            activate_output,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = vec![rate; self.num_layers()];
        self
    }

    pub fn with_negative_slope(mut self, slope: f64) -> Self {
        self.negative_slope = slope;
        self
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("MLP widths must be positive"));
        }
        ensure_dim("dropout rates per layer", self.num_layers(), self.dropout.len())?;
        if self.dropout.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        if !self.negative_slope.is_finite() {
            return Err(Error::invalid("negative slope must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dropout {
    Off,
    Seeded(u64),
}

/// Keep-mask for one layer: `true` means the unit survives.
pub fn dropout_mask(seed: u64, layer: usize, units: usize, rate: f64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, layer as u64));
    (0..units).map(|_| rng.random::<f64>() >= rate).collect()
}

#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    /// Input to each layer after dropout.
    inputs: Vec<Vector>,
    /// Per-unit dropout scale (0 or 1/(1-p)) for each layer, if dropout ran.
    scales: Vec<Option<Vector>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vector>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamStore,
}

impl Mlp {
    /// Uniform init in ±1/√fan_in for weights and biases.
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for l in 0..spec.num_layers() {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let b: Vec<f64> = (0..fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(format!("layer{l}.weight"), Tensor2D::from_vec(fan_out, fan_in, w)?);
            params.push(format!("layer{l}.bias"), Tensor2D::from_vec(fan_out, 1, b)?);
        }
        Ok(Self { spec, params })
    }

    /// Builds a network from explicit `(weight, bias)` pairs.
    pub fn from_layers(spec: MlpSpec, layers: Vec<(Tensor2D, Vector)>) -> Result<Self> {
        spec.validate()?;
        ensure_dim("layer count", spec.num_layers(), layers.len())?;
        let mut params = ParamStore::new();
        for (l, (w, b)) in layers.into_iter().enumerate() {
            ensure_dim("weight rows", spec.widths[l + 1], w.rows())?;
            ensure_dim("weight cols", spec.widths[l], w.cols())?;
            ensure_dim("bias length", spec.widths[l + 1], b.len())?;
            let n = b.len();
            params.push(format!("layer{l}.weight"), w);
            params.push(format!("layer{l}.bias"), Tensor2D::from_vec(n, 1, b)?);
        }
        Ok(Self { spec, params })
    }

    /// Checks stored blocks against the `MlpSpec` (used after deserialization).
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        ensure_dim("parameter blocks", 2 * self.spec.num_layers(), self.params.blocks().len())?;
        for l in 0..self.spec.num_layers() {
            let w = &self.params.block(2 * l).value;
            let b = &self.params.block(2 * l + 1).value;
            ensure_dim("weight rows", self.spec.widths[l + 1], w.rows())?;
            ensure_dim("weight cols", self.spec.widths[l], w.cols())?;
            ensure_dim("bias length", self.spec.widths[l + 1], b.rows())?;
        }
        Ok(())
    }

    pub fn weight(&self, layer: usize) -> &Tensor2D {
        &self.params.block(2 * layer).value
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor2D {
        &mut self.params.block_mut(2 * layer).value
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        self.params.block(2 * layer + 1).value.as_slice()
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        self.params.block_mut(2 * layer + 1).value.as_mut_slice()
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.spec.num_layers() || self.spec.activate_output
    }

    fn leaky(&self, x: f64) -> f64 {
        if x >= 0.0 {
            x
        } else {
            self.spec.negative_slope * x
        }
    }

    pub fn forward(&self, input: &[f64], dropout: Dropout) -> Result<(Vector, MlpCache)> {
        ensure_dim("mlp input", self.spec.input_dim(), input.len())?;
        ensure_finite("mlp input", input)?;
        let layers = self.spec.num_layers();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(layers),
            scales: Vec::with_capacity(layers),
            pre: Vec::with_capacity(layers),
        };
        let mut x = input.to_vec();
        for l in 0..layers {
            let rate = self.spec.dropout[l];
            let scale = match dropout {
                Dropout::Seeded(seed) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let s: Vector = dropout_mask(seed, l, x.len(), rate)
                        .into_iter()
                        .map(|k| if k { keep } else { 0.0 })
                        .collect();
                    x.iter_mut().zip(&s).for_each(|(v, s)| *v *= s);
                    Some(s)
                }
                _ => None,
            };
            let mut y = self.weight(l).matvec(&x)?;
            y.iter_mut().zip(self.bias(l)).for_each(|(v, b)| *v += b);
            let out: Vector = if self.activated(l) {
                y.iter().map(|&v| self.leaky(v)).collect()
            } else {
                y.clone()
            };
            cache.inputs.push(x);
            cache.scales.push(scale);
            cache.pre.push(y);
            x = out;
        }
        Ok((x, cache))
    }

    /// Inference forward pass, no dropout.
    pub fn predict(&self, input: &[f64]) -> Result<Vector> {
        Ok(self.forward(input, Dropout::Off)?.0)
    }

    /// Accumulates parameter gradients for `d loss / d output` and returns
    /// `d loss / d input`.
    pub fn backward(&mut self, cache: &MlpCache, grad_output: &[f64]) -> Result<Vector> {
        ensure_dim("mlp output gradient", self.spec.output_dim(), grad_output.len())?;
        let mut g = grad_output.to_vec();
        for l in (0..self.spec.num_layers()).rev() {
            if self.activated(l) {
                let slope = self.spec.negative_slope;
                g.iter_mut()
                    .zip(&cache.pre[l])
                    .for_each(|(gv, &p)| {
                        if p < 0.0 {
                            *gv *= slope
                        }
                    });
            }
            self.params
                .block_mut(2 * l)
                .grad
                .add_outer(&g, &cache.inputs[l])?;
            self.params
                .block_mut(2 * l + 1)
                .grad
                .as_mut_slice()
                .iter_mut()
                .zip(&g)
                .for_each(|(b, gv)| *b += gv);
            let mut gx = self.weight(l).matvec_t(&g)?;
            if let Some(s) = &cache.scales[l] {
                gx.iter_mut().zip(s).for_each(|(v, s)| *v *= s);
            }
            g = gx;
        }
        self.params.mark_grads_ready();
        Ok(g)
    }

    /// Product of layer spectral norms: a Lipschitz bound for the network
    /// (the leaky rectifier is 1-Lipschitz for slopes in [0, 1]).
    pub fn lipschitz_bound(&self) -> f64 {
        (0..self.spec.num_layers())
            .map(|l| self.weight(l).spectral_norm(500))
            .product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer(n: usize) -> Mlp {
        Mlp::from_layers(
            MlpSpec::new(vec![n, n], true),
            vec![(Tensor2D::identity(n), vec![0.0; n])],
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_applies_leaky_rectifier() {
        let m = identity_layer(2);
        let y = m.predict(&[2.0, -2.0]).unwrap();
        assert_eq!(y, vec![2.0, -0.02]);
    }

    #[test]
    fn zero_rate_dropout_ignores_seed() {
        let m = Mlp::new(MlpSpec::new(vec![4, 6, 3], false), 3).unwrap();
        let x = [0.3, -1.0, 2.0, 0.5];
        let a = m.forward(&x, Dropout::Seeded(1)).unwrap().0;
        let b = m.forward(&x, Dropout::Seeded(99)).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a, m.predict(&x).unwrap());
    }

    #[test]
    fn masks_repeat_per_seed_and_vary_across_seeds() {
        assert_eq!(dropout_mask(7, 0, 4, 0.5), dropout_mask(7, 0, 4, 0.5));
        // Two independent Bernoulli(0.5) masks over 4 units coincide with
        // probability 2^-4, so they differ with probability 15/16.
        let trials = 1000;
        let differing = (0..trials)
            .filter(|&t| dropout_mask(2 * t, 0, 4, 0.5) != dropout_mask(2 * t + 1, 0, 4, 0.5))
            .count();
        let p = 1.0 - 0.5f64.powi(4);
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        let observed = differing as f64 / trials as f64;
        assert!((observed - p).abs() < 4.0 * se, "observed {observed}");
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        // Single linear layer so the expectation is exact.
        let m = Mlp::new(MlpSpec::new(vec![8, 3], false).with_dropout(0.5), 11).unwrap();
        let x = [1.0, -0.5, 0.25, 2.0, -1.5, 0.75, 0.1, -0.2];
        let reference = m.predict(&x).unwrap();
        let n = 10_000;
        let mut sum = [0.0; 3];
        let mut sumsq = [0.0; 3];
        for s in 0..n {
            let y = m.forward(&x, Dropout::Seeded(s)).unwrap().0;
            for i in 0..3 {
                sum[i] += y[i];
                sumsq[i] += y[i] * y[i];
            }
        }
        for i in 0..3 {
            let mean = sum[i] / n as f64;
            let var = sumsq[i] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - reference[i]).abs() <= 3.0 * se, "unit {i}: {mean} vs {}", reference[i]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = identity_layer(2);
        assert!(matches!(m.predict(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(m.predict(&[f64::NAN, 0.0]), Err(Error::NonFinite(_))));
        assert!(Mlp::new(MlpSpec::new(vec![3], false), 0).is_err());
        assert!(Mlp::new(MlpSpec::new(vec![3, 0], false), 0).is_err());
        assert!(Mlp::new(MlpSpec::new(vec![3, 2], false).with_dropout(1.0), 0).is_err());
    }

    #[test]
    fn same_seed_same_init() {
        let spec = MlpSpec::new(vec![5, 7, 2], false);
        let a = Mlp::new(spec.clone(), 42).unwrap();
        let b = Mlp::new(spec.clone(), 42).unwrap();
        let c = Mlp::new(spec, 43).unwrap();
        assert_eq!(a.params.flat_values(), b.params.flat_values());
        assert_ne!(a.params.flat_values(), c.params.flat_values());
    }
}
