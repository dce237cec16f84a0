//! Exact two-component PCA for inspection plots.

use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor2D, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    pub mean: Vector,
    /// Unit principal axes, largest variance first.
    pub axes: [Vector; 2],
    pub variances: [f64; 2],
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues (descending) and eigenvectors as columns.
fn jacobi_eigen(mut a: Tensor2D) -> (Vec<f64>, Tensor2D) {
    let n = a.rows();
    let mut v = Tensor2D::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vecs = Tensor2D::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        for r in 0..n {
            vecs.set(r, col, v.get(r, i));
        }
    }
    (values, vecs)
}

impl Pca2 {
    pub fn fit(points: &[Vector]) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::invalid("PCA needs at least two points"));
        }
        let dim = points[0].len();
        if dim < 2 {
            return Err(Error::invalid("PCA to two components needs dim >= 2"));
        }
        for p in points {
            crate::error::ensure_dim("PCA point", dim, p.len())?;
        }
        let mut mean = vec![0.0; dim];
        for p in points {
            mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut cov = Tensor2D::zeros(dim, dim);
        for p in points {
            let c: Vector = p.iter().zip(&mean).map(|(v, m)| v - m).collect();
            cov.add_outer(&c, &c)?;
        }
        cov.scale(1.0 / (n - 1) as f64);
        let (values, vecs) = jacobi_eigen(cov);
        let axis = |col: usize| -> Vector {
            let mut a: Vector = (0..dim).map(|r| vecs.get(r, col)).collect();
            // sign convention: largest-magnitude coordinate positive
            let lead = a
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()).then(y.0.cmp(&x.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if a[lead] < 0.0 {
                a.iter_mut().for_each(|v| *v = -*v);
            }
            a
        };
        Ok(Self {
            mean,
            axes: [axis(0), axis(1)],
            variances: [values[0].max(0.0), values[1].max(0.0)],
        })
    }

    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        let c: Vector = x.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        [dot(&c, &self.axes[0]), dot(&c, &self.axes[1])]
    }
}
