//! Two-component PCA of token embeddings.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Convergence tolerance of the power iteration (change of the unit
/// eigenvector between sweeps, in max-norm).
pub const PCA_TOL: f64 = 1e-10;
const MAX_ITERS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, `[k, D]`.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Centered tokens projected on the components, `[T, k]`.
    pub projections: Vec<Vec<f64>>,
}

fn covariance(x: &Tensor<f64>, mean: &[f64]) -> Vec<Vec<f64>> {
    let (n, d) = (x.rows(), x.cols());
    let mut c = vec![vec![0.0; d]; d];
    for i in 0..n {
        let r: Vec<f64> = x.row(i).iter().zip(mean).map(|(a, m)| a - m).collect();
        for a in 0..d {
            if r[a] == 0.0 {
                continue;
            }
            for b in 0..d {
                c[a][b] += r[a] * r[b];
            }
        }
    }
    for row in &mut c {
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    c
}

fn mat_vec(c: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    c.iter()
        .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn unit(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Flips `v` so its first entry with magnitude above 1e-12 is positive.
fn fix_sign(v: &mut [f64]) {
    if let Some(&f) = v.iter().find(|x| x.abs() > 1e-12) {
        if f < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Leading eigenpair by power iteration from a fixed start, deflating
/// previously found directions out of every iterate.
fn leading(c: &[Vec<f64>], found: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let d = c.len();
    let deflate = |v: &mut Vec<f64>| {
        for u in found {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
    };
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / d as f64).collect();
    deflate(&mut v);
    if unit(&mut v) == 0.0 {
        return (vec![0.0; d], 0.0);
    }
    for _ in 0..MAX_ITERS {
        let mut next = mat_vec(c, &v);
        deflate(&mut next);
        if unit(&mut next) < 1e-300 {
            return (vec![0.0; d], 0.0);
        }
        fix_sign(&mut next);
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if delta < PCA_TOL {
            break;
        }
    }
    let lambda = v.iter().zip(mat_vec(c, &v)).map(|(a, b)| a * b).sum();
    (v, lambda)
}

/// Top-`k` PCA of the rows of `x`. Directions with zero variance come back
/// as zero vectors, so identical tokens all project to the origin.
pub fn pca(x: &Tensor<f64>, k: usize) -> Result<Pca> {
    if x.shape().len() != 2 || x.rows() == 0 {
        return Err(Error::invalid("PCA needs a non-empty [T, D] matrix"));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let (n, d) = (x.rows(), x.cols());
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64)
        .collect();
    let c = covariance(x, &mean);
    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut eigenvalues = Vec::new();
    for _ in 0..k.min(d) {
        let nonzero: Vec<Vec<f64>> = components
            .iter()
            .filter(|u| u.iter().any(|&v| v != 0.0))
            .cloned()
            .collect();
        let (v, l) = leading(&c, &nonzero);
        components.push(v);
        eigenvalues.push(l);
    }
    let projections = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|u| {
                    x.row(i)
                        .iter()
                        .zip(&mean)
                        .zip(u)
                        .map(|((a, m), b)| (a - m) * b)
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        projections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_tokens_coincide() {
        let x = Tensor::from_rows(&vec![vec![1.0, 2.0, 3.0]; 5]).unwrap();
        let p = pca(&x, 2).unwrap();
        assert!(p.projections.iter().all(|r| r.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn orthogonal_clusters_split_on_first_component() {
        let mut rows = Vec::new();
        for i in 0..10 {
            let e = 0.01 * i as f64;
            rows.push(vec![1.0, 0.0, e]);
            rows.push(vec![0.0, 1.0, e]);
        }
        let p = pca(&Tensor::from_rows(&rows).unwrap(), 2).unwrap();
        // covariance is diag-block: [[1/4, -1/4], [-1/4, 1/4]] ⊕ var(e)
        let var_e = 0.0825 / 100.0;
        let u = &p.components[0];
        let h = 0.5f64.sqrt();
        assert!((u[0] - h).abs() < 1e-8 && (u[1] + h).abs() < 1e-8 && u[2].abs() < 1e-8);
        assert!((p.eigenvalues[0] - 0.5).abs() < 1e-10);
        assert!((p.eigenvalues[1] - var_e).abs() < 1e-10);
        for (k, r) in p.projections.iter().enumerate() {
            assert_eq!(r[0] > 0.0, k % 2 == 0);
        }
    }

    #[test]
    fn sign_convention() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![-(i as f64), 2.0 * i as f64]).collect();
        let p = pca(&Tensor::from_rows(&rows).unwrap(), 1).unwrap();
        let u = &p.components[0];
        assert!(u[0] > 0.0);
        assert!((p.eigenvalues[0] - 5.0 * 35.0 / 12.0).abs() < 1e-8);
    }
}
