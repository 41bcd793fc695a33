//! Similarity- and attention-flow detectors over token grids.

use super::hijack::HijackScores;
use crate::error::{Error, Result};
use crate::numerics::{Tensor, DEGENERATE_NORM};
use crate::scalar::Scalar;
use crate::vit::FeatureMap;

/// Row-normalized copy of the selected rows; degenerate rows become zero so
/// their cosine with anything is 0.
pub(crate) fn unit_rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Vec<Vec<T>> {
    let eps = T::of(DEGENERATE_NORM);
    idx.iter()
        .map(|&i| {
            let r = t.row(i);
            let n = crate::numerics::norm(r);
            if n < eps {
                vec![T::zero(); r.len()]
            } else {
                r.iter().map(|&v| v / n).collect()
            }
        })
        .collect()
}

/// For each row of `a`, the largest cosine against any row of `b`
/// (`-inf` when `b` is empty).
pub(crate) fn max_cosines<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>]) -> Vec<T> {
    a.iter()
        .map(|u| {
            b.iter()
                .map(|v| crate::numerics::dot(u, v).min(T::one()))
                .fold(T::neg_infinity(), T::max)
        })
        .collect()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn check_dims<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>, op: &'static str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            op,
            format!("embedding widths {} vs {}", a.dim(), b.dim()),
        ));
    }
    Ok(())
}

/// Source tokens whose best cosine against any reference token reaches
/// `tau_fp`: they look the same regardless of the image.
pub fn detect_fixed_pattern<T: Scalar>(
    z_s: &FeatureMap<T>,
    z_ref: &FeatureMap<T>,
    tau_fp: f64,
) -> Result<Vec<usize>> {
    check_dims(z_s, z_ref, "detect_fixed_pattern")?;
    if z_ref.is_empty() {
        return Err(Error::invalid(
            "fixed-pattern detection needs a non-empty reference",
        ));
    }
    let a = unit_rows(z_s.tokens(), &all(z_s.len()));
    let b = unit_rows(z_ref.tokens(), &all(z_ref.len()));
    let tau = T::of(tau_fp);
    Ok(max_cosines(&a, &b)
        .iter()
        .enumerate()
        .filter(|(_, &c)| c >= tau)
        .map(|(i, _)| i)
        .collect())
}

fn check_disjoint(a: &[usize], b: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![0u8; n];
    for &i in a {
        if i >= n {
            return Err(Error::invalid(format!(
                "region index {i} outside a {n}-token map"
            )));
        }
        seen[i] = 1;
    }
    for &j in b {
        if j >= n {
            return Err(Error::invalid(format!(
                "region index {j} outside a {n}-token map"
            )));
        }
        if seen[j] == 1 {
            return Err(Error::invalid(format!(
                "source and reference regions overlap at token {j}"
            )));
        }
    }
    Ok(())
}

/// Source-region tokens of a composite map that are highly similar to the
/// composite's reference region (`≥ tau_gp`) while failing the
/// fixed-pattern test against the standalone reference (`< tau_fp`).
/// Returned indices are positions in `z_cat`.
pub fn detect_global_proxy<T: Scalar>(
    z_cat: &FeatureMap<T>,
    z_ref: &FeatureMap<T>,
    src_region: &[usize],
    ref_region: &[usize],
    tau_gp: f64,
    tau_fp: f64,
) -> Result<Vec<usize>> {
    check_dims(z_cat, z_ref, "detect_global_proxy")?;
    check_disjoint(src_region, ref_region, z_cat.len())?;
    let src = unit_rows(z_cat.tokens(), src_region);
    let within = max_cosines(&src, &unit_rows(z_cat.tokens(), ref_region));
    let cross = max_cosines(&src, &unit_rows(z_ref.tokens(), &all(z_ref.len())));
    let (tg, tf) = (T::of(tau_gp), T::of(tau_fp));
    Ok(src_region
        .iter()
        .zip(within.iter().zip(&cross))
        .filter(|(_, (&w, &c))| w >= tg && c < tf)
        .map(|(&i, _)| i)
        .collect())
}

/// Keys whose hijack score is below an absolute cutoff.
pub fn detect_hijackee_abs<T: Scalar>(scores: &HijackScores<T>, tau_ah_abs: f64) -> Vec<usize> {
    let tau = T::of(tau_ah_abs);
    scores
        .iter()
        .filter(|(_, h)| *h < tau)
        .map(|(j, _)| j)
        .collect()
}

/// Keys with `h ≤ μ_h + tau·σ_h`, statistics over the scored region.
pub fn detect_hijackee_rel<T: Scalar>(scores: &HijackScores<T>, tau_ah_rel: f64) -> Vec<usize> {
    let mu = scores.mean.as_f64();
    let sigma = scores.std.as_f64();
    if sigma <= 1e-12 * mu.abs().max(1.0) {
        let take = tau_ah_rel >= 0.0;
        log::debug!(
            "constant hijack scores (mu = {mu}); relative rule with tau = {tau_ah_rel} selects {}",
            if take { "every token" } else { "nothing" }
        );
        return if take {
            scores.iter().map(|(j, _)| j).collect()
        } else {
            Vec::new()
        };
    }
    let cutoff = mu + tau_ah_rel * sigma;
    scores
        .iter()
        .filter(|(_, h)| h.as_f64() <= cutoff)
        .map(|(j, _)| j)
        .collect()
}

/// Tokens (among `region`, or all when `None`) whose best cosine with any
/// register token reaches `tau_reg`.
pub fn detect_by_register<T: Scalar>(
    z: &FeatureMap<T>,
    registers: &Tensor<T>,
    region: Option<&[usize]>,
    tau_reg: f64,
) -> Result<Vec<usize>> {
    if registers.is_empty() || registers.rows() == 0 {
        log::warn!("register detector invoked without registers; nothing flagged");
        return Ok(Vec::new());
    }
    if registers.cols() != z.dim() {
        return Err(Error::shape(
            "detect_by_register",
            format!("register width {} vs {}", registers.cols(), z.dim()),
        ));
    }
    let owned;
    let region = match region {
        Some(r) => r,
        None => {
            owned = all(z.len());
            &owned
        }
    };
    let a = unit_rows(z.tokens(), region);
    let b = unit_rows(registers, &all(registers.rows()));
    let tau = T::of(tau_reg);
    Ok(region
        .iter()
        .zip(max_cosines(&a, &b))
        .filter(|(_, c)| *c >= tau)
        .map(|(&i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: &[Vec<f64>]) -> FeatureMap<f64> {
        FeatureMap::new(1, rows.len(), Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn fixed_pattern_basics() {
        let s = fm(&[vec![1., 0., 0.], vec![0., 1., 0.]]);
        let r = fm(&[vec![2., 0., 0.]]);
        assert_eq!(detect_fixed_pattern(&s, &r, 0.9).unwrap(), vec![0]);
        let r = fm(&[vec![0., 0., 1.]]);
        assert!(detect_fixed_pattern(&s, &r, 0.1).unwrap().is_empty());
        let empty = FeatureMap::new(0, 0, Tensor::<f64>::zeros(&[0, 3])).unwrap();
        assert!(detect_fixed_pattern(&s, &empty, 0.9).is_err());
        let wide = fm(&[vec![1., 0.]]);
        assert!(detect_fixed_pattern(&s, &wide, 0.9).is_err());
    }

    #[test]
    fn global_proxy_clauses() {
        // token 0: matches the composite's reference region, not the standalone ref
        // token 1: matches the standalone ref too (FP, excluded)
        let cat = fm(&[
            vec![1., 1., 0., 0.],
            vec![0., 0., 1., 0.],
            vec![1., 1., 0., 0.1],
            vec![0., 0., 1., 0.],
        ]);
        let r = fm(&[vec![0., 0., 1., 0.], vec![0., 0., 0., 1.]]);
        let got = detect_global_proxy(&cat, &r, &[0, 1], &[2, 3], 0.85, 0.8).unwrap();
        assert_eq!(got, vec![0]);
        let got = detect_global_proxy(&cat, &r, &[0, 1], &[2, 3], 1.01, 0.8).unwrap();
        assert!(got.is_empty());
        assert!(detect_global_proxy(&cat, &r, &[0, 1], &[1, 2], 0.85, 0.8).is_err());
    }

    #[test]
    fn relative_rule_worked_case() {
        let s = HijackScores::from_scores(vec![0, 1, 2, 3], vec![1.0, 1.0, 1.0, 0.0]);
        assert!((s.mean - 0.75f64).abs() < 1e-15);
        assert!((s.std - 0.4330127018922193f64).abs() < 1e-12);
        assert_eq!(detect_hijackee_rel(&s, -1.0), vec![3]);
        assert_eq!(detect_hijackee_rel(&s, 3.0), vec![0, 1, 2, 3]);
        let u = HijackScores::from_scores(vec![0, 1, 2], vec![1.0, 1.0, 1.0]);
        assert!(detect_hijackee_rel(&u, -1.0).is_empty());
        assert_eq!(detect_hijackee_rel(&u, 0.0), vec![0, 1, 2]);
    }

    #[test]
    fn absolute_rule() {
        let s = HijackScores::from_scores(vec![4, 5, 6], vec![1.0, 0.0, 1.0]);
        assert_eq!(detect_hijackee_abs(&s, 0.5), vec![5]);
        assert_eq!(detect_hijackee_abs(&s, f64::INFINITY), vec![4, 5, 6]);
        let uni = HijackScores::from_scores(vec![0, 1], vec![1.0, 1.0]);
        assert!(detect_hijackee_abs(&uni, 0.5).is_empty());
    }

    #[test]
    fn register_rule() {
        let z = fm(&[vec![1., 0.], vec![0., 1.]]);
        let regs = Tensor::from_rows(&[vec![0., 3.]]).unwrap();
        assert_eq!(detect_by_register(&z, &regs, None, 0.8).unwrap(), vec![1]);
        let orth = Tensor::from_rows(&[vec![-1., -1.]]).unwrap();
        assert!(detect_by_register(&z, &orth, None, 0.8).unwrap().is_empty());
        let none = Tensor::<f64>::zeros(&[0, 2]);
        assert!(detect_by_register(&z, &none, None, 0.8).unwrap().is_empty());
    }
}
