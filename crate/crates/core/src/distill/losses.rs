use crate::error::{Error, Result};
use crate::numerics::{argmax, cosine, Tape, Var};
use crate::scalar::Scalar;

/// Direct evaluation of
/// `−log(e^{cos(a,p)/τ} / (e^{cos(a,p)/τ} + Σ_n e^{cos(a,n)/τ}))`.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> f64 {
    let lp = cosine(anchor, positive) / tau;
    let logits: Vec<f64> = std::iter::once(lp)
        .chain(negatives.iter().map(|n| cosine(anchor, n) / tau))
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - lp
}

/// Mean InfoNCE of each anchor row against the whole `pool`, with
/// `positives[i]` naming its positive row; every other pool row is a
/// negative. Similarities are cosines divided by `tau`.
pub fn info_nce_rows<T: Scalar>(
    tape: &mut Tape<T>,
    anchors: Var,
    pool: Var,
    positives: &[usize],
    tau: f64,
) -> Result<Var> {
    let n = tape.value(anchors).rows();
    if positives.len() != n {
        return Err(Error::shape(
            "info_nce",
            format!("{n} anchors, {} positives", positives.len()),
        ));
    }
    let a = tape.normalize_rows(anchors)?;
    let p = tape.normalize_rows(pool)?;
    let s = tape.matmul_bt(a, p)?;
    let s = tape.scale(s, T::of(1.0 / tau));
    let lse = tape.logsumexp_rows(s)?;
    let at: Vec<(usize, usize)> = positives.iter().enumerate().map(|(i, &j)| (i, j)).collect();
    let pos = tape.pick(s, &at)?;
    let l = tape.sub(lse, pos)?;
    tape.mean(l)
}

/// Student crop tokens pulled to the teacher token at the same position,
/// for regular positions only. `None` when nothing is regular.
pub fn loss_regular<T: Scalar>(
    tape: &mut Tape<T>,
    z_roi: Var,
    z_crop: Var,
    regular: &[usize],
    tau: f64,
) -> Result<Option<Var>> {
    if regular.is_empty() {
        log::warn!("no regular tokens in this crop; regular loss skipped");
        return Ok(None);
    }
    let anchors = tape.gather_rows(z_roi, regular)?;
    info_nce_rows(tape, anchors, z_crop, regular, tau).map(Some)
}

/// Each register's positive: the spurious teacher token of highest cosine
/// (first on ties), as crop-local indices.
pub fn assign_registers<T: Scalar>(
    tape: &Tape<T>,
    z_reg: Var,
    z_crop: Var,
    spurious: &[usize],
) -> Vec<usize> {
    let (r, c) = (tape.value(z_reg), tape.value(z_crop));
    (0..r.rows())
        .map(|i| {
            let sims: Vec<T> = spurious
                .iter()
                .map(|&j| cosine(r.row(i), c.row(j)))
                .collect();
            spurious[argmax(&sims).expect("non-empty")]
        })
        .collect()
}

/// Registers pulled to their most similar spurious teacher token. `None`
/// when nothing is spurious.
pub fn loss_spurious<T: Scalar>(
    tape: &mut Tape<T>,
    z_reg: Var,
    z_crop: Var,
    spurious: &[usize],
    tau: f64,
) -> Result<Option<(Var, Vec<usize>)>> {
    if spurious.is_empty() {
        log::warn!("no spurious tokens in this crop; spurious loss skipped");
        return Ok(None);
    }
    if tape.value(z_reg).rows() == 0 {
        return Ok(None);
    }
    let assignment = assign_registers(tape, z_reg, z_crop, spurious);
    let l = info_nce_rows(tape, z_reg, z_crop, &assignment, tau)?;
    Ok(Some((l, assignment)))
}

/// `mean_i log Σ_j exp(n(z_roi_i) · n(z_reg_j) / τ)`.
pub fn loss_uniformity<T: Scalar>(
    tape: &mut Tape<T>,
    z_roi: Var,
    z_reg: Var,
    tau: f64,
) -> Result<Var> {
    if tape.value(z_roi).rows() == 0 || tape.value(z_reg).rows() == 0 {
        return Err(Error::invalid(
            "uniformity loss needs image and register tokens",
        ));
    }
    let a = tape.normalize_rows(z_roi)?;
    let r = tape.normalize_rows(z_reg)?;
    let s = tape.matmul_bt(a, r)?;
    let s = tape.scale(s, T::of(1.0 / tau));
    let lse = tape.logsumexp_rows(s)?;
    tape.mean(lse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Rng, Tensor};

    #[test]
    fn scalar_worked_cases() {
        assert_eq!(info_nce(&[1.0, 0.0], &[2.0, 0.0], &[], 0.1), 0.0);
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((info_nce(&[1.0, 0.0], &[1.0, 0.0], &[&[0.0, 1.0]], 1.0) - want).abs() < 1e-12);
        assert!((want - 0.3133).abs() < 1e-4);
        let dup = info_nce(&[1.0, 0.2], &[0.3, 1.0], &[&[0.3, 1.0]], 100.0);
        assert!((dup - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tape_matches_scalar() {
        let mut rng = Rng::new(5);
        let mk = |rng: &mut Rng, r: usize| {
            Tensor::new(vec![r, 4], (0..r * 4).map(|_| rng.normal()).collect()).unwrap()
        };
        let (za, zc) = (mk(&mut rng, 3), mk(&mut rng, 5));
        let mut tape = Tape::new();
        let a = tape.constant(za.clone());
        let c = tape.constant(zc.clone());
        let pos = [4, 0, 2];
        let l = info_nce_rows(&mut tape, a, c, &pos, 0.3).unwrap();
        let mut want = 0.0;
        for (i, &p) in pos.iter().enumerate() {
            let negs: Vec<&[f64]> = (0..5).filter(|&j| j != p).map(|j| zc.row(j)).collect();
            want += info_nce(za.row(i), zc.row(p), &negs, 0.3) / 3.0;
        }
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn uniformity_worked_cases() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap());
        let r = tape.constant(
            Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -3.0], vec![0.0, 2.0]]).unwrap(),
        );
        let l = loss_uniformity(&mut tape, a, r, 0.5).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);
        let one = tape.constant(Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap());
        let l = loss_uniformity(&mut tape, one, one, 1.0).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sets_are_skipped() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::eye(3));
        assert!(loss_regular(&mut tape, z, z, &[], 0.1).unwrap().is_none());
        assert!(loss_spurious(&mut tape, z, z, &[], 0.1).unwrap().is_none());
        let (_, asg) = loss_spurious(&mut tape, z, z, &[2], 0.1).unwrap().unwrap();
        assert_eq!(asg, vec![2, 2, 2]);
    }
}
