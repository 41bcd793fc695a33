use super::crops::CropSpec;
use crate::error::Result;
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::vit::FeatureMap;

/// Linear operator of ROI-Align as a `[oh·ow, rows·cols]` matrix: each
/// output cell averages `samples²` bilinear taps laid out evenly inside its
/// sub-box. Taps are clamped to the outermost cell centers.
pub fn roi_weights<T: Scalar>(
    rows: usize,
    cols: usize,
    crop: &CropSpec,
    samples: usize,
) -> Result<Tensor<T>> {
    crop.validate()?;
    let [x0, y0, x1, y1] = crop.bx;
    let (oh, ow) = crop.out;
    let mut w = vec![0.0f64; oh * ow * rows * cols];
    let tap = 1.0 / (samples * samples) as f64;
    let axis = |t: f64, n: usize| -> (usize, usize, f64) {
        let p = (t * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let a = p.floor() as usize;
        let b = (a + 1).min(n - 1);
        (a, b, p - a as f64)
    };
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut w[(oy * ow + ox) * rows * cols..(oy * ow + ox + 1) * rows * cols];
            for sy in 0..samples {
                let ty =
                    y0 + (y1 - y0) * (oy as f64 + (sy as f64 + 0.5) / samples as f64) / oh as f64;
                let (ya, yb, fy) = axis(ty, rows);
                for sx in 0..samples {
                    let tx = x0
                        + (x1 - x0) * (ox as f64 + (sx as f64 + 0.5) / samples as f64) / ow as f64;
                    let (xa, xb, fx) = axis(tx, cols);
                    row[ya * cols + xa] += tap * (1.0 - fy) * (1.0 - fx);
                    row[ya * cols + xb] += tap * (1.0 - fy) * fx;
                    row[yb * cols + xa] += tap * fy * (1.0 - fx);
                    row[yb * cols + xb] += tap * fy * fx;
                }
            }
        }
    }
    Tensor::from_f64(vec![oh * ow, rows * cols], &w)
}

pub fn roi_align<T: Scalar>(
    fm: &FeatureMap<T>,
    crop: &CropSpec,
    samples: usize,
) -> Result<FeatureMap<T>> {
    let w = roi_weights(fm.rows(), fm.cols(), crop, samples)?;
    FeatureMap::new(crop.out.0, crop.out.1, w.matmul(fm.tokens())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random_fm(rows: usize, cols: usize, d: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = Rng::new(seed);
        let t = Tensor::new(
            vec![rows * cols, d],
            (0..rows * cols * d).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        FeatureMap::new(rows, cols, t).unwrap()
    }

    #[test]
    fn single_tap_full_box_is_identity() {
        let fm = random_fm(4, 5, 3, 1);
        let out = roi_align(&fm, &CropSpec::full((4, 5)), 1).unwrap();
        assert!(out.tokens().max_abs_diff(fm.tokens()) < 1e-12);
    }

    #[test]
    fn linear_field_is_reproduced_at_interior_cells() {
        let (r, c) = (6, 6);
        let data: Vec<f64> = (0..r * c)
            .flat_map(|i| [(i / c) as f64, (i % c) as f64 * 2.0 - 1.0])
            .collect();
        let fm = FeatureMap::new(r, c, Tensor::new(vec![r * c, 2], data).unwrap()).unwrap();
        let out = roi_align(&fm, &CropSpec::full((r, c)), 2).unwrap();
        for y in 1..r - 1 {
            for x in 1..c - 1 {
                let i = y * c + x;
                assert!((out.token(i)[0] - fm.token(i)[0]).abs() < 1e-9);
                assert!((out.token(i)[1] - fm.token(i)[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tiny_box_at_a_cell_center_returns_that_cell() {
        let fm = random_fm(4, 4, 3, 2);
        let (cx, cy) = (2.5 / 4.0, 1.5 / 4.0);
        let e = 1e-9;
        let crop = CropSpec {
            bx: [cx - e, cy - e, cx + e, cy + e],
            out: (1, 1),
        };
        let out = roi_align(&fm, &crop, 2).unwrap();
        let want = fm.token(4 + 2);
        assert!(out
            .token(0)
            .iter()
            .zip(want)
            .all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(roi_weights::<f64>(
            4,
            4,
            &CropSpec {
                bx: [0.3, 0.3, 0.3, 0.5],
                out: (1, 1)
            },
            2
        )
        .is_err());
    }

    #[test]
    fn rows_are_convex_combinations() {
        let crop = CropSpec {
            bx: [0.1, 0.2, 0.7, 0.95],
            out: (3, 4),
        };
        let w = roi_weights::<f64>(5, 6, &crop, 2).unwrap();
        for i in 0..w.rows() {
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.row(i).iter().all(|&v| v >= 0.0));
        }
    }
}
