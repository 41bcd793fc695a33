use serde::{Deserialize, Serialize};

use super::types::FeatureMap;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

/// Geometry of a token grid handed to the model: its extents and the
/// sub-rectangle holding image content. Position codes are measured from the
/// content origin, so the ring around a padded image gets coordinates
/// outside the image span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub origin: (usize, usize),
    pub content: (usize, usize),
}

impl TokenGrid {
    pub fn plain(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            origin: (0, 0),
            content: (rows, cols),
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position relative to the content origin.
    pub fn relative(&self, idx: usize) -> (isize, isize) {
        let r = (idx / self.cols) as isize - self.origin.0 as isize;
        let c = (idx % self.cols) as isize - self.origin.1 as isize;
        (r, c)
    }

    pub fn in_content(&self, idx: usize) -> bool {
        let (r, c) = self.relative(idx);
        r >= 0 && c >= 0 && (r as usize) < self.content.0 && (c as usize) < self.content.1
    }
}

/// 2D sinusoidal position code. Half the channels encode the row, half the
/// column; within an axis, channel pairs hold `sin(ω_k u), cos(ω_k u)` with
/// `ω_k = (k+1)·π/2` and `u = 2(p + ½)/base − 1`, so a base-sized image
/// spans `u ∈ (−1, 1)` and the lowest cosine is positive exactly there.
pub fn position_code<T: Scalar>(
    grid: &TokenGrid,
    base: usize,
    dim: usize,
    scale: f64,
) -> Tensor<T> {
    let mut out = Tensor::zeros(&[grid.len(), dim]);
    if scale == 0.0 {
        return out;
    }
    let half = dim / 2;
    let pairs = half / 2;
    for idx in 0..grid.len() {
        let (r, c) = grid.relative(idx);
        let row = out.row_mut(idx);
        for (axis, p) in [r, c].into_iter().enumerate() {
            let u = 2.0 * (p as f64 + 0.5) / base as f64 - 1.0;
            for k in 0..pairs {
                let w = (k + 1) as f64 * std::f64::consts::FRAC_PI_2;
                row[axis * half + 2 * k] = T::of(scale * (w * u).sin());
                row[axis * half + 2 * k + 1] = T::of(scale * (w * u).cos());
            }
        }
    }
    out
}

/// Padded token grid: an `h × w` image region centered in a ring of
/// `n_reg` register tokens on every side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterLayout {
    pub h: usize,
    pub w: usize,
    pub n_reg: usize,
    pub padded_rows: usize,
    pub padded_cols: usize,
    pub image_indices: Vec<usize>,
    pub register_indices: Vec<usize>,
}

/// Smallest integer `n` with `n · r ≥ m`, i.e. `ceil(m / r)` without the
/// rounding drift of a floating division.
pub fn ring_width(m: usize, r_reg: f64) -> usize {
    let m_f = m as f64;
    let mut n = (m_f / r_reg).ceil().max(0.0) as usize;
    while n > 0 && (n - 1) as f64 * r_reg >= m_f {
        n -= 1;
    }
    while (n as f64) * r_reg < m_f {
        n += 1;
    }
    n
}

pub fn make_register_layout(h: usize, w: usize, r_reg: f64) -> Result<RegisterLayout> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(
            "register layout needs a non-empty token grid",
        ));
    }
    if !(r_reg > 0.0) || !r_reg.is_finite() {
        return Err(Error::invalid(format!(
            "register factor must be positive, got {r_reg}"
        )));
    }
    let n_reg = ring_width(h.min(w), r_reg);
    let pr = h + 2 * n_reg;
    let pc = w + 2 * n_reg;
    let mut image_indices = Vec::with_capacity(h * w);
    let mut register_indices = Vec::with_capacity(pr * pc - h * w);
    for r in 0..pr {
        for c in 0..pc {
            let idx = r * pc + c;
            if (n_reg..n_reg + h).contains(&r) && (n_reg..n_reg + w).contains(&c) {
                image_indices.push(idx);
            } else {
                register_indices.push(idx);
            }
        }
    }
    Ok(RegisterLayout {
        h,
        w,
        n_reg,
        padded_rows: pr,
        padded_cols: pc,
        image_indices,
        register_indices,
    })
}

impl RegisterLayout {
    pub fn token_grid(&self) -> TokenGrid {
        TokenGrid {
            rows: self.padded_rows,
            cols: self.padded_cols,
            origin: (self.n_reg, self.n_reg),
            content: (self.h, self.w),
        }
    }

    pub fn total(&self) -> usize {
        self.padded_rows * self.padded_cols
    }
}

/// Surrounds `image` with `n_reg` patches of i.i.d. standard-normal pixels
/// on every side. The center is copied bit-exactly; ring noise is redrawn
/// on every call.
pub fn inject_register_bias<T: Scalar>(
    image: &Image<T>,
    layout: &RegisterLayout,
    patch_size: usize,
    rng: &mut Rng,
) -> Result<Image<T>> {
    if image.height() != layout.h * patch_size || image.width() != layout.w * patch_size {
        return Err(Error::shape(
            "inject_register_bias",
            format!(
                "{}x{} image does not match a {}x{} token layout at patch {patch_size}",
                image.height(),
                image.width(),
                layout.h,
                layout.w
            ),
        ));
    }
    let pad = layout.n_reg * patch_size;
    let ch = image.channels();
    let out_h = image.height() + 2 * pad;
    let out_w = image.width() + 2 * pad;
    let mut data = Vec::with_capacity(out_h * out_w * ch);
    for y in 0..out_h {
        for x in 0..out_w {
            let inside =
                (pad..pad + image.height()).contains(&y) && (pad..pad + image.width()).contains(&x);
            for c in 0..ch {
                if inside {
                    data.push(image.get(y - pad, x - pad, c));
                } else {
                    data.push(T::of(rng.normal()));
                }
            }
        }
    }
    Image::new(out_h, out_w, ch, data)
}

/// Splits a padded-grid feature map into the image region (as a map) and
/// the register tokens (rows in layout order).
pub fn split_regions<T: Scalar>(
    fm: &FeatureMap<T>,
    layout: &RegisterLayout,
) -> Result<(FeatureMap<T>, Tensor<T>)> {
    if fm.rows() != layout.padded_rows || fm.cols() != layout.padded_cols {
        return Err(Error::shape(
            "split_regions",
            format!(
                "{}x{} map against {}x{} layout",
                fm.rows(),
                fm.cols(),
                layout.padded_rows,
                layout.padded_cols
            ),
        ));
    }
    let img = FeatureMap::new(
        layout.h,
        layout.w,
        fm.tokens().gather_rows(&layout.image_indices)?,
    )?
    .tagged(format!("{}:image", fm.tag));
    let reg = fm.tokens().gather_rows(&layout.register_indices)?;
    Ok((img, reg))
}

/// Inverse of [`split_regions`].
pub fn merge_regions<T: Scalar>(
    image: &FeatureMap<T>,
    registers: &Tensor<T>,
    layout: &RegisterLayout,
) -> Result<FeatureMap<T>> {
    let d = image.dim();
    if image.rows() != layout.h
        || image.cols() != layout.w
        || registers.rows() != layout.register_indices.len()
    {
        return Err(Error::shape(
            "merge_regions",
            "region sizes do not match layout",
        ));
    }
    let mut t = Tensor::zeros(&[layout.total(), d]);
    for (k, &i) in layout.image_indices.iter().enumerate() {
        t.row_mut(i).copy_from_slice(image.token(k));
    }
    for (k, &i) in layout.register_indices.iter().enumerate() {
        t.row_mut(i).copy_from_slice(registers.row(k));
    }
    FeatureMap::new(layout.padded_rows, layout.padded_cols, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_layouts() {
        let l = make_register_layout(16, 16, 8.0).unwrap();
        assert_eq!((l.n_reg, l.padded_rows, l.padded_cols), (2, 20, 20));
        assert_eq!(l.register_indices.len(), 144);
        assert_eq!(l.image_indices.len(), 256);
        let l = make_register_layout(16, 16, 16.0).unwrap();
        assert_eq!((l.n_reg, l.padded_rows), (1, 18));
        let l = make_register_layout(8, 16, 3.0).unwrap();
        assert_eq!((l.n_reg, l.padded_rows, l.padded_cols), (3, 14, 22));
    }

    #[test]
    fn ring_width_avoids_division_drift() {
        assert_eq!(ring_width(3, 0.1), 30);
        assert_eq!(ring_width(1, 1e9), 1);
    }

    #[test]
    fn bad_layout_args() {
        assert!(make_register_layout(0, 4, 2.0).is_err());
        assert!(make_register_layout(4, 4, 0.0).is_err());
        assert!(make_register_layout(4, 4, f64::NAN).is_err());
    }

    #[test]
    fn injection_geometry_and_locality() {
        let layout = make_register_layout(4, 4, 16.0).unwrap();
        assert_eq!(layout.n_reg, 1);
        let mut rng = Rng::new(5);
        let img = Image::<f64>::new(
            32,
            32,
            3,
            (0..32 * 32 * 3).map(|i| (i % 17) as f64 * 0.1).collect(),
        )
        .unwrap();
        let a = inject_register_bias(&img, &layout, 8, &mut rng).unwrap();
        let b = inject_register_bias(&img, &layout, 8, &mut rng).unwrap();
        assert_eq!((a.height(), a.width()), (48, 48));
        assert_eq!(a.window(8, 8, 32, 32).unwrap(), img);
        assert_eq!(b.window(8, 8, 32, 32).unwrap(), img);
        assert_ne!(
            a.window(0, 0, 8, 48).unwrap(),
            b.window(0, 0, 8, 48).unwrap()
        );
        assert!(inject_register_bias(&img, &layout, 4, &mut rng).is_err());
    }

    #[test]
    fn split_and_merge_partition_the_grid() {
        let layout = make_register_layout(16, 16, 8.0).unwrap();
        let t = Tensor::<f64>::new(vec![400, 3], (0..1200).map(|x| x as f64).collect()).unwrap();
        let fm = FeatureMap::new(20, 20, t).unwrap();
        let (img, reg) = split_regions(&fm, &layout).unwrap();
        assert_eq!(img.len(), 256);
        assert_eq!(reg.rows(), 144);
        assert_eq!(
            merge_regions(&img, &reg, &layout).unwrap().tokens(),
            fm.tokens()
        );
        let other = make_register_layout(8, 8, 8.0).unwrap();
        assert!(split_regions(&fm, &other).is_err());
    }

    #[test]
    fn lowest_cosine_marks_the_image_span() {
        let layout = make_register_layout(8, 8, 4.0).unwrap();
        let grid = layout.token_grid();
        let pe = position_code::<f64>(&grid, 8, 16, 1.0);
        for idx in 0..grid.len() {
            let row_cos = pe.at(idx, 1);
            let col_cos = pe.at(idx, 9);
            if grid.in_content(idx) {
                assert!(row_cos > 0.0 && col_cos > 0.0);
            } else {
                assert!(row_cos < 0.0 || col_cos < 0.0);
            }
        }
    }
}
