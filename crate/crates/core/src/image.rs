//! Pixel grids in interleaved HWC layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

/// Concatenation axis for composite images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Side by side: the second image sits to the right.
    Horizontal,
    /// Stacked: the second image sits below.
    Vertical,
}

/// Per-channel affine normalization applied to raw `[0, 1]` pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!(
                    "{height}x{width}x{channels} needs {} values, got {}",
                    height * width * channels,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let w = self.width;
        let ch = self.channels;
        self.data[(y * w + x) * ch + c] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn normalize(&self, norm: &Normalization) -> Self {
        let mut out = self.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            let c = i % self.channels;
            let k = c.min(2);
            *v = (*v - T::of(norm.mean[k])) / T::of(norm.std[k]);
        }
        out
    }

    pub fn denormalize(&self, norm: &Normalization) -> Self {
        let mut out = self.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            let k = (i % self.channels).min(2);
            *v = *v * T::of(norm.std[k]) + T::of(norm.mean[k]);
        }
        out
    }

    /// Sub-window copy.
    pub fn window(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::shape(
                "window",
                format!("{h}x{w} at ({y0},{x0}) in {}x{}", self.height, self.width),
            ));
        }
        let mut out = Self::zeros(h, w, self.channels);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * self.channels;
            let dst = y * w * self.channels;
            out.data[dst..dst + w * self.channels]
                .copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        Ok(out)
    }

    /// Bilinear resample of the normalized box `(x0, y0, x1, y1)` to
    /// `out_h × out_w`, sampling at pixel centers.
    pub fn crop_resize(&self, bx: [f64; 4], out_h: usize, out_w: usize) -> Self {
        let [x0, y0, x1, y1] = bx;
        let mut out = Self::zeros(out_h, out_w, self.channels);
        for oy in 0..out_h {
            let sy = (y0 + (y1 - y0) * (oy as f64 + 0.5) / out_h as f64) * self.height as f64 - 0.5;
            for ox in 0..out_w {
                let sx =
                    (x0 + (x1 - x0) * (ox as f64 + 0.5) / out_w as f64) * self.width as f64 - 0.5;
                for c in 0..self.channels {
                    let v = self.sample_bilinear(sy, sx, c);
                    out.set(oy, ox, c, v);
                }
            }
        }
        out
    }

    fn sample_bilinear(&self, sy: f64, sx: f64, c: usize) -> T {
        let cy = sy.clamp(0.0, (self.height - 1) as f64);
        let cx = sx.clamp(0.0, (self.width - 1) as f64);
        let ya = cy.floor() as usize;
        let xa = cx.floor() as usize;
        let yb = (ya + 1).min(self.height - 1);
        let xb = (xa + 1).min(self.width - 1);
        let fy = T::of(cy - ya as f64);
        let fx = T::of(cx - xa as f64);
        let one = T::one();
        self.get(ya, xa, c) * (one - fy) * (one - fx)
            + self.get(ya, xb, c) * (one - fy) * fx
            + self.get(yb, xa, c) * fy * (one - fx)
            + self.get(yb, xb, c) * fy * fx
    }

    pub fn concat(&self, other: &Self, axis: Axis) -> Result<Self> {
        if self.channels != other.channels {
            return Err(Error::shape("concat", "channel count"));
        }
        match axis {
            Axis::Horizontal => {
                if self.height != other.height {
                    return Err(Error::shape("concat", "heights differ"));
                }
                let w = self.width + other.width;
                let mut out = Self::zeros(self.height, w, self.channels);
                let c = self.channels;
                for y in 0..self.height {
                    let dst = y * w * c;
                    out.data[dst..dst + self.width * c]
                        .copy_from_slice(&self.data[y * self.width * c..(y + 1) * self.width * c]);
                    out.data[dst + self.width * c..dst + w * c].copy_from_slice(
                        &other.data[y * other.width * c..(y + 1) * other.width * c],
                    );
                }
                Ok(out)
            }
            Axis::Vertical => {
                if self.width != other.width {
                    return Err(Error::shape("concat", "widths differ"));
                }
                let mut data = self.data.clone();
                data.extend_from_slice(&other.data);
                Self::new(self.height + other.height, self.width, self.channels, data)
            }
        }
    }

    /// Non-overlapping `p × p` patches, row-major over the patch grid; each
    /// patch flattened in `(dy, dx, channel)` order.
    pub fn patches(&self, p: usize) -> Result<Tensor<T>> {
        if p == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            return Err(Error::shape(
                "patches",
                format!(
                    "{}x{} image is not divisible by patch size {p}",
                    self.height, self.width
                ),
            ));
        }
        let (gh, gw) = (self.height / p, self.width / p);
        let pd = p * p * self.channels;
        let mut out = Vec::with_capacity(gh * gw * pd);
        for gy in 0..gh {
            for gx in 0..gw {
                for dy in 0..p {
                    let y = gy * p + dy;
                    let start = (y * self.width + gx * p) * self.channels;
                    out.extend_from_slice(&self.data[start..start + p * self.channels]);
                }
            }
        }
        Tensor::new(vec![gh * gw, pd], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image<f64> {
        Image::new(h, w, 1, (0..h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn full_box_resize_is_identity() {
        let img = ramp(4, 6);
        assert_eq!(img.crop_resize([0.0, 0.0, 1.0, 1.0], 4, 6), img);
    }

    #[test]
    fn concat_then_window_recovers_parts() {
        let a = ramp(2, 3);
        let b = a.map(|v| -v);
        let h = a.concat(&b, Axis::Horizontal).unwrap();
        assert_eq!(h.window(0, 3, 2, 3).unwrap(), b);
        let v = a.concat(&b, Axis::Vertical).unwrap();
        assert_eq!(v.window(2, 0, 2, 3).unwrap(), b);
    }

    #[test]
    fn patch_extraction_order() {
        let img = ramp(4, 4);
        let p = img.patches(2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0., 1., 4., 5.]);
        assert_eq!(p.row(3), &[10., 11., 14., 15.]);
        assert!(img.patches(3).is_err());
    }
}
