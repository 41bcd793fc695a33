use serde::{Deserialize, Serialize};

use super::config::CropConfig;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Normalized crop box `[x0, y0, x1, y1]` plus the resolution it is
/// resized to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub bx: [f64; 4],
    pub out: (usize, usize),
}

impl CropSpec {
    pub fn full(out: (usize, usize)) -> Self {
        Self {
            bx: [0.0, 0.0, 1.0, 1.0],
            out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.bx;
        let ok = |a: f64, b: f64| 0.0 <= a && a < b && b <= 1.0;
        if !(ok(x0, x1) && ok(y0, y1)) {
            return Err(Error::invalid(format!(
                "degenerate or out-of-range crop box {:?}",
                self.bx
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.bx[2] - self.bx[0]) * (self.bx[3] - self.bx[1])
    }
}

const CROP_TRIES: usize = 10;

/// Random resized crops of a square image: area fraction uniform in
/// `cfg.scale`, aspect ratio log-uniform in `cfg.ratio`; after a few
/// rejected draws the full image is used.
pub fn sample_crops(
    n: usize,
    cfg: &CropConfig,
    out: (usize, usize),
    rng: &mut Rng,
) -> Vec<CropSpec> {
    let (llo, lhi) = (cfg.ratio[0].ln(), cfg.ratio[1].ln());
    (0..n)
        .map(|_| {
            for _ in 0..CROP_TRIES {
                let a = rng.uniform_in(cfg.scale[0], cfg.scale[1]);
                let r = rng.uniform_in(llo, lhi).exp();
                let w = (a * r).sqrt();
                let h = (a / r).sqrt();
                if w <= 1.0 && h <= 1.0 {
                    let x0 = rng.uniform_in(0.0, 1.0 - w);
                    let y0 = rng.uniform_in(0.0, 1.0 - h);
                    return CropSpec {
                        bx: [x0, y0, (x0 + w).min(1.0), (y0 + h).min(1.0)],
                        out,
                    };
                }
            }
            CropSpec::full(out)
        })
        .collect()
}
