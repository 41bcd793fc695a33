use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Normalization};
use crate::numerics::Rng;

/// Procedural image families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Checkerboard,
    Gradient,
    Blobs,
    Noise,
}

impl Generator {
    pub const ALL: [Generator; 4] = [
        Generator::Checkerboard,
        Generator::Gradient,
        Generator::Blobs,
        Generator::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Generator::Checkerboard => "checkerboard",
            Generator::Gradient => "gradient",
            Generator::Blobs => "blobs",
            Generator::Noise => "noise",
        }
    }
}

/// One generated image; `pixels` are raw values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub pixels: Image<f64>,
    pub generator: Generator,
    pub seed: u64,
}

impl SynthImage {
    pub fn normalized(&self, norm: &Normalization) -> Image<f64> {
        self.pixels.normalize(norm)
    }
}

fn color(rng: &mut Rng) -> [f64; 3] {
    [rng.uniform(), rng.uniform(), rng.uniform()]
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn render(size: usize, f: impl Fn(f64, f64) -> [f64; 3]) -> Image<f64> {
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            data.extend(f(u, v).iter().map(|c| c.clamp(0.0, 1.0)));
        }
    }
    Image::new(size, size, 3, data).expect("size")
}

fn checkerboard(size: usize, rng: &mut Rng) -> Image<f64> {
    let (a, b) = (color(rng), color(rng));
    let period = rng.uniform_in(0.15, 0.5);
    let theta = rng.uniform_in(0.0, std::f64::consts::PI);
    let (c, s) = (theta.cos(), theta.sin());
    let (px, py) = (rng.uniform(), rng.uniform());
    render(size, |u, v| {
        let x = (u * c - v * s) / period + px;
        let y = (u * s + v * c) / period + py;
        if (x.floor() as i64 + y.floor() as i64).rem_euclid(2) == 0 {
            a
        } else {
            b
        }
    })
}

fn gradient(size: usize, rng: &mut Rng) -> Image<f64> {
    let (a, b) = (color(rng), color(rng));
    let theta = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
    let (c, s) = (theta.cos(), theta.sin());
    let waves = rng.uniform_in(0.5, 3.0);
    render(size, |u, v| {
        let t = ((u - 0.5) * c + (v - 0.5) * s) * waves;
        mix(a, b, 0.5 + 0.5 * (std::f64::consts::PI * t).sin())
    })
}

fn blobs(size: usize, rng: &mut Rng) -> Image<f64> {
    let bg = color(rng);
    let k = 2 + rng.below(4);
    let blobs: Vec<_> = (0..k)
        .map(|_| {
            (
                rng.uniform(),
                rng.uniform(),
                rng.uniform_in(0.05, 0.25),
                color(rng),
            )
        })
        .collect();
    render(size, |u, v| {
        let mut px = bg;
        for &(cx, cy, r, col) in &blobs {
            let d2 = (u - cx).powi(2) + (v - cy).powi(2);
            px = mix(px, col, (-d2 / (2.0 * r * r)).exp());
        }
        px
    })
}

/// Smoothly interpolated lattice noise summed over octaves.
fn noise(size: usize, rng: &mut Rng) -> Image<f64> {
    let octaves: Vec<(usize, f64, Vec<[f64; 3]>)> = (0..3)
        .map(|o| {
            let n = 3 << o;
            let lattice = (0..(n + 1) * (n + 1)).map(|_| color(rng)).collect();
            (n, 0.5f64.powi(o), lattice)
        })
        .collect();
    let total: f64 = octaves.iter().map(|o| o.1).sum();
    render(size, |u, v| {
        let mut px = [0.0; 3];
        for (n, amp, lat) in &octaves {
            let (x, y) = (u * *n as f64, v * *n as f64);
            let (x0, y0) = (
                (x.floor() as usize).min(n - 1),
                (y.floor() as usize).min(n - 1),
            );
            let fade = |t: f64| t * t * (3.0 - 2.0 * t);
            let (fx, fy) = (fade(x - x0 as f64), fade(y - y0 as f64));
            let at = |i: usize, j: usize| lat[j * (n + 1) + i];
            let top = mix(at(x0, y0), at(x0 + 1, y0), fx);
            let bot = mix(at(x0, y0 + 1), at(x0 + 1, y0 + 1), fx);
            let c = mix(top, bot, fy);
            for k in 0..3 {
                px[k] += amp * c[k] / total;
            }
        }
        px
    })
}

/// Std of the white grain laid over every family, in raw units.
pub const GRAIN: f64 = 0.06;

/// Renders one image of `generator` from `seed`, plus clamped Gaussian
/// grain so no patch is perfectly flat.
pub fn generate(generator: Generator, size: usize, seed: u64) -> SynthImage {
    let mut rng = Rng::new(seed);
    let mut pixels = match generator {
        Generator::Checkerboard => checkerboard(size, &mut rng),
        Generator::Gradient => gradient(size, &mut rng),
        Generator::Blobs => blobs(size, &mut rng),
        Generator::Noise => noise(size, &mut rng),
    };
    for v in pixels.data_mut() {
        *v = (*v + GRAIN * rng.normal()).clamp(0.0, 1.0);
    }
    SynthImage {
        pixels,
        generator,
        seed,
    }
}

/// `n` images cycling through the generator families, each from its own
/// seed split off `rng`.
pub fn gen_corpus(n: usize, size: usize, rng: &mut Rng) -> Result<Vec<SynthImage>> {
    if n == 0 || size == 0 {
        return Err(Error::invalid("corpus needs n >= 1 images of size >= 1"));
    }
    let base = Rng::new(rng.next_seed());
    let out = (0..n)
        .map(|i| {
            let seed = base.split(i as u64).seed();
            generate(Generator::ALL[i % Generator::ALL.len()], size, seed)
        })
        .collect();
    Ok(out)
}
