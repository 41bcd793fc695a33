//! Binary PPM (P6) images and heatmaps.

use std::path::Path;

use super::bytes::{read_file, write_file};
use crate::error::{Error, Result};
use crate::image::{Image, Normalization};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

const SUPPORTED: &str = "P6 (binary PPM, 8-bit)";

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::Format {
            offset: 0,
            detail: "file too short for an image header".into(),
        });
    }
    let magic = &bytes[..2];
    if magic != b"P6" {
        let found = match magic {
            b"P3" => "P3 (ASCII PPM)".to_string(),
            b"P1" | b"P2" | b"P4" | b"P5" => {
                format!("{} (PBM/PGM)", String::from_utf8_lossy(magic))
            }
            [0x89, b'P'] => "PNG".to_string(),
            [0xFF, 0xD8] => "JPEG".to_string(),
            _ => format!("unknown signature {:02x} {:02x}", magic[0], magic[1]),
        };
        return Err(Error::UnsupportedFormat {
            found,
            supported: SUPPORTED,
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, f) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                detail: format!("expected header field {} as a decimal number", k + 1),
            });
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                offset: start as u64,
                detail: "header number out of range".into(),
            })?;
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::Format {
                offset: pos as u64,
                detail: "missing whitespace before pixel data".into(),
            })
        }
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat {
            found: format!("P6 with maxval {maxval}"),
            supported: SUPPORTED,
        });
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos,
    })
}

/// Raw pixels in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image<f64>> {
    let h = parse_header(bytes)?;
    let need = h.width * h.height * 3;
    let have = bytes.len() - h.data_start;
    if have < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!(
                "truncated pixel data: need {need} bytes, {have} available ({} missing)",
                need - have
            ),
        });
    }
    let scale = h.maxval as f64;
    let data = bytes[h.data_start..h.data_start + need]
        .iter()
        .map(|&b| b as f64 / scale)
        .collect();
    Image::new(h.height, h.width, 3, data)
}

/// Loads a P6 file and applies `norm`.
pub fn load_image(path: &Path, norm: &Normalization) -> Result<Image<f64>> {
    let raw = decode_ppm(&read_file(path)?)?;
    if raw.height() == 0 || raw.width() == 0 {
        return Err(Error::invalid(format!("{}: empty image", path.display())));
    }
    Ok(raw.normalize(norm))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm_rgb(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Writes raw `[0, 1]` pixels (values are clamped). Single-channel images
/// are replicated to grey.
pub fn encode_ppm<T: Scalar>(img: &Image<T>) -> Result<Vec<u8>> {
    let c = img.channels();
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!(
            "cannot write a {c}-channel image as PPM"
        )));
    }
    let mut rgb = Vec::with_capacity(img.height() * img.width() * 3);
    for v in img.data().chunks_exact(c) {
        if c == 1 {
            rgb.extend_from_slice(&[quantize(v[0].as_f64()); 3]);
        } else {
            rgb.extend(v.iter().map(|x| quantize(x.as_f64())));
        }
    }
    Ok(encode_ppm_rgb(img.width(), img.height(), &rgb))
}

pub fn save_image<T: Scalar>(path: &Path, img: &Image<T>) -> Result<()> {
    write_file(path, &encode_ppm(img)?)
}

/// "Hot" colormap on `t ∈ [0, 1]`: black → red → yellow → white, with
/// `r = 3t`, `g = 3t − 1`, `b = 3t − 2`, each clamped to `[0, 1]`.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [
        quantize(3.0 * t),
        quantize(3.0 * t - 1.0),
        quantize(3.0 * t - 2.0),
    ]
}

/// Renders a 2D matrix min–max scaled through [`colormap`], `cell` pixels
/// per entry. A constant matrix maps to `t = 0`.
pub fn render_heatmap<T: Scalar>(m: &Tensor<T>, cell: usize) -> Result<(usize, usize, Vec<u8>)> {
    if m.shape().len() != 2 || cell == 0 {
        return Err(Error::shape(
            "heatmap",
            format!("need a 2D matrix and cell >= 1, got {:?}", m.shape()),
        ));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("heatmap input".into()));
    }
    let (r, c) = (m.rows(), m.cols());
    let lo = m
        .data()
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::INFINITY, f64::min);
    let hi = m
        .data()
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let (w, h) = (c * cell, r * cell);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let v = m.at(y / cell, x / cell).as_f64();
            let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
            rgb.extend_from_slice(&colormap(t));
        }
    }
    Ok((w, h, rgb))
}

pub fn save_heatmap<T: Scalar>(path: &Path, m: &Tensor<T>, cell: usize) -> Result<()> {
    let (w, h, rgb) = render_heatmap(m, cell)?;
    write_file(path, &encode_ppm_rgb(w, h, &rgb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_p6_normalizes_to_max() {
        let bytes = encode_ppm_rgb(2, 2, &[255; 12]);
        let img = decode_ppm(&bytes)
            .unwrap()
            .normalize(&Normalization::default());
        assert!(img.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6 # c\n1 1\n# x\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data(), &[0.0, 128.0 / 255.0, 1.0]);
        let err = decode_ppm(b"P3\n1 1\n255\n0 0 0\n").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat { .. }));
        assert!(err.to_string().contains("P6"));
        let short = encode_ppm_rgb(2, 2, &[1; 7]);
        assert!(decode_ppm(&short)
            .unwrap_err()
            .to_string()
            .contains("5 missing"));
    }

    #[test]
    fn image_round_trip_through_bytes() {
        let img = Image::<f64>::new(1, 2, 3, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert!(back
            .data()
            .iter()
            .zip(img.data())
            .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }

    #[test]
    fn heatmaps() {
        let (_, _, rgb) = render_heatmap(&Tensor::<f64>::full(&[3, 3], 0.7), 2).unwrap();
        assert!(rgb.chunks(3).all(|p| p == [0, 0, 0]));
        let (w, h, rgb) = render_heatmap(&Tensor::<f64>::eye(2), 1).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(&rgb[0..3], &[255, 255, 255]);
        assert_eq!(&rgb[3..6], &[0, 0, 0]);
        assert_eq!(&rgb[9..12], &[255, 255, 255]);
        let bad = Tensor::new(vec![1, 1], vec![f64::NAN]).unwrap();
        assert!(render_heatmap(&bad, 1).is_err());
    }
}
