//! `.ufmp` feature maps and `.uatr` attention traces.

use std::path::Path;

use super::bytes::{put_f64s, put_u16, put_u32, read_file, u32_of, write_file, ByteReader};
use crate::error::Result;
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::vit::{AttentionTrace, FeatureMap};

pub const FMAP_MAGIC: &[u8; 4] = b"UFMP";
pub const ATRC_MAGIC: &[u8; 4] = b"UATR";
pub const FMAP_VERSION: u16 = 1;
pub const ATRC_VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;
/// Tolerance on stored attention row sums.
pub const ROW_SUM_TOL: f64 = 1e-9;

pub fn encode_fmap<T: Scalar>(fm: &FeatureMap<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(19 + fm.tokens().len() * 8);
    out.extend_from_slice(FMAP_MAGIC);
    put_u16(&mut out, FMAP_VERSION);
    put_u32(&mut out, u32_of(fm.rows(), "H")?);
    put_u32(&mut out, u32_of(fm.cols(), "W")?);
    put_u32(&mut out, u32_of(fm.dim(), "D")?);
    out.push(DTYPE_F64);
    put_f64s(&mut out, fm.tokens().data().iter().map(|v| v.as_f64()));
    Ok(out)
}

pub fn decode_fmap(bytes: &[u8]) -> Result<FeatureMap<f64>> {
    let mut r = ByteReader::new(bytes);
    r.header(FMAP_MAGIC, FMAP_VERSION, "feature map")?;
    let h = r.u32("H")? as usize;
    let w = r.u32("W")? as usize;
    let d = r.u32("D")? as usize;
    let at = r.offset();
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F64 {
        return Err(crate::Error::Format {
            offset: at,
            detail: format!("dtype code {dtype} is reserved; only 0 (f64) is defined"),
        });
    }
    let data = r.f64s(h * w * d, "payload")?;
    if !r.is_done() {
        return Err(r.fail(format!("{} trailing bytes after payload", r.remaining())));
    }
    FeatureMap::new(h, w, Tensor::new(vec![h * w, d], data)?)
}

pub fn write_fmap<T: Scalar>(path: &Path, fm: &FeatureMap<T>) -> Result<()> {
    write_file(path, &encode_fmap(fm)?)
}

pub fn read_fmap(path: &Path) -> Result<FeatureMap<f64>> {
    decode_fmap(&read_file(path)?)
}

pub fn encode_atrc<T: Scalar>(trace: &AttentionTrace<T>) -> Result<Vec<u8>> {
    let t = trace.tokens();
    let mut out = Vec::with_capacity(18 + trace.num_layers() * trace.heads() * t * t * 8);
    out.extend_from_slice(ATRC_MAGIC);
    put_u16(&mut out, ATRC_VERSION);
    put_u32(&mut out, u32_of(trace.num_layers(), "L")?);
    put_u32(&mut out, u32_of(trace.heads(), "heads")?);
    put_u32(&mut out, u32_of(t, "T")?);
    for layer in trace.layers() {
        for m in layer {
            put_f64s(&mut out, m.data().iter().map(|v| v.as_f64()));
        }
    }
    Ok(out)
}

pub fn decode_atrc(bytes: &[u8]) -> Result<AttentionTrace<f64>> {
    let mut r = ByteReader::new(bytes);
    r.header(ATRC_MAGIC, ATRC_VERSION, "attention trace")?;
    let l = r.u32("L")? as usize;
    let heads = r.u32("heads")? as usize;
    let t = r.u32("T")? as usize;
    if l == 0 || heads == 0 || t == 0 {
        return Err(r.fail("attention trace with zero layers, heads or tokens"));
    }
    let mut layers = Vec::with_capacity(l);
    for li in 0..l {
        let mut hs = Vec::with_capacity(heads);
        for hi in 0..heads {
            let at = r.offset();
            let data = r.f64s(t * t, &format!("layer {li} head {hi}"))?;
            for (i, row) in data.chunks_exact(t).enumerate() {
                let s: f64 = row.iter().sum();
                if !((s - 1.0).abs() <= ROW_SUM_TOL) {
                    return Err(crate::Error::Format {
                        offset: at + (i * t * 8) as u64,
                        detail: format!("layer {li} head {hi} row {i} sums to {s}, not 1"),
                    });
                }
            }
            hs.push(Tensor::new(vec![t, t], data)?);
        }
        layers.push(hs);
    }
    if !r.is_done() {
        return Err(r.fail(format!("{} trailing bytes after payload", r.remaining())));
    }
    AttentionTrace::new(layers)
}

pub fn write_atrc<T: Scalar>(path: &Path, trace: &AttentionTrace<T>) -> Result<()> {
    write_file(path, &encode_atrc(trace)?)
}

pub fn read_atrc(path: &Path) -> Result<AttentionTrace<f64>> {
    decode_atrc(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::numerics::{softmax_rows, Rng};

    fn random_map(rng: &mut Rng) -> FeatureMap<f64> {
        let data = (0..4 * 4 * 8).map(|_| rng.normal()).collect();
        FeatureMap::new(4, 4, Tensor::new(vec![16, 8], data).unwrap()).unwrap()
    }

    #[test]
    fn fmap_round_trip_is_bit_exact() {
        let fm = random_map(&mut Rng::new(1));
        let bytes = encode_fmap(&fm).unwrap();
        assert_eq!(bytes.len(), 19 + 128 * 8);
        let back = decode_fmap(&bytes).unwrap();
        assert_eq!(back.tokens().data(), fm.tokens().data());
        assert_eq!((back.rows(), back.cols()), (4, 4));
    }

    #[test]
    fn fmap_errors() {
        let bytes = encode_fmap(&random_map(&mut Rng::new(2))).unwrap();
        let err = decode_fmap(&bytes[..bytes.len() - 5])
            .unwrap_err()
            .to_string();
        assert!(err.contains("5 missing"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_fmap(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut newer = bytes.clone();
        newer[4] = 2;
        let err = decode_fmap(&newer).unwrap_err().to_string();
        assert!(err.contains("upgrade"), "{err}");
        let mut dt = bytes;
        dt[18] = 1;
        assert!(matches!(
            decode_fmap(&dt),
            Err(Error::Format { offset: 18, .. })
        ));
    }

    #[test]
    fn atrc_round_trip_and_row_check() {
        let mut rng = Rng::new(3);
        let mk = |rng: &mut Rng| {
            softmax_rows(&Tensor::new(vec![5, 5], (0..25).map(|_| rng.normal()).collect()).unwrap())
                .unwrap()
        };
        let trace = AttentionTrace::new(vec![
            vec![mk(&mut rng), mk(&mut rng)],
            vec![mk(&mut rng), mk(&mut rng)],
        ])
        .unwrap();
        let bytes = encode_atrc(&trace).unwrap();
        assert_eq!(decode_atrc(&bytes).unwrap(), trace);
        let mut broken = bytes.clone();
        broken[18..26].copy_from_slice(&2.0f64.to_le_bytes());
        assert!(matches!(
            decode_atrc(&broken),
            Err(Error::Format { offset: 18, .. })
        ));
        assert!(decode_atrc(&bytes[..30]).is_err());
    }
}
