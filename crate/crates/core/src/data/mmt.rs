//! `.mmt` tensor files: `"MMT1"`, dtype byte (0 = f32 LE, 1 = u8), rank
//! byte, `rank` little-endian u32 extents, then the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"MMT1";
const HEADER: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// A decoded tensor file. Extents may be zero; `data.len()` equals their product.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl RawTensor {
    pub fn f32(t: &Tensor<f32>) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: TensorData::F32(t.data().to_vec()),
        }
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self { shape, data: TensorData::U8(data) }
    }

    fn dtype(&self) -> u8 {
        match self.data {
            TensorData::F32(_) => 0,
            TensorData::U8(_) => 1,
        }
    }

    pub fn into_f32(self, path: &Path) -> Result<Tensor<f32>> {
        match self.data {
            TensorData::F32(v) => Tensor::new(self.shape, v).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                msg: e.to_string(),
            }),
            TensorData::U8(_) => Err(Error::Malformed {
                path: path.to_path_buf(),
                msg: "expected f32 payload, found u8".into(),
            }),
        }
    }

    pub fn into_u8(self, path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
        match self.data {
            TensorData::U8(v) => Ok((self.shape, v)),
            TensorData::F32(_) => Err(Error::Malformed {
                path: path.to_path_buf(),
                msg: "expected u8 payload, found f32".into(),
            }),
        }
    }
}

pub fn encode(t: &RawTensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.shape.len())
        .map_err(|_| Error::invalid("mmt encode", format!("rank {} exceeds 255", t.shape.len())))?;
    let mut out = Vec::with_capacity(HEADER + 4 * t.shape.len());
    out.extend_from_slice(&MAGIC);
    out.push(t.dtype());
    out.push(rank);
    for &e in &t.shape {
        let e = u32::try_from(e).map_err(|_| Error::invalid("mmt encode", format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

/// Parses a complete file image. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<RawTensor> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(HEADER));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), found });
    }
    if bytes.len() < HEADER {
        return Err(truncated(HEADER));
    }
    let (code, rank) = (bytes[4], bytes[5] as usize);
    let elem = match code {
        0 => 4,
        1 => 1,
        _ => return Err(Error::UnsupportedDtype { path: path.to_path_buf(), code }),
    };
    let header = HEADER + 4 * rank;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let shape: Vec<usize> = bytes[HEADER..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let payload = shape
        .iter()
        .try_fold(elem, |acc: usize, &e| acc.checked_mul(e))
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| Error::Malformed {
            path: path.to_path_buf(),
            msg: format!("extents {shape:?} overflow"),
        })?;
    if bytes.len() < payload {
        return Err(truncated(payload));
    }
    if bytes.len() > payload {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            msg: format!("{} trailing bytes", bytes.len() - payload),
        });
    }
    let body = &bytes[header..];
    let data = if code == 0 {
        TensorData::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        TensorData::U8(body.to_vec())
    };
    Ok(RawTensor { shape, data })
}

pub fn write_tensor(path: &Path, t: &RawTensor) -> Result<()> {
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_tensor(path, &RawTensor::f32(t))
}

pub fn read_f32(path: &Path) -> Result<Tensor<f32>> {
    read_tensor(path)?.into_f32(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p() -> &'static Path {
        Path::new("mem.mmt")
    }

    #[test]
    fn f32_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mmt");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::randn(vec![3, 4, 5], 1.0, &mut rng);
        write_f32(&path, &t).unwrap();
        let back = read_f32(&path).unwrap();
        assert_eq!(
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.shape(), &[3, 4, 5]);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&RawTensor::u8(vec![2, 1], vec![7, 9])).unwrap();
        assert_eq!(bytes, b"MMT1\x01\x02\x02\x00\x00\x00\x01\x00\x00\x00\x07\x09");
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&RawTensor::u8(vec![4], vec![1, 2, 3, 4])).unwrap();
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bad, p()), Err(Error::BadMagic { found, .. }) if &found == b"XXXX"));
        assert!(matches!(
            decode(&good[..good.len() - 1], p()),
            Err(Error::Truncated { expected: 14, found: 13, .. })
        ));
        let mut bad = good.clone();
        bad[4] = 7;
        assert!(matches!(decode(&bad, p()), Err(Error::UnsupportedDtype { code: 7, .. })));
        let mut long = good;
        long.push(0);
        assert!(matches!(decode(&long, p()), Err(Error::Malformed { .. })));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = read_tensor(Path::new("/nonexistent/x.mmt")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode(&bytes, p());
        }

        #[test]
        fn decode_with_valid_magic_never_panics(tail in prop::collection::vec(any::<u8>(), 0..64)) {
            let mut bytes = MAGIC.to_vec();
            bytes.extend(tail);
            let _ = decode(&bytes, p());
        }

        #[test]
        fn u8_round_trip(shape in prop::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<u8> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let t = RawTensor::u8(shape, data);
            prop_assert_eq!(decode(&encode(&t).unwrap(), p()).unwrap(), t);
        }
    }
}
