//! Binary tensor (`CBTF`) and weight-bundle (`CBWB`) files.
//!
//! Tensor record, little-endian:
//!
//! | bytes      | field                                  |
//! |------------|----------------------------------------|
//! | 4          | magic `CBTF`                           |
//! | 4          | version u32 (= 1)                      |
//! | 1          | dtype u8 (0 = float32, 1 = fixed16)    |
//! | 1          | scale_exp i8                           |
//! | 1          | ndim u8                                |
//! | 2          | reserved, zero                         |
//! | 8 * ndim   | dims u64                               |
//! | payload    | f32 or i16 values, row-major           |
//!
//! Bundle file: magic `CBWB`, version u32, entry count u32, then per entry a
//! u16 name length, the UTF-8 name, and an embedded tensor record.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::bundle::WeightBundle;
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor, TensorData};

pub const TENSOR_MAGIC: [u8; 4] = *b"CBTF";
pub const BUNDLE_MAGIC: [u8; 4] = *b"CBWB";
pub const FORMAT_VERSION: u32 = 1;
/// Fixed part of a tensor header, before the dims.
pub const TENSOR_HEADER_FIXED: usize = 13;

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(t.dtype().code());
    out.push(t.scale_exp() as u8);
    out.push(t.dims().len() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t.data() {
        TensorData::F32(v) => {
            out.reserve(v.len() * 4);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::I16(v) => {
            out.reserve(v.len() * 2);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).ok_or(Error::TruncatedFile { needed: usize::MAX, available: self.buf.len() })?;
        if end > self.buf.len() {
            return Err(Error::TruncatedFile { needed: end, available: self.buf.len() });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }
}

fn decode_tensor(cur: &mut Cursor<'_>) -> Result<Tensor> {
    cur.magic(TENSOR_MAGIC)?;
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = DType::from_code(cur.u8()?)?;
    let scale_exp = cur.u8()? as i8;
    let ndim = cur.u8()? as usize;
    cur.take(2)?;
    let mut raw_dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        raw_dims.push(cur.u64()?);
    }
    let overflow = || Error::DimOverflow(raw_dims.clone());
    let mut count: usize = 1;
    for &d in &raw_dims {
        let d = usize::try_from(d).map_err(|_| overflow())?;
        count = count.checked_mul(d).ok_or_else(overflow)?;
    }
    let payload_len =
        count.checked_mul(dtype.size_bytes()).filter(|&n| n <= isize::MAX as usize).ok_or_else(overflow)?;
    let dims: Vec<usize> = raw_dims.iter().map(|&d| d as usize).collect();
    let payload = cur.take(payload_len)?;
    let data = match dtype {
        DType::Float32 => {
            TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        }
        DType::Fixed16 => {
            TensorData::I16(payload.chunks_exact(2).map(|c| i16::from_le_bytes(c.try_into().unwrap())).collect())
        }
    };
    Tensor::new(dims, scale_exp, data)
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(TENSOR_HEADER_FIXED + 8 * t.dims().len() + 4 * t.len());
    encode_tensor(t, &mut out);
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    decode_tensor(&mut Cursor { buf: bytes, pos: 0 })
}

pub fn write_tensor_file(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&tensor_to_bytes(t))?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    tensor_from_bytes(&fs::read(path)?)
}

pub fn bundle_to_bytes(bundle: &WeightBundle) -> Vec<u8> {
    let records = bundle.to_records();
    let mut out = Vec::new();
    out.extend_from_slice(&BUNDLE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in &records {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    out
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<WeightBundle> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    cur.magic(BUNDLE_MAGIC)?;
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = cur.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::InvalidTensor("entry name is not UTF-8".into()))?
            .to_string();
        records.push((name, decode_tensor(&mut cur)?));
    }
    WeightBundle::from_records(records)
}

pub fn write_bundle_file(bundle: &WeightBundle, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&bundle_to_bytes(bundle))?;
    Ok(())
}

pub fn read_bundle_file(path: impl AsRef<Path>) -> Result<WeightBundle> {
    bundle_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reads_identity_file() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CBTF");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 2, 0, 0]);
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        for v in [1.0f32, 0.0, 0.0, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let t = tensor_from_bytes(&bytes).unwrap();
        assert_eq!(t.dims(), &[2, 2]);
        assert_eq!(t.as_f32().unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = tensor_to_bytes(&Tensor::from_f32(vec![1], vec![3.0]).unwrap());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(tensor_from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = tensor_to_bytes(&Tensor::from_f32(vec![4], vec![1.0; 4]).unwrap());
        let err = tensor_from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::TruncatedFile { .. }));
    }

    #[test]
    fn unknown_dtype() {
        let mut bytes = tensor_to_bytes(&Tensor::from_f32(vec![1], vec![3.0]).unwrap());
        bytes[8] = 7;
        assert!(matches!(tensor_from_bytes(&bytes), Err(Error::UnknownDtype(7))));
    }

    #[test]
    fn dim_overflow() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CBTF");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 2, 0, 0]);
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&4u64.to_le_bytes());
        assert!(matches!(tensor_from_bytes(&bytes), Err(Error::DimOverflow(_))));
    }

    #[test]
    fn scalar_file_size() {
        let bytes = tensor_to_bytes(&Tensor::from_f32(vec![1], vec![0.25]).unwrap());
        // 13 fixed header bytes + one u64 dim + one f32.
        assert_eq!(bytes.len(), 25);
    }

    #[test]
    fn fixed16_header_bytes() {
        let bytes = tensor_to_bytes(&Tensor::from_i16(vec![2], 15, vec![1, -1]).unwrap());
        assert_eq!(bytes[8], 1);
        assert_eq!(bytes[9], 15);
        assert_eq!(bytes[10], 1);
    }

    #[test]
    fn full_frame_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 368 * 128 * 128;
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::from_f32(vec![368, 128, 128], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rf.cbtf");
        write_tensor_file(&t, &path).unwrap();
        let back = read_tensor_file(&path).unwrap();
        assert_eq!(back.dims(), t.dims());
        let a = t.as_f32().unwrap();
        let b = back.as_f32().unwrap();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn bundle_round_trip() {
        let mut b = WeightBundle::new();
        b.insert("conv0.weight", Tensor::from_f32(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        b.insert("conv0.bias", Tensor::from_f32(vec![2], vec![0.5, -0.5]).unwrap()).unwrap();
        b.insert("conv0.index", Tensor::from_i16(vec![2, 2], 0, vec![0, 1, 1, -1]).unwrap()).unwrap();
        b.set_meta("prune_ratio", "0.85");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.cbwb");
        write_bundle_file(&b, &path).unwrap();
        let back = read_bundle_file(&path).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["conv0.bias", "conv0.index", "conv0.weight"]);
    }

    #[test]
    fn bundle_bad_magic() {
        let mut bytes = bundle_to_bytes(&WeightBundle::new());
        bytes[0] = b'Z';
        assert!(matches!(bundle_from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..5, 1..4).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            prop_oneof![
                prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n).prop_map({
                    let dims = dims.clone();
                    move |v| Tensor::from_f32(dims.clone(), v).unwrap()
                }),
                (prop::collection::vec(any::<i16>(), n), any::<i8>()).prop_map(move |(v, s)| Tensor::from_i16(
                    dims.clone(),
                    s,
                    v
                )
                .unwrap()),
            ]
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(t in arb_tensor()) {
            let back = tensor_from_bytes(&tensor_to_bytes(&t)).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            prop_assert_eq!(back.scale_exp(), t.scale_exp());
            match (back.data(), t.data()) {
                (TensorData::F32(a), TensorData::F32(b)) => {
                    prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
                }
                (TensorData::I16(a), TensorData::I16(b)) => prop_assert_eq!(a, b),
                _ => prop_assert!(false, "dtype changed"),
            }
        }
    }
}
