//! Dense row-major tensors in either float32 or 16-bit fixed point.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    Float32,
    /// Signed 16-bit raw values; real value = raw * 2^-scale_exp.
    Fixed16,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Float32 => 0,
            DType::Fixed16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::Float32),
            1 => Ok(DType::Fixed16),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Fixed16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I16(Vec<i16>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense tensor. `data.len()` always equals the product of `dims`, and
/// every extent is at least one.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    scale_exp: i8,
    data: TensorData,
}

fn checked_len(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::InvalidTensor("tensor needs at least one dim".into()));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidTensor(format!("zero extent in dims {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::DimOverflow(dims.iter().map(|&d| d as u64).collect()))
}

impl Tensor {
    pub fn new(dims: Vec<usize>, scale_exp: i8, data: TensorData) -> Result<Self> {
        let len = checked_len(&dims)?;
        if data.len() != len {
            return Err(Error::ShapeMismatch(format!("dims {dims:?} need {len} values, got {}", data.len())));
        }
        Ok(Self { dims, scale_exp, data })
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, 0, TensorData::F32(data))
    }

    pub fn from_i16(dims: Vec<usize>, scale_exp: i8, data: Vec<i16>) -> Result<Self> {
        Self::new(dims, scale_exp, TensorData::I16(data))
    }

    pub fn zeros_f32(dims: Vec<usize>) -> Result<Self> {
        let len = checked_len(&dims)?;
        Self::from_f32(dims, vec![0.0; len])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::Float32,
            TensorData::I16(_) => DType::Fixed16,
        }
    }

    pub fn scale_exp(&self) -> i8 {
        self.scale_exp
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::I16(_) => None,
        }
    }

    pub fn as_i16(&self) -> Option<&[i16]> {
        match &self.data {
            TensorData::I16(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    pub fn as_f32_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.data {
            TensorData::F32(v) => Some(v),
            TensorData::I16(_) => None,
        }
    }

    /// Float view of the data; fixed16 values are dequantized.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::I16(v) => {
                let step = (-(self.scale_exp as f64)).exp2();
                v.iter().map(|&r| (r as f64 * step) as f32).collect()
            }
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::I16(_) => Err(Error::InvalidTensor("expected float32 tensor".into())),
        }
    }

    /// Float data, or a `ShapeMismatch` naming `what` when dims differ.
    pub fn expect_f32(&self, what: &str, dims: &[usize]) -> Result<&[f32]> {
        if self.dims != dims {
            return Err(Error::ShapeMismatch(format!("{what}: expected dims {dims:?}, got {:?}", self.dims)));
        }
        self.as_f32().ok_or_else(|| Error::InvalidTensor(format!("{what}: expected float32 data")))
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let len = checked_len(&dims)?;
        if len != self.len() {
            return Err(Error::ShapeMismatch(format!("cannot reshape {:?} into {dims:?}", self.dims)));
        }
        self.dims = dims;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        let err = Tensor::from_f32(vec![2, 2], vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn rejects_zero_extent() {
        assert!(Tensor::zeros_f32(vec![3, 0]).is_err());
        assert!(Tensor::zeros_f32(vec![]).is_err());
    }

    #[test]
    fn fixed16_dequantizes_with_scale() {
        let t = Tensor::from_i16(vec![3], 15, vec![16384, -32768, 1]).unwrap();
        assert_eq!(t.to_f32_vec(), vec![0.5, -1.0, 2f32.powi(-15)]);
    }
}
