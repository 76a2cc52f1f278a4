//! Dense row-major `f64` tensors and their binary serialization.
//!
//! Wire format: `rank: u64`, then `rank` extents as `u64`, then the
//! row-major values as `f64`. Everything little-endian.

use std::fmt;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{dim_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(dim_err!("extent {pos} of shape {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor, validating that `data` fills `shape` exactly.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {len} values but {} were given",
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = check_shape(shape).expect("zero extent in tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let len = check_shape(shape).expect("zero extent in tensor shape");
        let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (1 + self.shape.len() + self.data.len()));
        self.write_to(&mut out).expect("write to Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Data(format!("truncated tensor: {e}"));
        let mut word = [0u8; 8];
        r.read_exact(&mut word).map_err(bad)?;
        let rank = u64::from_le_bytes(word);
        if rank == 0 || rank > 16 {
            return Err(Error::Data(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            r.read_exact(&mut word).map_err(bad)?;
            shape.push(u64::from_le_bytes(word) as usize);
        }
        let len = check_shape(&shape).map_err(|e| Error::Data(e.to_string()))?;
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes).map_err(bad)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { shape, data })
    }
}

/// Geometry of a 2-D convolution over `H×W×C` (channels-last) inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, padding equal to the dilation so the
    /// spatial extent is preserved for `3×3` kernels.
    pub fn same_3x3(dilation: usize) -> Self {
        ConvSpec {
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: dilation,
            dilation,
        }
    }

    pub fn pointwise() -> Self {
        ConvSpec {
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }

    pub fn effective_h(&self) -> usize {
        self.dilation * (self.kernel_h - 1) + 1
    }

    pub fn effective_w(&self) -> usize {
        self.dilation * (self.kernel_w - 1) + 1
    }

    /// Output extent `(H', W')` for an `h×w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(dim_err!("degenerate conv spec {self:?}"));
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        let (eh, ew) = (self.effective_h(), self.effective_w());
        if eh > ph || ew > pw {
            return Err(dim_err!("effective kernel {eh}x{ew} exceeds padded input {ph}x{pw}"));
        }
        Ok(((ph - eh) / self.stride + 1, (pw - ew) / self.stride + 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn serialization_layout() {
        let t = Tensor::new(&[1, 2], vec![1.5, -2.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 8 * 5);
        assert_eq!(&bytes[0..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &1.5f64.to_le_bytes());
        let back = Tensor::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_input_is_an_error() {
        let bytes = Tensor::vector(vec![1.0, 2.0]).to_bytes();
        assert!(Tensor::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn dilated_extent() {
        let spec = ConvSpec::same_3x3(2);
        assert_eq!(spec.effective_h(), 5);
        assert_eq!(spec.output_dims(16, 16).unwrap(), (16, 16));
        let tight = ConvSpec { padding: 0, ..spec };
        assert_eq!(tight.output_dims(5, 5).unwrap(), (1, 1));
        assert!(tight.output_dims(4, 5).is_err());
    }

    #[test]
    fn non_finite_detected() {
        let t = Tensor::vector(vec![1.0, f64::NAN]);
        assert!(matches!(t.ensure_finite("x"), Err(Error::Numeric(_))));
    }
}
