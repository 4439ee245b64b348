//! Dense row-major arrays, latent states, and the `LTR1` tensor container.
//!
//! Container layout (all integers little-endian `u32`):
//!
//! ```text
//! "LTR1" | dtype | rank | dim_0 .. dim_{rank-1} | payload
//! ```
//!
//! `dtype` 1 is IEEE binary32, 2 is binary64. Payload is row-major.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"LTR1";
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Corruption(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a 2-D index; panics when the tensor is not rank 2.
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn ensure_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(shape, &self.shape));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// `‖self − reference‖₂ / ‖reference‖₂`, accumulated in f64.
    pub fn relative_l2(&self, reference: &Self) -> Result<f64> {
        self.ensure_same_shape(reference)?;
        let num: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum();
        Ok(num.sqrt() / reference.l2_norm().max(f64::MIN_POSITIVE))
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect(),
        }
    }

    /// Serializes into the `LTR1` container using this tensor's own dtype.
    pub fn to_container_bytes(&self) -> Result<Vec<u8>> {
        if self.shape.len() > MAX_RANK {
            return Err(Error::Format(format!(
                "rank {} exceeds container limit {}",
                self.shape.len(),
                MAX_RANK
            )));
        }
        let mut out = Vec::with_capacity(12 + 4 * self.shape.len() + self.len() * T::DTYPE.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(T::DTYPE as u32).to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &x in &self.data {
            x.write_le(&mut out);
        }
        Ok(out)
    }

    /// Parses an `LTR1` container; values stored in another dtype are cast.
    pub fn from_container_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing LTR1 magic".into()));
        }
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| Error::Corruption("truncated header".into()))
        };
        let dtype = DType::from_code(word(4)?)
            .ok_or_else(|| Error::Format("unknown dtype code".into()))?;
        let rank = word(8)? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("rank {rank} exceeds container limit")));
        }
        let mut shape = Vec::with_capacity(rank);
        for r in 0..rank {
            shape.push(word(12 + 4 * r)? as usize);
        }
        let n: usize = shape.iter().product();
        let start = 12 + 4 * rank;
        let payload = &bytes[start..];
        if payload.len() != n * dtype.size() {
            return Err(Error::Corruption(format!(
                "header declares {} values ({} bytes), payload has {} bytes",
                n,
                n * dtype.size(),
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(dtype.size())
            .map(|c| match dtype {
                DType::F32 if T::DTYPE == DType::F32 => T::read_le(c),
                DType::F32 => T::from_f64_lossy(f32::read_le(c) as f64),
                DType::F64 => T::from_f64_lossy(f64::read_le(c)),
            })
            .collect();
        Ok(Self { shape, data })
    }

    /// SHA-256 of the container encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let bytes = self
            .to_container_bytes()
            .expect("ranks above the container limit are never hashed");
        hex::encode(Sha256::digest(&bytes))
    }
}

pub fn save_tensor<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = t.to_container_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_container_bytes(&bytes)
}

/// A denoising state together with the timestep index it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor<T> {
    pub data: Tensor<T>,
    pub timestep: usize,
}

impl<T: Scalar> LatentTensor<T> {
    pub fn new(data: Tensor<T>, timestep: usize) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::Format(format!(
                "latent must be (C, H, W), got {:?}",
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(Error::validation("latent", "non-finite entries"));
        }
        Ok(Self { data, timestep })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn with_timestep(mut self, timestep: usize) -> Self {
        self.timestep = timestep;
        self
    }
}
