//! Dense n-dimensional tensors, the value type for images, latents and
//! parameters. Computation runs in f64; the dump format also carries f32.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{FinoError, Result};

pub const FNT_MAGIC: &[u8; 4] = b"FNT1";

/// Element type tag of the raw tensor dump format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64 = 0,
    F32 = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(FinoError::shape(
                "Tensor::new",
                format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Interpret as an N×C×H×W batch.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(FinoError::shape(
                "dims4",
                format!("expected rank 4, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(FinoError::shape(
                "dims3",
                format!("expected rank 3, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(FinoError::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(FinoError::shape(
                op,
                format!("lhs {:?} vs rhs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }

    // ---- raw dump format: "FNT1", rank u32, extents u32[rank], dtype u8, row-major LE data

    pub fn write_fnt(&self, w: &mut impl Write, dtype: Dtype) -> std::io::Result<()> {
        w.write_all(FNT_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        w.write_all(&[dtype as u8])?;
        match dtype {
            Dtype::F64 => {
                for &v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Dtype::F32 => {
                for &v in &self.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_fnt(r: &mut impl Read) -> std::io::Result<Tensor> {
        use std::io::{Error, ErrorKind};
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FNT_MAGIC {
            return Err(Error::new(ErrorKind::InvalidData, "bad FNT1 magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank > 8 {
            return Err(Error::new(ErrorKind::InvalidData, "unreasonable rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut b4)?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match tag[0] {
            0 => {
                let mut b8 = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut b8)?;
                    data.push(f64::from_le_bytes(b8));
                }
            }
            1 => {
                for _ in 0..n {
                    r.read_exact(&mut b4)?;
                    data.push(f32::from_le_bytes(b4) as f64);
                }
            }
            t => {
                return Err(Error::new(
                    ErrorKind::InvalidData,
                    format!("unknown dtype tag {t}"),
                ))
            }
        }
        Ok(Tensor { shape, data })
    }

    pub fn save_fnt(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| FinoError::io(path, e))?;
        self.write_fnt(&mut f, dtype)
            .map_err(|e| FinoError::io(path, e))
    }

    pub fn load_fnt(path: &Path) -> Result<Tensor> {
        let mut f = std::fs::File::open(path).map_err(|e| FinoError::io(path, e))?;
        Tensor::read_fnt(&mut f).map_err(|e| FinoError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn fnt_roundtrip_f64_is_bit_exact() {
        let t = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 1e-300, 3.7, 42.0]).unwrap();
        let mut buf = Vec::new();
        t.write_fnt(&mut buf, Dtype::F64).unwrap();
        let back = Tensor::read_fnt(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn fnt_f32_quantizes() {
        let t = Tensor::new(vec![1], vec![std::f64::consts::PI]).unwrap();
        let mut buf = Vec::new();
        t.write_fnt(&mut buf, Dtype::F32).unwrap();
        let back = Tensor::read_fnt(&mut buf.as_slice()).unwrap();
        assert_eq!(back.data()[0], std::f64::consts::PI as f32 as f64);
    }

    #[test]
    fn fnt_rejects_bad_magic() {
        let buf = b"XXXX\x01\x00\x00\x00".to_vec();
        assert!(Tensor::read_fnt(&mut buf.as_slice()).is_err());
    }
}
