//! Named parameter store and its binary checkpoint format.

use std::io::{self, Read, Write};

use rand::Rng;
use thiserror::Error;

use super::tensor::Tensor;

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn add_uniform<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, bound: f64, rng: &mut R) -> ParamId {
        let data = (0..rows * cols).map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 }).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Tensor::from_vec(rows, cols, vec![v; rows * cols]))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        for t in &mut self.tensors {
            t.data.fill(v);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn copy_from(&mut self, other: &Params) {
        assert_eq!(self.names, other.names, "parameter layouts differ");
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.copy_from_slice(&b.data);
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rows as u32).to_le_bytes())?;
            w.write_all(&(t.cols as u32).to_le_bytes())?;
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let n = read_u32(r)? as usize;
        let mut out = Params::new();
        for _ in 0..n {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::Corrupt("parameter name"))?;
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(read_f64(r)?);
            }
            out.add(name, Tensor::from_vec(rows, cols, data));
        }
        Ok(out)
    }

    /// Check that `other` has the same names and shapes.
    pub fn same_layout(&self, other: &Params) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(&'static str),
    #[error("checkpoint does not match the network layout")]
    Layout,
}

pub fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}
