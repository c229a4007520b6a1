//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major value; differentiation happens through a
//! [`Graph`] tape that records every op applied during a forward pass and
//! replays it backwards. Gradients accumulate additively into each recorded
//! node, so running [`Graph::backward`] twice doubles them; callers build a
//! fresh graph per step instead of zeroing.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, grad_check_multi};
pub use graph::{Activation, Graph, VarId};

use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Hard cap on element count accepted by constructors and the deserializer.
/// 2^31 f64 values is 16 GiB, well past anything this toolkit handles.
const MAX_ELEMENTS: usize = 1 << 31;

const MAX_RANK: usize = 8;

/// Row-major dense tensor. `grad`, when present, always has `data`'s length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(Error::Usage(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], grad: None, requires_grad: false }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], grad: None, requires_grad: false }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![value], grad: None, requires_grad: false }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|i| f(i)).collect();
        Tensor { shape: shape.to_vec(), data, grad: None, requires_grad: false }
    }

    /// Marks the tensor as a differentiation target when fed to a graph.
    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Binary layout: rank then each extent as little-endian u32, then the
    /// row-major data as little-endian f64. No padding, no magic.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
        let rank = read_u32(r)? as usize;
        if rank > MAX_RANK {
            return Err(Error::Io(format!("tensor rank {rank} exceeds limit {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = read_u32(r)? as usize;
            if e == 0 {
                return Err(Error::Io("tensor extent of zero".into()));
            }
            shape.push(e);
        }
        let n = checked_numel(&shape).map_err(|_| {
            Error::Io(format!("tensor shape {shape:?} exceeds element limit"))
        })?;
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf).map_err(|e| Error::Io(format!("tensor data: {e}")))?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(4 + 4 * self.shape.len() + 8 * self.data.len());
        self.write_to(&mut buf).expect("write to Vec cannot fail");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cursor = bytes.as_slice();
        let t = Tensor::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Io(format!(
                "{}: {} trailing bytes after tensor payload",
                path.display(),
                cursor.len()
            )));
        }
        Ok(t)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::Io(format!("tensor header: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(Error::Usage(format!("zero extent in shape {shape:?}")));
        }
        n = n.checked_mul(e).ok_or_else(|| {
            Error::Usage(format!("shape {shape:?} overflows element count"))
        })?;
        if n > MAX_ELEMENTS {
            return Err(Error::Usage(format!(
                "shape {shape:?} exceeds the {MAX_ELEMENTS}-element limit"
            )));
        }
    }
    Ok(n)
}
