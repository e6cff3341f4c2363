//! Dense tensors, named parameter groups, and reverse-mode differentiation.
//!
//! The tape ([`tape::Tape`]) records every primitive as a node; gradients are
//! produced by emitting more primitives onto the same tape, so differentiating
//! through an inner-loop update (second-order) is the same mechanism as a
//! plain backward pass.

pub mod adapt;
pub mod tape;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    dims: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    /// Filled tensor. Every extent must be >= 1.
    pub fn new(dims: &[usize], fill: E) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "extents must all be >= 1, got {dims:?}"
            )));
        }
        let n = dims.iter().product();
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![fill; n],
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::new(dims, E::ZERO)
    }

    pub fn from_vec(dims: &[usize], data: Vec<E>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "extents must all be >= 1, got {dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements but {} values were given",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "expected a scalar tensor, got shape {:?}",
                self.dims
            )));
        }
        Ok(self.data[0])
    }

    /// Row-count and column-count of a rank-2 tensor.
    pub fn as_matrix_dims(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            &[n, m] => Ok((n, m)),
            other => Err(Error::Shape(format!("expected a matrix, got {other:?}"))),
        }
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    /// Reinterpret with new dims of identical element count.
    pub fn reshaped(&self, dims: &[usize]) -> Result<Self> {
        Self::from_vec(dims, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Lossy element-type conversion.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Row-wise softmax of a matrix (plain values, no tape involvement).
    pub fn softmax_rows(&self) -> Result<Tensor<E>> {
        let (n, c) = self.as_matrix_dims()?;
        let mut out = self.data.clone();
        for i in 0..n {
            let row = &mut out[i * c..(i + 1) * c];
            let m = row.iter().fold(row[0], |a, &b| a.max(b));
            let mut s = E::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        Tensor::from_vec(&self.dims, out)
    }

    /// Index of the max element in each row (ties to the lowest index).
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (n, c) = self.as_matrix_dims()?;
        Ok((0..n)
            .map(|i| {
                let row = &self.data[i * c..(i + 1) * c];
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    // ── .tsr file format ────────────────────────────────────────────────
    // magic "TSR1" | 1B dtype (1=f32, 2=f64) | 1B ndim | 2 reserved zero
    // bytes | ndim little-endian u32 extents | row-major LE payload.

    pub fn write_tsr(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 4 * self.dims.len() + self.data.len() * E::BYTE_WIDTH);
        buf.extend_from_slice(b"TSR1");
        buf.push(E::DTYPE_TAG);
        buf.push(self.dims.len() as u8);
        buf.extend_from_slice(&[0, 0]);
        for &d in &self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes_vec());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Read a .tsr file; the on-disk dtype must match `E`.
    pub fn read_tsr(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_tsr_bytes(&bytes)
    }

    pub fn from_tsr_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[0..4] != b"TSR1" {
            return Err(Error::Format("missing TSR1 magic".into()));
        }
        let dtype = bytes[4];
        if dtype != E::DTYPE_TAG {
            return Err(Error::Format(format!(
                "dtype tag {} does not match requested element type (tag {})",
                dtype,
                E::DTYPE_TAG
            )));
        }
        let ndim = bytes[5] as usize;
        if bytes[6] != 0 || bytes[7] != 0 {
            return Err(Error::Format("reserved bytes must be zero".into()));
        }
        let mut off = 8;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            if off + 4 > bytes.len() {
                return Err(Error::Format("truncated extent table".into()));
            }
            dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let n: usize = dims.iter().product();
        if bytes.len() - off != n * E::BYTE_WIDTH {
            return Err(Error::Format(format!(
                "payload holds {} bytes, shape {:?} needs {}",
                bytes.len() - off,
                dims,
                n * E::BYTE_WIDTH
            )));
        }
        let data = bytes[off..]
            .chunks_exact(E::BYTE_WIDTH)
            .map(E::from_le_slice)
            .collect();
        Tensor::from_vec(&dims, data)
    }

    pub fn to_tsr_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"TSR1");
        buf.push(E::DTYPE_TAG);
        buf.push(self.dims.len() as u8);
        buf.extend_from_slice(&[0, 0]);
        for &d in &self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes_vec());
        }
        buf
    }
}

/// Convenience used throughout tests.
pub fn write_tsr_any<E: Scalar>(t: &Tensor<E>, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(&t.to_tsr_bytes())
}

/// Which half of the network a parameter group belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Body,
    Head,
}

/// Ordered, uniquely named collection of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup<E> {
    role: ParamRole,
    entries: Vec<(String, Tensor<E>)>,
}

impl<E: Scalar> ParamGroup<E> {
    pub fn new(role: ParamRole) -> Self {
        ParamGroup {
            role,
            entries: Vec::new(),
        }
    }

    pub fn role(&self) -> ParamRole {
        self.role
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Argument(format!(
                "duplicate parameter name '{name}'"
            )));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<E>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Replace every tensor with the paired values, preserving names/order.
    pub fn with_tensors(&self, tensors: Vec<Tensor<E>>) -> Result<Self> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        Ok(ParamGroup {
            role: self.role,
            entries: self
                .entries
                .iter()
                .zip(tensors)
                .map(|((n, _), t)| (n.clone(), t))
                .collect(),
        })
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Gradients keyed by the parameter names they correspond to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMap<E> {
    entries: Vec<(String, Tensor<E>)>,
}

impl<E: Scalar> GradMap<E> {
    pub fn from_entries(entries: Vec<(String, Tensor<E>)>) -> Self {
        GradMap { entries }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Elementwise mean of several gradient maps with identical keys.
    pub fn mean(maps: &[GradMap<E>]) -> Result<GradMap<E>> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Argument("mean of zero gradient maps".into()))?;
        let scale = E::from_f64(1.0 / maps.len() as f64);
        let mut out = Vec::with_capacity(first.entries.len());
        for (i, (name, t0)) in first.entries.iter().enumerate() {
            let mut acc = vec![E::ZERO; t0.numel()];
            for m in maps {
                let (n, t) = &m.entries[i];
                if n != name || t.dims() != t0.dims() {
                    return Err(Error::Contract(
                        "gradient maps disagree on names or shapes".into(),
                    ));
                }
                for (a, &v) in acc.iter_mut().zip(t.data()) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a *= scale;
            }
            out.push((name.clone(), Tensor::from_vec(t0.dims(), acc)?));
        }
        Ok(GradMap { entries: out })
    }
}

/// θ ← θ − lr·g for every matching entry. Shape mismatches are errors.
pub fn sgd_update<E: Scalar>(
    params: &ParamGroup<E>,
    grads: &GradMap<E>,
    lr: E,
) -> Result<ParamGroup<E>> {
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no gradient for parameter '{name}'")))?;
        if g.dims() != t.dims() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match parameter '{}' shape {:?}",
                g.dims(),
                name,
                t.dims()
            )));
        }
        let data = t
            .data()
            .iter()
            .zip(g.data())
            .map(|(&p, &gv)| p - lr * gv)
            .collect();
        tensors.push(Tensor::from_vec(t.dims(), data)?);
    }
    params.with_tensors(tensors)
}
