//! Named learnable arrays and the `params.bin` checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"HGP1"
//! u32                      number of arrays
//! repeated:
//!   u32                    name length in bytes
//!   [u8; len]              UTF-8 name
//!   u64, u64               rows, cols
//!   [f32; rows * cols]     row-major values
//! ```

use std::collections::HashMap;

use thiserror::Error;

use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

pub const PARAMS_MAGIC: &[u8; 4] = b"HGP1";

#[derive(Debug, Error, PartialEq)]
pub enum ParamsError {
    #[error("not a parameter file (bad magic)")]
    BadMagic,
    #[error("truncated parameter file at byte {0}")]
    Truncated(usize),
    #[error("array name at byte {0} is not UTF-8")]
    BadName(usize),
    #[error("duplicate array name `{0}`")]
    Duplicate(String),
    #[error("{0} trailing bytes after last array")]
    Trailing(usize),
    #[error("array `{name}` dims {rows}x{cols} exceed the file size")]
    Oversized { name: String, rows: u64, cols: u64 },
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
}

/// Ordered collection of named matrices. Insertion order is the stable order
/// used for optimizer state, gradient checking and serialization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<(), ParamsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ParamsError::Duplicate(name));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.position(name).map(move |i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.values.iter().map(Matrix::shape).collect()
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Record every array as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars<'_> {
        self.bind_values(tape, &self.values)
    }

    /// Record `values` (same order and shapes as this store) as tape leaves.
    pub fn bind_values(&self, tape: &mut Tape, values: &[Matrix]) -> ParamVars<'_> {
        assert_eq!(values.len(), self.values.len(), "parameter count");
        let vars = values.iter().map(|m| tape.leaf(m.clone())).collect();
        ParamVars { store: self, vars }
    }

    /// Name existing tape handles (same order as this store).
    pub fn wrap(&self, vars: Vec<Var>) -> ParamVars<'_> {
        assert_eq!(vars.len(), self.values.len(), "parameter count");
        ParamVars { store: self, vars }
    }

    /// Adopt values from `other` by name; names and shapes must match this
    /// store exactly.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), ParamsError> {
        for (i, name) in self.names.iter().enumerate() {
            let found = other
                .get(name)
                .ok_or_else(|| ParamsError::Missing(name.clone()))?;
            if found.shape() != self.values[i].shape() {
                return Err(ParamsError::ShapeMismatch {
                    name: name.clone(),
                    expected: self.values[i].shape(),
                    found: found.shape(),
                });
            }
        }
        if let Some(extra) = other.names.iter().find(|n| !self.index.contains_key(*n)) {
            return Err(ParamsError::Missing(format!("{extra} (unexpected in checkpoint)")));
        }
        for (i, name) in self.names.clone().iter().enumerate() {
            self.values[i] = other.get(name).expect("checked above").clone();
        }
        Ok(())
    }

    /// Round every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for m in &mut self.values {
            for v in m.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.total_len() * 4 + self.len() * 32);
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, m) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for &v in m.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ParamsError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != PARAMS_MAGIC {
            return Err(ParamsError::BadMagic);
        }
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| ParamsError::BadName(at))?
                .to_owned();
            let rows = r.u64()?;
            let cols = r.u64()?;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .filter(|&b| b <= r.remaining() as u64)
                .ok_or_else(|| ParamsError::Oversized {
                    name: name.clone(),
                    rows,
                    cols,
                })?;
            let raw = r.take(n as usize)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(name, Matrix::from_vec(rows as usize, cols as usize, data))?;
        }
        if r.remaining() > 0 {
            return Err(ParamsError::Trailing(r.remaining()));
        }
        Ok(store)
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct ParamVars<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl ParamVars<'_> {
    /// Panics if `name` is not in the store; parameter layouts are fixed by
    /// the model at construction.
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ParamsError> {
        if n > self.remaining() {
            return Err(ParamsError::Truncated(self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ParamsError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, ParamsError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("enc.w", Matrix::from_rows(&[vec![1.0, 2.5], vec![-3.0, 0.125]]))
            .unwrap();
        s.insert("mask_token", Matrix::from_rows(&[vec![0.5, 0.0, -1.0]]))
            .unwrap();
        s
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"HGP1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(&bytes[12..17], b"enc.w");
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[25..33].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[33..37].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(ParamStore::decode(b"HGPX\0\0\0\0"), Err(ParamsError::BadMagic));
        let bytes = sample().encode();
        assert!(matches!(
            ParamStore::decode(&bytes[..bytes.len() - 1]),
            Err(ParamsError::Truncated(_)) | Err(ParamsError::Oversized { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(ParamStore::decode(&extra), Err(ParamsError::Trailing(1)));
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut b = b"HGP1".to_vec();
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.push(b'x');
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(ParamStore::decode(&b), Err(ParamsError::Oversized { .. })));
    }

    #[test]
    fn load_from_checks_shapes() {
        let mut a = sample();
        let mut b = ParamStore::new();
        b.insert("enc.w", Matrix::zeros(2, 2)).unwrap();
        b.insert("mask_token", Matrix::zeros(1, 2)).unwrap();
        assert!(matches!(a.load_from(&b), Err(ParamsError::ShapeMismatch { .. })));
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_f32_values(
            vals in proptest::collection::vec(-1e6f32..1e6, 1..40),
            cols in 1usize..5,
        ) {
            let rows = vals.len() / cols;
            prop_assume!(rows > 0);
            let data: Vec<f64> = vals[..rows * cols].iter().map(|&v| v as f64).collect();
            let mut s = ParamStore::new();
            s.insert("p", Matrix::from_vec(rows, cols, data)).unwrap();
            let back = ParamStore::decode(&s.encode()).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
