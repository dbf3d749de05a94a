//! Named parameter sets and their binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "SVSPARAM"
//! version      u32       1
//! count        u32       number of tensors
//! name table   count ×   { name_len u32, name utf-8 bytes, ndim u32, dims u64 × ndim }
//! payload      count ×   product(dims) f32 values, in name-table order
//! ```
//!
//! Entries are written in lexicographic name order, so equal stores encode to
//! equal bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SVSPARAM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor<f32>>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<(), TensorError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::Invalid {
                op: "parameter store",
                msg: format!("duplicate parameter `{name}`"),
            });
        }
        self.params.insert(name, value);
        Ok(())
    }

    /// Replaces the value of an existing or new parameter.
    pub fn set(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.params.remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParameterStore {
        ParameterStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every entry of `other` into `self`, overwriting equal names.
    pub fn extend(&mut self, other: &ParameterStore) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
        }
        for t in self.params.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut table = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("name is not utf-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(corrupt(format!("`{name}` has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?).map_err(|_| corrupt("dimension overflow"))?;
                if d == 0 {
                    return Err(corrupt(format!("`{name}` has a zero extent")));
                }
                numel = numel.checked_mul(d).ok_or_else(|| corrupt("size overflow"))?;
                shape.push(d);
            }
            table.push((name, shape, numel));
        }
        let mut store = ParameterStore::new();
        for (name, shape, numel) in table {
            let bytes = r.take(numel.checked_mul(4).ok_or_else(|| corrupt("size overflow"))?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store.insert(name, Tensor::new(&shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }
}

fn corrupt(msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op: "checkpoint",
        msg: msg.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| corrupt("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Parameters of a [`ParameterStore`] placed on a tape.
pub struct ParamBinding {
    vars: HashMap<String, Var>,
}

impl ParamBinding {
    /// Places every parameter on `tape`; those accepted by `trainable` receive
    /// gradients, the rest are constants.
    pub fn bind<T: Scalar>(
        tape: &mut Tape<T>,
        store: &ParameterStore,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let value = t.cast::<T>();
                let v = if trainable(name) {
                    tape.param(value)
                } else {
                    tape.constant(value)
                };
                (name.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var, TensorError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    /// Rebinds `name` to an existing tape variable.
    pub fn set(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("b", Tensor::new(&[2], vec![1.5, -0.0]).unwrap()).unwrap();
        s.insert("a.w", Tensor::new(&[2, 3], vec![1.0, f32::MIN_POSITIVE, 3.0, f32::NAN, 5.0, -6.0]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn encode_decode_is_bit_exact() {
        let s = sample();
        let bytes = s.encode();
        let back = ParameterStore::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.get("a.w").unwrap()), bits(s.get("a.w").unwrap()));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = sample();
        assert!(s.insert("b", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn decode_rejects_truncation_and_bad_magic() {
        let bytes = sample().encode();
        for cut in [0, 7, 12, 20, bytes.len() - 1] {
            assert!(ParameterStore::decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParameterStore::decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(ParameterStore::decode(&long).is_err());
    }
}
