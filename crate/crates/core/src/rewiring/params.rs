//! Named parameter tensors and the little-endian checkpoint container.
//!
//! Container layout:
//!
//! ```text
//! "R2TC" | u32 version | u32 entry count
//! per entry: u16 name length | UTF-8 name | u8 dtype code | u8 rank | u32 dims[rank] | raw values
//! ```
//!
//! Entries are written in name order, so equal stores produce equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"R2TC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters keyed by unique name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterStore<S> {
    entries: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Option<Tensor<S>> {
        self.entries.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.entries.remove(name)
    }

    /// Looks a parameter up, failing with a build error naming it.
    pub fn require(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Build(format!("parameter `{name}` is missing")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn nbytes(&self) -> usize {
        self.entries.values().map(Tensor::nbytes).sum()
    }

    /// Moves every entry of `other` into `self`, replacing duplicates.
    pub fn extend(&mut self, other: ParameterStore<S>) {
        self.entries.extend(other.entries);
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Cheap order-dependent fingerprint of names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (k, v) in &self.entries {
            for b in k.bytes() {
                mix(b as u64);
            }
            for &d in v.shape() {
                mix(d as u64);
            }
            for x in v.data() {
                mix(x.bits());
            }
        }
        h
    }

    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        ParameterStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::Argument(format!("parameter name too long: {name}")))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Argument(format!("rank too large for `{name}`")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(S::DTYPE.code());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Argument(format!("dimension too large for `{name}`")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint, converting stored values to `S` when dtypes differ.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Load("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Load(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Load("parameter name is not UTF-8".into()))?
                .to_string();
            let dtype = DType::from_code(r.u8()?)
                .ok_or_else(|| Error::Load(format!("unknown dtype code for `{name}`")))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * dtype.size_of())?;
            let data: Vec<S> = match dtype {
                d if d == S::DTYPE => raw.chunks(d.size_of()).map(S::read_le).collect(),
                DType::F32 => raw.chunks(4).map(|c| S::of(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks(8).map(|c| S::of(f64::read_le(c))).collect(),
            };
            let t = Tensor::new(shape, data).map_err(|e| Error::Load(format!("`{name}`: {e}")))?;
            if entries.insert(name.clone(), t).is_some() {
                return Err(Error::Load(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Load("trailing bytes after last entry".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

impl<S: Scalar> FromIterator<(String, Tensor<S>)> for ParameterStore<S> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<S>)>>(iter: I) -> Self {
        Self { entries: iter.into_iter().collect() }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Load("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("ab", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
        let b = s.to_checkpoint_bytes().unwrap();
        let mut want = b"R2TC".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&[0, 1]);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn rejects_corruption() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("w", Tensor::zeros(&[2, 2]));
        let b = s.to_checkpoint_bytes().unwrap();
        assert!(ParameterStore::<f64>::from_checkpoint_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(ParameterStore::<f64>::from_checkpoint_bytes(&bad).is_err());
        let mut long = b;
        long.push(0);
        assert!(ParameterStore::<f64>::from_checkpoint_bytes(&long).is_err());
    }

    #[test]
    fn cross_dtype_load() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("w", Tensor::from_f64(&[3], &[0.5, 1.25, -4.0]).unwrap());
        let b = s.to_checkpoint_bytes().unwrap();
        let wide = ParameterStore::<f64>::from_checkpoint_bytes(&b).unwrap();
        assert_eq!(wide.get("w").unwrap().data(), &[0.5, 1.25, -4.0]);
    }

    proptest! {
        #[test]
        fn bytes_roundtrip(
            entries in prop::collection::btree_map(
                "[a-z][a-z0-9._]{0,12}",
                (prop::collection::vec(1usize..4, 1..3), any::<u64>()),
                0..6,
            )
        ) {
            let mut s = ParameterStore::<f64>::new();
            for (name, (shape, seed)) in entries {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|i| f64::from_bits(seed.rotate_left(i as u32) & 0x7fef_ffff_ffff_ffff)).collect();
                s.insert(name, Tensor::new(shape, data).unwrap());
            }
            let bytes = s.to_checkpoint_bytes().unwrap();
            let back = ParameterStore::<f64>::from_checkpoint_bytes(&bytes).unwrap();
            prop_assert_eq!(back.fingerprint(), s.fingerprint());
            prop_assert_eq!(back.to_checkpoint_bytes().unwrap(), bytes);
        }
    }
}
