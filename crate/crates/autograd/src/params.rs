use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
///
/// Each store carries a process-unique id so a [`crate::Graph`] can bind
/// parameters from several stores (generator, discriminator, frozen
/// segmenter) at once and still route gradients back to the right one.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad parameter file: {0}")]
    Format(String),
    #[error("parameter `{0}` missing from source")]
    Missing(String),
    #[error("parameter `{name}` has shape {got:?}, expected {want:?}")]
    Shape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

const MAGIC: &[u8; 8] = b"DCAAPRM\0";
const FORMAT_VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-normal initialised weight with the given fan-in.
    pub fn add_he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Order-sensitive FNV-1a digest over names, shapes and bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (n, v) in self.names.iter().zip(&self.values) {
            eat(n.as_bytes());
            for d in v.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for x in v.data() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copies every parameter whose name starts with `src_prefix` in `src`
    /// into the parameter named `dst_prefix + rest` here. Returns how many
    /// tensors were copied.
    pub fn copy_prefix(&mut self, src: &ParamStore, src_prefix: &str, dst_prefix: &str) -> Result<usize, StoreError> {
        let mut copied = 0;
        for (name, value) in src.names.iter().zip(&src.values) {
            let Some(rest) = name.strip_prefix(src_prefix) else {
                continue;
            };
            let dst_name = format!("{dst_prefix}{rest}");
            let id = self.find(&dst_name).ok_or_else(|| StoreError::Missing(dst_name.clone()))?;
            let dst = &mut self.values[id.0];
            if dst.shape() != value.shape() {
                return Err(StoreError::Shape {
                    name: dst_name,
                    got: value.shape().to_vec(),
                    want: dst.shape().to_vec(),
                });
            }
            *dst = value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Overwrites all values from `src`, matching by name.
    pub fn load_from(&mut self, src: &ParamStore) -> Result<(), StoreError> {
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let sid = src.find(name).ok_or_else(|| StoreError::Missing(name.clone()))?;
            let v = &src.values[sid.0];
            if v.shape() != self.values[i].shape() {
                return Err(StoreError::Shape {
                    name: name.clone(),
                    got: v.shape().to_vec(),
                    want: self.values[i].shape().to_vec(),
                });
            }
            self.values[i] = v.clone();
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Binary little-endian dump: magic, version, then `(name, shape, data)`
    /// records in store order.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), StoreError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.values.len() as u32)?;
        for (n, v) in self.names.iter().zip(&self.values) {
            w.write_u32::<LittleEndian>(n.len() as u32)?;
            w.write_all(n.as_bytes())?;
            w.write_u32::<LittleEndian>(v.shape().len() as u32)?;
            for &d in v.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &x in v.data() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<ParamStore, StoreError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(StoreError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(StoreError::Format(format!("unsupported version {version}")));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            if len > 4096 {
                return Err(StoreError::Format("parameter name too long".into()));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| StoreError::Format(e.to_string()))?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            if rank > 8 {
                return Err(StoreError::Format(format!("rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            store.add(name, Tensor::from_vec(&shape, data));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_roundtrip_preserves_bits() {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::from_vec(&[2, 2], vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25]));
        s.add("b", Tensor::scalar(7.0));
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(&buf[..]).unwrap();
        assert_eq!(back.checksum(), s.checksum());
        assert_eq!(back.get(ParamId(0)), s.get(ParamId(0)));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::ones(&[4]));
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamStore::read_from(&buf[..]).is_err());
    }

    #[test]
    fn copy_prefix_renames() {
        let mut src = ParamStore::new();
        src.add("enc.c1.w", Tensor::full(&[2], 3.0));
        src.add("dec.w", Tensor::full(&[2], 4.0));
        let mut dst = ParamStore::new();
        dst.add("student.enc.c1.w", Tensor::zeros(&[2]));
        assert_eq!(dst.copy_prefix(&src, "enc.", "student.enc.").unwrap(), 1);
        assert_eq!(dst.get(ParamId(0)).data(), &[3.0, 3.0]);
    }
}
