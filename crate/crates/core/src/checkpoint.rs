//! Single-file checkpoints: a JSON header (tag, architecture metadata,
//! store names) followed by one parameter dump per named store.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use dcaa_autograd::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DCAACKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    tag: String,
    meta: serde_json::Value,
    stores: Vec<String>,
}

#[derive(Debug)]
pub struct Checkpoint {
    /// Which artifact this is, e.g. `"M0"`, `"fseg"`, `"cgst"`.
    pub tag: String,
    pub meta: serde_json::Value,
    pub stores: Vec<(String, ParamStore)>,
}

impl Checkpoint {
    pub fn new(tag: impl Into<String>, meta: &impl Serialize) -> Self {
        Checkpoint {
            tag: tag.into(),
            meta: serde_json::to_value(meta).expect("metadata serialises"),
            stores: Vec::new(),
        }
    }

    pub fn with_store(mut self, name: impl Into<String>, store: &ParamStore) -> Self {
        self.stores.push((name.into(), store.clone()));
        self
    }

    pub fn store(&self, name: &str) -> Option<&ParamStore> {
        self.stores.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone()).map_err(|e| Error::Invalid(format!("checkpoint metadata: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let header = Header {
            version: VERSION,
            tag: self.tag.clone(),
            meta: self.meta.clone(),
            stores: self.stores.iter().map(|(n, _)| n.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let tmp = path.with_extension("tmp");
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC).map_err(|e| Error::io(&tmp, e))?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(|e| Error::io(&tmp, e))?;
        w.write_all(&json).map_err(|e| Error::io(&tmp, e))?;
        for (_, s) in &self.stores {
            s.write_to(&mut w).map_err(|e| ck(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| ck(e.to_string()))?;
        if &magic != MAGIC {
            return Err(ck("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|e| ck(e.to_string()))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 24 {
            return Err(ck("header too large".into()));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|e| ck(e.to_string()))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| ck(format!("header: {e}")))?;
        if header.version != VERSION {
            return Err(ck(format!("unsupported version {}", header.version)));
        }
        let mut stores = Vec::new();
        for name in header.stores {
            let s = ParamStore::read_from(&mut r).map_err(|e| ck(format!("store `{name}`: {e}")))?;
            stores.push((name, s));
        }
        Ok(Checkpoint {
            tag: header.tag,
            meta: header.meta,
            stores,
        })
    }

    /// Loads and checks the tag.
    pub fn load_tagged(path: &Path, tag: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.tag != tag {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("expected tag `{tag}`, found `{}`", c.tag),
            });
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dcaa_autograd::Tensor;

    #[test]
    fn round_trip_and_tag_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut a = ParamStore::new();
        a.add("x.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE]));
        let mut b = ParamStore::new();
        b.add("y", Tensor::scalar(4.0));
        Checkpoint::new("M0", &serde_json::json!({"k": 3}))
            .with_store("seg", &a)
            .with_store("bank", &b)
            .save(&p)
            .unwrap();
        let c = Checkpoint::load_tagged(&p, "M0").unwrap();
        assert_eq!(c.store("seg").unwrap().checksum(), a.checksum());
        assert_eq!(c.store("bank").unwrap().checksum(), b.checksum());
        assert_eq!(c.meta["k"], 3);
        assert!(Checkpoint::load_tagged(&p, "M1").is_err());
    }

    #[test]
    fn garbage_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"DCAACKPT\x05\x00\x00\x00\x00\x00\x00\x00{{{{{").unwrap();
        let e = Checkpoint::load(&p).unwrap_err().to_string();
        assert!(e.contains("bad.ckpt"), "{e}");
    }
}
