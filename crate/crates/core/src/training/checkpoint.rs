use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};
use crate::tokenizer::TOKEN_ORDER;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    /// Byte offsets of each blob from the end of the header line.
    offsets: Vec<u64>,
    step: usize,
    epoch: usize,
    config_hash: String,
    token_order: String,
    kind: String,
    config: serde_json::Value,
}

/// Named tensors plus the run position and the config that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub step: usize,
    pub epoch: usize,
    pub config_hash: String,
    pub token_order: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        let hash = config_hash(&config.to_string());
        Self {
            kind: kind.to_string(),
            step: 0,
            epoch: 0,
            config_hash: hash,
            token_order: TOKEN_ORDER.to_string(),
            config,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    /// Adds every tensor of `store` under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            let copy = Tensor::from_parts(t.shape().to_vec(), t.values().to_vec());
            self.push(format!("{prefix}{name}"), copy);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies `{prefix}{name}` into every tensor of `store`, failing on the
    /// first missing or mis-shaped tensor.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let key = format!("{prefix}{name}");
            let t = self
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing tensor `{key}`")))?;
            store.assign(&name, t)?;
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offsets = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (_, t) in &self.tensors {
            offsets.push(offset);
            offset += 8 * t.numel() as u64;
        }
        let header = Header {
            names: self.tensors.iter().map(|(n, _)| n.clone()).collect(),
            shapes: self.tensors.iter().map(|(_, t)| t.shape().to_vec()).collect(),
            offsets,
            step: self.step,
            epoch: self.epoch,
            config_hash: self.config_hash.clone(),
            token_order: self.token_order.clone(),
            kind: self.kind.clone(),
            config: self.config.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(offset as usize);
        for (_, t) in &self.tensors {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Format {
                offset: line.len() as u64,
                message: "checkpoint header is not newline-terminated".into(),
            });
        }
        let header: Header = serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| Error::Format {
            offset: 0,
            message: format!("bad checkpoint header: {e}"),
        })?;
        if header.token_order != TOKEN_ORDER {
            return Err(Error::Checkpoint(format!(
                "checkpoint token order `{}` differs from `{TOKEN_ORDER}`",
                header.token_order
            )));
        }
        if header.names.len() != header.shapes.len() || header.names.len() != header.offsets.len() {
            return Err(Error::Format {
                offset: 0,
                message: "checkpoint header lists disagree in length".into(),
            });
        }
        let mut blob = Vec::new();
        reader.read_to_end(&mut blob)?;
        let base = line.len() as u64;
        let mut tensors = Vec::with_capacity(header.names.len());
        for ((name, shape), &off) in header.names.iter().zip(&header.shapes).zip(&header.offsets) {
            let n: usize = shape.iter().product();
            let start = off as usize;
            let end = start + 8 * n;
            if end > blob.len() {
                return Err(Error::Format {
                    offset: base + blob.len() as u64,
                    message: format!("tensor `{name}` needs bytes {start}..{end}, blob has {}", blob.len()),
                });
            }
            let values = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name.clone(), Tensor::new(shape.clone(), values)?));
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            epoch: header.epoch,
            config_hash: header.config_hash,
            token_order: header.token_order,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = match fs::File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::CheckpointNotFound(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        Self::from_reader(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let mut ck = Checkpoint::new("mae", serde_json::json!({"dim": 8}));
        ck.step = 12;
        ck.push("a", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap());
        ck.push("b", Tensor::scalar(7.0));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_reader(&bytes[..]).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.token_order, "t-major");
    }

    #[test]
    fn truncated_blob_is_format_error() {
        let mut ck = Checkpoint::new("mae", serde_json::Value::Null);
        ck.push("a", Tensor::zeros(&[4]));
        let bytes = ck.to_bytes().unwrap();
        let err = Checkpoint::from_reader(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(err.kind(), "format");
    }

    #[test]
    fn missing_file() {
        let err = Checkpoint::load(Path::new("/nonexistent/missing.ckpt")).unwrap_err();
        assert_eq!(err.kind(), "checkpoint_not_found");
    }

    #[test]
    fn restore_names_offender() {
        let mut ck = Checkpoint::new("mae", serde_json::Value::Null);
        ck.push("w", Tensor::zeros(&[3]));
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[4]));
        let err = ck.restore_store("", &mut store).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        let mut store = ParamStore::new();
        store.insert("v", Tensor::zeros(&[3]));
        let err = ck.restore_store("", &mut store).unwrap_err();
        assert!(err.to_string().contains("`v`"));
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash("a=1"), config_hash("a=1"));
        assert_ne!(config_hash("a=1"), config_hash("a=2"));
        assert_eq!(config_hash("").len(), 16);
    }
}
