//! Parameter checkpoint file.
//!
//! Layout: one line of compact JSON ([`CheckpointHeader`]) terminated by
//! `\n`, then every tensor listed in the header as raw little-endian `f32`
//! in declaration order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub dtype: String,
    pub seed: u64,
    /// Serialized model specification (layer specs and topology).
    pub model: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    /// Caller-defined metadata (normalization statistics, config hash, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(
        seed: u64,
        model: serde_json::Value,
        named: Vec<(String, Tensor<f32>)>,
        extra: serde_json::Value,
    ) -> Self {
        let (entries, tensors) = named
            .into_iter()
            .map(|(name, t)| (TensorEntry { name, shape: t.shape().to_vec() }, t))
            .unzip();
        Self {
            header: CheckpointHeader {
                schema_version: CHECKPOINT_SCHEMA,
                dtype: "f32".into(),
                seed,
                model,
                tensors: entries,
                extra,
            },
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.header.tensors.iter().position(|e| e.name == name).map(|i| &self.tensors[i])
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), NnError> {
        let header = serde_json::to_string(&self.header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        for t in &self.tensors {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, NnError> {
        let mut r = BufReader::new(r);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(NnError::Checkpoint("missing header line".into()));
        }
        line.pop();
        let header: CheckpointHeader =
            serde_json::from_slice(&line).map_err(|e| NnError::Checkpoint(format!("bad header: {e}")))?;
        if header.schema_version != CHECKPOINT_SCHEMA {
            return Err(NnError::Schema { found: header.schema_version, expected: CHECKPOINT_SCHEMA });
        }
        if header.dtype != "f32" {
            return Err(NnError::Checkpoint(format!("unsupported dtype {}", header.dtype)));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| NnError::Checkpoint(format!("payload truncated at tensor {}", e.name)))?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(Tensor::new(&e.shape, data)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(NnError::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
