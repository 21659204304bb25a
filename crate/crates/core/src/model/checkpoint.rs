//! Tensor archive: an 8-byte little-endian header length `N`, `N` bytes of UTF-8 JSON
//! mapping tensor names to `{"dtype": "F32", "shape": [..], "data_offsets": [begin, end]}`
//! (offsets relative to the end of the header), then the little-endian payloads.
//! The optional `"__metadata__"` entry holds string pairs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{LayerParams, Model, ModelConfig};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub metadata: BTreeMap<String, String>,
    /// In payload order.
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

impl TensorArchive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.into(), serde_json::to_value(&self.metadata)?);
        }
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            if name == METADATA_KEY {
                return Err(Error::Checkpoint(format!(
                    "'{METADATA_KEY}' is a reserved name"
                )));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Shape(format!(
                    "tensor {name}: shape {:?} does not match {} values",
                    t.shape,
                    t.data.len()
                )));
            }
            let end = offset + 4 * t.data.len() as u64;
            let entry = Entry {
                dtype: "F32".into(),
                shape: t.shape.clone(),
                data_offsets: [offset, end],
            };
            if header
                .insert(name.clone(), serde_json::to_value(entry)?)
                .is_some()
            {
                return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
            }
            offset = end;
        }
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and validates an archive; the header is checked in full before any
    /// payload is decoded.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 8 {
            return Err(bad(format!(
                "file is {} bytes, too short for a header",
                bytes.len()
            )));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if n > (bytes.len() - 8) as u64 {
            return Err(bad(format!(
                "header length {n} exceeds the {} bytes that follow",
                bytes.len() - 8
            )));
        }
        let n = n as usize;
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..8 + n])
                .map_err(|e| bad(format!("malformed header: {e}")))?;
        let data = &bytes[8 + n..];

        let mut metadata = BTreeMap::new();
        let mut entries = Vec::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                metadata = serde_json::from_value(value)
                    .map_err(|e| bad(format!("metadata must map strings to strings: {e}")))?;
                continue;
            }
            let entry: Entry = serde_json::from_value(value)
                .map_err(|e| bad(format!("tensor {name}: malformed entry: {e}")))?;
            if entry.dtype != "F32" {
                return Err(bad(format!(
                    "tensor {name}: unsupported dtype {}",
                    entry.dtype
                )));
            }
            let [begin, end] = entry.data_offsets;
            let count = entry
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| bad(format!("tensor {name}: shape overflows")))?;
            if end < begin || end - begin != count.saturating_mul(4) {
                return Err(bad(format!(
                    "tensor {name}: offsets [{begin}, {end}) do not hold shape {:?}",
                    entry.shape
                )));
            }
            entries.push((name, entry));
        }
        entries.sort_by_key(|(_, e)| (e.data_offsets[0], e.data_offsets[1]));
        let mut prev_end = 0u64;
        let mut prev_name = "";
        for (name, e) in &entries {
            if e.data_offsets[0] < prev_end {
                return Err(bad(format!("tensors {prev_name} and {name} overlap")));
            }
            prev_end = e.data_offsets[1];
            prev_name = name;
        }
        if prev_end > data.len() as u64 {
            return Err(bad(format!(
                "truncated: payload needs {prev_end} bytes, file has {}",
                data.len()
            )));
        }
        let tensors = entries
            .into_iter()
            .map(|(name, e)| {
                let raw = &data[e.data_offsets[0] as usize..e.data_offsets[1] as usize];
                let values = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                (
                    name,
                    Tensor {
                        shape: e.shape,
                        data: values,
                    },
                )
            })
            .collect();
        Ok(Self { metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::file(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn layer_name(i: usize, tensor: &str) -> String {
    format!("layers.{i}.{tensor}")
}

impl Model {
    pub fn to_archive(&self) -> TensorArchive {
        let m = self.config.d_model;
        let v = self.config.vocab_size;
        let mut tensors = vec![(
            "embedding".to_string(),
            Tensor {
                shape: vec![v, m],
                data: self.embedding.clone(),
            },
        )];
        let shapes = LayerParams::shapes(&self.config);
        for (i, layer) in self.layers.iter().enumerate() {
            for (t, (name, shape)) in layer.tensors().into_iter().zip(&shapes) {
                tensors.push((
                    layer_name(i, name),
                    Tensor {
                        shape: shape.clone(),
                        data: t.clone(),
                    },
                ));
            }
        }
        tensors.push((
            "final_norm".into(),
            Tensor {
                shape: vec![m],
                data: self.final_norm.clone(),
            },
        ));
        tensors.push((
            "head".into(),
            Tensor {
                shape: vec![v, m],
                data: self.head.clone(),
            },
        ));
        TensorArchive {
            metadata: self.config.to_metadata().into_iter().collect(),
            tensors,
        }
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let config = ModelConfig::from_metadata(&archive.metadata)?;
        let take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let t = archive
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, config expects {shape:?}",
                    t.shape
                )));
            }
            Ok(t.data.clone())
        };
        let (m, v) = (config.d_model, config.vocab_size);
        let shapes = LayerParams::shapes(&config);
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut p = LayerParams::zeros(&config);
            for (slot, (name, shape)) in p.tensors_mut().into_iter().zip(&shapes) {
                *slot = take(&layer_name(i, name), shape)?;
            }
            layers.push(p);
        }
        let expected = 3 + config.n_layers * shapes.len();
        if archive.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "archive holds {} tensors, the config needs {expected}",
                archive.tensors.len()
            )));
        }
        let model = Model {
            embedding: take("embedding", &[v, m])?,
            final_norm: take("final_norm", &[m])?,
            head: take("head", &[v, m])?,
            layers,
            config,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&TensorArchive::read(path)?)
    }
}
