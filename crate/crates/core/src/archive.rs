//! Flat named-tensor archive, stored on disk in the safetensors container.

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, PositionalScheme};
use crate::error::{Error, Result};

/// A dense f32 tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Map from canonical tensor name to tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorArchive {
    entries: BTreeMap<String, Tensor>,
}

impl NamedTensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parse a safetensors buffer. Half-precision entries are upcast to f32.
    pub fn from_safetensors(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Safetensors(e.to_string()))?;
        let mut archive = Self::new();
        for (name, view) in st.tensors() {
            let data = decode(&name, &view)?;
            archive.insert(name, Tensor::new(view.shape().to_vec(), data)?);
        }
        Ok(archive)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_safetensors(&bytes)
    }

    /// Serialize as f32 safetensors; tensor order is by name.
    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        let raw: Vec<(&str, &[usize], Vec<u8>)> = self
            .entries
            .iter()
            .map(|(n, t)| {
                let bytes = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                (n.as_str(), t.shape.as_slice(), bytes)
            })
            .collect();
        let views = raw
            .iter()
            .map(|(n, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.to_vec(), bytes)
                    .map(|v| (*n, v))
                    .map_err(|e| Error::Safetensors(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, &None).map_err(|e| Error::Safetensors(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_safetensors()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over names, shapes and little-endian data, in name order.
    /// Independent of the on-disk dtype or header layout.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape.len() as u64).to_le_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Check every required tensor is present with the expected shape.
    pub fn check_complete(&self, config: &ModelConfig) -> Result<()> {
        for (name, expected) in required_tensors(config) {
            let t = self
                .get(&name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape != expected {
                return Err(Error::ShapeMismatch {
                    name,
                    expected,
                    got: t.shape.clone(),
                });
            }
        }
        for (name, expected) in optional_tensors(config) {
            if let Some(t) = self.get(&name) {
                if t.shape != expected {
                    return Err(Error::ShapeMismatch {
                        name,
                        expected,
                        got: t.shape.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn decode(name: &str, view: &TensorView<'_>) -> Result<Vec<f32>> {
    let bytes = view.data();
    let out = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        other => {
            return Err(Error::UnsupportedScheme(format!(
                "tensor `{name}` has dtype {other:?}; expected F32, F16 or BF16"
            )))
        }
    };
    Ok(out)
}

/// Canonical names and shapes every archive must contain for `config`.
pub fn required_tensors(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, h, dh, m) = (config.d_model, config.n_heads, config.d_head, config.d_mlp);
    let mut out = vec![("embed.W_E".to_string(), vec![config.vocab_size, d])];
    if config.positional_scheme == PositionalScheme::Learned {
        out.push(("pos_embed.W_pos".into(), vec![config.max_seq_len, d]));
    }
    for l in 0..config.n_layers {
        let p = format!("blocks.{l}");
        out.extend([
            (format!("{p}.ln1.w"), vec![d]),
            (format!("{p}.ln1.b"), vec![d]),
            (format!("{p}.attn.W_Q"), vec![h, d, dh]),
            (format!("{p}.attn.W_K"), vec![h, d, dh]),
            (format!("{p}.attn.W_V"), vec![h, d, dh]),
            (format!("{p}.attn.W_O"), vec![h, dh, d]),
            (format!("{p}.attn.b_Q"), vec![h, dh]),
            (format!("{p}.attn.b_K"), vec![h, dh]),
            (format!("{p}.attn.b_V"), vec![h, dh]),
            (format!("{p}.attn.b_O"), vec![d]),
            (format!("{p}.ln2.w"), vec![d]),
            (format!("{p}.ln2.b"), vec![d]),
            (format!("{p}.mlp.W_in"), vec![d, m]),
            (format!("{p}.mlp.b_in"), vec![m]),
            (format!("{p}.mlp.W_out"), vec![m, d]),
            (format!("{p}.mlp.b_out"), vec![d]),
        ]);
    }
    out.push(("ln_final.w".into(), vec![d]));
    out.push(("ln_final.b".into(), vec![d]));
    if !config.tie_unembedding {
        out.push(("unembed.W_U".into(), vec![d, config.vocab_size]));
    }
    out
}

pub fn optional_tensors(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    vec![
        ("embed_ln.w".into(), vec![config.d_model]),
        ("embed_ln.b".into(), vec![config.d_model]),
    ]
}
