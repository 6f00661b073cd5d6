//! Loaded transformer weights.

use std::path::Path;

use crate::archive::NamedTensorArchive;
use crate::config::{ModelConfig, PositionalScheme};
use crate::error::{Error, Result};
use crate::ops::{alibi_slopes, LayerNorm};

/// Weights of one attention + MLP block. Matrices are row-major in the
/// canonical orientation (`W_Q[h]` is `[d_model, d_head]`, `W_O[h]` is `[d_head, d_model]`).
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln1: LayerNorm,
    pub w_q: Vec<f32>,
    pub w_k: Vec<f32>,
    pub w_v: Vec<f32>,
    pub w_o: Vec<f32>,
    pub b_q: Vec<f32>,
    pub b_k: Vec<f32>,
    pub b_v: Vec<f32>,
    pub b_o: Vec<f32>,
    pub ln2: LayerNorm,
    pub w_in: Vec<f32>,
    pub b_in: Vec<f32>,
    pub w_out: Vec<f32>,
    pub b_out: Vec<f32>,
}

/// An immutable, shareable model. Safe to run many forwards concurrently.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub(crate) w_e: Vec<f32>,
    pub(crate) w_pos: Option<Vec<f32>>,
    pub(crate) embed_ln: Option<LayerNorm>,
    pub(crate) blocks: Vec<BlockWeights>,
    pub(crate) ln_final: LayerNorm,
    /// `[d_model, vocab]`; a transposed copy of `W_E` when tied.
    pub(crate) w_u: Vec<f32>,
    pub(crate) alibi: Option<Vec<f32>>,
    fingerprint: String,
}

impl Model {
    pub fn load(archive: &NamedTensorArchive, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        archive.check_complete(&config)?;
        let take = |name: &str| -> Result<Vec<f32>> {
            archive
                .get(name)
                .map(|t| t.data.clone())
                .ok_or_else(|| Error::MissingTensor(name.to_string()))
        };
        let eps = config.layernorm_epsilon;
        let ln = |prefix: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                weight: take(&format!("{prefix}.w"))?,
                bias: take(&format!("{prefix}.b"))?,
                eps,
            })
        };

        let embed_ln = match (archive.get("embed_ln.w"), archive.get("embed_ln.b")) {
            (Some(_), Some(_)) => Some(ln("embed_ln")?),
            (None, None) => None,
            (Some(_), None) => return Err(Error::MissingTensor("embed_ln.b".into())),
            (None, Some(_)) => return Err(Error::MissingTensor("embed_ln.w".into())),
        };

        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("blocks.{l}");
            blocks.push(BlockWeights {
                ln1: ln(&format!("{p}.ln1"))?,
                w_q: take(&format!("{p}.attn.W_Q"))?,
                w_k: take(&format!("{p}.attn.W_K"))?,
                w_v: take(&format!("{p}.attn.W_V"))?,
                w_o: take(&format!("{p}.attn.W_O"))?,
                b_q: take(&format!("{p}.attn.b_Q"))?,
                b_k: take(&format!("{p}.attn.b_K"))?,
                b_v: take(&format!("{p}.attn.b_V"))?,
                b_o: take(&format!("{p}.attn.b_O"))?,
                ln2: ln(&format!("{p}.ln2"))?,
                w_in: take(&format!("{p}.mlp.W_in"))?,
                b_in: take(&format!("{p}.mlp.b_in"))?,
                w_out: take(&format!("{p}.mlp.W_out"))?,
                b_out: take(&format!("{p}.mlp.b_out"))?,
            });
        }

        let w_e = take("embed.W_E")?;
        let w_u = if config.tie_unembedding {
            transpose(&w_e, config.vocab_size, config.d_model)
        } else {
            take("unembed.W_U")?
        };
        let (w_pos, alibi) = match config.positional_scheme {
            PositionalScheme::Learned => (Some(take("pos_embed.W_pos")?), None),
            PositionalScheme::Alibi => (None, Some(alibi_slopes(config.n_heads))),
        };

        Ok(Self {
            w_e,
            w_pos,
            embed_ln,
            blocks,
            ln_final: ln("ln_final")?,
            w_u,
            alibi,
            fingerprint: archive.digest(),
            config,
        })
    }

    /// Load `model.safetensors` + `config.json` from a directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = ModelConfig::from_json_file(dir.join("config.json"))?;
        let archive = NamedTensorArchive::load(dir.join("model.safetensors"))?;
        Self::load(&archive, config)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Digest of the archive the model was loaded from.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.config.n_heads
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn block(&self, layer: usize) -> &BlockWeights {
        &self.blocks[layer]
    }

    pub fn ln_final(&self) -> &LayerNorm {
        &self.ln_final
    }

    pub fn embed_ln(&self) -> Option<&LayerNorm> {
        self.embed_ln.as_ref()
    }

    pub fn token_embedding(&self, token: u32) -> &[f32] {
        let d = self.config.d_model;
        &self.w_e[token as usize * d..(token as usize + 1) * d]
    }

    pub fn position_embedding(&self, pos: usize) -> Option<&[f32]> {
        let d = self.config.d_model;
        self.w_pos.as_ref().map(|w| &w[pos * d..(pos + 1) * d])
    }

    /// Unembedding as `[d_model, vocab]`.
    pub fn unembed(&self) -> &[f32] {
        &self.w_u
    }

    pub fn alibi_slopes(&self) -> Option<&[f32]> {
        self.alibi.as_deref()
    }

    /// Residual-stream input to block 0 for `token` at `pos`
    /// (embedding, learned position, optional embedding layernorm).
    pub fn embed_token(&self, token: u32, pos: usize) -> Vec<f32> {
        let mut x = self.token_embedding(token).to_vec();
        if let Some(p) = self.position_embedding(pos) {
            crate::ops::add_assign(&mut x, p);
        }
        if let Some(ln) = &self.embed_ln {
            let mut y = vec![0.0; x.len()];
            ln.apply(&x, &mut y);
            x = y;
        }
        x
    }

    /// Project one residual vector to logits through the final layernorm.
    pub fn unembed_residual(&self, resid: &[f32]) -> Vec<f32> {
        let mut normed = vec![0.0; resid.len()];
        self.ln_final.apply(resid, &mut normed);
        let mut logits = vec![0.0; self.config.vocab_size];
        crate::ops::vec_mat_acc(&normed, &self.w_u, &mut logits);
        logits
    }
}

fn transpose(m: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}
