use crate::error::{Error, Result};
use crate::site::Site;

/// Row-major `[seq_len, vocab]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub(crate) seq_len: usize,
    pub(crate) vocab: usize,
    pub(crate) data: Vec<f32>,
}

impl Logits {
    pub fn from_rows(rows: Vec<Vec<f32>>) -> Self {
        let seq_len = rows.len();
        let vocab = rows.first().map_or(0, Vec::len);
        let data = rows.into_iter().flatten().collect();
        Self {
            seq_len,
            vocab,
            data,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, pos: usize) -> &[f32] {
        &self.data[pos * self.vocab..(pos + 1) * self.vocab]
    }

    pub fn try_row(&self, pos: usize) -> Result<&[f32]> {
        if pos >= self.seq_len {
            return Err(Error::IndexOutOfBounds(format!(
                "position {pos} (sequence length {})",
                self.seq_len
            )));
        }
        Ok(self.row(pos))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Everything a forward pass wrote into, or read from, the residual stream.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub(crate) tokens: Vec<u32>,
    pub(crate) n_heads: usize,
    pub(crate) d_model: usize,
    pub(crate) d_head: usize,
    pub(crate) resid_pre: Vec<Vec<f32>>,
    pub(crate) resid_mid: Vec<Vec<f32>>,
    pub(crate) resid_post: Vec<Vec<f32>>,
    /// Indexed `layer * n_heads + head`, each `[seq, d_model]`.
    pub(crate) head_out: Vec<Vec<f32>>,
    /// Indexed `layer * n_heads + head`, each `[seq, seq]`.
    pub(crate) attn_pattern: Vec<Vec<f32>>,
    /// Indexed `layer * n_heads + head`, each `[seq, d_head]`.
    pub(crate) value_vec: Vec<Vec<f32>>,
    pub(crate) ffn_out: Vec<Vec<f32>>,
}

impl ActivationCache {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_layers(&self) -> usize {
        self.resid_pre.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub(crate) fn check_pos(&self, pos: usize) -> Result<()> {
        if pos >= self.seq_len() {
            return Err(Error::IndexOutOfBounds(format!(
                "position {pos} (sequence length {})",
                self.seq_len()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.n_layers() {
            return Err(Error::IndexOutOfBounds(format!(
                "layer {layer} (n_layers {})",
                self.n_layers()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_site(&self, site: Site) -> Result<()> {
        self.check_layer(site.layer())?;
        if let Site::Head { head, .. } = site {
            if head >= self.n_heads {
                return Err(Error::IndexOutOfBounds(format!(
                    "head {head} (n_heads {})",
                    self.n_heads
                )));
            }
        }
        Ok(())
    }

    fn row<'a>(&self, block: &'a [f32], pos: usize) -> &'a [f32] {
        &block[pos * self.d_model..(pos + 1) * self.d_model]
    }

    pub fn resid_pre(&self, layer: usize, pos: usize) -> &[f32] {
        self.row(&self.resid_pre[layer], pos)
    }

    pub fn resid_mid(&self, layer: usize, pos: usize) -> &[f32] {
        self.row(&self.resid_mid[layer], pos)
    }

    pub fn resid_post(&self, layer: usize, pos: usize) -> &[f32] {
        self.row(&self.resid_post[layer], pos)
    }

    /// Residual stream after the last block at `pos`.
    pub fn final_resid(&self, pos: usize) -> &[f32] {
        self.resid_post(self.n_layers() - 1, pos)
    }

    pub fn head_out(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        self.row(&self.head_out[layer * self.n_heads + head], pos)
    }

    pub fn ffn_out(&self, layer: usize, pos: usize) -> &[f32] {
        self.row(&self.ffn_out[layer], pos)
    }

    /// Attention row of query `q` (length `seq_len`).
    pub fn attn_row(&self, layer: usize, head: usize, q: usize) -> &[f32] {
        let n = self.seq_len();
        &self.attn_pattern[layer * self.n_heads + head][q * n..(q + 1) * n]
    }

    pub fn attn(&self, layer: usize, head: usize, q: usize, k: usize) -> f32 {
        self.attn_row(layer, head, q)[k]
    }

    pub fn value_vec(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        let dh = self.d_head;
        &self.value_vec[layer * self.n_heads + head][pos * dh..(pos + 1) * dh]
    }

    /// The full `[seq, d_model]` block a site writes (or, for `ResidPre`, the stream itself).
    pub fn site_block(&self, site: Site) -> Result<&[f32]> {
        self.check_site(site)?;
        Ok(match site {
            Site::ResidPre { layer } => &self.resid_pre[layer],
            Site::Head { layer, head } => &self.head_out[layer * self.n_heads + head],
            Site::Ffn { layer } => &self.ffn_out[layer],
        })
    }

    pub fn site_row(&self, site: Site, pos: usize) -> Result<&[f32]> {
        self.check_pos(pos)?;
        let block = self.site_block(site)?;
        Ok(self.row(block, pos))
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub logits: Logits,
    pub cache: Option<ActivationCache>,
}

impl ForwardResult {
    pub fn cache(&self) -> Result<&ActivationCache> {
        self.cache.as_ref().ok_or(Error::CacheMissing)
    }
}
