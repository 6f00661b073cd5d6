//! Small randomly initialised models for tests and the built-in self-test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::{optional_tensors, required_tensors, NamedTensorArchive, Tensor};
use crate::config::{ActivationFn, ModelConfig, PositionalScheme};
use crate::error::Result;
use crate::model::Model;

/// 2 layers, 4 heads, d_model 16, vocab 50, learned positions.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 16,
        d_head: 4,
        d_mlp: 32,
        vocab_size: 50,
        max_seq_len: 128,
        positional_scheme: PositionalScheme::Learned,
        activation_fn: ActivationFn::GeluTanh,
        layernorm_epsilon: 1e-5,
        tie_unembedding: false,
    }
}

/// Same shapes with ALiBi, exact GELU and tied unembedding.
pub fn tiny_alibi_config() -> ModelConfig {
    ModelConfig {
        positional_scheme: PositionalScheme::Alibi,
        activation_fn: ActivationFn::GeluExact,
        tie_unembedding: true,
        n_heads: 2,
        d_head: 8,
        ..tiny_config()
    }
}

/// Archive with every tensor drawn uniformly; layernorm gains near 1.
/// Includes an embedding layernorm when `with_embed_ln`.
pub fn random_archive(config: &ModelConfig, seed: u64, with_embed_ln: bool) -> NamedTensorArchive {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut archive = NamedTensorArchive::new();
    let mut names = required_tensors(config);
    if with_embed_ln {
        names.extend(optional_tensors(config));
    }
    for (name, shape) in names {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.ends_with(".w") {
            (0..n).map(|_| 1.0 + rng.gen_range(-0.2..0.2)).collect()
        } else if name.ends_with(".b") || name.contains(".b_") {
            (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()
        } else {
            let fan_in = shape[shape.len() - 2].max(1) as f32;
            let s = 1.5 / fan_in.sqrt();
            (0..n).map(|_| rng.gen_range(-s..s)).collect()
        };
        archive.insert(name, Tensor { shape, data });
    }
    archive
}

pub fn random_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let embed_ln = config.positional_scheme == PositionalScheme::Alibi;
    Model::load(&random_archive(config, seed, embed_ln), config.clone())
}

/// Archive with zeroed attention and MLP weights (layernorms left random).
pub fn zero_blocks_archive(config: &ModelConfig, seed: u64) -> NamedTensorArchive {
    let mut archive = random_archive(config, seed, false);
    let names: Vec<String> = archive
        .names()
        .filter(|n| n.contains(".attn.") || n.contains(".mlp."))
        .map(str::to_string)
        .collect();
    for n in names {
        archive.get_mut(&n).unwrap().data.fill(0.0);
    }
    archive
}

/// Random token ids in `0..vocab`.
pub fn random_tokens(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Random archive whose query/key weights are zero, so every attention row
/// is uniform over its causal prefix (learned positions only).
pub fn uniform_attention_archive(config: &ModelConfig, seed: u64) -> NamedTensorArchive {
    let mut archive = random_archive(config, seed, false);
    for l in 0..config.n_layers {
        for t in ["W_Q", "W_K", "b_Q", "b_K"] {
            archive.get_mut(&format!("blocks.{l}.attn.{t}")).unwrap().data.fill(0.0);
        }
    }
    archive
}

/// Orthonormal, zero-mean vectors in R^d (Helmert basis), `count <= d - 1`.
pub fn helmert_rows(d: usize, count: usize) -> Vec<Vec<f32>> {
    assert!(count < d);
    (1..=count)
        .map(|k| {
            let norm = ((k * (k + 1)) as f32).sqrt();
            (0..d)
                .map(|i| match i.cmp(&k) {
                    std::cmp::Ordering::Less => 1.0 / norm,
                    std::cmp::Ordering::Equal => -(k as f32) / norm,
                    std::cmp::Ordering::Greater => 0.0,
                })
                .collect()
        })
        .collect()
}

/// One layer, one head with `d_head = d_model = 16`, tied embeddings made of
/// orthonormal zero-mean rows, identity OV, zero QK and MLP, unit layernorms.
/// Every token's probe maps back onto itself.
pub fn identity_ov_archive(vocab: usize) -> (NamedTensorArchive, ModelConfig) {
    let d = 16;
    let config = ModelConfig {
        n_layers: 1,
        n_heads: 1,
        d_model: d,
        d_head: d,
        d_mlp: 8,
        vocab_size: vocab,
        max_seq_len: 32,
        positional_scheme: PositionalScheme::Learned,
        activation_fn: ActivationFn::GeluTanh,
        layernorm_epsilon: 1e-5,
        tie_unembedding: true,
    };
    let mut archive = NamedTensorArchive::new();
    for (name, shape) in required_tensors(&config) {
        let n = shape.iter().product();
        let mut data = vec![0.0f32; n];
        if name.ends_with(".w") {
            data.fill(1.0);
        }
        if name.ends_with("W_V") || name.ends_with("W_O") {
            for i in 0..d {
                data[i * d + i] = 1.0;
            }
        }
        if name == "embed.W_E" {
            data = helmert_rows(d, vocab).into_iter().flatten().collect();
        }
        archive.insert(name, Tensor { shape, data });
    }
    (archive, config)
}
