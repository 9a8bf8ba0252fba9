#![allow(dead_code)]

use chunkcomp::local::ChunkState;
use chunkcomp::model::{HeadKv, ModelConfig};
use chunkcomp::tensor::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn small_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let n_heads = rng.random_range(1..=2);
    let d_head = [4, 8][rng.random_range(0..2)];
    ModelConfig {
        n_layers: rng.random_range(1..=3),
        n_heads,
        d_model: n_heads * d_head,
        d_head,
        vocab_size: rng.random_range(16..=64),
        max_train_positions: 128,
        ff_mult: 2,
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// A state with the given scores whose K and V rows hold their own index,
/// so selections can be read back from the cache contents.
pub fn state_with_scores(scores: Vec<Vec<Vec<f64>>>, context_len: usize, query_len: usize) -> ChunkState {
    let total = context_len + query_len;
    let tagged = || {
        let mut m = Matrix::zeros(total, 2);
        for r in 0..total {
            m.set(r, 0, r as f64);
        }
        m
    };
    let kv = scores
        .iter()
        .map(|l| l.iter().map(|_| HeadKv { k: tagged(), v: tagged() }).collect())
        .collect();
    ChunkState {
        chunk_index: 0,
        context_len,
        query_len,
        kv,
        attention: Vec::new(),
        logits: Matrix::zeros(total, 1),
        scores,
        q_obs: query_len,
        self_information: 0.0,
    }
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-12
}

/// One layer, one head, zero Q/K so attention is uniform over the causal
/// prefix. V copies the one-hot token embedding into the second half of the
/// residual and the head reads that half, so the logits rank tokens by how
/// often they occur among the visible rows.
pub fn frequency_model(vocab: usize, max_positions: usize) -> chunkcomp::model::Model {
    use chunkcomp::model::{Model, ModelWeights};
    let d = 2 * vocab;
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 1,
        d_model: d,
        d_head: d,
        vocab_size: vocab,
        max_train_positions: max_positions,
        ff_mult: 1,
    };
    let mut w = ModelWeights::zeros(cfg).unwrap();
    for t in 0..vocab {
        w.token_embedding.set(t, t, 1.0);
        w.layers[0].w_v.set(t, vocab + t, 1.0);
        w.lm_head.set(vocab + t, t, 50.0);
    }
    w.layers[0].w_o = Matrix::identity(d);
    Model::new(w).unwrap()
}
