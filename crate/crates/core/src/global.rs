//! Global stage: the retained chunk caches are concatenated in document
//! order and the query (then each generated token) attends over all of them.
//!
//! Cached keys keep the rotation they received during local encoding. Query
//! rows sit at positions `max_chunk_len..max_chunk_len + w_q`, generated
//! tokens continue from there, and decoding stops before any position would
//! leave the trained budget.

use crate::error::{Error, Result};
use crate::eviction::CompressedKV;
use crate::model::{add_in_place, rms_norm, Model, ModelConfig, TokenId};
use crate::tensor::{argmax, log_softmax_row, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Chunk(usize),
    Query,
    Generated,
}

/// Where a cache row came from and the rotary position it was encoded at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowOrigin {
    pub segment: Segment,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    pub k: Matrix,
    pub v: Matrix,
    pub origins: Vec<RowOrigin>,
}

impl HeadCache {
    fn empty(d_head: usize) -> Self {
        Self {
            k: Matrix::zeros(0, d_head),
            v: Matrix::zeros(0, d_head),
            origins: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.origins.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalCache {
    /// `[layer][head]`
    pub heads: Vec<Vec<HeadCache>>,
}

impl GlobalCache {
    pub fn empty(cfg: &ModelConfig) -> Self {
        Self {
            heads: (0..cfg.n_layers)
                .map(|_| (0..cfg.n_heads).map(|_| HeadCache::empty(cfg.d_head)).collect())
                .collect(),
        }
    }

    pub fn rows(&self, layer: usize, head: usize) -> usize {
        self.heads[layer][head].rows()
    }

    /// Rows summed over layers and heads.
    pub fn rows_total(&self) -> usize {
        self.heads.iter().flatten().map(HeadCache::rows).sum()
    }

    pub fn count_segment(&self, layer: usize, head: usize, pred: impl Fn(Segment) -> bool) -> usize {
        self.heads[layer][head]
            .origins
            .iter()
            .filter(|o| pred(o.segment))
            .count()
    }
}

/// Concatenates the context rows of each surviving chunk, in the given
/// (document) order. The chunks' local copies of the query are not carried
/// over; the query enters during the global pass.
pub fn concat_kv(cfg: &ModelConfig, survivors: &[(usize, CompressedKV)]) -> Result<GlobalCache> {
    let mut cache = GlobalCache::empty(cfg);
    for (idx, kv) in survivors {
        let shape_ok = kv.heads.len() == cfg.n_layers
            && kv.heads.iter().all(|l| {
                l.len() == cfg.n_heads && l.iter().all(|h| h.k.cols() == cfg.d_head)
            });
        if !shape_ok {
            return Err(Error::ShapeMismatch {
                op: "concat_kv",
                left: (cfg.n_layers, cfg.n_heads),
                right: (kv.heads.len(), kv.heads.first().map_or(0, Vec::len)),
            });
        }
        for (l, layer) in kv.heads.iter().enumerate() {
            for (h, head) in layer.iter().enumerate() {
                let dst = &mut cache.heads[l][h];
                for (r, &pos) in head.retained.iter().enumerate() {
                    if pos >= kv.context_len {
                        break;
                    }
                    dst.k.push_row(head.k.row(r))?;
                    dst.v.push_row(head.v.row(r))?;
                    dst.origins.push(RowOrigin {
                        segment: Segment::Chunk(*idx),
                        position: pos,
                    });
                }
            }
        }
    }
    Ok(cache)
}

/// Output of one layer of global attention.
#[derive(Debug, Clone)]
pub struct GlobalAttention {
    /// `tokens x d_model`, after the output projection.
    pub output: Matrix,
    /// Per head, `tokens x cache_rows` (rows right of the causal edge are 0).
    pub weights: Vec<Matrix>,
}

/// One layer of global attention for new rows (`normed` is the normalized
/// hidden state). Their keys/values are appended to the layer's cache first;
/// new row `i` then sees every earlier cache row and new rows `0..=i`.
pub fn global_attention(
    model: &Model,
    layer: usize,
    cache: &mut GlobalCache,
    normed: &Matrix,
    positions: &[usize],
    segment: Segment,
) -> Result<GlobalAttention> {
    let cfg = *model.config();
    let n = normed.rows();
    let (qs, ks, vs) = model.project_qkv(layer, normed, positions)?;
    let mut head_out = Vec::with_capacity(cfg.n_heads);
    let mut weights = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let hc = &mut cache.heads[layer][h];
        let base = hc.rows();
        for (i, &p) in positions.iter().enumerate() {
            hc.k.push_row(ks[h].row(i))?;
            hc.v.push_row(vs[h].row(i))?;
            hc.origins.push(RowOrigin { segment, position: p });
        }
        let total = hc.rows();
        let mut a = Matrix::zeros(n, total);
        let mut o = Matrix::zeros(n, cfg.d_head);
        for i in 0..n {
            let visible = base + i + 1;
            let mixed = model.attend_row(qs[h].row(i), &hc.k, &hc.v, visible, &mut a.row_mut(i)[..visible]);
            o.row_mut(i).copy_from_slice(&mixed);
        }
        head_out.push(o);
        weights.push(a);
    }
    Ok(GlobalAttention {
        output: model.output_projection(layer, &head_out)?,
        weights,
    })
}

#[derive(Debug, Clone)]
pub struct GlobalForward {
    /// `tokens x vocab`
    pub logits: Matrix,
    /// `[layer][head]` attention of the new rows over the cache.
    pub attention: Vec<Vec<Matrix>>,
}

/// Runs new tokens through every layer against the cache, appending their
/// keys and values as it goes.
pub fn global_forward(
    model: &Model,
    cache: &mut GlobalCache,
    tokens: &[TokenId],
    positions: &[usize],
    segment: Segment,
) -> Result<GlobalForward> {
    if tokens.len() != positions.len() {
        return Err(Error::ShapeMismatch {
            op: "global_forward",
            left: (tokens.len(), 1),
            right: (positions.len(), 1),
        });
    }
    let cfg = *model.config();
    if cache.heads.len() != cfg.n_layers {
        return Err(Error::ShapeMismatch {
            op: "global_forward",
            left: (cfg.n_layers, cfg.n_heads),
            right: (cache.heads.len(), 0),
        });
    }
    let mut x = model.embed(tokens)?;
    let mut attention = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let normed = rms_norm(&x);
        let ga = global_attention(model, layer, cache, &normed, positions, segment)?;
        add_in_place(&mut x, &ga.output);
        model.feed_forward(layer, &mut x)?;
        attention.push(ga.weights);
    }
    let logits = model.lm_logits(&x)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("global logits"));
    }
    Ok(GlobalForward { logits, attention })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    /// Generation stopped early because the next position would leave the
    /// trained budget.
    pub truncated: bool,
}

/// Greedy decoding. `last_logits` predicts the first new token; each emitted
/// token that is needed to predict a further one is fed back at
/// `next_position`, `next_position + 1`, ...
pub fn decode(
    model: &Model,
    cache: &mut GlobalCache,
    last_logits: &[f64],
    next_position: usize,
    max_new: usize,
) -> Result<Decoded> {
    let budget = model.config().max_train_positions;
    let mut tokens = Vec::with_capacity(max_new);
    let mut logits = last_logits.to_vec();
    let mut pos = next_position;
    let mut truncated = false;
    for step in 0..max_new {
        let tok = argmax(&logits).ok_or(Error::Empty("decode logits"))? as TokenId;
        tokens.push(tok);
        if step + 1 == max_new {
            break;
        }
        if pos >= budget {
            truncated = true;
            break;
        }
        let f = global_forward(model, cache, &[tok], &[pos], Segment::Generated)?;
        logits = f.logits.row(0).to_vec();
        pos += 1;
    }
    Ok(Decoded { tokens, truncated })
}

/// Perplexity of `query` given its own logits rows (row `t` predicts token
/// `t+1`) and, if present, the logits that predict its first token.
pub fn perplexity_from_logits(bridge: Option<&[f64]>, query_logits: &Matrix, query: &[TokenId]) -> Result<f64> {
    let mut nll = 0.0;
    let mut terms = 0usize;
    if let (Some(b), Some(&q0)) = (bridge, query.first()) {
        nll -= log_softmax_row(b)?[q0 as usize];
        terms += 1;
    }
    for t in 1..query.len() {
        nll -= log_softmax_row(query_logits.row(t - 1))?[query[t] as usize];
        terms += 1;
    }
    if terms == 0 {
        return Ok(1.0);
    }
    Ok((nll / terms as f64).exp().max(1.0))
}

/// `exp(mean NLL)` of the query given a cache that does not yet contain it.
/// The cache is left untouched.
pub fn query_perplexity(
    model: &Model,
    cache_before_query: &GlobalCache,
    bridge: Option<&[f64]>,
    query: &[TokenId],
    query_offset: usize,
) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::Empty("query"));
    }
    let mut cache = cache_before_query.clone();
    let positions: Vec<usize> = (query_offset..query_offset + query.len()).collect();
    let f = global_forward(model, &mut cache, query, &positions, Segment::Query)?;
    perplexity_from_logits(bridge, &f.logits, query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::split_chunks;
    use crate::eviction::{apply_policy, EvictionMode, EvictionPolicy};
    use crate::local::encode_chunk;
    use crate::model::ModelWeights;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            vocab_size: 4,
            max_train_positions: 16,
            ff_mult: 2,
        }
    }

    #[test]
    fn empty_cache_single_query_token() {
        let model = Model::from_seed(cfg(), 1).unwrap();
        let mut cache = GlobalCache::empty(model.config());
        let f = global_forward(&model, &mut cache, &[2], &[0], Segment::Query).unwrap();
        for l in &f.attention {
            for a in l {
                assert_eq!(a.data(), &[1.0]);
            }
        }
        assert_eq!(cache.rows(0, 0), 1);
    }

    #[test]
    fn concat_row_counts_and_origins() {
        let model = Model::from_seed(cfg(), 2).unwrap();
        let ctx = [0, 1, 2, 3, 0, 1, 2, 3];
        let plan = split_chunks(&ctx, &[1, 2, 3], 5, 16).unwrap();
        let mut policy = EvictionPolicy::new(2, 5);
        policy.kv_budget = 5;
        let st = encode_chunk(&model, &plan, 0, 3).unwrap();
        let kv = apply_policy(&st, &policy, EvictionMode::Compression).unwrap();
        let mut cache = concat_kv(model.config(), &[(0, kv)]).unwrap();
        assert_eq!(cache.rows(1, 1), 5);
        global_forward(&model, &mut cache, &[1, 2, 3], &[5, 6, 7], Segment::Query).unwrap();
        assert_eq!(cache.rows(1, 1), 8);
        assert_eq!(cache.count_segment(0, 0, |s| s == Segment::Query), 3);

        let st1 = encode_chunk(&model, &plan, 1, 3).unwrap();
        let kv1 = apply_policy(&st1, &policy, EvictionMode::None).unwrap();
        let kv0 = apply_policy(&st, &policy, EvictionMode::None).unwrap();
        let cache = concat_kv(model.config(), &[(0, kv0), (1, kv1)]).unwrap();
        let docpos: Vec<usize> = cache.heads[0][0]
            .origins
            .iter()
            .map(|o| match o.segment {
                Segment::Chunk(c) => plan.ranges()[c].start + o.position,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(docpos, (0..8).collect::<Vec<_>>());
        assert_eq!(concat_kv(model.config(), &[]).unwrap().rows_total(), 0);
    }

    #[test]
    fn concat_rejects_mismatched_config() {
        let model = Model::from_seed(cfg(), 2).unwrap();
        let plan = split_chunks(&[0, 1], &[1], 2, 16).unwrap();
        let st = encode_chunk(&model, &plan, 0, 1).unwrap();
        let kv = CompressedKV::identity(&st).unwrap();
        let other = ModelConfig { n_layers: 3, ..cfg() };
        assert!(concat_kv(&other, &[(0, kv)]).is_err());
    }

    #[test]
    fn uniform_model_perplexity_is_vocab() {
        let model = Model::new(ModelWeights::zeros(cfg()).unwrap()).unwrap();
        let cache = GlobalCache::empty(model.config());
        let bridge = [0.0; 4];
        let ppl = query_perplexity(&model, &cache, Some(&bridge), &[1, 3, 0], 0).unwrap();
        assert!((ppl - 4.0).abs() < 1e-12);
        assert!(query_perplexity(&model, &cache, None, &[], 0).is_err());
    }

    #[test]
    fn decode_zero_and_truncation() {
        let model = Model::from_seed(cfg(), 4).unwrap();
        let mut cache = GlobalCache::empty(model.config());
        let d = decode(&model, &mut cache, &[0.0, 1.0, 0.0, 0.0], 3, 0).unwrap();
        assert!(d.tokens.is_empty() && !d.truncated);
        let d = decode(&model, &mut cache, &[0.0, 1.0, 0.0, 0.0], 15, 5).unwrap();
        assert_eq!(d.tokens.len(), 2);
        assert_eq!(d.tokens[0], 1);
        assert!(d.truncated);
        assert_eq!(model.counters().max_position(), Some(15));
    }
}
