//! Per-chunk local encoding: attention, KV cache, cumulative query-to-token
//! scores and the query's self-information under the chunk.

use crate::chunker::ChunkPlan;
use crate::error::{Error, Result};
use crate::model::{HeadKv, Model, TokenId};
use crate::tensor::{log_softmax_row, Matrix};

/// Default number of trailing query rows whose attention is accumulated.
pub const DEFAULT_Q_OBS: usize = 8;

/// `[layer][head][context position]`
pub type LayerHeadScores = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone)]
pub struct ChunkState {
    pub chunk_index: usize,
    /// Context tokens in this chunk (`w_c`).
    pub context_len: usize,
    pub query_len: usize,
    /// `[layer][head]`, `(w_c + w_q) x d_head` each.
    pub kv: Vec<Vec<HeadKv>>,
    /// `[layer][head]` local causal attention.
    pub attention: Vec<Vec<Matrix>>,
    /// `(w_c + w_q) x vocab`
    pub logits: Matrix,
    /// Cumulative post-softmax scores of the last `q_obs` query rows.
    pub scores: LayerHeadScores,
    pub q_obs: usize,
    /// Query self-information in nats.
    pub self_information: f64,
}

impl ChunkState {
    pub fn n_layers(&self) -> usize {
        self.kv.len()
    }

    pub fn n_heads(&self) -> usize {
        self.kv.first().map_or(0, Vec::len)
    }

    pub fn total_len(&self) -> usize {
        self.context_len + self.query_len
    }

    /// Logits of the last context token: the model's prediction for the
    /// first query token given this chunk.
    pub fn bridge_logits(&self) -> &[f64] {
        self.logits.row(self.context_len - 1)
    }
}

/// Encodes chunk `c` of `plan` (chunk ++ query at positions 0..len).
/// `q_obs` is clamped to the query length.
pub fn encode_chunk(model: &Model, plan: &ChunkPlan, c: usize, q_obs: usize) -> Result<ChunkState> {
    let (tokens, positions) = plan.assemble(c)?;
    let context_len = plan.chunk_len(c);
    let query_len = plan.query_len();
    let fwd = model.forward_local(&tokens, &positions)?;
    let q_obs = q_obs.clamp(1, query_len);
    let scores = cumulative_scores(&fwd.attention, context_len, query_len, q_obs)?;
    let self_information = self_information(&fwd.logits, &tokens, context_len)?;
    Ok(ChunkState {
        chunk_index: c,
        context_len,
        query_len,
        kv: fwd.kv,
        attention: fwd.attention,
        logits: fwd.logits,
        scores,
        q_obs,
        self_information,
    })
}

/// For each layer and head, sums the post-softmax attention that the last
/// `q_obs` query rows pay to each context position. Query-to-query mass is
/// excluded.
pub fn cumulative_scores(
    attention: &[Vec<Matrix>],
    context_len: usize,
    query_len: usize,
    q_obs: usize,
) -> Result<LayerHeadScores> {
    if q_obs == 0 || q_obs > query_len {
        return Err(Error::OutOfRange {
            what: "q_obs",
            index: q_obs,
            bound: query_len,
        });
    }
    let total = context_len + query_len;
    let mut out = Vec::with_capacity(attention.len());
    for layer in attention {
        let mut per_head = Vec::with_capacity(layer.len());
        for a in layer {
            if a.rows() != total {
                return Err(Error::ShapeMismatch {
                    op: "cumulative_scores",
                    left: a.shape(),
                    right: (total, total),
                });
            }
            let mut s = vec![0.0; context_len];
            for i in total - q_obs..total {
                for (acc, &x) in s.iter_mut().zip(&a.row(i)[..context_len]) {
                    *acc += x;
                }
            }
            per_head.push(s);
        }
        out.push(per_head);
    }
    Ok(out)
}

/// `-sum_t log P(q_t | chunk, q_<t)` in nats, read off the causal logits of
/// `tokens = chunk ++ query`: the prediction for token `i` sits in row `i-1`.
pub fn self_information(logits: &Matrix, tokens: &[TokenId], context_len: usize) -> Result<f64> {
    if context_len == 0 {
        return Err(Error::Empty("self_information: chunk context"));
    }
    if logits.rows() != tokens.len() {
        return Err(Error::ShapeMismatch {
            op: "self_information",
            left: logits.shape(),
            right: (tokens.len(), logits.cols()),
        });
    }
    let mut total = 0.0;
    for i in context_len..tokens.len() {
        let lp = log_softmax_row(logits.row(i - 1))?;
        total -= lp[tokens[i] as usize];
    }
    Ok(total.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::split_chunks;
    use crate::model::{ModelConfig, ModelWeights};

    fn cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            vocab_size: vocab,
            max_train_positions: 32,
            ff_mult: 2,
        }
    }

    #[test]
    fn direct_sum_example() {
        // w=2 context, w_q=2 query; rows 2,3 are the query rows.
        let a = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.25, 0.75, 0.0, 0.0],
        ])
        .unwrap();
        let s = cumulative_scores(&[vec![a]], 2, 2, 2).unwrap();
        assert_eq!(s[0][0], vec![0.75, 1.25]);
    }

    #[test]
    fn one_hot_rows_give_q_obs_on_token_zero() {
        let mut a = Matrix::zeros(6, 6);
        for i in 0..6 {
            a.set(i, 0, 1.0);
        }
        let s = cumulative_scores(&[vec![a]], 3, 3, 3).unwrap();
        assert_eq!(s[0][0], vec![3.0, 0.0, 0.0]);
        let a = Matrix::zeros(6, 6);
        assert!(cumulative_scores(&[vec![a.clone()]], 3, 3, 4).is_err());
        assert!(cumulative_scores(&[vec![a]], 3, 3, 0).is_err());
    }

    #[test]
    fn uniform_logits_self_information() {
        let model = Model::new(ModelWeights::zeros(cfg(4)).unwrap()).unwrap();
        let plan = split_chunks(&[0, 1, 2], &[3, 1], 3, 32).unwrap();
        let st = encode_chunk(&model, &plan, 0, 8).unwrap();
        assert!((st.self_information - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert_eq!(st.q_obs, 2);
        // zero weights: every head is uniform over its causal prefix
        let a = &st.attention[1][1];
        assert_eq!(a.row(4), &[0.2; 5]);
    }

    #[test]
    fn shapes_and_purity() {
        let model = Model::from_seed(cfg(16), 3).unwrap();
        let ctx: Vec<u32> = (0..10).collect();
        let plan = split_chunks(&ctx, &[4, 5, 6], 4, 32).unwrap();
        let a = encode_chunk(&model, &plan, 2, 2).unwrap();
        let b = encode_chunk(&model, &plan, 2, 2).unwrap();
        assert_eq!(a.kv, b.kv);
        assert_eq!(a.self_information.to_bits(), b.self_information.to_bits());
        assert_eq!(a.kv[1][0].k.shape(), (2 + 3, 4));
        assert_eq!(a.scores[0][0].len(), 2);
    }

    #[test]
    fn mass_conservation() {
        let model = Model::from_seed(cfg(16), 5).unwrap();
        let ctx: Vec<u32> = (0..12).map(|i| (i * 7 % 16) as u32).collect();
        let plan = split_chunks(&ctx, &[1, 2, 3, 4], 6, 32).unwrap();
        let st = encode_chunk(&model, &plan, 1, 3).unwrap();
        let total = st.total_len();
        for (l, layer) in st.scores.iter().enumerate() {
            for (h, s) in layer.iter().enumerate() {
                let a = &st.attention[l][h];
                let q2q: f64 = (total - 3..total)
                    .map(|i| a.row(i)[st.context_len..].iter().sum::<f64>())
                    .sum();
                let ctx_mass: f64 = s.iter().sum();
                assert!((ctx_mass + q2q - 3.0).abs() < 1e-8);
                assert!(ctx_mass <= 3.0 + 1e-12);
            }
        }
    }
}
