//! End-to-end run: chunk -> encode -> evict -> queue -> global attention ->
//! decode.

use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;

use crate::chunker::{split_chunks, ChunkPlan};
use crate::cost::{activation_bytes, expected_prefill_pairs, row_bytes, CostReport};
use crate::error::{Error, Result};
use crate::eviction::{apply_policy, CompressedKV, EvictionMode, EvictionPolicy};
use crate::global::{concat_kv, decode, global_forward, perplexity_from_logits, GlobalCache, Segment};
use crate::local::{encode_chunk, ChunkState, LayerHeadScores, DEFAULT_Q_OBS};
use crate::model::{Model, ModelConfig, TokenId};
use crate::queue::{ChunkQueue, DEFAULT_QUEUE_CAPACITY};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub chunk_width: usize,
    pub q_obs: usize,
    pub policy: EvictionPolicy,
    pub mode: EvictionMode,
    pub queue_capacity: usize,
    /// Chunks with self-information above this are never queued.
    pub epsilon: f64,
    pub max_new: usize,
    /// Chunks encoded concurrently per batch.
    pub workers: usize,
    /// Keep every chunk's attention and scores in the output.
    pub capture: bool,
}

impl PipelineSettings {
    pub fn new(cfg: &ModelConfig, chunk_width: usize) -> Self {
        Self {
            chunk_width,
            q_obs: DEFAULT_Q_OBS,
            policy: EvictionPolicy::new(cfg.n_layers, chunk_width.div_ceil(2)),
            mode: EvictionMode::None,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            epsilon: f64::INFINITY,
            max_new: 0,
            workers: 1,
            capture: false,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.q_obs == 0 {
            return Err(Error::config("q_obs must be >= 1"));
        }
        if self.queue_capacity == 0 {
            return Err(Error::config("queue_capacity must be >= 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers must be >= 1"));
        }
        if self.epsilon.is_nan() {
            return Err(Error::config("epsilon must not be NaN"));
        }
        self.policy.validate(cfg.n_layers)
    }
}

/// What happened to one chunk.
#[derive(Debug, Clone)]
pub struct ChunkRecord {
    pub chunk_index: usize,
    pub context_range: Range<usize>,
    pub self_information: f64,
    /// Retained context indices `[layer][head]` after eviction.
    pub retained: Vec<Vec<Vec<usize>>>,
    pub scores: LayerHeadScores,
    /// Local attention, only with `capture`.
    pub attention: Option<Vec<Vec<Matrix>>>,
}

/// Row counts summed over layers and heads at each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageRows {
    pub context_tokens: usize,
    /// All encoded rows (context + query copies) before eviction.
    pub encoded: usize,
    /// After token eviction, before the queue.
    pub after_eviction: usize,
    /// Context rows surviving the queue.
    pub after_queue: usize,
    /// Global cache after the query pass (context + query).
    pub global_cache: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub plan: ChunkPlan,
    pub chunks: Vec<ChunkRecord>,
    pub retained_chunks: Vec<usize>,
    /// Observation window actually used (after clamping to the query).
    pub q_obs: usize,
    /// `w_q x vocab` logits of the query rows from the global pass.
    pub query_logits: Matrix,
    pub perplexity: f64,
    pub generated: Vec<TokenId>,
    pub truncated: bool,
    /// `[layer][head]` global attention of the query rows.
    pub global_attention: Vec<Vec<Matrix>>,
    pub cache: GlobalCache,
    pub rows: StageRows,
    pub cost: CostReport,
    /// Largest rotary position requested anywhere during the run.
    pub max_position: Option<usize>,
}

impl PipelineOutput {
    /// `key=value` lines; deterministic for a given model, input and
    /// settings.
    pub fn record(&self) -> String {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let gen: Vec<usize> = self.generated.iter().map(|&t| t as usize).collect();
        let info: Vec<String> = self.chunks.iter().map(|c| c.self_information.to_string()).collect();
        format!(
            "generated={}\ntruncated={}\nperplexity={}\nchunk_count={}\nretained_chunks={}\nself_information={}\nrows_context_tokens={}\nrows_encoded={}\nrows_after_eviction={}\nrows_after_queue={}\nrows_global_cache={}\n",
            join(&gen),
            self.truncated,
            self.perplexity,
            self.plan.chunk_count(),
            join(&self.retained_chunks),
            info.join(","),
            self.rows.context_tokens,
            self.rows.encoded,
            self.rows.after_eviction,
            self.rows.after_queue,
            self.rows.global_cache,
        )
    }
}

struct Retained {
    kv: CompressedKV,
    bridge: Vec<f64>,
    rows: usize,
}

fn record_for(st: &ChunkState, kv: &CompressedKV, plan: &ChunkPlan, capture: bool) -> ChunkRecord {
    let retained = (0..st.n_layers())
        .map(|l| (0..st.n_heads()).map(|h| kv.retained_context(l, h).to_vec()).collect())
        .collect();
    ChunkRecord {
        chunk_index: st.chunk_index,
        context_range: plan.ranges()[st.chunk_index].clone(),
        self_information: st.self_information,
        retained,
        scores: st.scores.clone(),
        attention: capture.then(|| st.attention.clone()),
    }
}

pub fn run_pipeline(
    model: &Model,
    context: &[TokenId],
    query: &[TokenId],
    settings: &PipelineSettings,
) -> Result<PipelineOutput> {
    let cfg = *model.config();
    settings.validate(&cfg)?;
    if context.is_empty() {
        return Err(Error::Empty("context"));
    }
    let plan = split_chunks(context, query, settings.chunk_width, cfg.max_train_positions)?;
    let heads = cfg.n_layers * cfg.n_heads;
    let full_rows = |c: usize| heads * (plan.chunk_len(c) + plan.query_len());

    let pairs_start = model.counters().score_pairs();
    let t_prefill = Instant::now();

    let mut queue: ChunkQueue<Retained> = ChunkQueue::new(settings.queue_capacity);
    let mut rows = StageRows {
        context_tokens: context.len(),
        ..StageRows::default()
    };
    let mut peak = 0usize;
    let mut records = Vec::with_capacity(plan.chunk_count());
    let order: Vec<usize> = (0..plan.chunk_count()).collect();
    for batch in order.chunks(settings.workers) {
        let states: Vec<ChunkState> = if batch.len() > 1 {
            batch
                .par_iter()
                .map(|&c| encode_chunk(model, &plan, c, settings.q_obs))
                .collect::<Result<_>>()?
        } else {
            vec![encode_chunk(model, &plan, batch[0], settings.q_obs)?]
        };
        let queued: usize = queue.entries().iter().map(|e| e.payload.rows).sum();
        let in_flight: usize = batch.iter().map(|&c| full_rows(c)).sum();
        peak = peak.max(queued + in_flight);

        for st in states {
            rows.encoded += full_rows(st.chunk_index);
            let kv = apply_policy(&st, &settings.policy, settings.mode)?;
            rows.after_eviction += kv.rows_total();
            records.push(record_for(&st, &kv, &plan, settings.capture));
            if st.self_information <= settings.epsilon {
                let payload = Retained {
                    bridge: st.bridge_logits().to_vec(),
                    rows: kv.rows_total(),
                    kv,
                };
                queue.push(st.chunk_index, st.self_information, payload)?;
            }
        }
    }
    let score_pairs_prefill = model.counters().score_pairs() - pairs_start;
    let wall_prefill_ms = t_prefill.elapsed().as_secs_f64() * 1e3;

    let survivors = queue.retained_chunks();
    let retained_chunks: Vec<usize> = survivors.iter().map(|(i, _)| *i).collect();
    let bridge = survivors.last().map(|(_, r)| r.bridge.clone());
    let kvs: Vec<(usize, CompressedKV)> = survivors.into_iter().map(|(i, r)| (i, r.kv)).collect();
    let mut cache = concat_kv(&cfg, &kvs)?;
    drop(kvs);
    rows.after_queue = cache.rows_total();

    let pairs_global_start = model.counters().score_pairs();
    let offset = plan.max_chunk_len();
    let positions: Vec<usize> = (offset..offset + query.len()).collect();
    let g = global_forward(model, &mut cache, query, &positions, Segment::Query)?;
    rows.global_cache = cache.rows_total();
    let perplexity = perplexity_from_logits(bridge.as_deref(), &g.logits, query)?;

    let t_decode = Instant::now();
    let decoded = decode(
        model,
        &mut cache,
        g.logits.row(query.len() - 1),
        offset + query.len(),
        settings.max_new,
    )?;
    let decode_ms = t_decode.elapsed().as_secs_f64() * 1e3;
    peak = peak.max(cache.rows_total());

    let window = plan.max_chunk_len() + plan.query_len();
    let in_flight_chunks = settings.workers.min(plan.chunk_count());
    let cost = CostReport {
        score_pairs_prefill,
        score_pairs_prefill_expected: expected_prefill_pairs(&cfg, &plan),
        score_pairs_global: model.counters().score_pairs() - pairs_global_start,
        cache_rows_peak: peak,
        cache_bytes_peak: row_bytes(&cfg, peak),
        simulated_memory_bytes_peak: row_bytes(&cfg, peak)
            + in_flight_chunks * activation_bytes(&cfg, window),
        wall_prefill_ms,
        wall_per_token_ms: if decoded.tokens.is_empty() {
            f64::NAN
        } else {
            decode_ms / decoded.tokens.len() as f64
        },
    };

    Ok(PipelineOutput {
        plan,
        chunks: records,
        retained_chunks,
        q_obs: settings.q_obs.min(query.len()),
        query_logits: g.logits,
        perplexity,
        generated: decoded.tokens,
        truncated: decoded.truncated,
        global_attention: g.attention,
        cache,
        rows,
        cost,
        max_position: model.counters().max_position(),
    })
}

/// Reference path: one causal pass over `context ++ query` at positions
/// `0..N+w_q`, then greedy decoding by re-running the whole sequence. Only
/// valid while everything fits in the position budget.
#[derive(Debug, Clone)]
pub struct MonolithicOutput {
    pub query_logits: Matrix,
    pub perplexity: f64,
    pub generated: Vec<TokenId>,
    pub truncated: bool,
}

pub fn run_monolithic(model: &Model, context: &[TokenId], query: &[TokenId], max_new: usize) -> Result<MonolithicOutput> {
    let mut seq: Vec<TokenId> = context.iter().chain(query).copied().collect();
    let n = context.len();
    let positions: Vec<usize> = (0..seq.len()).collect();
    let f = model.forward_local(&seq, &positions)?;
    let query_logits = f.logits.select_rows(&(n..seq.len()).collect::<Vec<_>>())?;
    let bridge = (n > 0).then(|| f.logits.row(n - 1).to_vec());
    let perplexity = perplexity_from_logits(bridge.as_deref(), &query_logits, query)?;
    let mut generated = Vec::with_capacity(max_new);
    let mut last = f.logits.row(seq.len() - 1).to_vec();
    let mut truncated = false;
    for step in 0..max_new {
        let tok = crate::tensor::argmax(&last).ok_or(Error::Empty("logits"))? as TokenId;
        generated.push(tok);
        if step + 1 == max_new {
            break;
        }
        if seq.len() >= model.config().max_train_positions {
            truncated = true;
            break;
        }
        seq.push(tok);
        let positions: Vec<usize> = (0..seq.len()).collect();
        let f = model.forward_local(&seq, &positions)?;
        last = f.logits.row(seq.len() - 1).to_vec();
    }
    Ok(MonolithicOutput {
        query_logits,
        perplexity,
        generated,
        truncated,
    })
}
