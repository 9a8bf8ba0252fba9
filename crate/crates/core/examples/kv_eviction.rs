//! Encodes one chunk and compares what compression and calibration keep in
//! each layer.

use chunkcomp::chunker::split_chunks;
use chunkcomp::eviction::{apply_policy, calibration_threshold, EvictionMode, EvictionPolicy};
use chunkcomp::local::encode_chunk;
use chunkcomp::model::{Model, ModelConfig, ModelWeights};

fn main() -> chunkcomp::Result<()> {
    let cfg = ModelConfig { n_layers: 6, ..ModelConfig::default() };
    // Sharper attention makes the calibration outliers easier to see.
    let model = Model::new(ModelWeights::init_from_seed(cfg, 2)?.with_attention_gain(3.0))?;
    let context: Vec<u32> = (0..96).map(|i| (i * 53 % 256) as u32).collect();
    let query = [1, 2, 3, 4, 5, 6, 7, 8];
    let plan = split_chunks(&context, &query, 96, cfg.max_train_positions)?;
    let state = encode_chunk(&model, &plan, 0, 8)?;
    println!("chunk self-information {:.2} nats", state.self_information);

    let policy = EvictionPolicy::new(cfg.n_layers, 24);
    for mode in [EvictionMode::Compression, EvictionMode::Calibration, EvictionMode::Both] {
        let kv = apply_policy(&state, &policy, mode)?;
        let per_layer: Vec<usize> = (0..cfg.n_layers)
            .map(|l| (0..cfg.n_heads).map(|h| kv.retained_context(l, h).len()).sum())
            .collect();
        println!("{:<12} context rows per layer, summed over heads {per_layer:?}", mode.to_string());
    }

    let s = &state.scores[0][0];
    let lambda = calibration_threshold(s, policy.lambda_mult);
    let mut top: Vec<(usize, f64)> = s.iter().copied().enumerate().collect();
    top.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("layer 0 head 0: lambda={lambda:.3}, top scores {:?}", &top[..4]);
    Ok(())
}
