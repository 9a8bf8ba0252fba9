//! Runs the chunked pipeline on a seeded model with each eviction mode and
//! prints what survives every stage.

use chunkcomp::eviction::EvictionMode;
use chunkcomp::model::{Model, ModelConfig};
use chunkcomp::pipeline::{run_pipeline, PipelineSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> chunkcomp::Result<()> {
    let model = Model::from_seed(ModelConfig::default(), 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let context: Vec<u32> = (0..1000).map(|_| rng.random_range(0..256)).collect();
    let query: Vec<u32> = (0..16).map(|_| rng.random_range(0..256)).collect();

    for mode in [EvictionMode::None, EvictionMode::Compression, EvictionMode::Calibration, EvictionMode::Both] {
        let mut s = PipelineSettings::new(model.config(), 80);
        s.mode = mode;
        s.max_new = 8;
        let out = run_pipeline(&model, &context, &query, &s)?;
        println!(
            "{:<12} chunks={} kept={:?} rows {} -> {} -> {} ppl={:.2} gen={:?}",
            mode.to_string(),
            out.plan.chunk_count(),
            out.retained_chunks,
            out.rows.encoded,
            out.rows.after_eviction,
            out.rows.after_queue,
            out.perplexity,
            out.generated,
        );
    }
    Ok(())
}
