//! When the whole context fits in one chunk and nothing is evicted, the
//! chunked pipeline reduces to ordinary full attention.

use chunkcomp::model::{Model, ModelConfig};
use chunkcomp::pipeline::{run_monolithic, run_pipeline, PipelineSettings};

fn main() -> chunkcomp::Result<()> {
    let model = Model::from_seed(ModelConfig::default(), 5)?;
    let context: Vec<u32> = (0..90).map(|i| (i * 37 % 251) as u32).collect();
    let query = [4, 8, 15, 16, 23, 42];

    let mut s = PipelineSettings::new(model.config(), context.len());
    s.max_new = 10;
    let chunked = run_pipeline(&model, &context, &query, &s)?;
    let full = run_monolithic(&model, &context, &query, 10)?;

    let max_rel = chunked
        .query_logits
        .data()
        .iter()
        .zip(full.query_logits.data())
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-12))
        .fold(0.0, f64::max);
    println!("max relative logit error {max_rel:e}");
    println!("perplexity {:.6} vs {:.6}", chunked.perplexity, full.perplexity);
    println!("generated  {:?}\n           {:?}", chunked.generated, full.generated);
    Ok(())
}
