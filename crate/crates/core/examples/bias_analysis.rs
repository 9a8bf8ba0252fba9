//! Per-head attention profiles, pattern labels and outlier counts with and
//! without calibration.

use chunkcomp::analysis::bias_report;
use chunkcomp::eviction::EvictionMode;
use chunkcomp::model::{Model, ModelConfig, ModelWeights};
use chunkcomp::pipeline::{run_pipeline, PipelineSettings};

fn main() -> chunkcomp::Result<()> {
    let cfg = ModelConfig::default();
    let model = Model::new(ModelWeights::init_from_seed(cfg, 21)?.with_attention_gain(3.0))?;
    let context: Vec<u32> = (0..400).map(|i| ((i * i + 7 * i) % 256) as u32).collect();
    let query = [9, 8, 7, 6, 5, 4, 3, 2];

    for mode in [EvictionMode::None, EvictionMode::Calibration] {
        let mut s = PipelineSettings::new(&cfg, 80);
        s.mode = mode;
        s.capture = true;
        let out = run_pipeline(&model, &context, &query, &s)?;
        let report = bias_report(&out, 0.1, 0.1, s.policy.lambda_mult)?;
        println!("mode {mode}: outliers {} labels {:?}", report.total_outliers(), report.label_counts());
        if mode == EvictionMode::None {
            for h in report.heads.iter().filter(|h| h.head == 0) {
                println!(
                    "  layer {} head 0 {:<15} h={:.3} m={:.3} t={:.3}",
                    h.layer, h.label.to_string(), h.masses.head, h.masses.middle, h.masses.tail
                );
            }
        }
    }
    Ok(())
}
