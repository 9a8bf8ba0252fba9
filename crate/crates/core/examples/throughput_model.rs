//! Memory-model estimate of how many chunks fit in parallel as the KV
//! budget shrinks.

use chunkcomp::cost::{chunk_footprint, max_parallel_chunks};
use chunkcomp::model::ModelConfig;

fn main() -> chunkcomp::Result<()> {
    let cfg = ModelConfig { n_layers: 32, ..ModelConfig::default() };
    let (w, q, budget) = (120, 8, 64 << 20);
    let full = max_parallel_chunks(budget, &chunk_footprint(&cfg, w, q, w))?;
    println!("kv_budget  kv_frac  chunks  ratio");
    for kv in [120, 96, 60, 30, 12] {
        let fp = chunk_footprint(&cfg, w, q, kv);
        let n = max_parallel_chunks(budget, &fp)?;
        println!("{kv:>9}  {:>7.3}  {n:>6}  {:.3}", fp.kv_fraction(), n as f64 / full as f64);
    }
    Ok(())
}
