//! Writes seeded weights to disk, reads them back and checks the two models
//! agree.

use chunkcomp::model::{read_weights, write_weights, Model, ModelConfig, ModelWeights};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig { n_layers: 2, vocab_size: 64, ..ModelConfig::default() };
    let w = ModelWeights::init_from_seed(cfg, 99)?;
    let path = std::env::temp_dir().join("chunkcomp_example.weights");
    write_weights(&w, &path)?;
    let back = read_weights(&path)?;
    println!("{} bytes, config {:?}", std::fs::metadata(&path)?.len(), back.config);

    let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
    let pos: Vec<usize> = (0..tokens.len()).collect();
    let a = Model::new(w)?.forward_local(&tokens, &pos)?;
    let b = Model::new(back)?.forward_local(&tokens, &pos)?;
    println!("logits identical: {}", a.logits == b.logits);
    std::fs::remove_file(&path)?;
    Ok(())
}
