//! The bounded queue keeps the chunks with the lowest self-information.

use chunkcomp::queue::ChunkQueue;

fn main() -> chunkcomp::Result<()> {
    let scores = [9.1, 3.4, 7.7, 2.2, 5.0, 3.4, 8.8];
    let mut q = ChunkQueue::new(3);
    for (i, &s) in scores.iter().enumerate() {
        if let Some(out) = q.push(i, s, format!("chunk-{i}"))? {
            println!("push {i} ({s}) evicts {} ({})", out.chunk_index, out.score);
        }
    }
    println!("kept in document order: {:?}", q.clone().retained_chunks());
    println!("with epsilon 3.0: {:?}", q.threshold_filter(3.0).retained_indices());
    Ok(())
}
