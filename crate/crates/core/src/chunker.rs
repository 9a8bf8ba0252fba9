//! Splits a context into position-budget-sized chunks, each encoded with the
//! query appended and positions restarting at zero.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::TokenId;

/// Ordered token ids bounded by a vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::OutOfRange {
                what: "token id",
                index: bad as usize,
                bound: vocab_size,
            });
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    context: Vec<TokenId>,
    query: Vec<TokenId>,
    chunk_width: usize,
    ranges: Vec<Range<usize>>,
}

impl ChunkPlan {
    pub fn chunk_width(&self) -> usize {
        self.chunk_width
    }

    pub fn query_len(&self) -> usize {
        self.query.len()
    }

    pub fn chunk_count(&self) -> usize {
        self.ranges.len()
    }

    pub fn context(&self) -> &[TokenId] {
        &self.context
    }

    pub fn query(&self) -> &[TokenId] {
        &self.query
    }

    /// Context token range of each chunk, in document order.
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn chunk_len(&self, c: usize) -> usize {
        self.ranges[c].len()
    }

    /// Longest context slice; the query's position offset in the global
    /// stage.
    pub fn max_chunk_len(&self) -> usize {
        self.ranges.iter().map(Range::len).max().unwrap_or(0)
    }

    pub fn context_slice(&self, c: usize) -> &[TokenId] {
        &self.context[self.ranges[c].clone()]
    }

    /// Chunk `c` followed by the query, with positions `0..len`.
    pub fn assemble(&self, c: usize) -> Result<(Vec<TokenId>, Vec<usize>)> {
        if c >= self.ranges.len() {
            return Err(Error::OutOfRange {
                what: "chunk index",
                index: c,
                bound: self.ranges.len(),
            });
        }
        let mut tokens = self.context_slice(c).to_vec();
        tokens.extend_from_slice(&self.query);
        let positions = (0..tokens.len()).collect();
        Ok((tokens, positions))
    }
}

/// Partitions `context` into `ceil(N / w)` chunks of width `w` (last one may
/// be short). `w + |query|` must fit in the position budget.
pub fn split_chunks(
    context: &[TokenId],
    query: &[TokenId],
    chunk_width: usize,
    max_train_positions: usize,
) -> Result<ChunkPlan> {
    if query.is_empty() {
        return Err(Error::Empty("query"));
    }
    if chunk_width == 0 {
        return Err(Error::config("chunk_width must be >= 1"));
    }
    if chunk_width + query.len() > max_train_positions {
        return Err(Error::config(format!(
            "chunk_width ({chunk_width}) + query length ({}) exceeds the position budget ({max_train_positions})",
            query.len()
        )));
    }
    let ranges = (0..context.len())
        .step_by(chunk_width)
        .map(|s| s..(s + chunk_width).min(context.len()))
        .collect();
    Ok(ChunkPlan {
        context: context.to_vec(),
        query: query.to_vec(),
        chunk_width,
        ranges,
    })
}
