//! Fixed-capacity chunk queue ordered by self-information (lower is more
//! relevant). Pushing past capacity drops the worst entry, so the retained
//! set after any arrival order equals the offline top-`capacity` set.

use std::cmp::Ordering;

use crate::error::{Error, Result};

pub const DEFAULT_QUEUE_CAPACITY: usize = 3;

#[derive(Debug, Clone)]
pub struct QueueEntry<T> {
    pub chunk_index: usize,
    pub score: f64,
    pub payload: T,
}

fn rank<T>(a: &QueueEntry<T>, b: &QueueEntry<T>) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then(a.chunk_index.cmp(&b.chunk_index))
}

/// Entries kept sorted ascending by `(score, chunk_index)`.
#[derive(Debug, Clone)]
pub struct ChunkQueue<T> {
    capacity: usize,
    entries: Vec<QueueEntry<T>>,
}

impl<T> ChunkQueue<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[QueueEntry<T>] {
        &self.entries
    }

    /// Inserts a chunk. If the queue overflows, the entry with the largest
    /// score (ties: larger chunk index) is dropped and returned.
    pub fn push(&mut self, chunk_index: usize, score: f64, payload: T) -> Result<Option<QueueEntry<T>>> {
        if !score.is_finite() {
            return Err(Error::NonFinite("chunk score"));
        }
        let entry = QueueEntry {
            chunk_index,
            score,
            payload,
        };
        let at = self
            .entries
            .partition_point(|e| rank(e, &entry) == Ordering::Less);
        self.entries.insert(at, entry);
        if self.entries.len() > self.capacity {
            Ok(self.entries.pop())
        } else {
            Ok(None)
        }
    }

    /// Drops entries with score above `epsilon`.
    pub fn threshold_filter(mut self, epsilon: f64) -> Self {
        self.entries.retain(|e| e.score <= epsilon);
        self
    }

    /// Folds another queue in; used to merge per-worker partial queues.
    pub fn merge(mut self, other: ChunkQueue<T>) -> Result<Self> {
        for e in other.entries {
            self.push(e.chunk_index, e.score, e.payload)?;
        }
        Ok(self)
    }

    /// Survivors in document order.
    pub fn retained_chunks(self) -> Vec<(usize, T)> {
        let mut out: Vec<(usize, T)> = self
            .entries
            .into_iter()
            .map(|e| (e.chunk_index, e.payload))
            .collect();
        out.sort_by_key(|(i, _)| *i);
        out
    }

    pub fn retained_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.entries.iter().map(|e| e.chunk_index).collect();
        idx.sort_unstable();
        idx
    }
}
