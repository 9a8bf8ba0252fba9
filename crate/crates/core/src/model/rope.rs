use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Precomputed rotary cos/sin table. Pairs are interleaved: dimensions
/// (2i, 2i+1) rotate together at frequency `base^(-2i/d_head)`.
#[derive(Debug, Clone)]
pub struct RopeTable {
    max_positions: usize,
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(max_positions: usize, d_head: usize, base: f64) -> Self {
        assert!(d_head.is_multiple_of(2), "rotary embedding needs an even head width");
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for p in 0..max_positions {
            for i in 0..half {
                let theta = base.powf(-2.0 * i as f64 / d_head as f64);
                let angle = p as f64 * theta;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self {
            max_positions,
            half,
            cos,
            sin,
        }
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn d_head(&self) -> usize {
        self.half * 2
    }

    /// Rotates one row in place at `position`.
    pub fn rotate_row(&self, row: &mut [f64], position: usize) -> Result<()> {
        if position >= self.max_positions {
            return Err(Error::PositionOverflow {
                position,
                budget: self.max_positions,
            });
        }
        debug_assert_eq!(row.len(), self.half * 2);
        let base = position * self.half;
        for i in 0..self.half {
            let (c, s) = (self.cos[base + i], self.sin[base + i]);
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * c - x1 * s;
            row[2 * i + 1] = x0 * s + x1 * c;
        }
        Ok(())
    }

    /// Rotates each row of `x` (tokens x d_head) by its position.
    pub fn apply(&self, x: &Matrix, positions: &[usize]) -> Result<Matrix> {
        if x.rows() != positions.len() || x.cols() != self.d_head() {
            return Err(Error::ShapeMismatch {
                op: "apply_rope",
                left: x.shape(),
                right: (positions.len(), self.d_head()),
            });
        }
        let mut out = x.clone();
        for (r, &p) in positions.iter().enumerate() {
            self.rotate_row(out.row_mut(r), p)?;
        }
        Ok(out)
    }
}
