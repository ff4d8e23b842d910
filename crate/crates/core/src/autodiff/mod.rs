//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! Every value on a [`Tape`] is a 2-D [`Tensor`]. Operations append nodes in
//! evaluation order, so the node index is already a topological order and
//! [`Tape::backward`] is a single reverse sweep. Leaves created with
//! [`Tape::param`] receive gradients; leaves created with [`Tape::constant`]
//! do not, and neither does anything computed purely from constants.
//!
//! Sequences are packed row-wise: a batch of variable-length sequences is one
//! tall matrix plus a [`SeqLayout`] describing which rows belong to which
//! sequence. Row-wise operations never mix sequences; attention is the only
//! op that looks across rows and it is confined to each segment.

mod attention;
mod tape;

pub use tape::{Gradients, Tape, Var};

use ndarray::Array2;

/// Dense row-major matrix used for every value on the tape.
pub type Tensor = Array2<f64>;

/// Row ranges of packed sequences inside a tall matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    segments: Vec<(usize, usize)>,
    rows: usize,
}

impl SeqLayout {
    /// Builds a layout from sequence lengths laid out back to back.
    pub fn from_lengths<I: IntoIterator<Item = usize>>(lengths: I) -> Self {
        let mut segments = Vec::new();
        let mut start = 0;
        for len in lengths {
            assert!(len > 0, "empty segment in layout");
            segments.push((start, len));
            start += len;
        }
        Self { segments, rows: start }
    }

    /// `(start_row, len)` of every segment.
    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Total number of packed rows.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Index of the final row of every segment.
    pub fn last_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|&(s, l)| s + l - 1).collect()
    }

    /// Position of every packed row within its own segment.
    pub fn positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.rows);
        for &(_, len) in &self.segments {
            out.extend(0..len);
        }
        out
    }

    /// Layout made of this one repeated `times` times back to back.
    pub fn repeated(&self, times: usize) -> Self {
        let lengths: Vec<usize> = self.segments.iter().map(|&(_, l)| l).collect();
        Self::from_lengths((0..times).flat_map(|_| lengths.iter().copied()))
    }
}

#[cfg(test)]
mod tests;
