//! Chunk patterns and the additive attention mask.
//!
//! A pattern is a set of sentence indices treated as one retrieval unit.
//! Sliding-window families cover the standard granularities; explicit index
//! sets cover non-contiguous sentence linking.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Finite stand-in for the mask's minus infinity. Large enough that
/// `exp(logit + MASK_SENTINEL)` underflows to zero in f32, finite so an
/// all-masked row surfaces as an error instead of NaN.
pub const MASK_SENTINEL: f64 = -1e9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PatternError {
    #[error("document has no sentences")]
    EmptyDocument,
    #[error("granularity set is empty")]
    NoGranularities,
    #[error("granularity must be >= 1")]
    ZeroGranularity,
    #[error("index set {set_position} contains out-of-range index {index}")]
    IndexOutOfRange { set_position: usize, index: usize },
    #[error("index set {0} is empty")]
    EmptyIndexSet(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPattern {
    /// Strictly increasing sentence indices.
    pub sentence_indices: Vec<usize>,
    pub granularity: usize,
    pub start: usize,
    pub contiguous: bool,
}

impl ChunkPattern {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        assert!(!indices.is_empty(), "pattern must be non-empty");
        let start = indices[0];
        let contiguous = indices.windows(2).all(|w| w[1] == w[0] + 1);
        ChunkPattern {
            granularity: indices.len(),
            start,
            contiguous,
            sentence_indices: indices,
        }
    }

    pub fn contains(&self, sentence: usize) -> bool {
        self.sentence_indices.binary_search(&sentence).is_ok()
    }
}

/// How window start positions advance when building sliding patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StridePolicy {
    /// Stride equals the granularity: non-overlapping tiling.
    EqualsGranularity,
    /// Fixed stride for every granularity (overlapping windows when < g).
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternSet {
    pub n: usize,
    pub patterns: Vec<ChunkPattern>,
}

impl PatternSet {
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// Sum of pattern cardinalities: the number of sentence encodings an
    /// independent per-chunk re-encoding baseline would perform.
    pub fn reencoding_sentence_equivalents(&self) -> usize {
        self.patterns.iter().map(|p| p.sentence_indices.len()).sum()
    }
}

/// m x n membership mask. Zero where the sentence belongs to the pattern,
/// [`MASK_SENTINEL`] otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    pub rows: usize,
    pub cols: usize,
    member: Vec<bool>,
}

impl MaskMatrix {
    pub fn from_membership(rows: usize, cols: usize, member: Vec<bool>) -> Self {
        assert_eq!(member.len(), rows * cols);
        MaskMatrix {
            rows,
            cols,
            member,
        }
    }

    pub fn is_member(&self, row: usize, col: usize) -> bool {
        self.member[row * self.cols + col]
    }

    /// Additive mask entry in the requested precision.
    pub fn additive<T: Scalar>(&self, row: usize, col: usize) -> T {
        if self.is_member(row, col) {
            T::zero()
        } else {
            T::from_f64(MASK_SENTINEL)
        }
    }

    /// Recover the index sets from zero entries (inverse of `pattern_to_mask`).
    pub fn to_pattern_set(&self) -> PatternSet {
        let patterns = (0..self.rows)
            .map(|i| {
                ChunkPattern::new((0..self.cols).filter(|&j| self.is_member(i, j)).collect())
            })
            .collect();
        PatternSet {
            n: self.cols,
            patterns,
        }
    }
}

pub fn build_sliding_patterns(
    n: usize,
    granularities: &[usize],
    stride_policy: StridePolicy,
) -> Result<PatternSet, PatternError> {
    if n == 0 {
        return Err(PatternError::EmptyDocument);
    }
    if granularities.is_empty() {
        return Err(PatternError::NoGranularities);
    }
    if granularities.contains(&0) {
        return Err(PatternError::ZeroGranularity);
    }
    let mut gs: Vec<usize> = granularities.to_vec();
    gs.sort_unstable();
    gs.dedup();

    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut patterns = Vec::new();
    for &g in &gs {
        let stride = match stride_policy {
            StridePolicy::EqualsGranularity => g,
            StridePolicy::Fixed(s) => s.max(1),
        };
        let mut s = 0usize;
        while s < n {
            let end = (s + g).min(n);
            let indices: Vec<usize> = (s..end).collect();
            if seen.insert(indices.clone()) {
                patterns.push(ChunkPattern::new(indices));
            }
            s += stride;
        }
    }
    Ok(PatternSet { n, patterns })
}

pub fn build_explicit_patterns(
    n: usize,
    index_sets: &[Vec<usize>],
) -> Result<PatternSet, PatternError> {
    let mut patterns = Vec::with_capacity(index_sets.len());
    for (pos, set) in index_sets.iter().enumerate() {
        if set.is_empty() {
            return Err(PatternError::EmptyIndexSet(pos));
        }
        if let Some(&bad) = set.iter().find(|&&i| i >= n) {
            return Err(PatternError::IndexOutOfRange {
                set_position: pos,
                index: bad,
            });
        }
        patterns.push(ChunkPattern::new(set.clone()));
    }
    Ok(PatternSet { n, patterns })
}

pub fn pattern_to_mask(ps: &PatternSet) -> MaskMatrix {
    let rows = ps.patterns.len();
    let cols = ps.n;
    let mut member = vec![false; rows * cols];
    for (i, p) in ps.patterns.iter().enumerate() {
        for &j in &p.sentence_indices {
            member[i * cols + j] = true;
        }
    }
    MaskMatrix {
        rows,
        cols,
        member,
    }
}
