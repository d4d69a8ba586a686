//! Frame-level attention masks.
//!
//! A mask is a set of directed frame pairs `(i, j)`: every token of frame `i`
//! may attend to every token of frame `j`. Rows are stored as sorted column
//! lists, which is also the order the sparse kernel visits blocks in.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DILATION: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// Every frame pair.
    Global,
    /// `(i, j)` with `j <= i`.
    Causal,
    /// Self pairs plus every pair touching the anchor or the query.
    Sparse,
    /// Sparse pairs plus pairs whose index difference is a multiple of the
    /// dilation.
    Dilated,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 4] = [
        MaskStrategy::Global,
        MaskStrategy::Causal,
        MaskStrategy::Sparse,
        MaskStrategy::Dilated,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MaskStrategy::Global => "global",
            MaskStrategy::Causal => "causal",
            MaskStrategy::Sparse => "sparse",
            MaskStrategy::Dilated => "dilated",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(MaskStrategy::Global),
            "causal" => Ok(MaskStrategy::Causal),
            "sparse" => Ok(MaskStrategy::Sparse),
            "dilated" => Ok(MaskStrategy::Dilated),
            other => Err(Error::Config(format!("unknown mask strategy '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMask {
    pub n_frames: usize,
    pub anchor: usize,
    pub query: usize,
    pub strategy: MaskStrategy,
    pub dilation: usize,
    rows: Vec<Vec<usize>>,
}

/// Whether frame `i` may attend to frame `j` under the given strategy.
fn keeps(strategy: MaskStrategy, anchor: usize, query: usize, dilation: usize, i: usize, j: usize) -> bool {
    let sparse = i == j || i == anchor || i == query || j == anchor || j == query;
    match strategy {
        MaskStrategy::Global => true,
        MaskStrategy::Causal => j <= i,
        MaskStrategy::Sparse => sparse,
        MaskStrategy::Dilated => sparse || i.abs_diff(j).is_multiple_of(dilation),
    }
}

impl FrameMask {
    pub fn build(
        strategy: MaskStrategy,
        n_frames: usize,
        anchor: usize,
        query: usize,
        dilation: usize,
    ) -> Result<Self> {
        if n_frames == 0 {
            return Err(Error::Precondition("mask needs at least one frame".into()));
        }
        for index in [anchor, query] {
            if index >= n_frames {
                return Err(Error::OutOfRange { index, len: n_frames });
            }
        }
        if dilation == 0 {
            return Err(Error::Precondition("dilation must be at least 1".into()));
        }
        let rows = (0..n_frames)
            .map(|i| {
                (0..n_frames)
                    .filter(|&j| keeps(strategy, anchor, query, dilation, i, j))
                    .collect()
            })
            .collect();
        Ok(Self {
            n_frames,
            anchor,
            query,
            strategy,
            dilation,
            rows,
        })
    }

    /// Frames attended to by frame `i`, ascending.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rows.get(i).is_some_and(|r| r.binary_search(&j).is_ok())
    }

    pub fn kept_pairs(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn dense_pairs(&self) -> usize {
        self.n_frames * self.n_frames
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&j| (i, j)))
    }
}

pub fn build_mask(
    strategy: MaskStrategy,
    n_frames: usize,
    anchor: usize,
    query: usize,
    dilation: usize,
) -> Result<FrameMask> {
    FrameMask::build(strategy, n_frames, anchor, query, dilation)
}

/// Closed-form kept-pair count. For the sparse strategy with distinct anchor
/// and query this is `5N − 6` (`N ≥ 2`); with anchor = query it is `3N − 2`.
pub fn expected_kept_pairs(strategy: MaskStrategy, n: usize, anchor_is_query: bool) -> Option<usize> {
    match strategy {
        MaskStrategy::Global => Some(n * n),
        MaskStrategy::Causal => Some(n * (n + 1) / 2),
        MaskStrategy::Sparse if anchor_is_query => Some(3 * n - 2),
        MaskStrategy::Sparse if n >= 2 => Some(5 * n - 6),
        _ => None,
    }
}
