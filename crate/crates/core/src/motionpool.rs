//! Change ranking of pixels between consecutive frames and the rolling pool of
//! thresholded velocity vectors.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imaging::{CloudMask, ThermalFrame};
use crate::optflow::normalize_pair;

#[derive(Debug, Clone)]
pub struct ChangeRank {
    /// Normalized absolute differences, summing to one.
    pub d: Array2<f64>,
    /// Accumulated share of change: the inclusive cumulative sum of `d` in
    /// ascending order, written back at each pixel's position.
    pub r: Array2<f64>,
    /// Set when the frames are identical and `d` fell back to uniform.
    pub degenerate: bool,
}

pub fn change_rank(prev: &ThermalFrame, next: &ThermalFrame) -> Result<ChangeRank> {
    let (a, b) = normalize_pair(prev, next)?;
    Ok(rank_differences((&a - &b).mapv(f64::abs)))
}

pub(crate) fn rank_differences(diff: Array2<f64>) -> ChangeRank {
    let total: f64 = diff.sum();
    let count = diff.len() as f64;
    let degenerate = !(total > 0.0);
    let d = if degenerate {
        Array2::from_elem(diff.dim(), 1.0 / count)
    } else {
        diff / total
    };
    let n = d.ncols();
    let flat: Vec<f64> = d.iter().copied().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    // Stable sort keeps row-major order among ties.
    order.sort_by(|&x, &y| flat[x].total_cmp(&flat[y]));
    let mut r = Array2::zeros(d.dim());
    let mut acc = 0.0;
    for &k in &order {
        acc += flat[k];
        r[[k / n, k % n]] = acc;
    }
    ChangeRank { d, r, degenerate }
}

/// Selects pixels whose accumulated change share is at least `tau`.
pub fn threshold_select(rank: &ChangeRank, tau: f64) -> Result<CloudMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("selection threshold {tau} must lie in (0, 1)")));
    }
    Ok(CloudMask::new(rank.r.mapv(|r| r >= tau)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector {
    /// Column coordinate.
    pub x: f64,
    /// Row coordinate.
    pub y: f64,
    /// m/s along columns.
    pub u: f64,
    /// m/s along rows.
    pub v: f64,
    /// Frames since the vector was pushed.
    pub age: usize,
    pub responsibilities: Vec<f64>,
}

/// Velocity vectors of the most recent frames, newest first.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorPool {
    depth: usize,
    frames: VecDeque<Vec<PooledVector>>,
}

impl VectorPool {
    /// A pool retaining the `depth` most recent frames (current included).
    pub fn new(depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::invalid("pool depth must be at least 1"));
        }
        Ok(Self {
            depth,
            frames: VecDeque::new(),
        })
    }

    /// Depth for a look-back of `ell` frames; `inclusive_lookback` keeps
    /// frames `k` through `k - ell`, i.e. `ell + 1` of them.
    pub fn with_lookback(ell: usize, inclusive_lookback: bool) -> Result<Self> {
        Self::new(if inclusive_lookback { ell + 1 } else { ell })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames_held(&self) -> usize {
        self.frames.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PooledVector> {
        self.frames.iter().flatten()
    }

    pub fn to_vec(&self) -> Vec<PooledVector> {
        self.iter().cloned().collect()
    }

    /// Ages the pool by one frame, adds `vectors` at age 0 and evicts
    /// anything older than `depth - 1`.
    pub fn push_frame(&self, vectors: Vec<PooledVector>) -> Self {
        let mut next = self.clone();
        for frame in next.frames.iter_mut() {
            for v in frame.iter_mut() {
                v.age += 1;
            }
        }
        next.frames.push_front(
            vectors
                .into_iter()
                .map(|mut v| {
                    v.age = 0;
                    v
                })
                .collect(),
        );
        next.frames.truncate(self.depth);
        next
    }
}
