//! Marching-squares level sets joined into polylines.

use std::collections::HashMap;

use ndarray::Array2;

/// Polylines of one level; points are (column, row) in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolineSet {
    pub level: f64,
    pub polylines: Vec<Vec<[f64; 2]>>,
}

/// Edge identity: the lower-index grid node and whether the edge runs along
/// the row (`true`) or the column.
type EdgeId = (usize, usize, bool);

fn crossing(grid: &Array2<f64>, e: EdgeId, level: f64) -> [f64; 2] {
    let (i, j, horizontal) = e;
    let a = grid[[i, j]];
    let b = if horizontal { grid[[i, j + 1]] } else { grid[[i + 1, j]] };
    let t = if b == a { 0.5 } else { ((level - a) / (b - a)).clamp(0.0, 1.0) };
    if horizontal {
        [j as f64 + t, i as f64]
    } else {
        [j as f64, i as f64 + t]
    }
}

fn cell_segments(grid: &Array2<f64>, i: usize, j: usize, level: f64) -> Vec<(EdgeId, EdgeId)> {
    let above = |v: f64| v > level;
    let tl = grid[[i, j]];
    let tr = grid[[i, j + 1]];
    let br = grid[[i + 1, j + 1]];
    let bl = grid[[i + 1, j]];
    let top = (i, j, true);
    let bottom = (i + 1, j, true);
    let left = (i, j, false);
    let right = (i, j + 1, false);
    let case = (above(tl) as u8) << 3 | (above(tr) as u8) << 2 | (above(br) as u8) << 1 | above(bl) as u8;
    match case {
        0 | 15 => vec![],
        1 | 14 => vec![(left, bottom)],
        2 | 13 => vec![(bottom, right)],
        3 | 12 => vec![(left, right)],
        4 | 11 => vec![(top, right)],
        6 | 9 => vec![(top, bottom)],
        7 | 8 => vec![(left, top)],
        5 | 10 => {
            // saddle: the cell centre decides which corners connect
            let centre_above = above((tl + tr + br + bl) / 4.0);
            if (case == 5) == centre_above {
                vec![(left, top), (bottom, right)]
            } else {
                vec![(left, bottom), (top, right)]
            }
        }
        _ => unreachable!(),
    }
}

fn join(segments: Vec<(EdgeId, EdgeId)>) -> Vec<Vec<EdgeId>> {
    let mut by_edge: HashMap<EdgeId, Vec<usize>> = HashMap::new();
    for (k, (a, b)) in segments.iter().enumerate() {
        by_edge.entry(*a).or_default().push(k);
        by_edge.entry(*b).or_default().push(k);
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    let other = |k: usize, e: EdgeId| if segments[k].0 == e { segments[k].1 } else { segments[k].0 };
    let next_from = |e: EdgeId, used: &[bool]| by_edge[&e].iter().copied().find(|&k| !used[k]);
    // Open chains start at edges touched once; closed loops are picked up after.
    let mut starts: Vec<usize> = (0..segments.len())
        .filter(|&k| by_edge[&segments[k].0].len() == 1 || by_edge[&segments[k].1].len() == 1)
        .collect();
    starts.extend(0..segments.len());
    for s in starts {
        if used[s] {
            continue;
        }
        used[s] = true;
        let (a, b) = segments[s];
        let (first, mut tail) = if by_edge[&b].len() == 1 && by_edge[&a].len() != 1 { (b, a) } else { (a, b) };
        let mut line = vec![first, tail];
        while let Some(k) = next_from(tail, &used) {
            used[k] = true;
            tail = other(k, tail);
            line.push(tail);
        }
        lines.push(line);
    }
    lines
}

/// Level sets at `n_levels` values evenly spaced strictly between the grid's
/// minimum and maximum. A constant grid has none.
pub fn extract_isolines(grid: &Array2<f64>, n_levels: usize) -> Vec<IsolineSet> {
    let (m, n) = grid.dim();
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if n_levels == 0 || m < 2 || n < 2 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Vec::new();
    }
    (1..=n_levels)
        .map(|k| {
            let level = lo + (hi - lo) * k as f64 / (n_levels + 1) as f64;
            let mut segments = Vec::new();
            for i in 0..m - 1 {
                for j in 0..n - 1 {
                    segments.extend(cell_segments(grid, i, j, level));
                }
            }
            let polylines = join(segments)
                .into_iter()
                .map(|line| line.into_iter().map(|e| crossing(grid, e, level)).collect())
                .collect();
            IsolineSet { level, polylines }
        })
        .collect()
}
