//! Triangular window geometry.
//!
//! The grid is tiled with `w × w` squares. Each tile splits along its
//! anti-diagonal into a LOWER group (`r + c < w`, `w(w+1)/2` pixels) and an
//! UPPER group (`r + c ≥ w`, `w(w−1)/2` pixels), with `(r, c)` tile-local.
//! Every pixel attends to the `k` nearest other members of its group
//! (Euclidean distance, ties broken by row-major index).

use crate::error::{contract, Result};

/// Local neighborhood of one centre pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleWindow {
    /// Flat index `r·W + c` of the centre.
    pub center: usize,
    pub position: (usize, usize),
    /// `𝒩(i)`, nearest first.
    pub neighbors: Vec<usize>,
    /// `e_ij = position(j) − position(i)` as `(Δrow, Δcol)`, aligned with `neighbors`.
    pub edges: Vec<(i64, i64)>,
    /// For each `j ∈ 𝒩(i)`, the set `𝒩(j)`.
    pub second_hop: Vec<Vec<usize>>,
    /// `θ_ijk` for `k ∈ 𝒩(j)`: angle at vertex `i` between `e_ij` and `e_ik`.
    pub angles: Vec<Vec<f64>>,
}

/// Angle between two offsets in `[0, π]`. A zero-length offset (which happens
/// when `k = i`) yields 0. `atan2(|a×b|, a·b)` equals the clamped arccosine of
/// the normalized dot product and stays exact for collinear offsets.
pub fn edge_angle(a: (i64, i64), b: (i64, i64)) -> f64 {
    if a == (0, 0) || b == (0, 0) {
        return 0.0;
    }
    let cross = (a.0 * b.1 - a.1 * b.0).abs() as f64;
    let dot = (a.0 * b.0 + a.1 * b.1) as f64;
    cross.atan2(dot)
}

/// Smallest group size for a window of side `w`.
pub fn min_group_size(window: usize) -> usize {
    window * window.saturating_sub(1) / 2
}

/// Tile-local group id: 0 = LOWER, 1 = UPPER.
pub fn group_of(r: usize, c: usize, window: usize) -> usize {
    usize::from(r % window + c % window >= window)
}

/// The `k` nearest same-group pixels of `(r, c)` in grid coordinates.
fn nearest_in_group(r: usize, c: usize, width: usize, window: usize, k: usize) -> Vec<usize> {
    let (tr, tc) = (r / window * window, c / window * window);
    let g = group_of(r, c, window);
    let mut cands: Vec<(i64, usize)> = Vec::new();
    for rr in tr..tr + window {
        for cc in tc..tc + window {
            if (rr, cc) == (r, c) || group_of(rr, cc, window) != g {
                continue;
            }
            let (dr, dc) = (rr as i64 - r as i64, cc as i64 - c as i64);
            cands.push((dr * dr + dc * dc, rr * width + cc));
        }
    }
    // Squared integer distances compare exactly.
    cands.sort_unstable();
    cands.into_iter().take(k).map(|(_, idx)| idx).collect()
}

fn check_args(height: usize, width: usize, window: usize, k: usize) -> Result<()> {
    if window < 2 {
        return Err(contract(format!("window size must be at least 2, got {window}")));
    }
    if height == 0 || width == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
        return Err(contract(format!(
            "a {height}x{width} grid is not tiled by {window}x{window} windows; pad to a multiple of {window}"
        )));
    }
    let limit = min_group_size(window) - 1;
    if k == 0 || k > limit {
        return Err(contract(format!(
            "neighbor count {k} must be in 1..={limit} for window size {window} (smallest group has {} pixels)",
            min_group_size(window)
        )));
    }
    Ok(())
}

/// One [`TriangleWindow`] per pixel of a `height × width` grid, in row-major order.
pub fn build_triangle_windows(
    height: usize,
    width: usize,
    window: usize,
    k: usize,
) -> Result<Vec<TriangleWindow>> {
    check_args(height, width, window, k)?;
    let nbrs: Vec<Vec<usize>> = (0..height * width)
        .map(|i| nearest_in_group(i / width, i % width, width, window, k))
        .collect();
    let pos = |i: usize| ((i / width) as i64, (i % width) as i64);
    let offset = |from: usize, to: usize| {
        let (a, b) = (pos(from), pos(to));
        (b.0 - a.0, b.1 - a.1)
    };
    Ok((0..height * width)
        .map(|i| {
            let neighbors = nbrs[i].clone();
            let edges: Vec<(i64, i64)> = neighbors.iter().map(|&j| offset(i, j)).collect();
            let second_hop: Vec<Vec<usize>> = neighbors.iter().map(|&j| nbrs[j].clone()).collect();
            let angles = edges
                .iter()
                .zip(&second_hop)
                .map(|(&e_ij, ks)| ks.iter().map(|&kk| edge_angle(e_ij, offset(i, kk))).collect())
                .collect();
            TriangleWindow {
                center: i,
                position: (i / width, i % width),
                neighbors,
                edges,
                second_hop,
                angles,
            }
        })
        .collect())
}
