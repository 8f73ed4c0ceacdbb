//! Reconstruction quality metrics.
//!
//! A batch reconstruction is only defined up to ordering — the averaged
//! gradient carries no instance order — so quality is always measured
//! after a minimum-cost bijection between reconstructed and true
//! instances, never by index.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest batch the exact assignment solver accepts.
pub const MAX_MATCH_BATCH: usize = 128;

/// Result of matching a reconstructed batch against ground truth.
#[derive(Clone, Debug)]
pub struct MatchReport {
    /// `assignment[i] = j`: reconstruction `i` is paired with truth `j`.
    pub assignment: Vec<usize>,
    /// Mean per-pixel L1 of each matched pair, indexed like `assignment`.
    pub per_pair: Vec<f64>,
    /// Mean of `per_pair`.
    pub mean_l1: f64,
}

/// Mean absolute difference per element between two same-sized tensors.
pub fn mean_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.numel() != b.numel() {
        return Err(Error::shape("mean_l1", a.shape(), b.shape()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.numel() as f64)
}

/// Pairs reconstructions with ground-truth instances by the bijection that
/// minimizes total mean-L1 cost (solved exactly).
pub fn match_batch(recon: &[Tensor], truth: &[Tensor]) -> Result<MatchReport> {
    if recon.len() != truth.len() {
        return Err(Error::invalid(
            "match_batch",
            format!("{} reconstructions vs {} instances", recon.len(), truth.len()),
        ));
    }
    let n = recon.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if n > MAX_MATCH_BATCH {
        return Err(Error::invalid(
            "match_batch",
            format!("batch {n} exceeds the exact-assignment limit {MAX_MATCH_BATCH}"),
        ));
    }

    let mut cost = vec![vec![0.0f64; n]; n];
    for (i, r) in recon.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            cost[i][j] = mean_l1(r, t)?;
        }
    }

    let assignment = min_cost_assignment(&cost);
    let per_pair: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).collect();
    let mean = per_pair.iter().sum::<f64>() / n as f64;
    Ok(MatchReport {
        assignment,
        per_pair,
        mean_l1: mean,
    })
}

/// Exact minimum-cost perfect matching on a square cost matrix, by the
/// O(n^3) potential/augmenting-path form of the Hungarian method.
/// Returns `assignment[row] = column`.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based internally; index 0 is the virtual start column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // per column
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
    }
    assignment
}
