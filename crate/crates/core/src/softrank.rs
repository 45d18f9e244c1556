//! Hard and soft descending ranks.
//!
//! Ranking is the linear program `argmax_{μ ∈ P(φ)} ⟨μ, -θ⟩` over the
//! permutahedron of `φ = (n, n-1, …, 1)`. Adding the quadratic regularizer
//! `½‖μ‖²` with strength `ε` turns it into the Euclidean projection of `-θ/ε`
//! onto `P(φ)`, which reduces to one sort plus one isotonic regression:
//!
//! ```text
//! z = -θ/ε
//! σ = argsort(z, descending)
//! v = isotonic_decreasing(z[σ] - φ)
//! r[σ[j]] = z[σ[j]] - v[j]
//! ```
//!
//! The map is piecewise linear. Inside a PAV block the fitted value is the
//! block mean, so the Jacobian is `-(I - Sᵀ B S)/ε` where `S` is the sort
//! permutation and `B` the block-averaging matrix. `B` is symmetric, so the
//! Jacobian is too and the JVP doubles as the VJP.
//!
//! Ranks are descending: the largest score gets rank 1.

use std::cmp::Ordering;
use std::ops::Range;

use crate::error::{check_len, Error, Result};

/// Per-projection regressor outputs. Non-empty and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("score vector is empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("score {i} is not finite")));
        }
        Ok(ScoreVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn negated(&self) -> ScoreVector {
        ScoreVector(self.0.iter().map(|v| -v).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// The base point `φ = (n, n-1, …, 1)` of the permutahedron.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutahedronWeights(Vec<f64>);

impl PermutahedronWeights {
    pub fn new(n: usize) -> Self {
        PermutahedronWeights((1..=n).rev().map(|v| v as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `n(n+1)/2`, the coordinate sum shared by every point of `P(φ)`.
    pub fn total(&self) -> f64 {
        let n = self.0.len() as f64;
        n * (n + 1.0) / 2.0
    }
}

/// A point of the permutahedron, in rank units (1 = best).
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector(Vec<f64>);

impl RankVector {
    pub fn from_values(values: Vec<f64>) -> Self {
        RankVector(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Checks permutahedron membership: coordinate sum equal to `n(n+1)/2`
    /// and the sorted prefix sums majorized by those of `φ`.
    pub fn in_permutahedron(&self, rel_tol: f64) -> bool {
        let n = self.0.len();
        let phi = PermutahedronWeights::new(n);
        let mut sorted = self.0.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
        let scale = phi.total().max(1.0);
        let mut prefix = 0.0;
        let mut bound = 0.0;
        for (v, w) in sorted.iter().zip(phi.as_slice()) {
            prefix += v;
            bound += w;
            if prefix > bound + rel_tol * scale {
                return false;
            }
        }
        (prefix - phi.total()).abs() <= rel_tol * scale
    }
}

/// Regularization strength `ε > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationStrength(f64);

impl RegularizationStrength {
    pub fn new(epsilon: f64) -> Result<Self> {
        if epsilon > 0.0 && epsilon.is_finite() {
            Ok(RegularizationStrength(epsilon))
        } else {
            Err(Error::invalid(format!(
                "regularization strength must be positive and finite, got {epsilon}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Level sets of an isotonic fit: contiguous blocks with one value each,
/// non-increasing from block to block.
#[derive(Debug, Clone, PartialEq)]
pub struct PavPartition {
    blocks: Vec<Range<usize>>,
    values: Vec<f64>,
}

impl PavPartition {
    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of indices covered.
    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.end)
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Applies the block-averaging matrix to `x` (indices in sorted order).
    fn average_blocks(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for block in &self.blocks {
            let mean = x[block.clone()].iter().sum::<f64>() / block.len() as f64;
            out[block.clone()].iter_mut().for_each(|o| *o = mean);
        }
        out
    }
}

/// Descending ranks with ties sharing the average of the ranks they span.
pub fn hard_rank(scores: &ScoreVector) -> RankVector {
    let s = scores.as_slice();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; s.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && s[order[end]] == s[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    RankVector(ranks)
}

/// Least-squares non-increasing fit by pool adjacent violators.
pub fn isotonic_regression_decreasing(targets: &[f64]) -> Result<(Vec<f64>, PavPartition)> {
    if let Some(i) = targets.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("target {i} is not finite")));
    }
    // (start, len, sum) per block
    let mut stack: Vec<(usize, usize, f64)> = Vec::with_capacity(targets.len());
    for (i, &y) in targets.iter().enumerate() {
        let mut block = (i, 1usize, y);
        while let Some(&(start, len, sum)) = stack.last() {
            // the previous block must not be smaller than the new one
            if sum * block.1 as f64 >= block.2 * len as f64 {
                break;
            }
            stack.pop();
            block = (start, len + block.1, sum + block.2);
        }
        stack.push(block);
    }

    let mut fitted = Vec::with_capacity(targets.len());
    let mut blocks = Vec::with_capacity(stack.len());
    let mut values = Vec::with_capacity(stack.len());
    for (start, len, sum) in stack {
        let mean = sum / len as f64;
        fitted.extend(std::iter::repeat(mean).take(len));
        blocks.push(start..start + len);
        values.push(mean);
    }
    Ok((fitted, PavPartition { blocks, values }))
}

/// Result of [`soft_rank`] together with what the JVP needs.
#[derive(Debug, Clone)]
pub struct SoftRank {
    pub ranks: RankVector,
    /// PAV blocks in sorted order.
    pub partition: PavPartition,
    /// `permutation[j]` is the input index at sorted position `j`.
    pub permutation: Vec<usize>,
    pub eps: RegularizationStrength,
}

impl SoftRank {
    pub fn jvp(&self, tangent: &[f64]) -> Result<Vec<f64>> {
        jvp_impl(self.eps, &self.partition, &self.permutation, tangent)
    }

    /// Vector-Jacobian product. The Jacobian is symmetric, so this is the JVP.
    pub fn vjp(&self, cotangent: &[f64]) -> Result<Vec<f64>> {
        self.jvp(cotangent)
    }
}

/// Quadratically regularized descending soft ranks.
pub fn soft_rank(scores: &ScoreVector, eps: RegularizationStrength) -> SoftRank {
    let n = scores.len();
    let z: Vec<f64> = scores.as_slice().iter().map(|t| -t / eps.0).collect();

    let mut permutation: Vec<usize> = (0..n).collect();
    // stable: equal entries keep their input order
    permutation.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap_or(Ordering::Equal));

    let phi = PermutahedronWeights::new(n);
    let shifted: Vec<f64> = permutation
        .iter()
        .zip(phi.as_slice())
        .map(|(&i, w)| z[i] - w)
        .collect();
    let (fit, partition) =
        isotonic_regression_decreasing(&shifted).expect("finite scores give finite targets");

    let mut ranks = vec![0.0; n];
    for (j, &i) in permutation.iter().enumerate() {
        ranks[i] = z[i] - fit[j];
    }
    SoftRank {
        ranks: RankVector(ranks),
        partition,
        permutation,
        eps,
    }
}

/// `J · tangent` for the Jacobian of [`soft_rank`] at `scores`.
///
/// `partition` and `permutation` must come from `soft_rank(scores, eps)`.
pub fn soft_rank_jvp(
    scores: &ScoreVector,
    eps: RegularizationStrength,
    partition: &PavPartition,
    permutation: &[usize],
    tangent: &[f64],
) -> Result<Vec<f64>> {
    check_len(scores.len(), permutation.len())?;
    check_len(scores.len(), partition.len())?;
    jvp_impl(eps, partition, permutation, tangent)
}

fn jvp_impl(
    eps: RegularizationStrength,
    partition: &PavPartition,
    permutation: &[usize],
    tangent: &[f64],
) -> Result<Vec<f64>> {
    check_len(permutation.len(), tangent.len())?;
    let dz: Vec<f64> = tangent.iter().map(|t| -t / eps.0).collect();
    let dz_sorted: Vec<f64> = permutation.iter().map(|&i| dz[i]).collect();
    let dfit = partition.average_blocks(&dz_sorted);
    let mut out = dz;
    for (j, &i) in permutation.iter().enumerate() {
        out[i] -= dfit[j];
    }
    Ok(out)
}

/// Ascending soft ranks: the smallest score gets rank 1.
pub fn ascending_soft_rank(scores: &ScoreVector, eps: RegularizationStrength) -> RankVector {
    soft_rank(&scores.negated(), eps).ranks
}
