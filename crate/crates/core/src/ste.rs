//! Top-k threshold on descending ranks with a straight-through backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::softrank::RankVector;

/// Binary selection over `n` candidate projections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    values: Vec<u8>,
    k: usize,
}

impl SelectionMask {
    /// Builds a mask from explicit 0/1 entries, with `k` the intended count.
    pub fn new(values: Vec<u8>, k: usize) -> Result<Self> {
        if let Some(i) = values.iter().position(|&v| v > 1) {
            return Err(Error::invalid(format!("mask entry {i} is not 0 or 1")));
        }
        if k == 0 || k > values.len() {
            return Err(Error::invalid(format!(
                "k = {k} outside [1, {}]",
                values.len()
            )));
        }
        Ok(SelectionMask { values, k })
    }

    pub fn from_indices(n: usize, indices: &[usize], k: usize) -> Result<Self> {
        let mut values = vec![0u8; n];
        for &i in indices {
            if i >= n {
                return Err(Error::invalid(format!("index {i} out of range for n = {n}")));
            }
            values[i] = 1;
        }
        SelectionMask::new(values, k)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of selected entries.
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// `mask_i = 1` iff `ranks_i ≤ k`. Soft ranks may select fewer or more than
/// `k`; read [`SelectionMask::count`] for the actual number.
pub fn threshold_topk(ranks: &RankVector, k: usize) -> Result<SelectionMask> {
    let n = ranks.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} outside [1, {n}]")));
    }
    if ranks.as_slice().iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid("ranks must be finite"));
    }
    let kf = k as f64;
    let values = ranks
        .as_slice()
        .iter()
        .map(|&r| u8::from(r <= kf))
        .collect();
    Ok(SelectionMask { values, k })
}

/// Backward pass of [`threshold_topk`]: the identity.
pub fn ste_vjp(upstream: &[f64], n: usize) -> Result<Vec<f64>> {
    check_len(n, upstream.len())?;
    Ok(upstream.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranks(v: &[f64]) -> RankVector {
        RankVector::from_values(v.to_vec())
    }

    #[test]
    fn threshold_examples() {
        let m = threshold_topk(&ranks(&[3.0, 1.0, 2.0]), 2).unwrap();
        assert_eq!(m.values(), &[0, 1, 1]);
        assert_eq!(m.count(), 2);
    }

    #[test]
    fn boundary_is_inclusive() {
        let m = threshold_topk(&ranks(&[2.0, 2.0000001, 1.0]), 2).unwrap();
        assert_eq!(m.values(), &[1, 0, 1]);
    }

    #[test]
    fn all_above_k_gives_empty_mask() {
        let m = threshold_topk(&ranks(&[2.5, 2.5, 2.5, 2.5]), 2).unwrap();
        assert_eq!(m.values(), &[0, 0, 0, 0]);
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn k_out_of_range() {
        assert!(threshold_topk(&ranks(&[1.0, 2.0]), 0).is_err());
        assert!(threshold_topk(&ranks(&[1.0, 2.0]), 3).is_err());
    }

    #[test]
    fn vjp_is_identity() {
        let up = [0.3, -0.1];
        let out = ste_vjp(&up, 2).unwrap();
        assert_eq!(out[0].to_bits(), up[0].to_bits());
        assert_eq!(out[1].to_bits(), up[1].to_bits());
        assert_eq!(ste_vjp(&[0.0; 4], 4).unwrap(), vec![0.0; 4]);
        assert!(ste_vjp(&up, 3).is_err());
    }

    #[test]
    fn mask_constructors_validate() {
        assert!(SelectionMask::new(vec![0, 2], 1).is_err());
        assert!(SelectionMask::from_indices(3, &[3], 1).is_err());
        let m = SelectionMask::from_indices(4, &[0, 2], 2).unwrap();
        assert_eq!(m.indices(), vec![0, 2]);
    }
}
