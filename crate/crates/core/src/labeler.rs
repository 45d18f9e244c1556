//! Supervision labels: `k` of `n` positions maximizing total detectability
//! with every selected pair at least `delta_min` apart on the unit sphere.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::detectability::DetectabilityVector;
use crate::error::{check_len, Error, Result};
use crate::geometry::{fibonacci_sphere, haversine, ScanPosition};
use crate::ste::SelectionMask;

/// Largest `C(n, k)` the exhaustive solver accepts.
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone)]
pub struct LabelProblem {
    pub d2: DetectabilityVector,
    pub positions: Vec<ScanPosition>,
    pub k: usize,
    /// Radians on the unit sphere.
    pub delta_min: f64,
}

impl LabelProblem {
    pub fn new(
        d2: DetectabilityVector,
        positions: Vec<ScanPosition>,
        k: usize,
        delta_min: f64,
    ) -> Result<Self> {
        check_len(positions.len(), d2.len())?;
        if k == 0 || k > positions.len() {
            return Err(Error::invalid(format!(
                "k = {k} outside [1, {}]",
                positions.len()
            )));
        }
        if !(delta_min >= 0.0) {
            return Err(Error::invalid("delta_min must be non-negative"));
        }
        Ok(LabelProblem {
            d2,
            positions,
            k,
            delta_min,
        })
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    /// `Σ d²` over the selected entries.
    pub fn objective(&self, mask: &SelectionMask) -> f64 {
        mask.indices().iter().map(|&i| self.d2.as_slice()[i]).sum()
    }

    /// Whether every selected pair is at least `delta_min` apart.
    pub fn satisfies_separation(&self, mask: &SelectionMask) -> bool {
        let idx = mask.indices();
        idx.iter().enumerate().all(|(a, &i)| {
            idx[a + 1..]
                .iter()
                .all(|&j| haversine(&self.positions[i], &self.positions[j], 1.0) >= self.delta_min)
        })
    }
}

/// Walks positions by descending `d²` (ties by lower index) and accepts each
/// one that keeps the separation constraint, until `k` are accepted.
pub fn select_greedy(p: &LabelProblem) -> Result<SelectionMask> {
    let d2 = p.d2.as_slice();
    let mut order: Vec<usize> = (0..p.n()).collect();
    order.sort_by(|&a, &b| d2[b].total_cmp(&d2[a]).then(a.cmp(&b)));

    let mut accepted: Vec<usize> = Vec::with_capacity(p.k);
    for i in order {
        let ok = accepted
            .iter()
            .all(|&j| haversine(&p.positions[i], &p.positions[j], 1.0) >= p.delta_min);
        if ok {
            accepted.push(i);
            if accepted.len() == p.k {
                return SelectionMask::from_indices(p.n(), &accepted, p.k);
            }
        }
    }
    Err(Error::Infeasible {
        achieved: accepted.len(),
        required: p.k,
    })
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c > u64::MAX as u128 {
            return c;
        }
    }
    c
}

struct Search<'a> {
    d2: &'a [f64],
    feasible: &'a [Vec<bool>],
    k: usize,
    best: Option<(f64, Vec<usize>)>,
    current: Vec<usize>,
}

impl Search<'_> {
    fn run(&mut self, next: usize) {
        if self.current.len() == self.k {
            let value: f64 = self.current.iter().map(|&i| self.d2[i]).sum();
            // strict: the lexicographically first optimum wins
            if self.best.as_ref().is_none_or(|(b, _)| value > *b) {
                self.best = Some((value, self.current.clone()));
            }
            return;
        }
        let n = self.d2.len();
        let remaining = self.k - self.current.len();
        for i in next..=n - remaining {
            if self.current.iter().all(|&j| self.feasible[j][i]) {
                self.current.push(i);
                self.run(i + 1);
                self.current.pop();
            }
        }
    }
}

/// Exact maximizer over all feasible `k`-subsets, lexicographically smallest
/// index set among ties. Requires `C(n, k) ≤ 10⁶`.
pub fn select_exhaustive(p: &LabelProblem) -> Result<SelectionMask> {
    let n = p.n();
    let count = binomial(n, p.k);
    if count > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge(format!(
            "C({n}, {}) = {count} subsets exceeds {EXHAUSTIVE_LIMIT}",
            p.k
        )));
    }
    let feasible: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| haversine(&p.positions[i], &p.positions[j], 1.0) >= p.delta_min)
                .collect()
        })
        .collect();
    let d2 = p.d2.as_slice();

    let per_first: Vec<Option<(f64, Vec<usize>)>> = (0..=n - p.k)
        .into_par_iter()
        .map(|first| {
            let mut s = Search {
                d2,
                feasible: &feasible,
                k: p.k,
                best: None,
                current: vec![first],
            };
            s.run(first + 1);
            s.best
        })
        .collect();

    let mut best: Option<(f64, Vec<usize>)> = None;
    for cand in per_first.into_iter().flatten() {
        if best.as_ref().is_none_or(|(b, _)| cand.0 > *b) {
            best = Some(cand);
        }
    }
    match best {
        Some((_, idx)) => SelectionMask::from_indices(n, &idx, p.k),
        None => Err(Error::Infeasible {
            achieved: 0,
            required: p.k,
        }),
    }
}

/// Half the mean nearest-neighbour great-circle distance of a `k`-point
/// Fibonacci lattice. A single point counts as having its neighbour at `π`.
pub fn default_delta_min(k: usize) -> Result<f64> {
    let pts = fibonacci_sphere(k)?;
    if k == 1 {
        return Ok(0.5 * PI);
    }
    let total: f64 = pts
        .iter()
        .enumerate()
        .map(|(i, a)| {
            pts.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| haversine(a, b, 1.0))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(0.5 * total / k as f64)
}
