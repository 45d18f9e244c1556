//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use projsel::geometry::{ScanPosition, Vec3};

/// Non-increasing least-squares fit by trying every contiguous partition of
/// `y` and keeping the best one whose block means are non-increasing.
pub fn isotonic_by_enumeration(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for cuts in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut means = Vec::new();
        let mut start = 0;
        for i in 0..n {
            let boundary = i + 1 == n || cuts & (1 << i) != 0;
            if boundary {
                let m = y[start..=i].iter().sum::<f64>() / (i + 1 - start) as f64;
                means.push(m);
                fit.extend(std::iter::repeat_n(m, i + 1 - start));
                start = i + 1;
            }
        }
        if means.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            continue;
        }
        let err: f64 = fit.iter().zip(y).map(|(f, t)| (f - t) * (f - t)).sum();
        if best.as_ref().is_none_or(|(b, _)| err < *b) {
            best = Some((err, fit));
        }
    }
    best.expect("the single-block partition is always feasible").1
}

/// Euclidean projection of `-θ/ε` onto the permutahedron of `(n, …, 1)`,
/// via the enumeration oracle above.
pub fn soft_rank_oracle(theta: &[f64], eps: f64) -> Vec<f64> {
    let n = theta.len();
    let z: Vec<f64> = theta.iter().map(|t| -t / eps).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap());
    let y: Vec<f64> = order
        .iter()
        .enumerate()
        .map(|(pos, &i)| z[i] - (n - pos) as f64)
        .collect();
    let fit = isotonic_by_enumeration(&y);
    let mut out = vec![0.0; n];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = z[i] - fit[pos];
    }
    out
}

/// Descending ranks with ties averaged, by counting.
pub fn hard_rank_oracle(theta: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .map(|&t| {
            let above = theta.iter().filter(|&&o| o > t).count() as f64;
            let tied = theta.iter().filter(|&&o| o == t).count() as f64;
            above + (tied + 1.0) / 2.0
        })
        .collect()
}

/// Whether `r` lies in the permutahedron of `(n, …, 1)` up to `tol`.
pub fn in_permutahedron(r: &[f64], tol: f64) -> bool {
    let n = r.len();
    let mut s = r.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut phi = 0.0;
    for (j, v) in s.iter().enumerate() {
        acc += v;
        phi += (n - j) as f64;
        if acc > phi + tol {
            return false;
        }
    }
    (acc - phi).abs() <= tol
}

pub fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Chord of the line `o + t·d` (unit `d`) through the box `[lo, hi]`, by
/// intersecting each of the six face planes and keeping hits on the face.
pub fn box_chord_by_faces(lo: Vec3, hi: Vec3, o: Vec3, d: Vec3) -> f64 {
    let mut hits: Vec<f64> = Vec::new();
    for axis in 0..3 {
        let da = d.axis(axis);
        if da == 0.0 {
            continue;
        }
        for plane in [lo.axis(axis), hi.axis(axis)] {
            let t = (plane - o.axis(axis)) / da;
            let p = o + d * t;
            let on_face = (0..3)
                .filter(|&b| b != axis)
                .all(|b| p.axis(b) >= lo.axis(b) - 1e-12 && p.axis(b) <= hi.axis(b) + 1e-12);
            if on_face {
                hits.push(t);
            }
        }
    }
    if hits.len() < 2 {
        return 0.0;
    }
    let tmin = hits.iter().cloned().fold(f64::INFINITY, f64::min);
    let tmax = hits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    tmax - tmin
}

/// `2√(r² - d⊥²)` with the perpendicular distance from `|oc × d|`.
pub fn sphere_chord_by_distance(c: Vec3, r: f64, o: Vec3, d: Vec3) -> f64 {
    let perp = (c - o).cross(d).norm();
    if perp >= r {
        0.0
    } else {
        2.0 * (r * r - perp * perp).sqrt()
    }
}

/// Great-circle distance through the chord length of the unit vectors.
pub fn great_circle(a: &ScanPosition, b: &ScanPosition) -> f64 {
    let chord = (a.direction() - b.direction()).norm();
    2.0 * (0.5 * chord).min(1.0).asin()
}

/// Best feasible `k`-subset by walking all `n`-bit masks in increasing
/// lexicographic order of index lists.
pub fn exhaustive_by_bitmask(d2: &[f64], feasible: impl Fn(usize, usize) -> bool, k: usize) -> Option<Vec<usize>> {
    let n = d2.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for bits in 0u64..(1 << n) {
        if bits.count_ones() as usize != k {
            continue;
        }
        let idx: Vec<usize> = (0..n).filter(|i| bits & (1 << i) != 0).collect();
        let ok = idx
            .iter()
            .enumerate()
            .all(|(a, &i)| idx[a + 1..].iter().all(|&j| feasible(i, j)));
        if !ok {
            continue;
        }
        let v: f64 = idx.iter().map(|&i| d2[i]).sum();
        let better = match &best {
            None => true,
            Some((b, bi)) => v > *b || (v == *b && idx < *bi),
        };
        if better {
            best = Some((v, idx));
        }
    }
    best.map(|b| b.1)
}

/// Random labelling instance: uniform positions on the sphere and `d²` in
/// `[0, 1)`, all drawn from `seed`.
pub fn random_label_problem(seed: u64, n: usize, k: usize, delta_min: f64) -> projsel::labeler::LabelProblem {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<ScanPosition> = (0..n)
        .map(|_| {
            let z: f64 = rng.random_range(-1.0..1.0);
            ScanPosition::new(rng.random_range(0.0..std::f64::consts::TAU), z.asin()).unwrap()
        })
        .collect();
    let d2 = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    projsel::labeler::LabelProblem::new(projsel::detectability::DetectabilityVector(d2), positions, k, delta_min)
        .unwrap()
}

/// Seeded random network inputs and a random `k`-of-`n` label.
pub fn random_scan(seed: u64, n: usize, k: usize) -> (Vec<Vec<f64>>, projsel::ste::SelectionMask) {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let side = projsel::model::INPUT_SIDE;
    let inputs = (0..n)
        .map(|_| (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut values = vec![0u8; n];
    for &i in &idx[..k] {
        values[i] = 1;
    }
    (inputs, projsel::ste::SelectionMask::new(values, k).unwrap())
}

/// Relative error between the analytic directional derivative of the
/// training gradient and a central difference of the rank surrogate along a
/// random parameter direction. `None` when the step crosses a kink of the
/// piecewise-linear soft rank.
pub fn pipeline_gradient_probe(seed: u64, cfg: &projsel::model::TrainConfig) -> Option<f64> {
    use projsel::model::{rank_surrogate, scan_gradient, Regressor, PARAM_COUNT};
    use rand::{Rng, SeedableRng};
    let (inputs, label) = random_scan(seed, 12, cfg.k);
    let r = Regressor::new(seed);
    let step = scan_gradient(&r, &inputs, &label, cfg).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let dir: Vec<f64> = (0..PARAM_COUNT).map(|_| rng.random_range(-1.0..1.0)).collect();
    let analytic: f64 = step.grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
    let h = 1e-6;
    let shifted = |t: f64| {
        let p: Vec<f64> = r.params().iter().zip(&dir).map(|(a, d)| a + t * d).collect();
        let mut q = Regressor::from_params(p).unwrap();
        let (shift, scale) = r.input_map();
        q.set_input_map(shift.to_vec(), scale.to_vec()).unwrap();
        q
    };
    for t in [-h, h] {
        let other = scan_gradient(&shifted(t), &inputs, &label, cfg).unwrap();
        if other.output.soft.partition.blocks() != step.output.soft.partition.blocks()
            || other.output.soft.permutation != step.output.soft.permutation
        {
            return None;
        }
    }
    let surrogate = |t| rank_surrogate(&shifted(t), &inputs, &step.rank_grad, cfg).unwrap();
    let fd = central_difference(surrogate, h);
    // a ReLU kink inside the stencil shows up as step-size dependence
    if rel_err(fd, central_difference(surrogate, h / 4.0)) > 1e-6 {
        return None;
    }
    if analytic.abs().max(fd.abs()) < 1e-9 {
        return None;
    }
    Some(rel_err(analytic, fd))
}
