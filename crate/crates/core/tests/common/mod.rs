//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;

/// All permutations of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        heap(k - 1, a, out);
        for i in 0..k - 1 {
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
            heap(k - 1, a, out);
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

/// Cheapest perfect matching by exhaustive search. Totals are summed in row
/// order so they are comparable bit for bit.
pub fn brute_assignment(cost: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    let mut best = (Vec::new(), f64::INFINITY);
    for p in permutations(n) {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        if total < best.1 {
            best = (p, total);
        }
    }
    best
}

fn root(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        x = parent[x];
    }
    x
}

/// Minimum spanning tree of a complete graph by enumerating every
/// `(k-1)`-subset of edges. Returns sorted `(u, v)` pairs with `u < v`.
pub fn brute_mst(w: &DMatrix<f64>) -> (Vec<(usize, usize)>, f64) {
    let k = w.nrows();
    let edges: Vec<(usize, usize)> = (0..k).flat_map(|u| (u + 1..k).map(move |v| (u, v))).collect();
    let m = edges.len();
    let need = k - 1;
    let mut best: (Vec<(usize, usize)>, f64) = (Vec::new(), f64::INFINITY);
    let mut pick: Vec<usize> = (0..need).collect();
    loop {
        let mut parent: Vec<usize> = (0..k).collect();
        let mut acyclic = true;
        for &e in &pick {
            let (a, b) = (root(&mut parent, edges[e].0), root(&mut parent, edges[e].1));
            if a == b {
                acyclic = false;
                break;
            }
            parent[a] = b;
        }
        if acyclic {
            let total: f64 = pick.iter().map(|&e| w[edges[e]]).sum();
            if total < best.1 {
                best = (pick.iter().map(|&e| edges[e]).collect(), total);
            }
        }
        // Next combination in lexicographic order.
        let Some(i) = (0..need).rev().find(|&i| pick[i] < m - need + i) else {
            break;
        };
        pick[i] += 1;
        for j in i + 1..need {
            pick[j] = pick[j - 1] + 1;
        }
    }
    best.0.sort_unstable();
    best
}

/// Penalty definitions written out independently of the library.
#[derive(Debug, Clone, Copy)]
pub enum RefPenalty {
    L1,
    Group,
    Elitist,
    /// `sum_p ||x_p||_2^s`.
    Fractional(f64),
}

impl RefPenalty {
    pub fn value(&self, x: &[f64], groups: &[Range<usize>]) -> f64 {
        match *self {
            RefPenalty::L1 => x.iter().map(|v| v.abs()).sum(),
            RefPenalty::Group => groups.iter().map(|g| x[g.clone()].iter().map(|v| v * v).sum::<f64>().sqrt()).sum(),
            RefPenalty::Elitist => groups
                .iter()
                .map(|g| x[g.clone()].iter().map(|v| v.abs()).sum::<f64>().powi(2))
                .sum::<f64>()
                .sqrt(),
            RefPenalty::Fractional(s) => groups
                .iter()
                .map(|g| x[g.clone()].iter().map(|v| v * v).sum::<f64>().sqrt().powf(s))
                .sum(),
        }
    }
}

pub fn prox_objective(u: &[f64], v: &[f64], t: f64, pen: RefPenalty, groups: &[Range<usize>]) -> f64 {
    let fit: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * fit + t * pen.value(u, groups)
}

/// Grid search over the box between 0 and `v` followed by a shrinking
/// pattern search over axis, group and random directions.
pub fn prox_oracle<R: Rng>(v: &[f64], t: f64, pen: RefPenalty, groups: &[Range<usize>], rng: &mut R) -> Vec<f64> {
    const GRID: usize = 7;
    let q = v.len();
    let f = |u: &[f64]| prox_objective(u, v, t, pen, groups);

    let mut best = vec![0.0; q];
    let mut best_f = f(&best);
    let mut idx = vec![0usize; q];
    let mut u = vec![0.0; q];
    'grid: loop {
        for i in 0..q {
            u[i] = v[i] * idx[i] as f64 / (GRID - 1) as f64;
        }
        let fu = f(&u);
        if fu < best_f {
            best_f = fu;
            best.copy_from_slice(&u);
        }
        for i in 0..q {
            idx[i] += 1;
            if idx[i] < GRID {
                continue 'grid;
            }
            idx[i] = 0;
        }
        break;
    }

    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..q {
        let mut e = vec![0.0; q];
        e[i] = 1.0;
        dirs.push(e);
    }
    for g in groups {
        let mut d = vec![0.0; q];
        d[g.clone()].copy_from_slice(&v[g.clone()]);
        dirs.push(d);
    }
    dirs.push(v.to_vec());
    // Minimizers keep the signs of v and shrink magnitudes, so
    // soft-thresholded copies of v are natural escape directions from 0.
    let top = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    for k in 1..10 {
        let tau = top * k as f64 / 10.0;
        dirs.push(v.iter().map(|x| x.signum() * (x.abs() - tau).max(0.0)).collect());
    }
    // The k largest entries of every group, kept as in v or flattened to
    // the group's largest magnitude.
    let widest = groups.iter().map(|g| g.len()).max().unwrap_or(0);
    for k in 1..=widest {
        let mut keep = vec![0.0; q];
        let mut flat = vec![0.0; q];
        for g in groups {
            let mut order: Vec<usize> = g.clone().collect();
            order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()));
            let peak = v[order[0]].abs();
            for &i in order.iter().take(k) {
                keep[i] = v[i];
                flat[i] = v[i].signum() * peak;
            }
        }
        dirs.push(keep);
        dirs.push(flat);
    }
    for _ in 0..4 * q {
        dirs.push((0..q).map(|_| rng.random_range(-1.0..1.0)).collect());
        dirs.push(v.iter().map(|x| x * rng.random_range(0.0..1.0)).collect());
    }
    for d in &mut dirs {
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            d.iter_mut().for_each(|x| *x /= n);
        }
    }

    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1e-3);
    let mut h = scale / (GRID - 1) as f64;
    let mut trial = vec![0.0; q];
    while h > 1e-11 {
        let mut improved = false;
        for d in &dirs {
            for sign in [1.0, -1.0] {
                for i in 0..q {
                    trial[i] = best[i] + sign * h * d[i];
                }
                let ft = f(&trial);
                if ft < best_f {
                    best_f = ft;
                    best.copy_from_slice(&trial);
                    improved = true;
                }
            }
        }
        // Exact zeros are out of reach for finite steps.
        for g in groups {
            trial.copy_from_slice(&best);
            trial[g.clone()].iter_mut().for_each(|x| *x = 0.0);
            let ft = f(&trial);
            if ft < best_f {
                best_f = ft;
                best.copy_from_slice(&trial);
                improved = true;
            }
        }
        for i in 0..q {
            trial.copy_from_slice(&best);
            trial[i] = 0.0;
            let ft = f(&trial);
            if ft < best_f {
                best_f = ft;
                best.copy_from_slice(&trial);
                improved = true;
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    best
}

/// Random partition of `0..q` into contiguous ranges.
pub fn random_groups<R: Rng>(q: usize, rng: &mut R) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < q {
        let len = rng.random_range(1..=q - start);
        out.push(start..start + len);
        start += len;
    }
    out
}
