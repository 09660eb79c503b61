mod common;

use common::{brute_assignment, brute_mst, prox_objective, prox_oracle, random_groups, RefPenalty};
use gmbua::bundle::cluster_candidates;
use gmbua::consensus::{hungarian, kruskal, prim_weight, SimilarityGraph};
use gmbua::penalty::{prox, GroupStructure, PenaltySpec};
use nalgebra::DMatrix;
use rand::Rng;

fn rng(seed: u64) -> gmbua::seed::Rng {
    gmbua::seed::rng(seed)
}

fn check_prox(spec: PenaltySpec, reference: RefPenalty, instances: usize, seed: u64) {
    let mut r = rng(seed);
    for case in 0..instances {
        let q = r.random_range(1..=6);
        let ranges = random_groups(q, &mut r);
        let groups = GroupStructure::new(ranges.clone()).unwrap();
        let v: Vec<f64> = (0..q).map(|_| r.random_range(-2.0..2.0)).collect();
        let t = r.random_range(0.01..1.5);
        let got = prox(&v, &groups, &spec, t).unwrap();
        let want = prox_oracle(&v, t, reference, &ranges, &mut r);
        let (fg, fw) = (prox_objective(&got, &v, t, reference, &ranges), prox_objective(&want, &v, t, reference, &ranges));
        let dist = got.iter().zip(&want).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(fg <= fw + 1e-6, "{reference:?} case {case}: objective {fg} vs oracle {fw}, v={v:?} t={t}");
        assert!(dist <= 1e-3, "{reference:?} case {case}: argument gap {dist}, got {got:?} want {want:?}");
    }
}

#[test]
fn l1_prox_matches_brute_force() {
    check_prox(PenaltySpec::l1(), RefPenalty::L1, 60, 1);
}

#[test]
fn group_prox_matches_brute_force() {
    check_prox(PenaltySpec::group(), RefPenalty::Group, 60, 2);
}

#[test]
fn elitist_prox_matches_brute_force() {
    check_prox(PenaltySpec::elitist(), RefPenalty::Elitist, 60, 3);
}

#[test]
fn fractional_prox_matches_brute_force() {
    check_prox(PenaltySpec::fractional(2.0, 0.5).unwrap(), RefPenalty::Fractional(0.5), 60, 4);
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut r = rng(10);
    for _ in 0..40 {
        let n = r.random_range(1..=6);
        let cost = DMatrix::from_fn(n, n, |_, _| r.random_range(0.0..10.0));
        let (assignment, total) = hungarian(&cost).unwrap();
        let (perm, best) = brute_assignment(&cost);
        assert_eq!(total, best);
        assert_eq!(assignment, perm);
    }
}

#[test]
fn hungarian_handles_ties() {
    let cost = DMatrix::from_element(4, 4, 1.0);
    let (assignment, total) = hungarian(&cost).unwrap();
    assert_eq!(total, 4.0);
    let mut sorted = assignment.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, vec![0, 1, 2, 3]);
}

fn random_graph(k: usize, r: &mut gmbua::seed::Rng) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(k, k);
    for u in 0..k {
        for v in u + 1..k {
            let x = r.random_range(0.0..1.0);
            w[(u, v)] = x;
            w[(v, u)] = x;
        }
    }
    w
}

#[test]
fn kruskal_matches_spanning_tree_enumeration() {
    let mut r = rng(11);
    for _ in 0..40 {
        let k = r.random_range(2..=6);
        let w = random_graph(k, &mut r);
        let graph = SimilarityGraph::from_weights(w.clone()).unwrap();
        let tree = kruskal(&graph);
        let mut edges: Vec<(usize, usize)> = tree.iter().map(|e| (e.u.min(e.v), e.u.max(e.v))).collect();
        edges.sort_unstable();
        let (want, best) = brute_mst(&w);
        assert_eq!(edges, want);
        let total: f64 = want.iter().map(|&e| w[e]).sum();
        assert_eq!(total, best);
        assert!((prim_weight(&graph) - best).abs() < 1e-12);
    }
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

/// Cost of the best labeling by full enumeration, with each cluster
/// represented by the direction of its normalized mean.
fn best_partition(x: &DMatrix<f64>, k: usize) -> f64 {
    let n = x.ncols();
    let units: Vec<Vec<f64>> = x
        .column_iter()
        .map(|c| {
            let norm = c.norm();
            c.iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    loop {
        let mut used = vec![false; k];
        labels.iter().for_each(|&l| used[l] = true);
        if used.iter().all(|&u| u) {
            let mut cost = 0.0;
            for c in 0..k {
                let mut mean = vec![0.0; x.nrows()];
                let members = || units.iter().zip(&labels).filter(move |(_, &l)| l == c).map(|(u, _)| u);
                for u in members() {
                    mean.iter_mut().zip(u).for_each(|(m, v)| *m += v);
                }
                cost += members().map(|u| angle(u, &mean)).sum::<f64>();
            }
            best = best.min(cost);
        }
        let Some(i) = (0..n).find(|&i| labels[i] + 1 < k) else {
            break;
        };
        labels[i] += 1;
        labels[..i].iter_mut().for_each(|l| *l = 0);
    }
    best
}

#[test]
fn kmeans_reaches_enumerated_optimum_on_separated_clusters() {
    let mut r = rng(12);
    for trial in 0..10 {
        let k = 2 + trial % 2;
        let bands = 6;
        let centers: Vec<Vec<f64>> = (0..k).map(|c| (0..bands).map(|b| if b % k == c { 1.0 } else { 0.1 }).collect()).collect();
        let n = 8;
        let x = DMatrix::from_fn(bands, n, |b, i| centers[i % k][b] + r.random_range(0.0..0.05));
        let c = cluster_candidates(&x, k, trial as u64).unwrap();
        let best = best_partition(&x, k);
        assert!((c.cost - best).abs() < 1e-9, "k-means {} vs optimum {best}", c.cost);
        for i in 0..n {
            assert_eq!(c.assignment[i], c.assignment[i % k]);
        }
    }
}

#[test]
fn kmeans_never_beats_enumeration() {
    let mut r = rng(13);
    for trial in 0..10 {
        let x = DMatrix::from_fn(4, 7, |_, _| r.random_range(0.05..1.0));
        let c = cluster_candidates(&x, 3, trial).unwrap();
        assert!(c.cost >= best_partition(&x, 3) - 1e-9);
    }
}
