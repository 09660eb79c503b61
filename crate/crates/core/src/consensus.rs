//! Consensus selection over independent unmixing runs.
//!
//! Runs are compared after optimal material alignment, the resulting
//! complete graph is reduced to its minimum spanning tree, and the run with
//! the highest tree degree is returned.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::bundle::extract_library;
use crate::config::UnmixConfig;
use crate::error::{Error, Result};
use crate::hsi::{AbundanceMatrix, BundleLibrary, HsiCube};
use crate::multiscale::{build_operators, slic_segment, ScaleOperators, SuperpixelMap};
use crate::seed::{self, stream};
use crate::solver::{aggregate_global, multiscale_unmix};

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Returns `assignment` with row `i` matched to column `assignment[i]`, and
/// the total cost.
pub fn hungarian(cost: &DMatrix<f64>) -> Result<(Vec<usize>, f64)> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::Dimension {
            context: "assignment cost matrix columns",
            expected: n,
            found: cost.ncols(),
        });
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite {
            context: "assignment cost matrix",
            index: i,
        });
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    // Shortest augmenting paths with row/column potentials, 1-based with a
    // virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok((assignment, total))
}

/// Distance between two runs after the best row permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `(1/N) sqrt(min_sigma sum_i ||Z_u[i] - Z_v[sigma(i)]||^2)`.
    pub cost: f64,
    /// Row `i` of `Z_u` pairs with row `sigma[i]` of `Z_v`.
    pub sigma: Vec<usize>,
}

pub fn align_cost(zu: &DMatrix<f64>, zv: &DMatrix<f64>) -> Result<Alignment> {
    if zu.shape() != zv.shape() {
        return Err(Error::Dimension {
            context: "aligned abundance matrices",
            expected: zu.len(),
            found: zv.len(),
        });
    }
    let (p, n) = zu.shape();
    let cost = DMatrix::from_fn(p, p, |i, k| {
        zu.row(i)
            .iter()
            .zip(zv.row(k).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    });
    let (sigma, total) = hungarian(&cost)?;
    Ok(Alignment {
        cost: total.max(0.0).sqrt() / n.max(1) as f64,
        sigma,
    })
}

/// Rows of `z` reordered so that row `i` of the result is row `sigma[i]`.
pub fn permute_rows(z: &DMatrix<f64>, sigma: &[usize]) -> DMatrix<f64> {
    z.select_rows(sigma.iter())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub weight: f64,
}

/// Complete weighted graph over runs.
#[derive(Debug, Clone)]
pub struct SimilarityGraph {
    weights: DMatrix<f64>,
}

impl SimilarityGraph {
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        let k = weights.nrows();
        if weights.ncols() != k {
            return Err(Error::Dimension {
                context: "graph weight matrix columns",
                expected: k,
                found: weights.ncols(),
            });
        }
        if k < 2 {
            return Err(Error::param("runs", "a similarity graph needs at least 2 runs"));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite {
                context: "graph weights",
                index: i,
            });
        }
        Ok(SimilarityGraph { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weight(&self, u: usize, v: usize) -> f64 {
        self.weights[(u, v)]
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Edges `u < v` in lexicographic order.
    pub fn edges(&self) -> Vec<Edge> {
        let k = self.len();
        let mut out = Vec::with_capacity(k * (k - 1) / 2);
        for u in 0..k {
            for v in u + 1..k {
                out.push(Edge {
                    u,
                    v,
                    weight: self.weights[(u, v)],
                });
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for row in self.weights.row_iter() {
            let line: Vec<String> = row.iter().map(|w| format!("{w:e}")).collect();
            writeln!(out, "{}", line.join(",")).unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Pairwise alignment costs between all runs.
pub fn build_graph(runs: &[DMatrix<f64>]) -> Result<SimilarityGraph> {
    let k = runs.len();
    if k < 2 {
        return Err(Error::param("runs", "a similarity graph needs at least 2 runs"));
    }
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|u| (u + 1..k).map(move |v| (u, v))).collect();
    let costs: Vec<f64> = pairs
        .par_iter()
        .map(|&(u, v)| align_cost(&runs[u], &runs[v]).map(|a| a.cost))
        .collect::<Result<_>>()?;
    let mut w = DMatrix::zeros(k, k);
    for (&(u, v), c) in pairs.iter().zip(costs) {
        w[(u, v)] = c;
        w[(v, u)] = c;
    }
    SimilarityGraph::from_weights(w)
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Kruskal's algorithm; ties are broken by `(weight, u, v)`.
pub fn kruskal(graph: &SimilarityGraph) -> Vec<Edge> {
    let mut edges = graph.edges();
    edges.sort_by(|a, b| a.weight.total_cmp(&b.weight).then(a.u.cmp(&b.u)).then(a.v.cmp(&b.v)));
    let mut dsu = DisjointSet::new(graph.len());
    let mut tree = Vec::with_capacity(graph.len() - 1);
    for e in edges {
        if dsu.union(e.u, e.v) {
            tree.push(e);
            if tree.len() + 1 == graph.len() {
                break;
            }
        }
    }
    tree
}

/// Total weight of a minimum spanning tree by Prim's algorithm.
pub fn prim_weight(graph: &SimilarityGraph) -> f64 {
    let k = graph.len();
    let mut in_tree = vec![false; k];
    let mut best = vec![f64::INFINITY; k];
    best[0] = 0.0;
    let mut total = 0.0;
    for _ in 0..k {
        let (u, _) = (0..k)
            .filter(|&i| !in_tree[i])
            .map(|i| (i, best[i]))
            .fold((usize::MAX, f64::INFINITY), |acc, c| if c.1 < acc.1 || acc.0 == usize::MAX { c } else { acc });
        in_tree[u] = true;
        total += best[u];
        for v in 0..k {
            if !in_tree[v] && graph.weight(u, v) < best[v] {
                best[v] = graph.weight(u, v);
            }
        }
    }
    total
}

/// Run with the largest tree degree; ties go to the smallest sum of
/// incident tree edge weights, then to the lowest index.
pub fn select_representative(k: usize, tree: &[Edge]) -> usize {
    let mut degree = vec![0usize; k];
    let mut incident = vec![0.0; k];
    for e in tree {
        for n in [e.u, e.v] {
            degree[n] += 1;
            incident[n] += e.weight;
        }
    }
    (0..k)
        .min_by(|&a, &b| {
            degree[b]
                .cmp(&degree[a])
                .then(incident[a].total_cmp(&incident[b]))
                .then(a.cmp(&b))
        })
        .unwrap_or(0)
}

/// Consensus choice among precomputed global abundance estimates.
#[derive(Debug, Clone)]
pub struct Selection {
    pub selected: usize,
    /// `None` when only one run was given.
    pub graph: Option<SimilarityGraph>,
    pub tree: Vec<Edge>,
}

pub fn select_from_runs(runs: &[DMatrix<f64>]) -> Result<Selection> {
    match runs.len() {
        0 => Err(Error::param("runs", "must be at least 1")),
        1 => Ok(Selection {
            selected: 0,
            graph: None,
            tree: Vec::new(),
        }),
        k => {
            let graph = build_graph(runs)?;
            let tree = kruskal(&graph);
            let selected = select_representative(k, &tree);
            Ok(Selection {
                selected,
                graph: Some(graph),
                tree,
            })
        }
    }
}

/// One library-extraction and unmixing run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub library: BundleLibrary,
    pub bundle: AbundanceMatrix,
    pub global: AbundanceMatrix,
    pub iterations: usize,
    pub converged: bool,
}

/// Seed of run `r` under the master seed.
pub fn run_seed(master: u64, r: usize) -> u64 {
    seed::derive(master, stream::RUN, r as u64)
}

/// Superpixel operators shared by every run.
pub fn scale_operators(cube: &HsiCube, cfg: &UnmixConfig) -> Result<(SuperpixelMap, ScaleOperators)> {
    let map = slic_segment(
        cube,
        cfg.superpixel_target(cube.pixels()),
        cfg.compactness,
        seed::derive(cfg.seed, stream::SEGMENT, 0),
    )?;
    let ops = build_operators(&map);
    Ok((map, ops))
}

/// Run `r`: extract a library with the run's seed and unmix with it.
pub fn single_run(cube: &HsiCube, ops: &ScaleOperators, cfg: &UnmixConfig, r: usize) -> Result<RunResult> {
    let run = || -> Result<RunResult> {
        let seed_r = run_seed(cfg.seed, r);
        let library = extract_library(cube, &cfg.extraction(seed_r))?;
        let out = multiscale_unmix(cube.data(), &library, ops, cfg)?;
        let global = aggregate_global(&out.abundances)?;
        Ok(RunResult {
            seed: seed_r,
            library,
            bundle: out.abundances,
            global,
            iterations: out.iterations,
            converged: out.converged,
        })
    };
    run().map_err(|e| Error::Run {
        run: r,
        source: Box::new(e),
    })
}

/// Runs `first..first + count`, in parallel when threads are available.
pub fn runs(cube: &HsiCube, ops: &ScaleOperators, cfg: &UnmixConfig, first: usize, count: usize) -> Result<Vec<RunResult>> {
    (first..first + count)
        .into_par_iter()
        .map(|r| single_run(cube, ops, cfg, r))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ConsensusOutcome {
    pub map: SuperpixelMap,
    pub runs: Vec<RunResult>,
    pub selection: Selection,
}

impl ConsensusOutcome {
    pub fn selected(&self) -> &RunResult {
        &self.runs[self.selection.selected]
    }

    /// Tree edges as `u,v,weight` rows.
    pub fn write_tree_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "u,v,weight").unwrap();
        for e in &self.selection.tree {
            writeln!(out, "{},{},{:e}", e.u, e.v, e.weight).unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// `K` independent runs followed by consensus selection.
pub fn gmbua(cube: &HsiCube, cfg: &UnmixConfig) -> Result<ConsensusOutcome> {
    cfg.validate(cube.pixels())?;
    let (map, ops) = scale_operators(cube, cfg)?;
    let results = runs(cube, &ops, cfg, 0, cfg.runs)?;
    let globals: Vec<DMatrix<f64>> = results.iter().map(|r| r.global.coefficients().clone()).collect();
    let selection = select_from_runs(&globals)?;
    Ok(ConsensusOutcome {
        map,
        runs: results,
        selection,
    })
}
