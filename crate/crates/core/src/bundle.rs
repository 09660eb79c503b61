//! Bundle library extraction: repeated endmember extraction on random
//! pixel subsets, then spectral-angle clustering of the candidate pool into
//! one group per material.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::ExtractionConfig;
use crate::error::{Error, Result};
use crate::hsi::{BundleLibrary, GroupStructure, HsiCube};
use crate::seed::{self, stream};

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITERATIONS: usize = 100;
const RESEED_RETRIES: usize = 10;

/// `count` distinct pixel indices out of `pixels`, uniform without
/// replacement, returned in ascending order.
pub fn sample_pixels(pixels: usize, count: usize, rng: &mut seed::Rng) -> Result<Vec<usize>> {
    if count == 0 || count > pixels {
        return Err(Error::param(
            "pixel-fraction",
            format!("cannot draw {count} distinct pixels out of {pixels}"),
        ));
    }
    let mut idx = sample(rng, pixels, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Leading principal directions (`L x k`) of the columns of `y`, and the
/// column mean. Eigenvalues are returned in descending order.
fn principal_axes(y: &DMatrix<f64>, k: usize) -> (DVector<f64>, DMatrix<f64>, Vec<f64>) {
    let n = y.ncols() as f64;
    let mean = y.column_mean();
    let mut centered = y.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = &centered * centered.transpose() / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = DMatrix::zeros(y.nrows(), k);
    let mut values = Vec::with_capacity(k);
    for (c, &i) in order.iter().take(k).enumerate() {
        axes.set_column(c, &eig.eigenvectors.column(i));
        values.push(eig.eigenvalues[i]);
    }
    (mean, axes, values)
}

/// Pure-pixel endmember extraction. Returns the positions (into the
/// columns of `y`) of the `p` selected pixels.
///
/// The data are reduced to `p - 1` principal components plus a constant
/// coordinate, and each step picks the pixel with the largest projection
/// onto a random direction orthogonal to those already chosen.
pub fn vca_extract(y: &DMatrix<f64>, p: usize, rng: &mut seed::Rng) -> Result<Vec<usize>> {
    let n = y.ncols();
    if p == 0 {
        return Err(Error::param("endmembers", "must be at least 1"));
    }
    if n < p {
        return Err(Error::DegenerateGeometry(format!(
            "{n} pixels cannot span {p} endmembers"
        )));
    }
    if p == 1 {
        let (mean, axes, _) = principal_axes(y, 1);
        let axis = axes.column(0);
        let best = (0..n)
            .map(|j| (j, (y.column(j) - &mean).dot(&axis).abs()))
            .fold((0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
        return Ok(vec![best.0]);
    }

    let (mean, axes, values) = principal_axes(y, p - 1);
    let scale = values[0].max(f64::MIN_POSITIVE);
    if let Some(i) = values.iter().position(|&v| v <= 1e-12 * scale) {
        return Err(Error::DegenerateGeometry(format!(
            "sampled pixels have rank {} below the {p} endmembers requested",
            i + 1
        )));
    }
    // Reduced coordinates: p-1 components and a constant row so that the
    // pixels sit on an affine hyperplane away from the origin.
    let mut reduced = DMatrix::zeros(p, n);
    let mut max_norm: f64 = 0.0;
    for j in 0..n {
        let centered = y.column(j) - &mean;
        let coords = axes.transpose() * centered;
        max_norm = max_norm.max(coords.norm());
        reduced.view_mut((0, j), (p - 1, 1)).copy_from(&coords);
    }
    let offset = max_norm.max(f64::MIN_POSITIVE);
    reduced.row_mut(p - 1).fill(offset);

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(p);
    let mut chosen = Vec::with_capacity(p);
    for step in 0..p {
        let mut f = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        for q in &basis {
            let c = q.dot(&f);
            f.axpy(-c, q, 1.0);
        }
        let norm = f.norm();
        if norm <= 1e-12 {
            return Err(Error::DegenerateGeometry(format!(
                "no direction left at extraction step {step}"
            )));
        }
        f /= norm;
        let proj = f.transpose() * &reduced;
        let (idx, val) = proj
            .iter()
            .enumerate()
            .map(|(j, v)| (j, v.abs()))
            .fold((0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
        if val <= 1e-12 * offset || chosen.contains(&idx) {
            return Err(Error::DegenerateGeometry(format!(
                "sampled pixels are rank deficient at extraction step {step}"
            )));
        }
        chosen.push(idx);
        let mut a = reduced.column(idx).into_owned();
        for q in &basis {
            let c = q.dot(&a);
            a.axpy(-c, q, 1.0);
        }
        let an = a.norm();
        if an <= 1e-12 * offset {
            return Err(Error::DegenerateGeometry(format!(
                "selected pixel at step {step} lies in the span of earlier ones"
            )));
        }
        basis.push(a / an);
    }
    Ok(chosen)
}

/// Candidate signatures from all extraction rounds, in round order.
/// Negative entries of the source pixels are clipped to zero.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub signatures: DMatrix<f64>,
    /// Extraction round of each candidate.
    pub rounds: Vec<usize>,
    /// Source pixel of each candidate.
    pub pixels: Vec<usize>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.signatures.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs `T` extraction rounds on independent pixel subsets.
pub fn build_pool(cube: &HsiCube, cfg: &ExtractionConfig) -> Result<CandidatePool> {
    cfg.validate(cube.pixels())?;
    let y = cube.data();
    let count = cfg.sample_size(cube.pixels());
    let mut cols = Vec::with_capacity(cfg.rounds * cfg.endmembers);
    let mut rounds = Vec::with_capacity(cols.capacity());
    let mut pixels = Vec::with_capacity(cols.capacity());
    for t in 0..cfg.rounds {
        let round = || -> Result<Vec<usize>> {
            let mut rng = seed::derived_rng(cfg.seed, stream::ROUND, t as u64);
            let subset = sample_pixels(cube.pixels(), count, &mut rng)?;
            let sub = y.select_columns(subset.iter());
            let picked = vca_extract(&sub, cfg.endmembers, &mut rng)?;
            Ok(picked.into_iter().map(|i| subset[i]).collect())
        };
        let picked = round().map_err(|e| Error::Round {
            round: t,
            source: Box::new(e),
        })?;
        for px in picked {
            // Noisy pixels can dip below zero; library signatures may not.
            cols.push(y.column(px).map(|v| v.max(0.0)));
            rounds.push(t);
            pixels.push(px);
        }
    }
    Ok(CandidatePool {
        signatures: DMatrix::from_columns(&cols),
        rounds,
        pixels,
    })
}

/// Angle between two spectra, in radians.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return std::f64::consts::FRAC_PI_2;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

/// Result of clustering a candidate pool.
#[derive(Debug, Clone)]
pub struct Clustering {
    /// Cluster of each candidate, labels ordered by first occurrence.
    pub assignment: Vec<usize>,
    /// Sum of spectral angles between candidates and their cluster direction.
    pub cost: f64,
}

fn unit_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut u = x.clone();
    for mut c in u.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
    u
}

/// Cost of a labeling: each cluster is represented by the normalized mean
/// of its unit-normalized members.
pub fn partition_cost(units: &DMatrix<f64>, assignment: &[usize], k: usize) -> f64 {
    let centers = centers_of(units, assignment, k);
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| angle_unit(&units.column(i).into_owned(), &centers[c]))
        .sum()
}

fn angle_unit(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos()
}

fn centers_of(units: &DMatrix<f64>, assignment: &[usize], k: usize) -> Vec<DVector<f64>> {
    let mut centers = vec![DVector::zeros(units.nrows()); k];
    for (i, &c) in assignment.iter().enumerate() {
        centers[c] += units.column(i);
    }
    for c in &mut centers {
        let n = c.norm();
        if n > 0.0 {
            *c /= n;
        }
    }
    centers
}

fn nearest(x: &DVector<f64>, centers: &[DVector<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(c, m)| (c, angle_unit(x, m)))
        .fold((0, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc })
}

/// One k-means run from seeded farthest-point-weighted initialization.
fn kmeans_once(units: &DMatrix<f64>, k: usize, rng: &mut seed::Rng) -> Result<(Vec<usize>, f64)> {
    let n = units.ncols();
    let cols: Vec<DVector<f64>> = units.column_iter().map(|c| c.into_owned()).collect();
    let mut centers = vec![cols[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = cols.iter().map(|x| nearest(x, &centers).1.powi(2)).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centers.push(cols[pick].clone());
    }

    let mut assignment = vec![usize::MAX; n];
    let mut reseeds = 0;
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let mut changed = false;
        for (i, x) in cols.iter().enumerate() {
            let c = nearest(x, &centers).0;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        assignment.iter().for_each(|&c| counts[c] += 1);
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            reseeds += 1;
            if reseeds > RESEED_RETRIES {
                return Err(Error::EmptyCluster {
                    retries: RESEED_RETRIES,
                });
            }
            // Move the empty center onto the worst-fitting candidate that
            // does not leave its own cluster empty.
            let worst = (0..n)
                .filter(|&i| counts[assignment[i]] > 1)
                .map(|i| (i, angle_unit(&cols[i], &centers[assignment[i]])))
                .fold(None, |acc: Option<(usize, f64)>, c| match acc {
                    Some(a) if a.1 >= c.1 => Some(a),
                    _ => Some(c),
                });
            let Some((i, _)) = worst else {
                return Err(Error::EmptyCluster {
                    retries: reseeds - 1,
                });
            };
            centers[empty] = cols[i].clone();
            assignment[i] = empty;
            continue;
        }
        centers = centers_of(units, &assignment, k);
        if !changed {
            break;
        }
    }
    let cost = partition_cost(units, &assignment, k);
    Ok((assignment, cost))
}

/// Relabels so that cluster ids follow the first candidate of each cluster.
fn canonical(assignment: &[usize], k: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    assignment
        .iter()
        .map(|&c| {
            if map[c] == usize::MAX {
                map[c] = next;
                next += 1;
            }
            map[c]
        })
        .collect()
}

/// Spectral-angle k-means with restarts; the lowest-cost run wins.
pub fn cluster_candidates(signatures: &DMatrix<f64>, k: usize, seed_value: u64) -> Result<Clustering> {
    let n = signatures.ncols();
    if k == 0 || k > n {
        return Err(Error::param(
            "endmembers",
            format!("cannot form {k} clusters from {n} candidates"),
        ));
    }
    let units = unit_columns(signatures);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut last_err = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = seed::derived_rng(seed_value, stream::CLUSTER, restart as u64);
        match kmeans_once(&units, k, &mut rng) {
            Ok((a, cost)) => {
                if best.as_ref().is_none_or(|b| cost < b.1) {
                    best = Some((a, cost));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((a, cost)) => Ok(Clustering {
            assignment: canonical(&a, k),
            cost,
        }),
        None => Err(last_err.expect("at least one restart ran")),
    }
}

/// Orders candidates cluster by cluster into a bundle library.
pub fn library_from_clusters(signatures: &DMatrix<f64>, clustering: &Clustering, k: usize) -> Result<BundleLibrary> {
    let mut order = Vec::with_capacity(signatures.ncols());
    let mut sizes = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<usize> = (0..clustering.assignment.len())
            .filter(|&i| clustering.assignment[i] == c)
            .collect();
        sizes.push(members.len());
        order.extend(members);
    }
    BundleLibrary::new(
        signatures.select_columns(order.iter()),
        GroupStructure::from_sizes(&sizes)?,
    )
}

/// Pool extraction followed by clustering into `P` groups.
pub fn extract_library(cube: &HsiCube, cfg: &ExtractionConfig) -> Result<BundleLibrary> {
    let pool = build_pool(cube, cfg)?;
    let clustering = cluster_candidates(&pool.signatures, cfg.endmembers, cfg.seed)?;
    library_from_clusters(&pool.signatures, &clustering, cfg.endmembers)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pixels mixing `p` random endmembers, with the pure pixels included.
    fn mixed_scene(l: usize, p: usize, n: usize, seed_value: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = seed::rng(seed_value);
        let e = DMatrix::from_fn(l, p, |_, _| rng.random_range(0.1..1.0));
        let mut x = DMatrix::zeros(p, n);
        for j in 0..n {
            if j < p {
                x[(j, j)] = 1.0;
            } else {
                let w: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = w.iter().sum();
                for i in 0..p {
                    x[(i, j)] = 0.3 / p as f64 + 0.7 * w[i] / s;
                }
            }
        }
        (e.clone(), e * x)
    }

    #[test]
    fn samples_are_distinct() {
        let mut rng = seed::rng(0);
        let s = sample_pixels(100, 40, &mut rng).unwrap();
        assert_eq!(s.len(), 40);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_pixels(10, 11, &mut rng).is_err());
    }

    #[test]
    fn vca_finds_pure_pixels() {
        let (_, y) = mixed_scene(30, 4, 200, 1);
        let mut rng = seed::rng(2);
        let mut found = vca_extract(&y, 4, &mut rng).unwrap();
        found.sort_unstable();
        assert_eq!(found, vec![0, 1, 2, 3]);
    }

    #[test]
    fn vca_rank_deficiency_detected() {
        let (_, y) = mixed_scene(30, 2, 50, 3);
        let mut rng = seed::rng(4);
        let err = vca_extract(&y, 4, &mut rng).unwrap_err();
        assert!(matches!(err, Error::DegenerateGeometry(_)), "{err}");
    }

    #[test]
    fn vca_single_endmember_is_extreme_pixel() {
        let y = DMatrix::from_fn(3, 5, |i, j| (i + 1) as f64 * (1.0 + j as f64 * if j == 3 { 3.0 } else { 0.1 }));
        let mut rng = seed::rng(5);
        assert_eq!(vca_extract(&y, 1, &mut rng).unwrap(), vec![3]);
    }

    #[test]
    fn pool_size_and_rounds() {
        let (_, y) = mixed_scene(20, 3, 400, 6);
        let cube = HsiCube::new(y, 20, 20).unwrap();
        let cfg = ExtractionConfig {
            endmembers: 3,
            rounds: 4,
            pixel_fraction: 0.5,
            seed: 9,
        };
        let pool = build_pool(&cube, &cfg).unwrap();
        assert_eq!(pool.len(), 12);
        assert_eq!(pool.rounds, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
        let again = build_pool(&cube, &cfg).unwrap();
        assert_eq!(pool.pixels, again.pixels);
    }

    #[test]
    fn round_failure_reports_round() {
        let (_, y) = mixed_scene(20, 2, 100, 7);
        let cube = HsiCube::new(y, 10, 10).unwrap();
        let cfg = ExtractionConfig {
            endmembers: 4,
            rounds: 3,
            pixel_fraction: 0.5,
            seed: 1,
        };
        let err = build_pool(&cube, &cfg).unwrap_err();
        assert!(matches!(err, Error::Round { round: 0, .. }), "{err}");
    }

    #[test]
    fn library_groups_are_contiguous() {
        let (_, y) = mixed_scene(25, 3, 900, 8);
        let cube = HsiCube::new(y, 30, 30).unwrap();
        let cfg = ExtractionConfig {
            endmembers: 3,
            rounds: 5,
            pixel_fraction: 0.2,
            seed: 3,
        };
        let lib = extract_library(&cube, &cfg).unwrap();
        assert_eq!(lib.len(), 15);
        assert_eq!(lib.materials(), 3);
        assert_eq!(lib.groups().sizes().iter().sum::<usize>(), 15);
    }

    #[test]
    fn angle_basics() {
        assert!(spectral_angle(&[1.0, 0.0], &[2.0, 0.0]).abs() < 1e-12);
        assert!((spectral_angle(&[1.0, 0.0], &[0.0, 3.0]) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
