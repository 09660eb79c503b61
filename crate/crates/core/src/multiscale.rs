//! Superpixel segmentation and the coarse/fine scale operators.
//!
//! `coarsen` averages every superpixel's member columns (`D W`) and
//! `upsample` copies each coarse column back to its members (`D_C W*`).
//! Both work from member lists; the `N x M` operator is never formed.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::hsi::HsiCube;
use crate::seed;

pub const DEFAULT_COMPACTNESS: f64 = 0.005;
pub const SLIC_ITERATIONS: usize = 10;

/// Default superpixel count, about 5x5 pixels per superpixel.
pub fn default_superpixels(pixels: usize) -> usize {
    pixels.div_ceil(25).max(1)
}

/// Pixel-to-superpixel labeling over an `H x W` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    labels: Vec<usize>,
    members: Vec<Vec<usize>>,
    height: usize,
    width: usize,
}

impl SuperpixelMap {
    /// Builds a map from dense labels in `0..M`; every id must be used.
    pub fn from_labels(labels: Vec<usize>, height: usize, width: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension {
                context: "superpixel labels",
                expected: height * width,
                found: labels.len(),
            });
        }
        let m = labels.iter().max().map_or(0, |&l| l + 1);
        let mut members = vec![Vec::new(); m];
        for (n, &l) in labels.iter().enumerate() {
            members[l].push(n);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::param(
                "superpixel labels",
                format!("label {empty} has no pixels; labels must be dense"),
            ));
        }
        Ok(SuperpixelMap {
            labels,
            members,
            height,
            width,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// True when every superpixel is one 4-connected region.
    pub fn is_contiguous(&self) -> bool {
        let (h, w) = (self.height, self.width);
        let mut seen = vec![false; h * w];
        for members in &self.members {
            let start = members[0];
            let label = self.labels[start];
            let mut count = 0;
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(n) = queue.pop_front() {
                count += 1;
                for nb in neighbors4(n, h, w) {
                    if !seen[nb] && self.labels[nb] == label {
                        seen[nb] = true;
                        queue.push_back(nb);
                    }
                }
            }
            if count != members.len() {
                return false;
            }
        }
        true
    }

    /// 16-bit binary PGM of the label image.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        if self.len() > 65536 {
            return Err(Error::param("superpixels", "too many labels for a 16-bit PGM"));
        }
        let maxval = self.len().saturating_sub(1).max(1);
        let mut bytes = format!("P5\n{} {}\n{}\n", self.width, self.height, maxval).into_bytes();
        for &l in &self.labels {
            bytes.extend_from_slice(&(l as u16).to_be_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn neighbors4(n: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (n / w, n % w);
    let up = (r > 0).then(|| n - w);
    let down = (r + 1 < h).then(|| n + w);
    let left = (c > 0).then(|| n - 1);
    let right = (c + 1 < w).then(|| n + 1);
    [up, down, left, right].into_iter().flatten()
}

/// Top principal-component scores (up to three), scaled so the leading
/// component spans unit range.
fn pca_features(cube: &HsiCube) -> Vec<[f64; 3]> {
    let y = cube.data();
    let (l, n) = y.shape();
    let mean = y.column_mean();
    let mut centered = y.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = &centered * centered.transpose() / n.max(1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let k = l.min(3);
    let mut feats = vec![[0.0; 3]; n];
    for (d, &idx) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(idx);
        for (j, f) in feats.iter_mut().enumerate() {
            f[d] = v.dot(&centered.column(j));
        }
    }
    let (lo, hi) = feats
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| (lo.min(f[0]), hi.max(f[0])));
    let range = hi - lo;
    if range > 0.0 {
        for f in &mut feats {
            for v in f.iter_mut() {
                *v /= range;
            }
        }
    }
    feats
}

#[inline]
fn feat_dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

struct Center {
    row: f64,
    col: f64,
    feat: [f64; 3],
}

/// SLIC superpixels on the leading principal components.
///
/// Distance is `||f_i - f_c||^2 + compactness * ||p_i - p_c||^2` with
/// positions in pixels and features scaled to unit range. The seed only
/// breaks ties when centers are moved off high-gradient pixels.
pub fn slic_segment(
    cube: &HsiCube,
    target: usize,
    compactness: f64,
    seed: u64,
) -> Result<SuperpixelMap> {
    let (h, w) = (cube.height(), cube.width());
    let n = h * w;
    if target == 0 || target > n {
        return Err(Error::param(
            "superpixels",
            format!("target must be in 1..={n}, got {target}"),
        ));
    }
    if !(compactness >= 0.0 && compactness.is_finite()) {
        return Err(Error::param("compactness", "must be finite and nonnegative"));
    }
    if target == n {
        return SuperpixelMap::from_labels((0..n).collect(), h, w);
    }
    if target == 1 {
        return SuperpixelMap::from_labels(vec![0; n], h, w);
    }

    let feats = pca_features(cube);
    let step = (n as f64 / target as f64).sqrt();
    let grid_rows = ((h as f64 / step).round() as usize).clamp(1, h);
    let grid_cols = ((w as f64 / step).round() as usize).clamp(1, w);
    let cell_h = h as f64 / grid_rows as f64;
    let cell_w = w as f64 / grid_cols as f64;

    let mut centers = Vec::with_capacity(grid_rows * grid_cols);
    for gi in 0..grid_rows {
        for gj in 0..grid_cols {
            let (r0, r1) = ((gi as f64 * cell_h) as usize, ((gi + 1) as f64 * cell_h) as usize);
            let (c0, c1) = ((gj as f64 * cell_w) as usize, ((gj + 1) as f64 * cell_w) as usize);
            let mut feat = [0.0; 3];
            let mut count = 0.0;
            for r in r0..r1.max(r0 + 1).min(h) {
                for c in c0..c1.max(c0 + 1).min(w) {
                    let f = &feats[r * w + c];
                    for d in 0..3 {
                        feat[d] += f[d];
                    }
                    count += 1.0;
                }
            }
            feat.iter_mut().for_each(|v| *v /= count);
            centers.push(Center {
                row: (gi as f64 + 0.5) * cell_h - 0.5,
                col: (gj as f64 + 0.5) * cell_w - 0.5,
                feat,
            });
        }
    }

    if cell_h.min(cell_w) >= 4.0 {
        let mut rng = seed::derived_rng(seed, seed::stream::SEGMENT, 0);
        let grad = |r: usize, c: usize| -> f64 {
            let at = |rr: usize, cc: usize| &feats[rr * w + cc];
            let (ru, rd) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let (cl, cr) = (c.saturating_sub(1), (c + 1).min(w - 1));
            feat_dist2(at(rd, c), at(ru, c)) + feat_dist2(at(r, cr), at(r, cl))
        };
        for center in &mut centers {
            let (r0, c0) = (center.row.round() as usize, center.col.round() as usize);
            let mut best = f64::INFINITY;
            let mut ties: Vec<(usize, usize)> = Vec::new();
            for r in r0.saturating_sub(1)..=(r0 + 1).min(h - 1) {
                for c in c0.saturating_sub(1)..=(c0 + 1).min(w - 1) {
                    let g = grad(r, c);
                    if g < best {
                        best = g;
                        ties.clear();
                        ties.push((r, c));
                    } else if g == best {
                        ties.push((r, c));
                    }
                }
            }
            let (r, c) = ties[rng.random_range(0..ties.len())];
            center.row = r as f64;
            center.col = c as f64;
            center.feat = feats[r * w + c];
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    let (win_r, win_c) = (cell_h.ceil(), cell_w.ceil());
    for _ in 0..SLIC_ITERATIONS {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, center) in centers.iter().enumerate() {
            let r_lo = (center.row - win_r).ceil().max(0.0) as usize;
            let r_hi = ((center.row + win_r).floor() as usize).min(h - 1);
            let c_lo = (center.col - win_c).ceil().max(0.0) as usize;
            let c_hi = ((center.col + win_c).floor() as usize).min(w - 1);
            for r in r_lo..=r_hi {
                for c in c_lo..=c_hi {
                    let idx = r * w + c;
                    let ds = (r as f64 - center.row).powi(2) + (c as f64 - center.col).powi(2);
                    let d = feat_dist2(&feats[idx], &center.feat) + compactness * ds;
                    if d < dist[idx] {
                        dist[idx] = d;
                        labels[idx] = k;
                    }
                }
            }
        }
        let mut sums = vec![(0.0, 0.0, [0.0; 3], 0usize); centers.len()];
        for (idx, &l) in labels.iter().enumerate() {
            if l == usize::MAX {
                continue;
            }
            let s = &mut sums[l];
            s.0 += (idx / w) as f64;
            s.1 += (idx % w) as f64;
            for d in 0..3 {
                s.2[d] += feats[idx][d];
            }
            s.3 += 1;
        }
        for (center, s) in centers.iter_mut().zip(&sums) {
            if s.3 > 0 {
                let cnt = s.3 as f64;
                center.row = s.0 / cnt;
                center.col = s.1 / cnt;
                center.feat = [s.2[0] / cnt, s.2[1] / cnt, s.2[2] / cnt];
            }
        }
    }

    let min_size = ((cell_h * cell_w) / 4.0).floor().max(1.0) as usize;
    let labels = enforce_connectivity(&labels, h, w, min_size);
    SuperpixelMap::from_labels(labels, h, w)
}

/// Relabels 4-connected components; components smaller than `min_size`
/// (and unlabeled pixels) join an adjacent component found earlier in
/// raster order.
fn enforce_connectivity(labels: &[usize], h: usize, w: usize, min_size: usize) -> Vec<usize> {
    let n = h * w;
    let mut out = vec![usize::MAX; n];
    let mut next = 0;
    let mut component = Vec::new();
    for start in 0..n {
        if out[start] != usize::MAX {
            continue;
        }
        let adjacent = neighbors4(start, h, w).find_map(|nb| (out[nb] != usize::MAX).then(|| out[nb]));
        let label = labels[start];
        component.clear();
        component.push(start);
        out[start] = next;
        let mut head = 0;
        while head < component.len() {
            let p = component[head];
            head += 1;
            for nb in neighbors4(p, h, w) {
                if out[nb] == usize::MAX && labels[nb] == label {
                    out[nb] = next;
                    component.push(nb);
                }
            }
        }
        let too_small = component.len() < min_size || label == usize::MAX;
        match adjacent {
            Some(adj) if too_small => {
                for &p in &component {
                    out[p] = adj;
                }
            }
            _ => next += 1,
        }
    }
    out
}

/// Sparse averaging operator `W` and replication operator `W*`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleOperators {
    map: SuperpixelMap,
}

pub fn build_operators(map: &SuperpixelMap) -> ScaleOperators {
    ScaleOperators { map: map.clone() }
}

impl ScaleOperators {
    pub fn map(&self) -> &SuperpixelMap {
        &self.map
    }

    pub fn fine_len(&self) -> usize {
        self.map.labels.len()
    }

    pub fn coarse_len(&self) -> usize {
        self.map.len()
    }

    /// Entry `(n, j)` of `W`: `1/|S_j|` if pixel `n` is in superpixel `j`.
    pub fn weight(&self, n: usize, j: usize) -> f64 {
        if self.map.labels[n] == j {
            1.0 / self.map.members[j].len() as f64
        } else {
            0.0
        }
    }

    /// `D W`: each output column is the mean of its superpixel's columns.
    pub fn coarsen(&self, d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if d.ncols() != self.fine_len() {
            return Err(Error::Dimension {
                context: "coarsen input columns",
                expected: self.fine_len(),
                found: d.ncols(),
            });
        }
        let mut out = DMatrix::zeros(d.nrows(), self.coarse_len());
        for (j, members) in self.map.members.iter().enumerate() {
            // Running mean: exact when all members are equal, so coarsening
            // an upsampled matrix returns it bit for bit.
            for r in 0..d.nrows() {
                let mut mean = 0.0;
                for (i, &n) in members.iter().enumerate() {
                    mean += (d[(r, n)] - mean) / (i + 1) as f64;
                }
                out[(r, j)] = mean;
            }
        }
        Ok(out)
    }

    /// `D_C W*`: each pixel receives its superpixel's coarse column.
    pub fn upsample(&self, coarse: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if coarse.ncols() != self.coarse_len() {
            return Err(Error::Dimension {
                context: "upsample input columns",
                expected: self.coarse_len(),
                found: coarse.ncols(),
            });
        }
        let mut out = DMatrix::zeros(coarse.nrows(), self.fine_len());
        for (n, &l) in self.map.labels.iter().enumerate() {
            out.set_column(n, &coarse.column(l));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_from(data: DMatrix<f64>, h: usize, w: usize) -> HsiCube {
        HsiCube::new(data, h, w).unwrap()
    }

    #[test]
    fn extreme_targets() {
        let cube = cube_from(DMatrix::from_fn(3, 12, |b, n| (b + n) as f64), 3, 4);
        let all = slic_segment(&cube, 12, DEFAULT_COMPACTNESS, 0).unwrap();
        assert_eq!(all.len(), 12);
        let one = slic_segment(&cube, 1, DEFAULT_COMPACTNESS, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one.labels().iter().all(|&l| l == 0));
        assert!(slic_segment(&cube, 0, DEFAULT_COMPACTNESS, 0).is_err());
        assert!(slic_segment(&cube, 13, DEFAULT_COMPACTNESS, 0).is_err());
    }

    #[test]
    fn singleton_operators_are_identity() {
        let map = SuperpixelMap::from_labels((0..6).collect(), 2, 3).unwrap();
        let ops = build_operators(&map);
        let d = DMatrix::from_fn(2, 6, |i, j| (i * 6 + j) as f64);
        assert_eq!(ops.coarsen(&d).unwrap(), d);
        assert_eq!(ops.upsample(&d).unwrap(), d);
    }

    #[test]
    fn one_superpixel_gives_row_means() {
        let map = SuperpixelMap::from_labels(vec![0; 4], 2, 2).unwrap();
        let ops = build_operators(&map);
        let y = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 3.0, 6.0, 0.0, 0.0, 4.0, 4.0]);
        let c = ops.coarsen(&y).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 2.0]);
        assert!(ops.coarsen(&DMatrix::zeros(2, 3)).is_err());
        assert!(ops.upsample(&DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn column_weights_sum_to_one() {
        let map = SuperpixelMap::from_labels(vec![0, 0, 1, 2, 2, 2], 2, 3).unwrap();
        let ops = build_operators(&map);
        for j in 0..3 {
            let s: f64 = (0..6).map(|n| ops.weight(n, j)).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert_eq!(ops.weight(3, 2), 1.0 / 3.0);
        assert_eq!(ops.weight(3, 0), 0.0);
    }

    #[test]
    fn sparse_labels_rejected() {
        assert!(SuperpixelMap::from_labels(vec![0, 2], 1, 2).is_err());
        assert!(SuperpixelMap::from_labels(vec![0, 0, 0], 1, 2).is_err());
    }

    #[test]
    fn contiguity_detection() {
        let ok = SuperpixelMap::from_labels(vec![0, 0, 1, 1], 2, 2).unwrap();
        assert!(ok.is_contiguous());
        let split = SuperpixelMap::from_labels(vec![0, 1, 1, 0], 2, 2).unwrap();
        assert!(!split.is_contiguous());
    }

    #[test]
    fn pgm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let map = SuperpixelMap::from_labels(vec![0, 1, 1, 2], 2, 2).unwrap();
        let path = dir.path().join("labels.pgm");
        map.write_pgm(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n2 2\n2\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 0, 0, 1, 0, 1, 0, 2]);
    }
}
