//! Synthetic scenes: smooth abundance fields, piecewise-linear spectral
//! variability and calibrated white noise.

use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::HsiCube;
use crate::io;
use crate::seed::{self, stream};

const REJECTION_RETRIES: usize = 50;
const ENVELOPE_BREAKPOINTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub endmembers: usize,
    /// Target SNR in dB; `inf` disables noise.
    pub snr_db: f64,
    /// Envelope amplitude `a`: envelope values are drawn from `[1-a, 1+a]`.
    pub variability: f64,
    /// Largest admissible fraction of pixels with abundance above
    /// `pure-threshold`.
    pub pure_cap: f64,
    pub pure_threshold: f64,
    /// Plant a few near-pure pixels per material.
    pub plant_pure: bool,
    /// Standard deviation of the smoothing kernel, in pixels.
    pub smoothing: f64,
    /// Softmax temperature applied to the standardized fields.
    pub temperature: f64,
    /// Band count of the built-in signatures.
    pub bands: usize,
    /// Optional `L x P` library file holding the base signatures.
    pub signatures: Option<PathBuf>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            height: 50,
            width: 50,
            endmembers: 5,
            snr_db: 20.0,
            variability: 0.2,
            pure_cap: 0.015,
            pure_threshold: 0.95,
            plant_pure: true,
            smoothing: 5.0,
            temperature: 0.8,
            bands: 100,
            signatures: None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::param("height/width", "must be positive"));
        }
        if self.endmembers == 0 {
            return Err(Error::param("endmembers", "must be at least 1"));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::param("snr-db", "must be finite or +inf"));
        }
        if !(0.0..=1.0).contains(&self.pure_cap) {
            return Err(Error::param("pure-cap", "must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.variability) {
            return Err(Error::param("variability", "must be in [0, 1)"));
        }
        if !(self.temperature > 0.0 && self.smoothing >= 0.0) {
            return Err(Error::param("temperature", "must be positive"));
        }
        if self.signatures.is_none() && self.bands < 2 {
            return Err(Error::param("bands", "must be at least 2"));
        }
        Ok(())
    }

    /// Near-pure pixels planted per material when the draw already holds
    /// `natural` pure pixels: the nominal `ceil(0.005 N)`, reduced so that
    /// the scene stays within the pure-pixel cap.
    pub fn planted_per_material(&self, natural: usize) -> usize {
        if !self.plant_pure || self.endmembers < 2 {
            return 0;
        }
        let n = self.pixels() as f64;
        let nominal = (0.005 * n).ceil() as usize;
        let budget = ((self.pure_cap * n).floor() as usize).saturating_sub(natural) / self.endmembers;
        nominal.min(budget)
    }
}

/// Ground-truth scene components.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// `P x N` global abundances.
    pub abundances: DMatrix<f64>,
    /// Base signatures `L x P`.
    pub base: DMatrix<f64>,
    /// Per-pixel endmember matrices `L x P`.
    pub endmembers: Vec<DMatrix<f64>>,
    /// Noise-free cube `L x N`.
    pub clean: DMatrix<f64>,
}

/// Built-in smooth reflectance-like signatures on `bands` samples of the
/// 400 to 2500 nm range. Deterministic.
pub fn default_signatures(bands: usize, materials: usize) -> DMatrix<f64> {
    let mut rng = seed::rng(0x5157_4e41_5455_5245);
    let wl: Vec<f64> = (0..bands)
        .map(|i| 400.0 + 2100.0 * i as f64 / (bands - 1).max(1) as f64)
        .collect();
    let mut out = DMatrix::zeros(bands, materials);
    for p in 0..materials {
        let level = rng.random_range(0.2..0.6);
        let slope = rng.random_range(-0.3..0.3);
        let features: Vec<(f64, f64, f64)> = (0..5)
            .map(|_| {
                (
                    rng.random_range(450.0..2450.0),
                    rng.random_range(60.0..300.0),
                    rng.random_range(-0.35..0.35),
                )
            })
            .collect();
        for (l, &w) in wl.iter().enumerate() {
            let t = (w - 400.0) / 2100.0;
            let mut v = level + slope * (t - 0.5);
            for &(c, s, a) in &features {
                v += a * (-0.5 * ((w - c) / s).powi(2)).exp();
            }
            out[(l, p)] = v.clamp(0.02, 1.0);
        }
    }
    out
}

/// Base signatures from the spec: the configured library file, or the
/// built-in set.
pub fn base_signatures(spec: &SynthSpec) -> Result<DMatrix<f64>> {
    match &spec.signatures {
        Some(path) => {
            let lib = io::load_library(path)?;
            if lib.len() != spec.endmembers {
                return Err(Error::Dimension {
                    context: "base signature count",
                    expected: spec.endmembers,
                    found: lib.len(),
                });
            }
            Ok(lib.signatures().clone())
        }
        None => Ok(default_signatures(spec.bands, spec.endmembers)),
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let half = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-half..=half)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian smoothing of a row-major `h x w` field with
/// reflected borders.
fn smooth(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let half = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * field[r * w + reflect(c as isize + i as isize - half, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(r as isize + i as isize - half, h) * w + c])
                .sum();
        }
    }
    out
}

/// Fraction of columns whose largest entry exceeds `threshold`.
pub fn pure_fraction(z: &DMatrix<f64>, threshold: f64) -> f64 {
    let pure = z.column_iter().filter(|c| c.max() > threshold).count();
    pure as f64 / z.ncols().max(1) as f64
}

fn draw_abundances(spec: &SynthSpec, rng: &mut seed::Rng) -> Option<DMatrix<f64>> {
    let (h, w, p) = (spec.height, spec.width, spec.endmembers);
    let n = h * w;
    let mut fields = DMatrix::zeros(p, n);
    for i in 0..p {
        let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let f = smooth(&noise, h, w, spec.smoothing);
        let mean = f.iter().sum::<f64>() / n as f64;
        let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64)
            .sqrt()
            .max(f64::MIN_POSITIVE);
        for (j, v) in f.iter().enumerate() {
            fields[(i, j)] = (v - mean) / sd;
        }
    }
    let mut z = DMatrix::zeros(p, n);
    for j in 0..n {
        let col = fields.column(j);
        let m = col.max();
        let e: Vec<f64> = col.iter().map(|v| ((v - m) / spec.temperature).exp()).collect();
        let s: f64 = e.iter().sum();
        for i in 0..p {
            z[(i, j)] = e[i] / s;
        }
    }
    if !spec.plant_pure {
        return Some(z);
    }
    let (pure, mixed): (Vec<usize>, Vec<usize>) = (0..n).partition(|&j| z.column(j).max() > spec.pure_threshold);
    // Scenes too small for the cap to admit a single planted pixel per
    // material keep the natural draw.
    if spec.planted_per_material(0) == 0 {
        return Some(z);
    }
    let planted = spec.planted_per_material(pure.len());
    if planted == 0 {
        return None;
    }
    // Planting over mixed pixels only keeps the pure count exact.
    let idx = rand::seq::index::sample(rng, mixed.len(), planted * p).into_vec();
    let rest = (1.0 - 0.96) / (p - 1) as f64;
    for (k, &m) in idx.iter().enumerate() {
        let material = k / planted;
        for i in 0..p {
            z[(i, mixed[m])] = if i == material { 0.96 } else { rest };
        }
    }
    Some(z)
}

/// Smooth abundance maps on the simplex, redrawn until the pure-pixel
/// fraction respects the cap.
pub fn gen_abundances(spec: &SynthSpec, rng: &mut seed::Rng) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if spec.endmembers == 1 {
        return Ok(DMatrix::from_element(1, spec.pixels(), 1.0));
    }
    for _ in 0..REJECTION_RETRIES {
        match draw_abundances(spec, rng) {
            Some(z) if pure_fraction(&z, spec.pure_threshold) <= spec.pure_cap => return Ok(z),
            _ => {}
        }
    }
    Err(Error::param(
        "pure-cap",
        format!(
            "no abundance draw met the {} cap after {REJECTION_RETRIES} attempts",
            spec.pure_cap
        ),
    ))
}

/// Piecewise-linear envelope over `bands` samples: uniformly spaced
/// breakpoints with values uniform in `[1-a, 1+a]`.
pub fn envelope(bands: usize, amplitude: f64, rng: &mut seed::Rng) -> Vec<f64> {
    if amplitude == 0.0 {
        return vec![1.0; bands];
    }
    let knots: Vec<f64> = (0..ENVELOPE_BREAKPOINTS)
        .map(|_| rng.random_range(1.0 - amplitude..=1.0 + amplitude))
        .collect();
    let span = (bands - 1).max(1) as f64 / (ENVELOPE_BREAKPOINTS - 1) as f64;
    (0..bands)
        .map(|l| {
            let pos = l as f64 / span;
            let k = (pos.floor() as usize).min(ENVELOPE_BREAKPOINTS - 2);
            let t = pos - k as f64;
            knots[k] * (1.0 - t) + knots[k + 1] * t
        })
        .collect()
}

/// Per-pixel endmember matrices: each base column scaled elementwise by
/// its own random envelope.
pub fn gen_variability(
    base: &DMatrix<f64>,
    pixels: usize,
    amplitude: f64,
    rng: &mut seed::Rng,
) -> Vec<DMatrix<f64>> {
    let (l, p) = base.shape();
    (0..pixels)
        .map(|_| {
            let mut a = base.clone();
            for i in 0..p {
                let env = envelope(l, amplitude, rng);
                for (v, e) in a.column_mut(i).iter_mut().zip(env) {
                    *v *= e;
                }
            }
            a
        })
        .collect()
}

/// Noise variance for a target SNR.
pub fn noise_variance(clean: &DMatrix<f64>, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        return 0.0;
    }
    clean.norm_squared() / (clean.len() as f64 * 10f64.powf(snr_db / 10.0))
}

/// White Gaussian noise at the requested SNR; `+inf` returns `y` unchanged.
pub fn add_noise(y: &DMatrix<f64>, snr_db: f64, rng: &mut seed::Rng) -> Result<DMatrix<f64>> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::param("snr-db", "must be finite or +inf"));
    }
    let sigma = noise_variance(y, snr_db).sqrt();
    if sigma == 0.0 {
        return Ok(y.clone());
    }
    Ok(y.map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)))
}

/// `10 log10(||clean||^2 / ||noisy - clean||^2)`.
pub fn measured_snr(clean: &DMatrix<f64>, noisy: &DMatrix<f64>) -> f64 {
    let e = (noisy - clean).norm_squared();
    if e == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (clean.norm_squared() / e).log10()
}

/// Ground truth without noise.
pub fn gen_ground_truth(spec: &SynthSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let base = base_signatures(spec)?;
    let n = spec.pixels();
    let z = gen_abundances(spec, &mut seed::derived_rng(spec.seed, stream::ABUNDANCE, 0))?;
    let endmembers = gen_variability(
        &base,
        n,
        spec.variability,
        &mut seed::derived_rng(spec.seed, stream::VARIABILITY, 0),
    );
    let mut clean = DMatrix::zeros(base.nrows(), n);
    for (j, a) in endmembers.iter().enumerate() {
        clean.set_column(j, &(a * z.column(j)));
    }
    Ok(GroundTruth {
        abundances: z,
        base,
        endmembers,
        clean,
    })
}

/// Cube with the `noise_index`-th noise realization of the spec seed.
pub fn noisy_cube(spec: &SynthSpec, gt: &GroundTruth, noise_index: u64) -> Result<HsiCube> {
    let mut rng = seed::derived_rng(spec.seed, stream::NOISE, noise_index);
    let y = add_noise(&gt.clean, spec.snr_db, &mut rng)?;
    HsiCube::new(y, spec.height, spec.width)
}

/// Noisy cube and its ground truth.
pub fn gen_cube(spec: &SynthSpec) -> Result<(HsiCube, GroundTruth)> {
    let gt = gen_ground_truth(spec)?;
    let cube = noisy_cube(spec, &gt, 0)?;
    Ok((cube, gt))
}
