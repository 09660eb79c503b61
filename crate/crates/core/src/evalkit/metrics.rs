//! Reconstruction metrics and abundance map rendering.

use std::path::Path;

use nalgebra::DMatrix;

use crate::consensus::{align_cost, permute_rows};
use crate::error::{Error, Result};

/// `10 log10(||ref||^2 / ||ref - est||^2)` in dB; `+inf` on exact match.
pub fn sre(reference: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<f64> {
    if reference.shape() != estimate.shape() {
        return Err(Error::Dimension {
            context: "reconstruction error operands",
            expected: reference.len(),
            found: estimate.len(),
        });
    }
    let err = (reference - estimate).norm_squared();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (reference.norm_squared() / err).log10())
}

/// Rows of `estimate` permuted to best match `truth`.
pub fn align_to_gt(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a = align_cost(truth, estimate)?;
    Ok(permute_rows(estimate, &a.sigma))
}

/// Median and interquartile range with linear interpolation between order
/// statistics. NaN for an empty sample.
pub fn median_iqr(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}

/// Row `material` of `z` as an 8-bit PGM, `[0, 1]` mapped to `[0, 255]`.
pub fn render_map(z: &DMatrix<f64>, material: usize, height: usize, width: usize, path: &Path) -> Result<()> {
    if material >= z.nrows() {
        return Err(Error::param(
            "material",
            format!("index {material} out of range for {} materials", z.nrows()),
        ));
    }
    if height * width != z.ncols() {
        return Err(Error::Dimension {
            context: "map pixels",
            expected: height * width,
            found: z.ncols(),
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        z.row(material)
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
