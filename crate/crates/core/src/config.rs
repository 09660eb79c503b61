//! Run configuration shared by the pipeline stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiscale::{default_superpixels, DEFAULT_COMPACTNESS};
use crate::penalty::PenaltySpec;
use crate::solver::SolverParams;

/// Library extraction settings for one library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExtractionConfig {
    /// Number of materials `P`.
    pub endmembers: usize,
    /// Extraction rounds `T`; the library holds `T * P` signatures.
    pub rounds: usize,
    /// Fraction `alpha` of pixels sampled per round.
    pub pixel_fraction: f64,
    pub seed: u64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            endmembers: 5,
            rounds: 10,
            pixel_fraction: 0.1,
            seed: 0,
        }
    }
}

impl ExtractionConfig {
    pub fn sample_size(&self, pixels: usize) -> usize {
        (self.pixel_fraction * pixels as f64).ceil() as usize
    }

    pub fn validate(&self, pixels: usize) -> Result<()> {
        if self.endmembers == 0 {
            return Err(Error::param("endmembers", "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(Error::param("rounds", "must be at least 1"));
        }
        if !(self.pixel_fraction > 0.0 && self.pixel_fraction <= 1.0) {
            return Err(Error::param(
                "pixel-fraction",
                format!("must be in (0, 1], got {}", self.pixel_fraction),
            ));
        }
        if self.sample_size(pixels) < self.endmembers {
            return Err(Error::param(
                "pixel-fraction",
                format!(
                    "samples {} pixels per round, fewer than {} endmembers",
                    self.sample_size(pixels),
                    self.endmembers
                ),
            ));
        }
        Ok(())
    }
}

/// Everything one pipeline execution needs besides the cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct UnmixConfig {
    pub endmembers: usize,
    pub penalty: PenaltySpec,
    /// Fine-scale penalty weight `lambda`.
    pub lambda: f64,
    /// Coarse-scale penalty weight `lambda_C`.
    pub lambda_coarse: f64,
    /// Weight `beta` pulling the fine solution toward the coarse one.
    pub beta: f64,
    /// Independent runs `K` entering consensus selection.
    pub runs: usize,
    pub rounds: usize,
    pub pixel_fraction: f64,
    /// Superpixel target `M`; defaults to `ceil(N / 25)`.
    pub superpixels: Option<usize>,
    pub compactness: f64,
    pub seed: u64,
    pub solver: SolverParams,
}

impl Default for UnmixConfig {
    fn default() -> Self {
        UnmixConfig {
            endmembers: 5,
            penalty: PenaltySpec::fractional(2.0, 0.5).expect("valid exponents"),
            lambda: 0.01,
            lambda_coarse: 0.01,
            beta: 0.1,
            runs: 10,
            rounds: 10,
            pixel_fraction: 0.1,
            superpixels: None,
            compactness: DEFAULT_COMPACTNESS,
            seed: 0,
            solver: SolverParams::default(),
        }
    }
}

impl UnmixConfig {
    pub fn superpixel_target(&self, pixels: usize) -> usize {
        self.superpixels.unwrap_or_else(|| default_superpixels(pixels))
    }

    pub fn extraction(&self, seed: u64) -> ExtractionConfig {
        ExtractionConfig {
            endmembers: self.endmembers,
            rounds: self.rounds,
            pixel_fraction: self.pixel_fraction,
            seed,
        }
    }

    pub fn validate(&self, pixels: usize) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("lambda-coarse", self.lambda_coarse),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.runs == 0 {
            return Err(Error::param("runs", "must be at least 1"));
        }
        let m = self.superpixel_target(pixels);
        if m == 0 || m > pixels {
            return Err(Error::param(
                "superpixels",
                format!("must be in 1..={pixels}, got {m}"),
            ));
        }
        if !(self.compactness >= 0.0 && self.compactness.is_finite()) {
            return Err(Error::param("compactness", "must be finite and >= 0"));
        }
        self.solver.validate()?;
        self.extraction(self.seed).validate(pixels)
    }
}
