//! Monte-Carlo benchmark harness and parameter grid search.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bundle::extract_library;
use crate::config::UnmixConfig;
use crate::consensus::{run_seed, runs, scale_operators, select_from_runs};
use crate::error::{Error, Result};
use crate::hsi::HsiCube;
use crate::penalty::PenaltySpec;
use crate::seed::{self, stream};
use crate::solver::{aggregate_global, fclsu, simplex_gap, admm_unmix};

use super::metrics::{align_to_gt, median_iqr, sre};
use super::synth::{gen_ground_truth, noisy_cube, GroundTruth, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fclsu,
    Group,
    Elitist,
    Fractional,
    Gmbua,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fclsu => "fclsu",
            Method::Group => "group",
            Method::Elitist => "elitist",
            Method::Fractional => "fractional",
            Method::Gmbua => "gmbua",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fclsu" => Ok(Method::Fclsu),
            "group" => Ok(Method::Group),
            "elitist" => Ok(Method::Elitist),
            "fractional" => Ok(Method::Fractional),
            "gmbua" => Ok(Method::Gmbua),
            other => Err(Error::param("methods", format!("unknown method `{other}`"))),
        }
    }
}

/// A method together with the configuration it runs with.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSetup {
    pub method: Method,
    pub config: UnmixConfig,
}

impl MethodSetup {
    /// Single-run baselines use one library and no coarse stage; GMBUA
    /// keeps the base configuration.
    pub fn new(method: Method, base: &UnmixConfig) -> Result<Self> {
        let mut config = base.clone();
        match method {
            Method::Gmbua => {}
            _ => {
                config.runs = 1;
                config.beta = 0.0;
                config.penalty = match method {
                    Method::Fclsu => PenaltySpec::none(),
                    Method::Group => PenaltySpec::group(),
                    Method::Elitist => PenaltySpec::elitist(),
                    _ => base.penalty,
                };
                if method == Method::Fclsu {
                    config.lambda = 0.0;
                }
            }
        }
        Ok(MethodSetup { method, config })
    }
}

/// Output of one method on one cube.
#[derive(Debug, Clone)]
pub struct MethodOutput {
    /// Global abundances, `P x N`, in the method's own material order.
    pub global: DMatrix<f64>,
    pub reconstruction: DMatrix<f64>,
    /// Largest simplex gap over every solver output column produced.
    pub simplex_gap: f64,
}

fn max_gap(x: &DMatrix<f64>) -> f64 {
    x.column_iter()
        .map(|c| simplex_gap(c.as_slice()))
        .fold(0.0, f64::max)
}

/// Runs a method with algorithm seed `seed_value`.
pub fn run_method(setup: &MethodSetup, cube: &HsiCube, seed_value: u64) -> Result<MethodOutput> {
    let cfg = UnmixConfig {
        seed: seed_value,
        ..setup.config.clone()
    };
    cfg.validate(cube.pixels())?;
    match setup.method {
        Method::Gmbua => {
            let (_, ops) = scale_operators(cube, &cfg)?;
            let results = runs(cube, &ops, &cfg, 0, cfg.runs)?;
            let globals: Vec<DMatrix<f64>> =
                results.iter().map(|r| r.global.coefficients().clone()).collect();
            let selection = select_from_runs(&globals)?;
            let chosen = &results[selection.selected];
            let gap = results
                .iter()
                .map(|r| max_gap(r.bundle.coefficients()))
                .fold(0.0, f64::max);
            Ok(MethodOutput {
                global: globals[selection.selected].clone(),
                reconstruction: chosen.library.signatures() * chosen.bundle.coefficients(),
                simplex_gap: gap,
            })
        }
        _ => {
            let library = extract_library(cube, &cfg.extraction(run_seed(cfg.seed, 0)))?;
            let out = if setup.method == Method::Fclsu {
                fclsu(cube.data(), &library, &cfg.solver)?
            } else {
                admm_unmix(
                    cube.data(),
                    library.signatures(),
                    library.groups(),
                    &cfg.penalty,
                    cfg.lambda,
                    &cfg.solver,
                    None,
                )?
            };
            let global = aggregate_global(&out.abundances)?.into_coefficients();
            Ok(MethodOutput {
                global,
                reconstruction: library.signatures() * out.abundances.coefficients(),
                simplex_gap: max_gap(out.abundances.coefficients()),
            })
        }
    }
}

/// SRE of global abundances after alignment to the ground truth, and of
/// the reconstructed cube against the observed one.
pub fn score(out: &MethodOutput, truth: &DMatrix<f64>, observed: &DMatrix<f64>) -> Result<(f64, f64)> {
    let aligned = align_to_gt(&out.global, truth)?;
    Ok((sre(truth, &aligned)?, sre(observed, &out.reconstruction)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub method: String,
    pub run: usize,
    pub seed: u64,
    pub sre_z_db: f64,
    pub sre_y_db: f64,
    pub runtime_s: f64,
    #[serde(skip)]
    pub simplex_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub method: String,
    pub run: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub median_z: f64,
    pub iqr_z: f64,
    pub median_y: f64,
    pub iqr_y: f64,
    pub median_runtime: f64,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
}

impl MetricReport {
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        for f in &self.failures {
            if !out.contains(&f.method) {
                out.push(f.method.clone());
            }
        }
        out
    }

    pub fn sre_z(&self, method: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.sre_z_db)
            .collect()
    }

    pub fn summary(&self, method: &str) -> Summary {
        let rows: Vec<&RunRecord> = self.records.iter().filter(|r| r.method == method).collect();
        let z: Vec<f64> = rows.iter().map(|r| r.sre_z_db).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.sre_y_db).collect();
        let t: Vec<f64> = rows.iter().map(|r| r.runtime_s).collect();
        let (median_z, iqr_z) = median_iqr(&z);
        let (median_y, iqr_y) = median_iqr(&y);
        Summary {
            median_z,
            iqr_z,
            median_y,
            iqr_y,
            median_runtime: median_iqr(&t).0,
            completed: rows.len(),
            failed: self.failures.iter().filter(|f| f.method == method).count(),
        }
    }

    /// Largest simplex gap over all recorded runs.
    pub fn simplex_gap(&self) -> f64 {
        self.records.iter().map(|r| r.simplex_gap).fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        // Explicit header so an all-failed report still names its columns.
        w.write_record(["method", "run", "seed", "sre_z_db", "sre_y_db", "runtime_s"])
            .map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// One row per method: medians, IQRs and counts.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from(
            "method,median_sre_z_db,iqr_sre_z_db,median_sre_y_db,iqr_sre_y_db,median_runtime_s,completed,failed\n",
        );
        for m in self.methods() {
            let s = self.summary(&m);
            text.push_str(&format!(
                "{m},{},{},{},{},{},{},{}\n",
                s.median_z, s.iqr_z, s.median_y, s.iqr_y, s.median_runtime, s.completed, s.failed
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

/// Monte-Carlo settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct BenchConfig {
    /// Number of Monte-Carlo runs `R`.
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { runs: 10, seed: 0 }
    }
}

/// Algorithm seed of Monte-Carlo run `r`.
pub fn mc_seed(bench_seed: u64, r: usize) -> u64 {
    seed::derive(bench_seed, stream::MONTE_CARLO, r as u64)
}

/// Observed cube of Monte-Carlo run `r`: the fixed scene with a fresh
/// noise realization.
pub fn mc_cube(spec: &SynthSpec, gt: &GroundTruth, bench_seed: u64, r: usize) -> Result<HsiCube> {
    noisy_cube(spec, gt, seed::derive(bench_seed, stream::NOISE, r as u64))
}

/// Runs every setup `R` times; failures are recorded and excluded from
/// the summaries.
pub fn monte_carlo_on(
    spec: &SynthSpec,
    gt: &GroundTruth,
    setups: &[(String, MethodSetup)],
    bench: &BenchConfig,
) -> Result<MetricReport> {
    if bench.runs == 0 {
        return Err(Error::param("runs", "Monte-Carlo run count must be at least 1"));
    }
    let mut report = MetricReport::default();
    for r in 0..bench.runs {
        let cube = mc_cube(spec, gt, bench.seed, r)?;
        let seed_value = mc_seed(bench.seed, r);
        for (label, setup) in setups {
            let start = Instant::now();
            let outcome = run_method(setup, &cube, seed_value)
                .and_then(|out| score(&out, &gt.abundances, cube.data()).map(|s| (out, s)));
            let elapsed = start.elapsed().as_secs_f64();
            match outcome {
                Ok((out, (sz, sy))) => report.records.push(RunRecord {
                    method: label.clone(),
                    run: r,
                    seed: seed_value,
                    sre_z_db: sz,
                    sre_y_db: sy,
                    runtime_s: elapsed,
                    simplex_gap: out.simplex_gap,
                }),
                Err(e) => report.failures.push(RunFailure {
                    method: label.clone(),
                    run: r,
                    message: e.to_string(),
                }),
            }
        }
    }
    Ok(report)
}

pub fn monte_carlo(spec: &SynthSpec, setups: &[(String, MethodSetup)], bench: &BenchConfig) -> Result<MetricReport> {
    let gt = gen_ground_truth(spec)?;
    monte_carlo_on(spec, &gt, setups, bench)
}

/// Result of [`consensus_sweep`].
#[derive(Debug, Clone)]
pub struct Sweep {
    /// `sre_z[i][r]`: SRE(Z) with the first `ks[i]` runs on realization `r`.
    pub sre_z: Vec<Vec<f64>>,
    /// Largest simplex gap over every run's bundle abundances.
    pub simplex_gap: f64,
}

/// GMBUA SRE(Z) for several `K` from one set of runs per Monte-Carlo
/// realization. Runs are seeded by index, so the first `k` runs of a
/// `K`-run execution are exactly a `k`-run execution.
pub fn consensus_sweep(
    spec: &SynthSpec,
    gt: &GroundTruth,
    cfg: &UnmixConfig,
    ks: &[usize],
    bench: &BenchConfig,
) -> Result<Sweep> {
    let kmax = ks.iter().copied().max().unwrap_or(0);
    if kmax == 0 {
        return Err(Error::param("runs", "sweep needs a positive K"));
    }
    let mut out = vec![Vec::with_capacity(bench.runs); ks.len()];
    let mut gap: f64 = 0.0;
    for r in 0..bench.runs {
        let cube = mc_cube(spec, gt, bench.seed, r)?;
        let run_cfg = UnmixConfig {
            seed: mc_seed(bench.seed, r),
            runs: kmax,
            ..cfg.clone()
        };
        let (_, ops) = scale_operators(&cube, &run_cfg)?;
        let results = runs(&cube, &ops, &run_cfg, 0, kmax)?;
        for run in &results {
            gap = gap.max(max_gap(run.bundle.coefficients()));
        }
        let globals: Vec<DMatrix<f64>> =
            results.iter().map(|r| r.global.coefficients().clone()).collect();
        for (i, &k) in ks.iter().enumerate() {
            let sel = select_from_runs(&globals[..k])?;
            let aligned = align_to_gt(&globals[sel.selected], &gt.abundances)?;
            out[i].push(sre(&gt.abundances, &aligned)?);
        }
    }
    Ok(Sweep {
        sre_z: out,
        simplex_gap: gap,
    })
}

/// `per_decade` logarithmically spaced values from `lo` to `hi`, inclusive.
pub fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    let steps = ((b - a) * per_decade as f64).round() as usize;
    (0..=steps)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / steps.max(1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub per_decade: usize,
    /// Held-out noise realizations averaged per grid point.
    pub tuning_runs: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            lo: 1e-4,
            hi: 1.0,
            per_decade: 5,
            tuning_runs: 1,
        }
    }
}

impl GridConfig {
    pub fn values(&self) -> Vec<f64> {
        log_grid(self.lo, self.hi, self.per_decade)
    }
}

/// Mean SRE(Z) of a setup over held-out tuning realizations, whose noise
/// and algorithm seeds come from a stream disjoint from the benchmark runs.
pub fn tuning_score(spec: &SynthSpec, gt: &GroundTruth, setup: &MethodSetup, grid: &GridConfig, seed_value: u64) -> f64 {
    let mut total = 0.0;
    for i in 0..grid.tuning_runs.max(1) {
        let noise = seed::derive(seed_value, stream::TUNING, 2 * i as u64);
        let algorithm = seed::derive(seed_value, stream::TUNING, 2 * i as u64 + 1);
        let score = noisy_cube(spec, gt, noise).and_then(|cube| {
            let out = run_method(setup, &cube, algorithm)?;
            score(&out, &gt.abundances, cube.data()).map(|s| s.0)
        });
        match score {
            Ok(s) if s.is_finite() => total += s,
            Ok(_) => total += 300.0,
            Err(_) => return f64::NEG_INFINITY,
        }
    }
    total / grid.tuning_runs.max(1) as f64
}

/// The three continuous parameters a grid search can move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Knob {
    Lambda,
    LambdaCoarse,
    Beta,
}

fn set(cfg: &mut UnmixConfig, knob: Knob, v: f64) {
    match knob {
        Knob::Lambda => cfg.lambda = v,
        Knob::LambdaCoarse => cfg.lambda_coarse = v,
        Knob::Beta => cfg.beta = v,
    }
}

/// One grid-search step: the best value of `knob` with everything else
/// fixed. Ties keep the smaller value.
pub fn search_knob(
    spec: &SynthSpec,
    gt: &GroundTruth,
    setup: &MethodSetup,
    knob: Knob,
    values: &[f64],
    grid: &GridConfig,
    seed_value: u64,
) -> (f64, f64) {
    let mut best = (values[0], f64::NEG_INFINITY);
    for &v in values {
        let mut s = setup.clone();
        set(&mut s.config, knob, v);
        let score = tuning_score(spec, gt, &s, grid, seed_value);
        if score > best.1 {
            best = (v, score);
        }
    }
    best
}

/// Grid-searched configuration of a method. Single-run penalized methods
/// search `lambda`; GMBUA searches `lambda`, `beta`, then `lambda-coarse`
/// coordinate-wise using single multiscale runs.
pub fn tune(
    spec: &SynthSpec,
    gt: &GroundTruth,
    setup: &MethodSetup,
    grid: &GridConfig,
    seed_value: u64,
) -> MethodSetup {
    let values = grid.values();
    let mut tuned = setup.clone();
    match setup.method {
        Method::Fclsu => {}
        Method::Group | Method::Elitist | Method::Fractional => {
            let (v, _) = search_knob(spec, gt, &tuned, Knob::Lambda, &values, grid, seed_value);
            tuned.config.lambda = v;
        }
        Method::Gmbua => {
            let mut pilot = tuned.clone();
            pilot.config.runs = 1;
            for knob in [Knob::Lambda, Knob::Beta, Knob::LambdaCoarse] {
                let (v, _) = search_knob(spec, gt, &pilot, knob, &values, grid, seed_value);
                set(&mut pilot.config, knob, v);
                if knob == Knob::Lambda {
                    pilot.config.lambda_coarse = v;
                }
            }
            tuned.config.lambda = pilot.config.lambda;
            tuned.config.lambda_coarse = pilot.config.lambda_coarse;
            tuned.config.beta = pilot.config.beta;
        }
    }
    tuned
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_spacing() {
        let g = log_grid(1e-4, 1.0, 5);
        assert_eq!(g.len(), 21);
        assert!((g[0] - 1e-4).abs() < 1e-18);
        assert!((g[20] - 1.0).abs() < 1e-12);
        assert!((g[5] - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Fclsu, Method::Group, Method::Elitist, Method::Fractional, Method::Gmbua] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("vca".parse::<Method>().is_err());
    }
}
