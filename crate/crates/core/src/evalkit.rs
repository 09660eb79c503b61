//! Synthetic benchmark: scene generation, metrics and the Monte-Carlo
//! harness.

pub mod bench;
pub mod metrics;
pub mod synth;

pub use bench::{monte_carlo, BenchConfig, GridConfig, MetricReport, Method, MethodSetup};
pub use metrics::{align_to_gt, median_iqr, render_map, sre};
pub use synth::{add_noise, gen_abundances, gen_cube, gen_variability, GroundTruth, SynthSpec};
