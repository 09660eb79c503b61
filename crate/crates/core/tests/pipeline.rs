use gmbua::config::UnmixConfig;
use gmbua::consensus::{gmbua, select_from_runs};
use gmbua::evalkit::{align_to_gt, gen_cube, monte_carlo, sre, BenchConfig, Method, MethodSetup, SynthSpec};
use gmbua::hsi::{check_simplex_columns, GroupStructure};
use gmbua::penalty::PenaltySpec;
use gmbua::solver::{admm_unmix, objective, SolverParams};
use nalgebra::DMatrix;
use rand::Rng;

/// Pairwise mass-exchange search over the simplex, started from the best
/// point of a barycentric grid.
fn simplex_oracle(f: impl Fn(&[f64]) -> f64, q: usize) -> f64 {
    const STEPS: usize = 20;
    let mut best = vec![1.0 / q as f64; q];
    let mut best_f = f(&best);
    let mut counts = vec![0usize; q];
    fn walk(i: usize, left: usize, counts: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if i + 1 == counts.len() {
            counts[i] = left;
            visit(counts);
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            walk(i + 1, left - c, counts, visit);
        }
    }
    walk(0, STEPS, &mut counts, &mut |c| {
        let x: Vec<f64> = c.iter().map(|&k| k as f64 / STEPS as f64).collect();
        let fx = f(&x);
        if fx < best_f {
            best_f = fx;
            best = x;
        }
    });
    let mut h = 1.0 / STEPS as f64;
    while h > 1e-12 {
        let mut improved = false;
        for i in 0..q {
            for j in 0..q {
                let step = h.min(best[j]);
                if i == j || step <= 0.0 {
                    continue;
                }
                let mut x = best.clone();
                x[i] += step;
                x[j] -= step;
                let fx = f(&x);
                if fx < best_f {
                    best_f = fx;
                    best = x;
                    improved = true;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    best_f
}

#[test]
fn solver_reaches_simplex_optimum_for_convex_penalties() {
    let mut rng = gmbua::seed::rng(21);
    let params = SolverParams {
        max_iterations: 20_000,
        tol_primal: 1e-10,
        tol_dual: 1e-10,
        check_every: 1,
        ..Default::default()
    };
    for (k, spec) in [PenaltySpec::l1(), PenaltySpec::group(), PenaltySpec::elitist()].into_iter().enumerate() {
        for case in 0..8 {
            let q = 2 + case % 3;
            let groups = if q > 2 { GroupStructure::new(vec![0..1, 1..q]).unwrap() } else { GroupStructure::single(q) };
            let b = DMatrix::from_fn(6, q, |_, _| rng.random_range(0.0..1.0));
            let y = DMatrix::from_fn(6, 1, |_, _| rng.random_range(0.0..1.0));
            let lambda = rng.random_range(0.0..0.5);
            let out = admm_unmix(&y, &b, &groups, &spec, lambda, &params, None).unwrap();
            let got = objective(&y, &b, out.abundances.coefficients(), &groups, &spec, lambda).unwrap();
            let want = simplex_oracle(
                |x| objective(&y, &b, &DMatrix::from_column_slice(q, 1, x), &groups, &spec, lambda).unwrap(),
                q,
            );
            assert!(got <= want + 1e-6, "penalty {k} case {case}: solver {got} vs oracle {want}");
        }
    }
}

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        height: 16,
        width: 16,
        endmembers: 3,
        bands: 30,
        seed,
        ..Default::default()
    }
}

fn small_config() -> UnmixConfig {
    UnmixConfig {
        endmembers: 3,
        runs: 3,
        rounds: 4,
        pixel_fraction: 0.2,
        lambda: 1e-3,
        lambda_coarse: 1e-3,
        beta: 0.5,
        superpixels: Some(25),
        solver: SolverParams {
            max_iterations: 200,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn full_pipeline_recovers_abundances() {
    let (cube, gt) = gen_cube(&small_spec(1)).unwrap();
    let outcome = gmbua(&cube, &small_config()).unwrap();
    assert_eq!(outcome.runs.len(), 3);
    assert_eq!(outcome.selection.tree.len(), 2);
    let chosen = outcome.selected();
    check_simplex_columns(chosen.global.coefficients(), 1e-6).unwrap();
    check_simplex_columns(chosen.bundle.coefficients(), 1e-6).unwrap();
    let aligned = align_to_gt(chosen.global.coefficients(), &gt.abundances).unwrap();
    let score = sre(&gt.abundances, &aligned).unwrap();
    assert!(score > 5.0, "SRE {score}");
    // Distinct runs use distinct seeds.
    assert_ne!(outcome.runs[0].seed, outcome.runs[1].seed);
}

#[test]
fn identical_runs_pick_the_first() {
    let z = DMatrix::from_fn(3, 10, |i, j| ((i + j) % 3) as f64 / 2.0);
    let sel = select_from_runs(&[z.clone(), z.clone(), z]).unwrap();
    assert_eq!(sel.selected, 0);
    assert!(sel.tree.iter().all(|e| e.weight == 0.0));
}

#[test]
fn monte_carlo_records_every_run() {
    let spec = small_spec(2);
    let setup = MethodSetup::new(Method::Fclsu, &small_config()).unwrap();
    let report = monte_carlo(&spec, &[("fclsu".to_string(), setup)], &BenchConfig { runs: 3, seed: 5 }).unwrap();
    assert_eq!(report.records.len(), 3);
    assert!(report.failures.is_empty());
    let seeds: Vec<u64> = report.records.iter().map(|r| r.seed).collect();
    assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2]);
    assert!(report.records.iter().all(|r| r.sre_z_db.is_finite() && r.simplex_gap <= 1e-6));
}
