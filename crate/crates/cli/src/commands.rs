use std::fs;
use std::io::Write;
use std::path::Path;

use gmbua::bundle::extract_library;
use gmbua::config::UnmixConfig;
use gmbua::consensus::gmbua as run_gmbua;
use gmbua::consensus::scale_operators;
use gmbua::evalkit::bench::{monte_carlo_on, tune};
use gmbua::evalkit::synth::gen_ground_truth;
use gmbua::evalkit::{align_to_gt, render_map, sre, Method, MethodSetup};
use gmbua::hsi::{AbundanceLevel, AbundanceMatrix, BundleLibrary};
use gmbua::io;
use gmbua::penalty::{PenaltyKind, PenaltySpec};
use gmbua::solver::{aggregate_global, multiscale_unmix};

use crate::config::{env_seed, CliConfig};
use crate::{CliError, EvalArgs, ExtractArgs, ExtractionFlags, GmbuaArgs, RenderArgs, SynthArgs, SynthFlags, UnmixArgs, UnmixFlags};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

/// Flag beats environment beats file.
fn resolve_seed(current: &mut u64, flag: Option<u64>) -> Result<(), CliError> {
    if let Some(s) = env_seed()? {
        *current = s;
    }
    if let Some(s) = flag {
        *current = s;
    }
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn penalty_for(kind: PenaltyKind) -> PenaltySpec {
    match kind {
        PenaltyKind::None => PenaltySpec::none(),
        PenaltyKind::L1 => PenaltySpec::l1(),
        PenaltyKind::Group => PenaltySpec::group(),
        PenaltyKind::Elitist => PenaltySpec::elitist(),
        PenaltyKind::Fractional => PenaltySpec::fractional(2.0, 0.5).expect("valid default exponents"),
    }
}

fn apply_synth(cfg: &mut CliConfig, f: SynthFlags) {
    let s = &mut cfg.synth;
    set(&mut s.height, f.height);
    set(&mut s.width, f.width);
    set(&mut s.endmembers, f.endmembers);
    set(&mut s.snr_db, f.snr_db);
    set(&mut s.variability, f.variability);
    set(&mut s.bands, f.bands);
    if f.signatures.is_some() {
        s.signatures = f.signatures;
    }
}

fn apply_extraction(cfg: &mut UnmixConfig, f: ExtractionFlags) {
    set(&mut cfg.endmembers, f.endmembers);
    set(&mut cfg.rounds, f.rounds);
    set(&mut cfg.pixel_fraction, f.pixel_fraction);
}

fn apply_unmix(cfg: &mut UnmixConfig, f: &UnmixFlags) {
    if let Some(p) = f.penalty {
        let kind: PenaltyKind = p.into();
        // Keep configured exponents when the kind is unchanged.
        if cfg.penalty.kind() != kind {
            cfg.penalty = penalty_for(kind);
        }
    }
    set(&mut cfg.lambda, f.lambda);
    set(&mut cfg.lambda_coarse, f.lambda_coarse);
    set(&mut cfg.beta, f.beta);
    if f.superpixels.is_some() {
        cfg.superpixels = f.superpixels;
    }
    set(&mut cfg.compactness, f.compactness);
    set(&mut cfg.solver.max_iterations, f.max_iterations);
    if f.trace {
        cfg.solver.trace = true;
    }
}

pub fn synth(mut cfg: CliConfig, a: SynthArgs) -> Result<(), CliError> {
    resolve_seed(&mut cfg.synth.seed, a.seed)?;
    apply_synth(&mut cfg, a.synth);
    let spec = &cfg.synth;
    let gt = gen_ground_truth(spec)?;
    let cube = gmbua::evalkit::synth::noisy_cube(spec, &gt, 0)?;
    create_dir(&a.out)?;
    io::save_cube(&cube, &a.out.join("cube"))?;
    let clean = gmbua::hsi::HsiCube::new(gt.clean.clone(), spec.height, spec.width)?;
    io::save_cube(&clean, &a.out.join("clean"))?;
    let z = AbundanceMatrix::new(AbundanceLevel::Global, gt.abundances.clone())?;
    io::save_abundance_shaped(&z, &a.out.join("truth"), Some((spec.height, spec.width)))?;
    io::save_library(&BundleLibrary::from_endmembers(gt.base.clone())?, &a.out.join("endmembers"))?;
    cfg.echo(&a.out)?;
    Ok(())
}

pub fn extract(mut cfg: CliConfig, a: ExtractArgs) -> Result<(), CliError> {
    resolve_seed(&mut cfg.unmix.seed, a.seed)?;
    apply_extraction(&mut cfg.unmix, a.extraction);
    let cube = io::load_cube(&a.cube)?;
    let ext = cfg.unmix.extraction(cfg.unmix.seed);
    let library = extract_library(&cube, &ext)?;
    create_dir(&a.out)?;
    io::save_library(&library, &a.out.join("library"))?;
    cfg.echo(&a.out)?;
    Ok(())
}

fn save_maps(z: &AbundanceMatrix, h: usize, w: usize, dir: &Path) -> Result<(), CliError> {
    for p in 0..z.rows() {
        render_map(z.coefficients(), p, h, w, &dir.join(format!("map_{p}.pgm")))?;
    }
    Ok(())
}

pub fn unmix(mut cfg: CliConfig, a: UnmixArgs) -> Result<(), CliError> {
    resolve_seed(&mut cfg.unmix.seed, a.seed)?;
    apply_unmix(&mut cfg.unmix, &a.unmix);
    let cube = io::load_cube(&a.cube)?;
    let library = io::load_library(&a.library)?;
    cfg.unmix.endmembers = library.materials();
    cfg.unmix.validate(cube.pixels())?;
    let (map, ops) = scale_operators(&cube, &cfg.unmix)?;
    let out = multiscale_unmix(cube.data(), &library, &ops, &cfg.unmix)?;
    if !out.converged {
        eprintln!(
            "warning: ADMM stopped after {} iterations without meeting tolerances (primal {:.3e}, dual {:.3e})",
            out.iterations, out.primal_residual, out.dual_residual
        );
    }
    create_dir(&a.out)?;
    let shape = Some((cube.height(), cube.width()));
    io::save_abundance_shaped(&out.abundances, &a.out.join("bundle"), shape)?;
    let z = aggregate_global(&out.abundances)?;
    io::save_abundance_shaped(&z, &a.out.join("abundances"), shape)?;
    map.write_pgm(&a.out.join("superpixels.pgm"))?;
    if cfg.unmix.solver.trace {
        out.write_trace_csv(&a.out.join("trace.csv"))?;
    }
    cfg.echo(&a.out)?;
    Ok(())
}

pub fn gmbua(mut cfg: CliConfig, a: GmbuaArgs) -> Result<(), CliError> {
    resolve_seed(&mut cfg.unmix.seed, a.seed)?;
    set(&mut cfg.unmix.runs, a.runs);
    apply_extraction(&mut cfg.unmix, a.extraction);
    apply_unmix(&mut cfg.unmix, &a.unmix);
    let cube = io::load_cube(&a.cube)?;
    let truth = a.truth.as_deref().map(io::load_abundance).transpose()?;
    let outcome = run_gmbua(&cube, &cfg.unmix)?;

    create_dir(&a.out)?;
    let (h, w) = (cube.height(), cube.width());
    let chosen = outcome.selected();
    io::save_abundance_shaped(&chosen.global, &a.out.join("abundances"), Some((h, w)))?;
    io::save_abundance_shaped(&chosen.bundle, &a.out.join("bundle"), Some((h, w)))?;
    io::save_library(&chosen.library, &a.out.join("library"))?;
    if let Some(g) = &outcome.selection.graph {
        g.write_csv(&a.out.join("similarity.csv"))?;
    }
    outcome.write_tree_csv(&a.out.join("mst.csv"))?;
    write_text(&a.out.join("selected.txt"), &format!("{}\n", outcome.selection.selected))?;
    outcome.map.write_pgm(&a.out.join("superpixels.pgm"))?;
    save_maps(&chosen.global, h, w, &a.out)?;

    let mut runs = String::from("run,seed,iterations,converged,sre_z_db\n");
    for (k, r) in outcome.runs.iter().enumerate() {
        let score = match &truth {
            Some(t) => {
                let aligned = align_to_gt(r.global.coefficients(), t.coefficients())?;
                format!("{}", sre(t.coefficients(), &aligned)?)
            }
            None => String::new(),
        };
        runs.push_str(&format!("{k},{},{},{},{score}\n", r.seed, r.iterations, r.converged));
    }
    write_text(&a.out.join("runs.csv"), &runs)?;
    cfg.echo(&a.out)?;
    Ok(())
}

pub fn eval(mut cfg: CliConfig, a: EvalArgs) -> Result<(), CliError> {
    resolve_seed(&mut cfg.bench.seed, a.seed)?;
    apply_synth(&mut cfg, a.synth);
    apply_unmix(&mut cfg.unmix, &a.unmix);
    set(&mut cfg.bench.runs, a.mc_runs);
    set(&mut cfg.unmix.runs, a.runs);
    if let Some(names) = a.methods {
        cfg.eval.methods = names
            .iter()
            .map(|n| n.trim().parse::<Method>())
            .collect::<Result<_, _>>()?;
    }
    if a.tune {
        cfg.eval.tune = true;
    }
    // Methods unmix with as many materials as the scene holds.
    cfg.unmix.endmembers = cfg.synth.endmembers;
    let gt = gen_ground_truth(&cfg.synth)?;
    let mut setups = Vec::with_capacity(cfg.eval.methods.len());
    for (i, &m) in cfg.eval.methods.iter().enumerate() {
        let mut setup = MethodSetup::new(m, &cfg.unmix)?;
        if cfg.eval.tune {
            setup = tune(&cfg.synth, &gt, &setup, &cfg.grid, cfg.bench.seed);
            eprintln!(
                "tuned {}: lambda={} lambda-coarse={} beta={}",
                m.name(),
                setup.config.lambda,
                setup.config.lambda_coarse,
                setup.config.beta
            );
        }
        // Repeated entries keep their own label column so rows stay distinct.
        let label = if cfg.eval.methods[..i].contains(&m) {
            format!("{}#{}", m.name(), i)
        } else {
            m.name().to_string()
        };
        setups.push((label, setup));
    }
    let report = monte_carlo_on(&cfg.synth, &gt, &setups, &cfg.bench)?;
    create_dir(&a.out)?;
    report.write_csv(&a.out.join("report.csv"))?;
    report.write_summary_csv(&a.out.join("summary.csv"))?;
    if !report.failures.is_empty() {
        let mut text = String::from("method,run,message\n");
        for f in &report.failures {
            text.push_str(&format!("{},{},\"{}\"\n", f.method, f.run, f.message.replace('"', "'")));
        }
        write_text(&a.out.join("failures.csv"), &text)?;
    }
    let mut stdout = std::io::stdout().lock();
    for m in report.methods() {
        let s = report.summary(&m);
        writeln!(
            stdout,
            "{m}: median SRE(Z) {:.2} dB (IQR {:.2}), median SRE(Y) {:.2} dB, {} runs, {} failed",
            s.median_z, s.iqr_z, s.median_y, s.completed, s.failed
        )
        .ok();
    }
    cfg.echo(&a.out)?;
    Ok(())
}

pub fn render(a: RenderArgs) -> Result<(), CliError> {
    let meta = io::read_metadata(&a.abundance)?;
    let z = io::load_abundance(&a.abundance)?;
    let z = match z.level() {
        AbundanceLevel::Bundle(_) => aggregate_global(&z)?,
        AbundanceLevel::Global => z,
    };
    let h = a.height.unwrap_or(meta.lines);
    if h == 0 || z.pixels() % h != 0 {
        return Err(CliError::Config(format!("height {h} does not divide {} pixels", z.pixels())));
    }
    let w = z.pixels() / h;
    create_dir(&a.out)?;
    match a.material {
        Some(p) => render_map(z.coefficients(), p, h, w, &a.out.join(format!("map_{p}.pgm")))?,
        None => save_maps(&z, h, w, &a.out)?,
    }
    Ok(())
}
