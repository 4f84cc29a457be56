use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use couette::collision::{checks, AssemblyOptions, Projector};
use couette::diagnostics::{decay_fit_window, moments, norm_report, symmetry_report, DecayFit};
use couette::io::{cache_dir_from_env, read_field, read_kernel, write_field, write_kernel};
use couette::steady::{
    compose_steady, solve_g1, solve_remainder, steady_residual, G1Options, RemainderOptions, Setup, SteadyState,
};
use couette::transport::{survival_table, weight_ratio_study, CycleStart};
use couette::unsteady::{Record, Scheme, Stepper, UnsteadyOptions};
use couette::{Collider, CollisionKernelSpec, CollisionOperators, Field, ReferenceTables, Repr, SpatialGrid, VelocityGrid};

use crate::config::{RunConfig, SchemeName};
use crate::{CliError, CyclesArgs, Stage};

struct Grids {
    vgrid: VelocityGrid,
    sgrid: SpatialGrid,
    tables: ReferenceTables,
    spec: CollisionKernelSpec,
}

fn grids(cfg: &RunConfig) -> Result<Grids, CliError> {
    let vgrid = VelocityGrid::new(cfg.n_v, cfg.v_max).stage("velocity grid")?;
    let sgrid = SpatialGrid::new(cfg.n_y).stage("spatial grid")?;
    let tables = ReferenceTables::new(&vgrid, cfg.q).stage("reference tables")?;
    let (p, a) = CollisionKernelSpec::parse_angles(&cfg.n_omega).stage("angles")?;
    let spec = CollisionKernelSpec::new(cfg.b_amp, p, a).stage("kernel")?;
    Ok(Grids { vgrid, sgrid, tables, spec })
}

/// Assembles the collision operators, reusing the raw K from the cache directory if one is set.
fn operators(cfg: &RunConfig, g: &Grids) -> Result<CollisionOperators, CliError> {
    let (m, _) = cfg.resolved_m();
    let opts = AssemblyOptions {
        max_exit_fraction: cfg.max_exit_fraction,
        ..Default::default()
    };
    let cache = cache_dir_from_env();
    let raw = match &cache {
        Some(dir) => match read_kernel(dir, &g.vgrid, &g.spec).stage("kernel cache")? {
            Some(k) => Some(k),
            None => {
                let k = couette::collision::assemble_raw_k(&Collider::new(&g.vgrid, &g.spec));
                write_kernel(dir, &g.vgrid, &g.spec, &k).stage("kernel cache")?;
                Some(k)
            }
        },
        None => None,
    };
    CollisionOperators::assemble(&g.vgrid, &g.tables, &g.spec, m, opts, raw).stage("assembly")
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<(), CliError> {
    fs::write(dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_meta(cfg: &RunConfig, g: &Grids, command: &str, start: Instant, results: serde_json::Value) -> Result<(), CliError> {
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.echo(),
        "grid_hash": format!("{:016x}", g.vgrid.hash()),
        "spatial_hash": format!("{:016x}", g.sgrid.hash()),
        "wall_clock_s": start.elapsed().as_secs_f64(),
        "results": results,
    });
    write_json(&cfg.output_dir, "run_meta.json", &meta)
}

struct SteadyRun {
    state: SteadyState,
    g1: Field,
    gr1: Field,
    gr2: Field,
    meta: serde_json::Value,
}

fn run_steady(cfg: &RunConfig, g: &Grids, ops: &CollisionOperators) -> Result<SteadyRun, CliError> {
    let setup = Setup::new(&g.vgrid, &g.sgrid, ops);
    let g1_opts = G1Options {
        epsilon_schedule: cfg.epsilon_schedule.clone(),
        sigma_steps: cfg.sigma_steps,
        tol: cfg.tol,
        max_iter: cfg.max_iter,
        ..Default::default()
    };
    let g1 = solve_g1(&setup, &g1_opts).stage("G1")?;
    let (ny, nv) = (g.sgrid.len(), g.vgrid.len());
    let (remainder, gr1, gr2) = if cfg.alpha > 0.0 {
        // the remainder solve starts where the G1 continuation ended
        let gr_opts = RemainderOptions {
            epsilon_schedule: vec![*cfg.epsilon_schedule.last().unwrap()],
            tol: cfg.tol,
            inner_tol: 0.1 * cfg.tol,
            max_outer: cfg.max_outer,
            max_inner: cfg.max_iter,
            q: 0,
            ..Default::default()
        };
        let r = solve_remainder(&setup, &g1, cfg.alpha, &gr_opts).stage("remainder")?;
        let (a, b) = (r.gr1.clone(), r.gr2.clone());
        (Some(r), a, b)
    } else {
        (None, Field::zeros(Repr::CaflischRaw, ny, nv), Field::zeros(Repr::Perturbation, ny, nv))
    };
    let state = compose_steady(&setup, &g1.g1, remainder.as_ref(), cfg.alpha);
    let residual = steady_residual(&setup, &state).stage("residual")?;
    let gpert = state.perturbation(&ops.mu, &ops.sqrt_mu);
    let sym = symmetry_report(&g.vgrid, &ops.sqrt_mu, &gpert).stage("symmetry")?;
    let g1_sym = symmetry_report(&g.vgrid, &ops.sqrt_mu, &g1.g1).stage("symmetry")?;
    let meta = json!({
        "alpha": cfg.alpha,
        "min_f_st": state.min_value,
        "mass": state.mass,
        "mass_defect": state.mass_defect,
        "residual": residual,
        "symmetry": sym,
        "g1_symmetry": g1_sym,
        "g1_history": g1.history,
        "g1_oddness_defect": g1.oddness_defect,
        "remainder_history": remainder.as_ref().map(|r| &r.history),
        "remainder_outer_iterations": remainder.as_ref().map(|r| r.outer_iterations),
        "assembly": ops.report,
    });
    Ok(SteadyRun { state, g1: g1.g1, gr1, gr2, meta })
}

pub fn steady(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let g = grids(cfg)?;
    let ops = operators(cfg, &g)?;
    let run = run_steady(cfg, &g, &ops)?;
    let dir = &cfg.output_dir;
    let (gh, sh) = (g.vgrid.hash(), g.sgrid.hash());
    write_field(&dir.join("g1.bin"), &run.g1, gh, sh).stage("dump")?;
    write_field(&dir.join("gr1.bin"), &run.gr1, gh, sh).stage("dump")?;
    write_field(&dir.join("gr2.bin"), &run.gr2, gh, sh).stage("dump")?;

    let gpert = run.state.perturbation(&ops.mu, &ops.sqrt_mu);
    let m = moments(&ops.projector, &gpert).stage("moments")?;
    let mut csv = String::from("y,a,b_x,b_y,b_z,c,min_F\n");
    for (j, y) in g.sgrid.nodes().iter().enumerate() {
        let c = m.coeffs(j);
        let min_f = run.state.f_st.row(j).iter().cloned().fold(f64::INFINITY, f64::min);
        writeln!(csv, "{y},{},{},{},{},{},{min_f}", c[0], c[1], c[2], c[3], c[4]).unwrap();
    }
    fs::write(dir.join("profile.csv"), csv)?;
    write_json(dir, "steady_meta.json", &run.meta)?;
    println!(
        "steady alpha={} residual sup={:.3e} min F_st={:.3e}",
        cfg.alpha, run.meta["residual"]["sup"].as_f64().unwrap_or(f64::NAN), run.state.min_value
    );
    write_meta(cfg, &g, "steady", start, run.meta)
}

pub fn unsteady(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let g = grids(cfg)?;
    let ops = operators(cfg, &g)?;
    let st = run_steady(cfg, &g, &ops)?;
    let gpert = st.state.perturbation(&ops.mu, &ops.sqrt_mu);
    let opts = UnsteadyOptions {
        dt: cfg.dt,
        t_end: cfg.t_end,
        record_every: cfg.record_every,
        q: cfg.q,
        cfl: cfg.cfl,
        ..Default::default()
    };
    let stepper = Stepper::new(&g.vgrid, &g.sgrid, &ops, cfg.alpha, gpert, opts).stage("unsteady setup")?;
    let nodes = g.vgrid.nodes();
    let f0_abs = Field::from_fn(Repr::Absolute, g.sgrid.len(), g.vgrid.len(), |j, k| {
        stepper.f_st.at(j, k) + cfg.delta * nodes[k][0] * nodes[k][1] * ops.mu[k]
    });
    let (f0, mass_shift) = stepper.initial_perturbation(&f0_abs).stage("initial data")?;
    let scheme = match cfg.scheme {
        SchemeName::Direct => Scheme::Direct,
        SchemeName::Caflisch => Scheme::Caflisch,
    };
    let out = stepper
        .run(stepper.initial_state(scheme, &f0).stage("initial data")?)
        .stage("time stepping")?;
    write_decay_csv(&cfg.output_dir, &out.history)?;
    let series: Vec<(f64, f64)> = out.history.iter().map(|r| (r.t, r.sup_norm)).collect();
    let fit: DecayFit = decay_fit_window(&series, stepper.opts.fit_fraction).stage("decay fit")?;
    let m0 = out.history[0].mass;
    let drift = out.history.iter().map(|r| (r.mass - m0).abs()).fold(0.0, f64::max);
    let min_f = out.history.iter().map(|r| r.min_f).fold(f64::INFINITY, f64::min);
    let fit_json = json!({
        "lambda0": fit.lambda0,
        "intercept": fit.intercept,
        "residual": fit.residual,
        "rms_log_residual": fit.rms_log_residual,
        "window": [fit.t_lo, fit.t_hi],
        "points": fit.points,
        "within_nu0_over_4": fit.lambda0 > 0.0 && fit.lambda0 <= 0.25 * ops.nu0,
    });
    write_json(&cfg.output_dir, "decay_fit.json", &fit_json)?;
    println!(
        "unsteady {:?}: lambda0={:.4} residual={:.3e} mass drift={:.2e} min F={:.3e}",
        scheme, fit.lambda0, fit.residual, drift, min_f
    );
    let results = json!({
        "scheme": cfg.scheme,
        "steps": out.steps,
        "fit": fit_json,
        "mass_drift": drift,
        "initial_mass_shift": mass_shift,
        "min_F": min_f,
        "steady": st.meta,
    });
    write_meta(cfg, &g, "unsteady", start, results)
}

fn write_decay_csv(dir: &Path, history: &[Record]) -> Result<(), CliError> {
    let mut csv = String::from("t,sup_norm,l2_norm,mass,min_F\n");
    for r in history {
        writeln!(csv, "{},{},{},{},{}", r.t, r.sup_norm, r.l2_norm, r.mass, r.min_f).unwrap();
    }
    fs::write(dir.join("decay.csv"), csv)?;
    Ok(())
}

pub fn verify_kernel(cfg: &RunConfig, samples: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let g = grids(cfg)?;
    let ops = operators(cfg, &g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows = checks::run_all(&ops, cfg.q, samples, &mut rng);
    let mut csv = String::from("check_name,value,bound,pass\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{}", r.name, r.value, r.bound, r.pass).unwrap();
    }
    fs::write(cfg.output_dir.join("kernel_checks.csv"), csv)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    println!("verify-kernel: {} checks, {} failed {:?}", rows.len(), failed.len(), failed);
    write_meta(cfg, &g, "verify-kernel", start, json!({ "checks": rows, "assembly": ops.report }))
}

pub fn cycles(cfg: &RunConfig, args: &CyclesArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let g = grids(cfg)?;
    let origin = CycleStart::default();
    let rows = survival_table(args.t0, args.kmax, args.samples, origin, cfg.seed).stage("survival")?;
    let mut csv = String::from("t0,k,n_samples,survival,stderr\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{}", r.t0, r.k, r.n_samples, r.survival, r.stderr).unwrap();
    }
    fs::write(cfg.output_dir.join("survival.csv"), csv)?;
    let study =
        weight_ratio_study(args.t0, cfg.alpha, cfg.q, args.samples, args.kmax, origin, cfg.seed).stage("weight ratio")?;
    let summary = json!({
        "t0": args.t0,
        "k_max": args.kmax,
        "n_samples": args.samples,
        "start": origin,
        "survival_at_k_max": rows.last().map(|r| r.survival),
        "weight_ratio": study,
    });
    write_json(&cfg.output_dir, "cycles.json", &summary)?;
    println!(
        "cycles: survival(k={}) = {:.4}, weight ratio max {:.4} vs bound {:.4} ({} violations)",
        args.kmax,
        rows.last().map(|r| r.survival).unwrap_or(f64::NAN),
        study.max_ratio,
        study.bound,
        study.violations
    );
    write_meta(cfg, &g, "cycles", start, summary)
}

fn read_dump(dir: &Path, name: &str, g: &Grids, repr: Repr) -> Result<Field, CliError> {
    let path = dir.join(name);
    let (h, f) = read_field(&path).stage("dump")?;
    if h.grid_hash != g.vgrid.hash() || h.spatial_hash != g.sgrid.hash() {
        return Err(CliError::Input(format!("{} was written on a different grid", path.display())));
    }
    if f.repr != repr {
        return Err(CliError::Input(format!("{} holds {:?}, expected {:?}", path.display(), f.repr, repr)));
    }
    Ok(f)
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let g = grids(cfg)?;
    let dir = &cfg.output_dir;
    let g1 = read_dump(dir, "g1.bin", &g, Repr::Perturbation)?;
    let gr1 = read_dump(dir, "gr1.bin", &g, Repr::CaflischRaw)?;
    let gr2 = read_dump(dir, "gr2.bin", &g, Repr::Perturbation)?;
    let sm = &g.tables.sqrt_mu;
    let a = cfg.alpha;
    // g = αG₁ + α²(G_R1/√μ + G_R2)
    let gpert = Field::from_fn(Repr::Perturbation, g1.n_y, g1.n_v, |j, k| {
        a * g1.at(j, k) + a * a * (gr1.at(j, k) / sm[k] + gr2.at(j, k))
    });
    let projector = Projector::new(&g.vgrid, sm);
    let results = json!({
        "alpha": a,
        "g1": norm_report(&g.vgrid, &g.sgrid, &projector, &g1, cfg.q).stage("norms")?,
        "gr1": norm_report(&g.vgrid, &g.sgrid, &projector, &gr1, cfg.q).stage("norms")?,
        "gr2": norm_report(&g.vgrid, &g.sgrid, &projector, &gr2, cfg.q).stage("norms")?,
        "perturbation": norm_report(&g.vgrid, &g.sgrid, &projector, &gpert, cfg.q).stage("norms")?,
        "g1_symmetry": symmetry_report(&g.vgrid, sm, &g1).stage("symmetry")?,
        "symmetry": symmetry_report(&g.vgrid, sm, &gpert).stage("symmetry")?,
    });
    write_json(dir, "report.json", &results)?;
    println!("report: {}", serde_json::to_string(&results["symmetry"])?);
    write_meta(cfg, &g, "report", start, results)
}
