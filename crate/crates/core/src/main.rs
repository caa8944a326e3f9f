use chemoflow::diagnostics::{evaluate_report, DiagnosticsContext};
use chemoflow::driver::{epsilon_family, initial_state, run, RunSummary, SimConfig, Simulation};
use chemoflow::io::{emit_heatmap, emit_timeseries, parse_config, preset, read_timeseries, validate_series, CheckLine};
use chemoflow::oracle::{brute_force_functional, homogeneous_ode, Functional};
use chemoflow::state::SimState;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "chemoflow", version, about = "Chemotaxis-fluid simulator with functional diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configuration file.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a named experiment.
    Preset {
        name: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a configuration for several regularization parameters.
    SweepEps {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        eps: Vec<f64>,
    },
    /// Compare diagnostics and the simulator against independent oracles.
    Oracle { config: PathBuf },
    /// Re-validate the margins stored in a time series.
    Check { csv: PathBuf },
}

fn load(path: &Path) -> Result<SimConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn print_lines(lines: &[CheckLine]) -> bool {
    for l in lines {
        println!("{} {:<20} {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    lines.iter().all(|l| l.passed)
}

fn summary_lines(s: &RunSummary) -> Vec<CheckLine> {
    let c = &s.checks;
    let mut lines = validate_series(&s.reports);
    lines.retain(|l| l.name != "mass" && l.name != "max-principle" && l.name != "quasi-energy");
    lines.insert(
        0,
        CheckLine {
            name: "mass",
            passed: c.max_mass_drift <= 1e-8,
            detail: format!("max relative drift {:.3e}", c.max_mass_drift),
        },
    );
    lines.insert(
        1,
        CheckLine {
            name: "max-principle",
            passed: c.max_sup_c <= s.reports[0].sup_c * (1.0 + 1e-12) && c.min_c > 0.0,
            detail: format!("sup c {:.17e}, min c {:.3e}", c.max_sup_c, c.min_c),
        },
    );
    lines.insert(
        2,
        CheckLine {
            name: "quasi-energy",
            passed: c.qe_violations == 0,
            detail: format!("{} violating steps, worst margin+slack {:.3e}", c.qe_violations, c.min_qe_excess),
        },
    );
    lines.push(CheckLine {
        name: "run",
        passed: s.aborted.is_none() && c.all_finite,
        detail: s.aborted.clone().unwrap_or_else(|| "completed".into()),
    });
    lines
}

fn write_run(s: &RunSummary, out: &Path) -> Result<(), String> {
    std::fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    emit_timeseries(&s.reports, &out.join("timeseries.csv")).map_err(|e| e.to_string())?;
    let f = &s.final_state;
    let (lo, hi) = (f.n.min(), f.n.max());
    let range = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    emit_heatmap(&f.n, &out.join("n_final.pgm"), range).map_err(|e| e.to_string())?;
    let (lo, hi) = (f.c.min(), f.c.max());
    let range = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    emit_heatmap(&f.c, &out.join("c_final.pgm"), range).map_err(|e| e.to_string())?;
    Ok(())
}

fn describe(s: &RunSummary) {
    println!(
        "t = {:.6}  steps {} accepted, {} rejected  wall {:.1}s  checksum {}",
        s.final_state.t, s.accepted_steps, s.rejected_steps, s.wall_time, s.checksum
    );
    match s.stabilization_time {
        Some(t) => println!("stabilized at t = {t:.4}"),
        None => println!("not stabilized"),
    }
    if let Some(p) = &s.conditional {
        println!(
            "K = {:.6}  L = {:.6}  M = {:.6}  eta0 = {:.6e}  t0 = {}",
            p.k,
            p.l,
            p.m,
            p.eta0,
            s.t0.map(|t| format!("{t:.4}")).unwrap_or_else(|| "not reached".into())
        );
    }
    let (m0, m) = (&s.initial_metrics, &s.final_metrics);
    println!(
        "int|n - n0| {:.3e} -> {:.3e}  int c {:.3e} -> {:.3e}  int|u| {:.3e} -> {:.3e}  max|n - n0| {:.3e} -> {:.3e}",
        m0.dist_n_l1, m.dist_n_l1, m0.c_l1, m.c_l1, m0.u_l1, m.u_l1, m0.dist_n_c0, m.dist_n_c0
    );
}

fn run_config(cfg: &SimConfig, out: &Path) -> Result<bool, String> {
    let s = run(cfg).map_err(|e| e.to_string())?;
    write_run(&s, out)?;
    describe(&s);
    Ok(print_lines(&summary_lines(&s)))
}

fn sweep(cfg: &SimConfig, eps: &[f64]) -> Result<bool, String> {
    let table = epsilon_family(cfg, eps).map_err(|e| e.to_string())?;
    println!("{:>10} {:>10} {:>14} {:>14} {:>14}", "eps_a", "eps_b", "dist_n", "dist_c", "dist_u");
    let mut ok = true;
    for r in &table.rows {
        println!(
            "{:>10.1e} {:>10.1e} {:>14.6e} {:>14.6e} {:>14.6e}{}",
            r.eps_a,
            r.eps_b,
            r.dist_n,
            r.dist_c,
            r.dist_u,
            r.failed.as_ref().map(|f| format!("  FAILED: {f}")).unwrap_or_default()
        );
        ok &= r.failed.is_none();
    }
    let decreasing = table.rows.windows(2).all(|w| w[1].dist_n < w[0].dist_n);
    let mass_spread = (0..table.mass_traces[0].len())
        .map(|k| {
            let col: Vec<f64> = table.mass_traces.iter().map(|t| t[k]).collect();
            col.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - col.iter().cloned().fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    Ok(print_lines(&[
        CheckLine {
            name: "eps-distances",
            passed: ok && decreasing,
            detail: "n distances strictly decreasing".into(),
        },
        CheckLine {
            name: "eps-mass",
            passed: mass_spread <= 1e-12,
            detail: format!("mass traces agree to {mass_spread:.3e}"),
        },
    ]))
}

fn oracle_suite(cfg: &SimConfig) -> Result<bool, String> {
    let sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
    let state: &SimState = sim.state();
    let ctx: &DiagnosticsContext = sim.context();
    let report = evaluate_report(state, ctx);
    let mut worst = 0.0_f64;
    for f in Functional::ALL {
        let a = f.of(&report);
        let b = brute_force_functional(state, f, ctx);
        let scale = a.abs().max(b.abs());
        if scale > 0.0 {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    let mut lines = vec![CheckLine {
        name: "brute-force",
        passed: worst <= 1e-12,
        detail: format!("initial state, worst relative disagreement {worst:.3e}"),
    }];
    let mut hom = cfg.clone();
    hom.init.n = chemoflow::driver::DensityInit::Constant { mean: 1.0 };
    hom.init.u = chemoflow::driver::VelocityInit::Zero;
    hom.fluid.phi_x = 0.0;
    hom.fluid.phi_y = 0.0;
    hom.t_end = 1.0;
    hom.dt_max = 1e-3;
    hom.conditional = false;
    let c0 = hom.species.c0_inf;
    if let chemoflow::driver::OxygenInit::Constant { .. } = hom.init.c {
        initial_state(&hom).map_err(|e| e.to_string())?;
        let s = run(&hom).map_err(|e| e.to_string())?;
        let exact = homogeneous_ode(1.0, c0, &hom.sensitivity, s.final_state.t);
        let got = s.final_state.c.mean();
        let rel = (got - exact).abs() / exact;
        lines.push(CheckLine {
            name: "homogeneous-ode",
            passed: rel <= 1e-4,
            detail: format!("c(1) = {got:.12} vs {exact:.12}, relative {rel:.3e}"),
        });
    }
    Ok(print_lines(&lines))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out } => load(&config).and_then(|c| run_config(&c, &out)),
        Command::Preset { name, out } => match preset(&name) {
            Err(e) => Err(e.to_string()),
            Ok(p) => match &p.eps_list {
                Some(eps) => sweep(&p.config, eps),
                None => run_config(&p.config, &out),
            },
        },
        Command::SweepEps { config, eps } => load(&config).and_then(|c| sweep(&c, &eps)),
        Command::Oracle { config } => load(&config).and_then(|c| oracle_suite(&c)),
        Command::Check { csv } => read_timeseries(&csv)
            .map_err(|e| e.to_string())
            .map(|r| print_lines(&validate_series(&r))),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
