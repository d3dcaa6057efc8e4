use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use abreu_core::abreu_system::{solve_sbvp_on, AbreuOptions, AbreuProblem, AbreuRhs, NewtonOptions, SolveReport};
use abreu_core::duality::{
    involution_error, legendre_transform, lt_dual_residual, partial_legendre, plt_dual_residual, residual_resolution,
    RESIDUAL_STRIDE,
};
use abreu_core::geometry::{build_grid, fld, Grid2D, ScalarField};
use abreu_core::rochet_chone::{
    lift_utilde, oracle_minimize_on, solve_rc_approx_on, sweep_runs, OracleOptions, RCApproxRun, RCProblem,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{write_json, AbreuConfig, DualityConfig, OracleConfig, RcConfig, SweepConfig};
use crate::registry;
use crate::CliError;

type Res<T> = Result<T, CliError>;

fn config_err(e: impl ToString) -> CliError {
    CliError::Config(e.to_string())
}

fn solver_err(e: impl ToString) -> CliError {
    CliError::Solver(e.to_string())
}

fn io_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Io(format!("{}: {}", path.display(), e.to_string()))
}

fn make_dir(p: &Path) -> Res<()> {
    std::fs::create_dir_all(p).map_err(|e| io_err(p, e))
}

fn write_field(dir: &Path, file: &str, f: &ScalarField, name: &str) -> Res<()> {
    let p = dir.join(file);
    fld::write_scalar(&p, f, name).map_err(|e| io_err(&p, e))
}

/// Wall-clock phases, written as `timing.json`.
#[derive(Default, Serialize)]
struct Timing {
    #[serde(flatten)]
    phases: serde_json::Map<String, Value>,
    #[serde(skip)]
    last: Option<Instant>,
}

impl Timing {
    fn start() -> Self {
        Self {
            last: Some(Instant::now()),
            ..Self::default()
        }
    }

    fn lap(&mut self, name: &str) {
        let now = Instant::now();
        let t = now.duration_since(self.last.unwrap_or(now)).as_secs_f64();
        self.phases.insert(name.into(), json!(t));
        self.last = Some(now);
    }

    fn finish(mut self, dir: &Path, total: Instant) -> Res<()> {
        self.phases.insert("total".into(), json!(total.elapsed().as_secs_f64()));
        write_json(&dir.join("timing.json"), &self)
    }
}

pub fn abreu_problem(cfg: &AbreuConfig) -> Res<AbreuProblem> {
    let domain = registry::domain(&cfg.domain, cfg.inner.as_deref()).map_err(config_err)?;
    let p = AbreuProblem::new(
        domain,
        cfg.q,
        cfg.delta,
        registry::fn2(&cfg.phi).map_err(config_err)?,
        registry::fn2(&cfg.psi).map_err(config_err)?,
        registry::f0z(&cfg.f0z, cfg.q, cfg.delta).map_err(config_err)?,
    );
    p.validate().map_err(config_err)?;
    Ok(p)
}

fn grid_for(domain: &abreu_core::geometry::ConvexDomain, n: usize) -> Res<Arc<Grid2D>> {
    Ok(Arc::new(build_grid(domain, n).map_err(config_err)?))
}

#[derive(Serialize)]
struct ExactErrors {
    u_sup: f64,
    w_sup: f64,
}

#[derive(Serialize)]
struct AbreuReport<'a> {
    command: &'static str,
    n: usize,
    h: f64,
    converged: bool,
    exact: Option<ExactErrors>,
    solve: &'a SolveReport,
}

pub fn solve_abreu(cfg: &AbreuConfig, out: &Path) -> Res<i32> {
    let total = Instant::now();
    let mut timing = Timing::start();
    let p = abreu_problem(cfg)?;
    let grid = grid_for(&p.domain, cfg.n)?;
    if !(p.inf_psi(&grid) > 0.0) {
        return Err(config_err("psi must be positive on the boundary"));
    }
    let exact = match cfg.exact.as_str() {
        "auto" => registry::exact(&cfg.phi),
        "none" => None,
        other => Some(registry::exact(other).ok_or_else(|| config_err(format!("no exact solution named `{other}`")))?),
    };
    make_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    timing.lap("setup");
    let opts = AbreuOptions {
        tol: cfg.tol,
        max_outer: cfg.max_outer,
        ..AbreuOptions::default()
    };
    let sol = solve_sbvp_on(&grid, &p, &AbreuRhs(&p), &opts).map_err(solver_err)?;
    timing.lap("solve");
    write_field(out, "u.fld", &sol.u, "u")?;
    write_field(out, "w.fld", &sol.w, "w")?;
    let exact = exact.map(|(u, w)| ExactErrors {
        u_sup: sol.u.dist_sup(&ScalarField::from_fn(&grid, |x, y| u(x, y))),
        w_sup: sol.w.dist_sup(&ScalarField::from_fn(&grid, |x, y| w(x, y))),
    });
    if let Some(e) = &exact {
        log::info!("sup error against exact solution: u {:.3e}, w {:.3e}", e.u_sup, e.w_sup);
    }
    let report = AbreuReport {
        command: "solve-abreu",
        n: cfg.n,
        h: grid.h(),
        converged: sol.report.converged,
        exact,
        solve: &sol.report,
    };
    write_json(&out.join("report.json"), &report)?;
    timing.lap("write");
    timing.finish(out, total)?;
    log::info!(
        "solve-abreu: {} after {} iterations",
        if sol.report.converged { "converged" } else { "not converged" },
        sol.report.outer_iters
    );
    Ok(if sol.report.converged { 0 } else { 3 })
}

pub fn rc_problem(cfg: &RcConfig) -> Res<RCProblem> {
    let domain = registry::domain(&cfg.domain, cfg.inner.as_deref()).map_err(config_err)?;
    if !domain.has_inner() {
        return Err(config_err("solve-rc needs an inner region (use --inner or the classic domain)"));
    }
    let gamma = registry::gamma(&cfg.gamma).map_err(config_err)?;
    let phi = registry::fn2(&cfg.phi).map_err(config_err)?;
    let f0 = registry::f0(&cfg.f0, &gamma, &phi).map_err(config_err)?;
    Ok(RCProblem {
        domain,
        q: cfg.q,
        gamma,
        phi,
        psi: registry::fn2(&cfg.psi).map_err(config_err)?,
        f0,
    })
}

fn check_rc(p: &RCProblem, grid: &Grid2D) -> Res<()> {
    p.validate(grid).map_err(config_err)
}

fn newton_options(tol: f64, max_iter: usize) -> NewtonOptions {
    NewtonOptions {
        tol,
        max_iter,
        ..NewtonOptions::default()
    }
}

#[derive(Serialize)]
struct RcReport<'a> {
    command: &'static str,
    n: usize,
    h: f64,
    #[serde(flatten)]
    run: &'a RCApproxRun,
}

fn write_rc_run(dir: &Path, p: &RCProblem, run: &RCApproxRun, n: usize, command: &'static str) -> Res<()> {
    let grid = run.u_eps.grid();
    write_field(dir, "u.fld", &run.u_eps, "u")?;
    write_field(dir, "w.fld", &run.w_eps, "w")?;
    write_field(dir, "utilde.fld", &lift_utilde(p, grid, run.eps), "utilde")?;
    write_json(
        &dir.join("report.json"),
        &RcReport {
            command,
            n,
            h: grid.h(),
            run,
        },
    )
}

pub fn solve_rc(cfg: &RcConfig, out: &Path) -> Res<i32> {
    let total = Instant::now();
    let mut timing = Timing::start();
    if !(cfg.eps > 0.0 && cfg.eps < 1.0) {
        return Err(config_err("eps must lie in (0, 1)"));
    }
    let p = rc_problem(cfg)?;
    let grid = grid_for(&p.domain, cfg.n)?;
    check_rc(&p, &grid)?;
    make_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    timing.lap("setup");
    let run = solve_rc_approx_on(&grid, &p, cfg.eps, &newton_options(cfg.tol, cfg.max_iter)).map_err(solver_err)?;
    timing.lap("solve");
    write_rc_run(out, &p, &run, cfg.n, "solve-rc")?;
    timing.lap("write");
    timing.finish(out, total)?;
    let ok = run.report.converged;
    log::info!(
        "solve-rc eps {}: {}, penalty {:.3e}, convex {}",
        cfg.eps,
        if ok { "converged" } else { "not converged" },
        run.penalty_l2,
        run.convex
    );
    Ok(if ok { 0 } else { 3 })
}

fn eps_dir(out: &Path, eps: f64) -> PathBuf {
    out.join(format!("eps_{eps}"))
}

pub fn sweep(cfg: &SweepConfig, out: &Path) -> Res<i32> {
    let total = Instant::now();
    let mut timing = Timing::start();
    let list = &cfg.eps_list;
    if list.is_empty() || list.windows(2).any(|w| !(w[1] < w[0])) || list.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(config_err("eps_list must be strictly decreasing within (0, 1)"));
    }
    if cfg.oracle_n > 33 {
        return Err(config_err("oracle_n must not exceed 33"));
    }
    let p = rc_problem(&cfg.rc(list[0]))?;
    let grid = grid_for(&p.domain, cfg.n)?;
    check_rc(&p, &grid)?;
    let ogrid = grid_for(&p.domain, cfg.oracle_n)?;
    make_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    timing.lap("setup");
    let oracle = oracle_minimize_on(
        &ogrid,
        &p,
        &OracleOptions {
            iters: cfg.oracle_iters,
            ..OracleOptions::default()
        },
    )
    .map_err(solver_err)?;
    write_field(out, "oracle.fld", &oracle.u, "u")?;
    timing.lap("oracle");
    let opts = newton_options(cfg.tol, cfg.max_iter);
    let (table, runs) = sweep_runs(&p, list, cfg.n, &opts, &oracle).map_err(solver_err)?;
    timing.lap("sweep");
    for (&eps, run) in list.iter().zip(&runs) {
        let dir = eps_dir(out, eps);
        make_dir(&dir)?;
        write_json(&dir.join("config.json"), &cfg.rc(eps))?;
        match run {
            Ok(r) => write_rc_run(&dir, &p, r, cfg.n, "sweep")?,
            Err(e) => write_json(&dir.join("report.json"), &json!({ "eps": eps, "error": e.to_string() }))?,
        }
    }
    let csv = out.join("sweep.csv");
    std::fs::write(&csv, table.to_csv()).map_err(|e| io_err(&csv, e))?;
    write_json(&out.join("table.json"), &table)?;
    timing.lap("write");
    timing.finish(out, total)?;
    for r in &table.rows {
        log::info!(
            "eps {:<6} dist {:.3e} penalty {:.3e} converged {}",
            r.eps,
            r.dist_oracle,
            r.penalty_l2,
            r.converged
        );
    }
    let ok = table.rows.iter().all(|r| r.converged);
    Ok(if ok { 0 } else { 3 })
}

pub fn oracle_min(cfg: &OracleConfig, out: &Path) -> Res<i32> {
    let total = Instant::now();
    let mut timing = Timing::start();
    if cfg.n > 33 {
        return Err(config_err("oracle grids are limited to n <= 33"));
    }
    let p = rc_problem(&cfg.rc())?;
    let grid = grid_for(&p.domain, cfg.n)?;
    check_rc(&p, &grid)?;
    make_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    timing.lap("setup");
    let opts = OracleOptions {
        iters: cfg.iters,
        sweeps: cfg.sweeps,
        delta: None,
    };
    let r = oracle_minimize_on(&grid, &p, &opts).map_err(|e| match e {
        abreu_core::Error::InfeasibleStart(_) => config_err(e),
        _ => solver_err(e),
    })?;
    timing.lap("solve");
    write_field(out, "oracle.fld", &r.u, "u")?;
    write_json(
        &out.join("report.json"),
        &json!({
            "command": "oracle-min",
            "n": cfg.n,
            "objective": r.objective,
            "violation": r.violation,
            "iterations": r.iterations,
            "history": r.history,
        }),
    )?;
    timing.lap("write");
    timing.finish(out, total)?;
    log::info!("oracle-min: objective {:.6e} after {} steps", r.objective, r.iterations);
    Ok(0)
}

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    value: Option<f64>,
    threshold: f64,
    pass: bool,
    detail: String,
}

impl Check {
    fn new(name: &'static str, value: Result<f64, String>, threshold: f64) -> Self {
        match value {
            Ok(v) => Self {
                name,
                value: Some(v),
                threshold,
                pass: v.is_finite() && v <= threshold,
                detail: format!("{v:.3e} against {threshold:.3e}"),
            },
            Err(e) => Self {
                name,
                value: None,
                threshold,
                pass: false,
                detail: e,
            },
        }
    }
}

/// Thresholds with the grid-scaled defaults filled in.
pub fn resolve_thresholds(cfg: &DualityConfig, h: f64) -> DualityConfig {
    DualityConfig {
        max_involution: Some(cfg.max_involution.unwrap_or(6.0 * h)),
        max_reciprocal: Some(cfg.max_reciprocal.unwrap_or(10.0 * h)),
        ..cfg.clone()
    }
}

pub fn check_duality(cfg: &DualityConfig, run: &Path, out: &Path) -> Res<i32> {
    let total = Instant::now();
    let mut timing = Timing::start();
    let run_cfg_path = run.join("config.json");
    let text = std::fs::read_to_string(&run_cfg_path).map_err(|e| config_err(format!("{}: {e}", run_cfg_path.display())))?;
    let run_cfg: AbreuConfig = serde_json::from_str(&text)
        .map_err(|e| config_err(format!("{} is not a solve-abreu configuration: {e}", run_cfg_path.display())))?;
    let p = abreu_problem(&run_cfg)?;
    let grid = grid_for(&p.domain, run_cfg.n)?;
    let u_path = run.join("u.fld");
    let u = fld::read(&u_path)
        .and_then(|f| f.to_scalar(&grid))
        .map_err(|e| config_err(format!("{}: {e}", u_path.display())))?;
    let cfg = resolve_thresholds(cfg, grid.h());
    make_dir(out)?;
    write_json(&out.join("duality_config.json"), &cfg)?;
    timing.lap("setup");

    let phi = p.phi.clone();
    let bc = |x: f64, y: f64| phi(x, y);
    let pair = legendre_transform(&u, Some(&bc), residual_resolution(&u)).map_err(|e| e.to_string());
    let pp = partial_legendre(&u, Some(&bc), RESIDUAL_STRIDE).map_err(|e| e.to_string());
    let f0z = p.f0z.clone();
    let src = move |x: f64, y: f64, z: f64| f0z(x, y, z);
    let involution = pair.as_ref().map(involution_error).map_err(Clone::clone);
    let reciprocal = pair.as_ref().map(|p| p.reciprocal_det_error().0).map_err(Clone::clone);
    let lt = pair.as_ref().map_err(Clone::clone).and_then(|pair| {
        lt_dual_residual(pair, p.q, p.delta, &src)
            .map(|r| pair.core_sup(&r, cfg.core_frac))
            .map_err(|e| e.to_string())
    });
    let plt = pp.as_ref().map_err(Clone::clone).and_then(|pp| {
        plt_dual_residual(pp, p.q, p.delta, &src)
            .map(|r| pp.core_sup(&r, cfg.core_frac))
            .map_err(|e| e.to_string())
    });
    let checks = vec![
        Check::new("involution", involution, cfg.max_involution.unwrap()),
        Check::new("reciprocal_det", reciprocal, cfg.max_reciprocal.unwrap()),
        Check::new("lt_residual", lt, cfg.max_lt),
        Check::new("plt_residual", plt, cfg.max_plt),
    ];
    timing.lap("checks");
    let pass = checks.iter().all(|c| c.pass);
    for c in &checks {
        if c.pass {
            log::info!("{}: ok ({})", c.name, c.detail);
        } else {
            log::warn!("{}: FAILED ({})", c.name, c.detail);
        }
    }
    write_json(
        &out.join("duality_report.json"),
        &json!({ "run": run.display().to_string(), "pass": pass, "checks": checks }),
    )?;
    timing.finish(out, total)?;
    if !pass {
        let failed: Vec<_> = checks.iter().filter(|c| !c.pass).map(|c| format!("{} ({})", c.name, c.detail)).collect();
        eprintln!("duality checks failed: {}", failed.join("; "));
    }
    Ok(if pass { 0 } else { 3 })
}
