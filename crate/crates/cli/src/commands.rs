use std::fmt::Write as _;

use clap::ValueEnum;
use graph_whs::acceptance;
use graph_whs::control::{bellman_gap, cost_functional, legendre_fhat, value_function_mc};
use graph_whs::convolution::{inf_convolution, midpoint_convexity_defect, sup_convolution, PointGrid};
use graph_whs::dynamics::{simulate, simulate_batch};
use graph_whs::energy::{dominant_energy, energy_gradients};
use graph_whs::hjb::{hjb_residual, hjb_solve_backward, SimplexGrid};
use graph_whs::rng::RngStream;
use graph_whs::schrodinger::{madelung_forward, madelung_inverse, sse_residual, write_wave_csv};
use graph_whs::truncation::{truncation_identity_check, TruncationFn};
use graph_whs::wasserstein::{two_node_distance_oracle, wasserstein_distance};
use graph_whs::weight::ProbabilityWeight;
use graph_whs::Error;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::output::{sha256_hex, sha256_json, RunDir};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Simulate sample paths of the controlled system.
    Simulate,
    /// Map one path to the Schrödinger form and report the residual.
    Transform,
    /// Discrete transport distance from the initial density to the target.
    Wdist,
    /// Expected cost of the configured control.
    Cost,
    /// Monte-Carlo value function over the configured control class.
    Value,
    /// Dynamic-programming gap at the initial state.
    Bellman,
    /// Solve the grid HJB equation and write the value-function bundle.
    Hjb,
    /// Sup- and inf-convolutions of a grid value function.
    Convolve,
    /// Invariant suite plus the acceptance criteria.
    Check,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Transform => "transform",
            Command::Wdist => "wdist",
            Command::Cost => "cost",
            Command::Value => "value",
            Command::Bellman => "bellman",
            Command::Hjb => "hjb",
            Command::Convolve => "convolve",
            Command::Check => "check",
        }
    }
}

pub struct Outcome {
    pub summary: Value,
    /// Lines echoed to stdout.
    pub report: String,
    /// `(failed, total)` for `check`.
    pub failures: Option<(usize, usize)>,
}

impl Outcome {
    fn new(summary: impl Serialize, report: String) -> Result<Self, CliError> {
        Ok(Self {
            summary: serde_json::to_value(summary)
                .map_err(|e| Error::Numeric(format!("result is not serialisable: {e}")))?,
            report,
            failures: None,
        })
    }
}

fn io(context: &str) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        context: context.to_string(),
        source,
    }
}

/// Checks that must pass before any file is written.
pub fn preflight(cmd: Command, cfg: &ExperimentConfig) -> Result<(), CliError> {
    match cmd {
        Command::Hjb => check_cfl(cfg, &cfg.grid()?)?,
        Command::Convolve => check_cfl(cfg, &convolution_grid(cfg)?)?,
        Command::Bellman if cfg.graph.n != 2 => {
            return Err(Error::Config("bellman needs a two-vertex graph".into()).into())
        }
        _ => {}
    }
    Ok(())
}

fn check_cfl(cfg: &ExperimentConfig, grid: &SimplexGrid) -> Result<(), CliError> {
    let ratio = grid.cfl_ratio(&cfg.energy_spec()?, cfg.control.ell);
    if ratio > 1.0 {
        return Err(Error::Cfl { ratio }.into());
    }
    Ok(())
}

pub fn run(cmd: Command, cfg: &ExperimentConfig, dir: &RunDir) -> Result<Outcome, CliError> {
    match cmd {
        Command::Simulate => run_simulate(cfg, dir),
        Command::Transform => run_transform(cfg, dir),
        Command::Wdist => run_wdist(cfg, dir),
        Command::Cost => run_cost(cfg, dir),
        Command::Value => run_value(cfg, dir),
        Command::Bellman => run_bellman(cfg, dir),
        Command::Hjb => run_hjb(cfg, dir),
        Command::Convolve => run_convolve(cfg, dir),
        Command::Check => run_check(cfg, dir),
    }
}

fn run_simulate(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Outcome, CliError> {
    let sde = cfg.controlled_sde()?;
    let (rho, x) = cfg.initial_state()?;
    let ens = simulate_batch(&sde, &rho, &x, cfg.solver.simulate_paths, cfg.seed)?;
    for path in &ens.paths {
        let mut buf = Vec::new();
        path.write_csv(&mut buf).map_err(io("formatting path"))?;
        dir.write(&format!("path_{:04}.csv", path.path_index), &buf)
            .map_err(io("writing path"))?;
    }
    let summary = ens.summary();
    let report = format!(
        "{} paths, {} escaped, max mass defect {:.2e}, mean sup |H0| {:.6}",
        summary.n_paths,
        summary.escaped.len(),
        summary.max_mass_defect,
        summary.mean_sup_h0
    );
    Outcome::new(summary, report)
}

fn run_transform(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Outcome, CliError> {
    let sde = cfg.controlled_sde()?;
    let (rho, x) = cfg.initial_state()?;
    let traj = simulate(&sde, &rho, &x, &RngStream::new(cfg.seed, 0))?;
    let mut buf = Vec::new();
    write_wave_csv(&traj, &mut buf).map_err(io("formatting wave"))?;
    dir.write("wave.csv", &buf).map_err(io("writing wave"))?;
    let residual = sse_residual(&cfg.energy_spec()?, &traj)?;
    let wave = madelung_forward(&rho, &x)?;
    let (r2, x2) = madelung_inverse(&wave.u, Some(&x))?;
    let round_trip = rho
        .iter()
        .zip(r2.iter())
        .chain(x.iter().zip(x2.iter()))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let report = format!(
        "{} steps; residual max {:.3e}, rms {:.3e}; round trip error {:.1e}",
        residual.steps, residual.max, residual.rms, round_trip
    );
    Outcome::new(json!({ "residual": residual, "round_trip_error": round_trip }), report)
}

fn run_wdist(cfg: &ExperimentConfig, _dir: &RunDir) -> Result<Outcome, CliError> {
    let w = &cfg.solver.wasserstein;
    let graph = cfg.graph()?;
    let weight = ProbabilityWeight::new(cfg.energy.weight);
    let est = wasserstein_distance(&graph, &weight, &cfg.initial.rho, &w.target, w.steps, w.iterations)?;
    let oracle = match graph.edges() {
        [e] if graph.n() == 2 => Some(two_node_distance_oracle(&weight, e.weight, cfg.initial.rho[0], w.target[0])?),
        _ => None,
    };
    let mut report = format!(
        "distance {:.6} (straight line {:.6}), {} iterations, converged {}",
        est.distance,
        est.linear_action.sqrt(),
        est.iterations,
        est.converged
    );
    if let Some(o) = oracle {
        let _ = write!(report, "; exact two-vertex distance {o:.6}");
    }
    Outcome::new(json!({ "estimate": est, "exact": oracle }), report)
}

fn run_cost(cfg: &ExperimentConfig, _dir: &RunDir) -> Result<Outcome, CliError> {
    let (rho, x) = cfg.initial_state()?;
    let est = cost_functional(
        &cfg.cost_spec()?,
        &cfg.sde_config()?,
        cfg.solver.t0,
        &rho,
        &x,
        &cfg.control_signal()?,
        cfg.solver.n_paths,
        cfg.seed,
    )?;
    let report = format!("J = {:.6} ± {:.6} ({} escaped)", est.value, est.std_error, est.escaped);
    Outcome::new(est, report)
}

fn run_value(cfg: &ExperimentConfig, _dir: &RunDir) -> Result<Outcome, CliError> {
    let (rho, x) = cfg.initial_state()?;
    let est = value_function_mc(
        &cfg.cost_spec()?,
        &cfg.sde_config()?,
        cfg.solver.t0,
        &rho,
        &x,
        cfg.control.class,
        cfg.control.ell,
        cfg.solver.n_paths,
        cfg.seed,
        cfg.solver.budget,
    )?;
    let report = format!(
        "U = {:.6} ± {:.6} over {}, {} evaluations{}",
        est.value,
        est.std_error,
        est.control_class,
        est.evaluations,
        if est.budget_exhausted { " (budget exhausted)" } else { "" }
    );
    Outcome::new(est, report)
}

fn run_bellman(cfg: &ExperimentConfig, _dir: &RunDir) -> Result<Outcome, CliError> {
    let (rho, x) = cfg.initial_state()?;
    let s = &cfg.solver;
    let gap = bellman_gap(
        &cfg.cost_spec()?,
        &cfg.sde_config()?,
        s.t0,
        s.t_bar,
        &rho,
        &x,
        cfg.control.class,
        cfg.control.ell,
        s.n_paths,
        cfg.seed,
        s.bellman,
    )?;
    let report = format!(
        "gap {:.5} (se {:.5}); U = {:.5}, split value {:.5}; clamped {:.1}%{}",
        gap.gap,
        gap.se,
        gap.lhs.value,
        gap.rhs,
        100.0 * gap.clamped_fraction,
        if gap.flagged { "; flagged" } else { "" }
    );
    Outcome::new(gap, report)
}

fn run_hjb(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Outcome, CliError> {
    let grid = cfg.grid()?;
    let energy = cfg.energy_spec()?;
    let cost = cfg.cost_spec()?;
    let gvf = hjb_solve_backward(&grid, &cost, &energy, cfg.control.ell)?;
    let files = gvf
        .write_layers(&dir.path().join("layers"), cfg.solver.grid.layer_stride)
        .map_err(io("writing layers"))?;
    let mut layers = Vec::new();
    for f in &files {
        let bytes = std::fs::read(f).map_err(io("hashing layers"))?;
        layers.push(json!({
            "file": format!("layers/{}", f.file_name().expect("layer file name").to_string_lossy()),
            "sha256": sha256_hex(&bytes),
        }));
    }
    let meta = gvf.metadata();
    let energy_hash = sha256_json(&json!({
        "variant": meta.energy_variant,
        "weight": meta.weight,
        "fisher_coeff": meta.fisher_coeff,
        "sigma": meta.sigma,
        "graph": meta.graph,
    }));
    let metadata = json!({
        "solver": meta,
        "axes": {
            "t": (0..=grid.n_t).map(|k| grid.time(k)).collect::<Vec<_>>(),
            "rho1": (0..grid.n_rho).map(|i| grid.rho1(i)).collect::<Vec<_>>(),
            "x": (0..grid.n_x).map(|a| grid.x(a)).collect::<Vec<_>>(),
        },
        "cfl": { "ratio": gvf.cfl_ratio, "limit": 1.0, "dt": grid.dt(), "h_rho": grid.h_rho(), "h_x": grid.h_x() },
        "layer_stride": cfg.solver.grid.layer_stride,
        "layers": layers,
        "hashes": {
            "cost_sha256": sha256_json(&cost),
            "energy_sha256": energy_hash,
            "config_sha256": sha256_json(cfg),
        },
    });
    dir.write_json("metadata.json", &metadata).map_err(io("writing metadata"))?;
    let samples = gvf.interior_samples(cfg.solver.grid.residual_samples, cfg.seed);
    let residual = hjb_residual(&gvf, &samples)?;
    dir.write_json("residual.json", &residual).map_err(io("writing residual"))?;
    let value = (grid.n_rho > 0 && cfg.initial.rho.len() == 2)
        .then(|| gvf.interpolate(cfg.solver.t0, cfg.initial.rho[0], cfg.initial.x[0], cfg.initial.x[1]));
    let report = format!(
        "{} nodes x {} steps, CFL ratio {:.3}; U(t0, initial) = {}; residual rms {:.3e} on {} nodes",
        grid.nodes(),
        grid.n_t,
        gvf.cfl_ratio,
        value.map_or("outside grid".into(), |v| format!("{v:.6}")),
        residual.rms,
        residual.points
    );
    Outcome::new(
        json!({ "value_at_initial": value, "cfl_ratio": gvf.cfl_ratio, "residual": residual, "layers": files.len() }),
        report,
    )
}

fn convolution_grid(cfg: &ExperimentConfig) -> graph_whs::Result<SimplexGrid> {
    let g = &cfg.solver.grid;
    let p = cfg.solver.convolution.points;
    SimplexGrid::new(g.margin, p, g.x_max, p, cfg.solver.t_end - cfg.solver.t0, g.time_steps)
}

fn run_convolve(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Outcome, CliError> {
    let c = &cfg.solver.convolution;
    let grid = convolution_grid(cfg)?;
    if c.time_layers > grid.n_t + 1 {
        return Err(Error::Config(format!("{} time layers requested, the grid has {}", c.time_layers, grid.n_t + 1)).into());
    }
    let gvf = hjb_solve_backward(&grid, &cfg.cost_spec()?, &cfg.energy_spec()?, cfg.control.ell)?;
    let layers: Vec<usize> = (0..c.time_layers)
        .map(|j| (j * grid.n_t + (c.time_layers - 1) / 2) / (c.time_layers - 1))
        .collect();
    // the simplex coordinate is scaled so that Euclidean distance matches ‖ρ − μ‖
    let axes = vec![
        layers.iter().map(|&k| grid.time(k)).collect(),
        (0..grid.n_rho).map(|i| std::f64::consts::SQRT_2 * grid.rho1(i)).collect(),
        (0..grid.n_x).map(|a| grid.x(a)).collect(),
        (0..grid.n_x).map(|b| grid.x(b)).collect(),
    ];
    let points = PointGrid::new(axes)?;
    let values: Vec<f64> = layers.iter().flat_map(|&k| gvf.layers[k].iter().copied()).collect();
    let mut csv = String::from("theta,sup_gap,inf_gap,sup_midpoint_defect,inf_midpoint_defect\n");
    let mut rows = Vec::new();
    for &theta in &c.thetas {
        let up = sup_convolution(&points, &values, theta)?;
        let down = inf_convolution(&points, &values, theta)?;
        let sup_gap = up.iter().zip(&values).map(|(a, b)| a - b).fold(0.0, f64::max);
        let inf_gap = values.iter().zip(&down).map(|(a, b)| a - b).fold(0.0, f64::max);
        let sup_defect = midpoint_convexity_defect(&points, &up, theta, 1.0);
        let neg: Vec<f64> = down.iter().map(|v| -v).collect();
        let inf_defect = midpoint_convexity_defect(&points, &neg, theta, 1.0);
        let _ = writeln!(csv, "{theta:.17e},{sup_gap:.17e},{inf_gap:.17e},{sup_defect:.17e},{inf_defect:.17e}");
        rows.push(json!({
            "theta": theta,
            "sup_gap": sup_gap,
            "inf_gap": inf_gap,
            "sup_midpoint_defect": sup_defect,
            "inf_midpoint_defect": inf_defect,
        }));
    }
    dir.write("convolution.csv", csv.as_bytes()).map_err(io("writing convolution table"))?;
    let report = rows
        .iter()
        .map(|r| format!("theta {}: sup gap {:.4e}, inf gap {:.4e}", r["theta"], r["sup_gap"].as_f64().unwrap_or(f64::NAN), r["inf_gap"].as_f64().unwrap_or(f64::NAN)))
        .collect::<Vec<_>>()
        .join("\n");
    Outcome::new(json!({ "points": points.len(), "layers": layers, "rows": rows }), report)
}

#[derive(Debug, Serialize)]
struct InvariantReport {
    name: &'static str,
    passed: bool,
    detail: String,
}

impl InvariantReport {
    fn new(name: &'static str, value: f64, tol: f64) -> Self {
        Self {
            name,
            passed: value <= tol,
            detail: format!("{value:.3e} (tol {tol:.0e})"),
        }
    }

    fn line(&self) -> String {
        format!("[{}] inv {:<38} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Structural invariants of the configured problem at its initial state.
fn invariants(cfg: &ExperimentConfig) -> Result<Vec<InvariantReport>, CliError> {
    let energy = cfg.energy_spec()?;
    let (rho, x) = cfg.initial_state()?;
    let mut out = Vec::new();

    let d = energy_gradients(&energy, &rho, &x);
    out.push(InvariantReport::new("momentum gradient is tangent", d.d_x.iter().sum::<f64>().abs(), 1e-12));

    let traj = simulate(&cfg.controlled_sde()?, &rho, &x, &RngStream::new(cfg.seed, 0))?;
    out.push(InvariantReport::new("mass conserved along a path", traj.max_mass_defect(), 1e-12));

    let wave = madelung_forward(&rho, &x)?;
    let (r2, x2) = madelung_inverse(&wave.u, Some(&x))?;
    let trip = rho
        .iter()
        .zip(r2.iter())
        .chain(x.iter().zip(x2.iter()))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    out.push(InvariantReport::new("Madelung round trip", trip, 1e-12));

    let h = dominant_energy(&energy, &rho, &x);
    let tr = TruncationFn::new((2.0 * h.abs()).max(1.0), 0.5)?;
    out.push(InvariantReport::new(
        "truncation identity",
        truncation_identity_check(&energy, &tr, &rho, &x)?,
        1e-8,
    ));

    let cost = cfg.cost_spec()?;
    let ell = cfg.control.ell;
    let n = rho.len();
    let (q1, q2): (Vec<f64>, Vec<f64>) = ((0..n).map(|i| i as f64 - 0.5).collect(), (0..n).map(|i| 1.5 - i as f64).collect());
    let dq = q1.iter().zip(&q2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let lip = (legendre_fhat(&cost, cfg.solver.t0, &rho, &x, &q1, ell) - legendre_fhat(&cost, cfg.solver.t0, &rho, &x, &q2, ell)).abs();
    out.push(InvariantReport::new("Legendre transform is ell-Lipschitz", lip / (ell * dq), 1.0 + 1e-12));

    if n == 2 {
        let ratio = cfg.grid()?.cfl_ratio(&energy, ell);
        out.push(InvariantReport::new("configured grid meets CFL", ratio, 1.0));
    }
    Ok(out)
}

fn run_check(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Outcome, CliError> {
    let inv = invariants(cfg)?;
    let mut report: Vec<String> = inv.iter().map(InvariantReport::line).collect();
    for line in &report {
        println!("{line}");
    }
    let mut criteria = Vec::new();
    for &id in &cfg.check.criteria {
        let r = acceptance::run(id);
        println!("{}", r.line());
        report.push(r.line());
        criteria.push(r);
    }
    let failed = inv.iter().filter(|r| !r.passed).count() + criteria.iter().filter(|r| !r.passed).count();
    let total = inv.len() + criteria.len();
    let summary = json!({ "invariants": inv, "criteria": criteria, "failed": failed, "total": total });
    dir.write_json("check.json", &summary).map_err(io("writing check report"))?;
    let mut text = report.join("\n");
    text.push('\n');
    dir.write("check.txt", text.as_bytes()).map_err(io("writing check report"))?;
    Ok(Outcome {
        summary,
        // already printed line by line
        report: format!("{} of {total} checks passed", total - failed),
        failures: Some((failed, total)),
    })
}
