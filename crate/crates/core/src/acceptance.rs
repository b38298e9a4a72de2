//! The acceptance suite: thirteen property and oracle checks with fixed
//! seeds, each reporting a pass/fail line with its measured quantities.

use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::benchmark;
use crate::control::{bellman_gap, legendre_fhat, value_function_mc, BellmanOptions, ControlClass, CostFamily, CostSpec};
use crate::convolution::{inf_convolution, midpoint_convexity_defect, sup_convolution, PointGrid};
use crate::dynamics::{map_paths, regularity_scan, simulate, SdeConfig};
use crate::energy::{dominant_energy, energy_gradients, EnergySpec, EnergyVariant};
use crate::error::Result;
use crate::graph::{DensityState, EdgeField, Graph, MomentumState};
use crate::hjb::{hjb_solve_backward, monotonicity_violations, refinement_gap, GridValueFunction};
use crate::quadrature::adaptive_simpson;
use crate::rng::RngStream;
use crate::schrodinger::{madelung_forward, sse_residual};
use crate::truncation::{identity_residual, profile_constant, truncation_identity_check, TruncationFn};
use crate::wasserstein::{two_node_distance_oracle, wasserstein_distance};
use crate::weight::{ProbabilityWeight, WeightKind};

#[derive(Debug, Clone, Serialize)]
pub struct CriterionReport {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl CriterionReport {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {:<34} {:>8.2}s / {:>4.0}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.budget_seconds,
            self.detail
        )
    }
}

fn timed(
    id: u32,
    name: &'static str,
    budget_seconds: f64,
    body: impl FnOnce() -> Result<(bool, String)>,
) -> CriterionReport {
    let start = Instant::now();
    let (ok, detail) = match body() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let seconds = start.elapsed().as_secs_f64();
    let in_budget = seconds <= budget_seconds;
    CriterionReport {
        id,
        name,
        passed: ok && in_budget,
        detail: if in_budget { detail } else { format!("{detail}; over the time budget") },
        seconds,
        budget_seconds,
    }
}

pub const KINDS: [WeightKind; 3] = [WeightKind::Average, WeightKind::Logarithmic, WeightKind::Harmonic];

/// Runs every criterion in order.
pub fn run_all() -> Vec<CriterionReport> {
    (1..=13).map(run).collect()
}

pub fn run(id: u32) -> CriterionReport {
    match id {
        1 => weight_axioms(),
        2 => integration_by_parts(),
        3 => gradient_oracle(),
        4 => mass_conservation(),
        5 => madelung_consistency(),
        6 => energy_regularity(),
        7 => legendre_transform(),
        8 => bellman_principle(),
        9 => truncation_apparatus(),
        10 => convolutions(),
        11 => hjb_sanity(),
        12 => hjb_vs_monte_carlo(),
        13 => wasserstein(),
        _ => CriterionReport {
            id,
            name: "unknown",
            passed: false,
            detail: "no such criterion".into(),
            seconds: 0.0,
            budget_seconds: 0.0,
        },
    }
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Graph {
    let mut edges: Vec<(usize, usize, f64)> = (0..n - 1).map(|i| (i, i + 1, rng.random_range(0.5..2.0))).collect();
    for i in 0..n {
        for j in i + 2..n {
            if rng.random::<f64>() < 0.3 {
                edges.push((i, j, rng.random_range(0.5..2.0)));
            }
        }
    }
    Graph::new(n, &edges).expect("path plus chords is connected")
}

fn random_density(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let rho: Vec<f64> = raw.iter().map(|r| floor + (1.0 - n as f64 * floor) * r / s).collect();
    let s: f64 = rho.iter().sum();
    rho.iter().map(|r| r / s).collect()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()
}

fn random_interaction(rng: &mut ChaCha8Rng, graph: &Graph) -> Vec<f64> {
    let n = graph.n();
    let mut w = vec![0.0; n * n];
    for e in graph.edges() {
        let v = rng.random_range(-1.0..1.0);
        w[e.i * n + e.j] = v;
        w[e.j * n + e.i] = v;
    }
    w
}

fn weight_axioms() -> CriterionReport {
    timed(1, "weight axioms", 1.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut worst: f64 = 0.0;
        let mut failures = 0usize;
        let mut integrals = Vec::new();
        for kind in KINDS {
            let w = ProbabilityWeight::new(kind);
            for s in 0..1000 {
                let t: f64 = rng.random_range(1e-3..=1.0);
                // every tenth sample sits next to the equal-argument branch
                let near = s % 10 == 0;
                let r: f64 = if near {
                    (t * (1.0 + rng.random_range(-1e-9..1e-9))).min(1.0)
                } else {
                    rng.random_range(1e-3..=1.0)
                };
                let tol = if near && kind == WeightKind::Logarithmic { 1e-9 } else { 1e-12 };
                let g = w.eval(t, r)?;
                let lam: f64 = rng.random_range(0.01..=1.0);
                let (t2, r2) = (rng.random_range(1e-3..=1.0), rng.random_range(1e-3..=1.0));
                let mid = w.eval(0.5 * (t + t2), 0.5 * (r + r2))?;
                let defects = [
                    (g - w.eval(r, t)?).abs(),
                    (t.min(r) - g).max(0.0),
                    (g - t.max(r)).max(0.0),
                    (w.eval(lam * t, lam * r)? - lam * g).abs(),
                    (0.5 * (g + w.eval(t2, r2)?) - mid).max(0.0),
                ];
                for d in defects {
                    let rel = d / t.max(r);
                    worst = worst.max(rel);
                    if rel > tol {
                        failures += 1;
                    }
                }
            }
            // ∫₀¹ g(r, 1−r)^{−1/2} dr with r = sin²(u/2)
            let integral = adaptive_simpson(
                |u| {
                    let (s, c) = (0.5 * u).sin_cos();
                    0.5 * u.sin() / w.value(s * s, c * c).sqrt()
                },
                1e-9,
                std::f64::consts::PI - 1e-9,
                1e-10,
            )?;
            if !integral.is_finite() {
                failures += 1;
            }
            integrals.push(integral);
        }
        Ok((
            failures == 0,
            format!(
                "3000 samples, {failures} violations, worst relative defect {worst:.2e}; integrals {:.4}/{:.4}/{:.4}",
                integrals[0], integrals[1], integrals[2]
            ),
        ))
    })
}

fn integration_by_parts() -> CriterionReport {
    timed(2, "integration by parts", 1.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let mut worst: f64 = 0.0;
        for k in 0..100 {
            let n = rng.random_range(2..=6);
            let g = random_graph(&mut rng, n);
            let w = ProbabilityWeight::new(KINDS[k % 3]);
            let rho = random_density(&mut rng, n, 0.01);
            let phi = random_vec(&mut rng, n, 2.0);
            let vals: Vec<((usize, usize), f64)> = g
                .edges()
                .iter()
                .map(|e| ((e.i, e.j), rng.random_range(-2.0..2.0)))
                .collect();
            let ups = EdgeField::from_edges(&g, &vals)?;
            let lhs = g.rho_inner(&w, &rho, &g.gradient(&phi)?, &ups)?;
            let div = g.divergence(&w, &rho, &ups)?;
            let rhs: f64 = phi.iter().zip(&div).map(|(a, b)| a * b).sum();
            worst = worst.max((lhs + rhs).abs());
        }
        Ok((worst <= 1e-10, format!("100 instances, max |<grad phi, v> + <phi, div v>| = {worst:.2e} (tol 1e-10)")))
    })
}

fn fd_mismatch(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = analytic.iter().chain(fd).fold(1.0f64, |m, v| m.max(v.abs()));
    analytic.iter().zip(fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

fn gradient_oracle() -> CriterionReport {
    timed(3, "gradient oracle", 10.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let mut worst: f64 = 0.0;
        let h = 1e-5;
        for k in 0..100 {
            let variant = if k % 2 == 0 {
                EnergyVariant::PolynomialInteraction
            } else {
                EnergyVariant::LogarithmicEntropy
            };
            let n = rng.random_range(2..=5);
            let g = random_graph(&mut rng, n);
            let w = ProbabilityWeight::new(KINDS[(k / 2) % 3]);
            let mut spec = EnergySpec::new(g.clone(), w, variant);
            if variant == EnergyVariant::PolynomialInteraction {
                spec = spec.with_interaction(random_interaction(&mut rng, &g))?;
            }
            let rho = random_density(&mut rng, n, 0.05);
            let x = random_vec(&mut rng, n, 1.5);
            let an = energy_gradients(&spec, &rho, &x);
            let e = |r: &[f64], y: &[f64]| dominant_energy(&spec, r, y);
            let mut fd_rho = vec![0.0; n];
            let mut fd_x = vec![0.0; n];
            let mut fd_hess = vec![0.0; n * n];
            for i in 0..n {
                let (mut rp, mut rm) = (rho.clone(), rho.clone());
                rp[i] += h;
                rm[i] -= h;
                fd_rho[i] = (e(&rp, &x) - e(&rm, &x)) / (2.0 * h);
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                fd_x[i] = (e(&rho, &xp) - e(&rho, &xm)) / (2.0 * h);
                let gp = energy_gradients(&spec, &rho, &xp).d_x;
                let gm = energy_gradients(&spec, &rho, &xm).d_x;
                for j in 0..n {
                    fd_hess[j * n + i] = (gp[j] - gm[j]) / (2.0 * h);
                }
            }
            worst = worst
                .max(fd_mismatch(&an.d_rho, &fd_rho))
                .max(fd_mismatch(&an.d_x, &fd_x))
                .max(fd_mismatch(&an.hess_x, &fd_hess));
        }
        Ok((worst <= 1e-6, format!("100 states, both variants, worst relative mismatch {worst:.2e} (tol 1e-6)")))
    })
}

fn mass_conservation() -> CriterionReport {
    timed(4, "mass conservation", 30.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let mut tangency: f64 = 0.0;
        for k in 0..100 {
            let n = rng.random_range(2..=6);
            let g = random_graph(&mut rng, n);
            let spec = EnergySpec::new(g, ProbabilityWeight::new(KINDS[k % 3]), EnergyVariant::PolynomialInteraction);
            let rho = random_density(&mut rng, n, 0.01);
            let x = random_vec(&mut rng, n, 3.0);
            tangency = tangency.max(energy_gradients(&spec, &rho, &x).d_x.iter().sum::<f64>().abs());
        }
        let energy = EnergySpec::new(
            Graph::path(3)?,
            ProbabilityWeight::average(),
            EnergyVariant::PolynomialInteraction,
        )
        .with_sigma(vec![0.2; 3])?;
        let cfg = SdeConfig::new(energy, 0.0, 1.0, 1e-3)?;
        let rho0 = DensityState::new(vec![0.3, 0.3, 0.4])?;
        let x0 = MomentumState::new(vec![0.4, 0.0, -0.3])?;
        let (defects, escaped) = map_paths(&cfg, &rho0, &x0, 100, 4040, |t| t.max_mass_defect())?;
        let drift = defects.iter().copied().fold(0.0, f64::max);
        Ok((
            tangency <= 1e-12 && drift <= 1e-9,
            format!(
                "max |sum D_x H0| = {tangency:.2e} (tol 1e-12); max |sum rho - 1| = {drift:.2e} over {} paths, {} escaped (tol 1e-9)",
                defects.len(),
                escaped.len()
            ),
        ))
    })
}

/// RMS Schrödinger-form residual at `dt`, `dt/2`, `dt/4` for one instance.
fn sse_rms_levels(energy: &EnergySpec, rho: &[f64], x: &[f64], dt: f64) -> Result<Vec<f64>> {
    let rho0 = DensityState::new(rho.to_vec())?;
    let x0 = MomentumState::new(x.to_vec())?;
    (0..3)
        .map(|level| {
            let cfg = SdeConfig::new(energy.clone(), 0.0, 0.1, dt)?.with_refine(level)?;
            let traj = simulate(&cfg, &rho0, &x0, &RngStream::new(0, 0))?;
            Ok(sse_residual(energy, &traj)?.rms)
        })
        .collect()
}

fn madelung_consistency() -> CriterionReport {
    timed(5, "Madelung / Schroedinger consistency", 60.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(505);
        let mut modulus: f64 = 0.0;
        let mut ratios = Vec::new();
        let mut plateau = Vec::new();
        for k in 0..10 {
            let n = 3;
            let g = random_graph(&mut rng, n);
            let rho = random_density(&mut rng, n, 0.1);
            let x = random_vec(&mut rng, n, 1.0);
            let wave = madelung_forward(&DensityState::new(rho.clone())?, &MomentumState::new(x.clone())?)?;
            for (u, r) in wave.u.iter().zip(&rho) {
                modulus = modulus.max((Complex64::norm_sqr(u) - r).abs());
            }
            let variant = if k % 2 == 0 {
                EnergyVariant::LogarithmicEntropy
            } else {
                EnergyVariant::PolynomialInteraction
            };
            let consistent = EnergySpec::new(g.clone(), ProbabilityWeight::logarithmic(), variant).with_fisher_coeff(0.25)?;
            let rms = sse_rms_levels(&consistent, &rho, &x, 1e-3)?;
            ratios.push(rms[0] / rms[1]);
            ratios.push(rms[1] / rms[2]);
            if k < 3 {
                // the displayed operator with the default Fisher weight and another mean
                let other = EnergySpec::new(g, ProbabilityWeight::average(), variant);
                let rms = sse_rms_levels(&other, &rho, &x, 1e-3)?;
                plateau.push(rms[1] / rms[2]);
            }
        }
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().copied().fold(0.0, f64::max);
        let ok = modulus <= 1e-12 && lo >= 1.8 && hi <= 2.2;
        Ok((
            ok,
            format!(
                "max ||u|^2 - rho| = {modulus:.1e}; RMS halving ratios in [{lo:.3}, {hi:.3}] (need [1.8, 2.2], logarithmic mean, Fisher 1/4); average mean, Fisher 1/8: ratios {:?}",
                plateau.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
            ),
        ))
    })
}

fn energy_regularity() -> CriterionReport {
    timed(6, "energy regularity scaling", 120.0, || {
        let cfg = benchmark::sde_config()?;
        let (rho0, x0) = benchmark::initial_state();
        let horizons: Vec<f64> = (4..=8).map(|k| 2f64.powi(-k)).collect();
        let scan = regularity_scan(&cfg, &rho0, &x0, &horizons, 1000, 606)?;
        let ok = !scan.degenerate && (0.8..=1.3).contains(&scan.slope);
        Ok((ok, format!("slope {:.3} +- {:.3} (need [0.8, 1.3]), 1000 paths", scan.slope, scan.slope_se)))
    })
}

fn legendre_transform() -> CriterionReport {
    timed(7, "Legendre transform", 10.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(707);
        let ell = benchmark::ELL;
        let cost = benchmark::cost();
        let m = 100;
        let h = 2.0 * ell / (m - 1) as f64;
        let ball: Vec<[f64; 2]> = (0..m * m)
            .map(|k| [-ell + (k / m) as f64 * h, -ell + (k % m) as f64 * h])
            .filter(|v| v[0] * v[0] + v[1] * v[1] <= ell * ell)
            .collect();
        let mut worst_ratio: f64 = 0.0;
        let mut above = 0usize;
        let mut lip: f64 = 0.0;
        for _ in 0..100 {
            let rho = random_density(&mut rng, 2, 0.05);
            let x = random_vec(&mut rng, 2, 1.0);
            let q = random_vec(&mut rng, 2, 3.0);
            let closed = legendre_fhat(&cost, 0.0, &rho, &x, &q, ell);
            let track = cost.running_tracking(&rho, &x);
            let brute = ball
                .iter()
                .map(|v| q[0] * v[0] + q[1] * v[1] - cost.control_coeff * (v[0] * v[0] + v[1] * v[1]) - track)
                .fold(f64::NEG_INFINITY, f64::max);
            if brute > closed + 1e-12 {
                above += 1;
            }
            let qn = (q[0] * q[0] + q[1] * q[1]).sqrt();
            let resolution = h * (qn + 2.0 * cost.control_coeff * ell);
            worst_ratio = worst_ratio.max((closed - brute).abs() / resolution);
            let q2: Vec<f64> = q.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            let dq = ((q[0] - q2[0]).powi(2) + (q[1] - q2[1]).powi(2)).sqrt();
            if dq > 0.0 {
                let other = legendre_fhat(&cost, 0.0, &rho, &x, &q2, ell);
                lip = lip.max((closed - other).abs() / dq);
            }
        }
        let ok = above == 0 && worst_ratio <= 2.0 && lip <= ell + 1e-9;
        Ok((
            ok,
            format!(
                "100 q: closed form within {worst_ratio:.3} grid resolutions of brute force (need <= 2), {above} brute values above; Lipschitz {lip:.6} (need <= {})",
                ell + 1e-9
            ),
        ))
    })
}

fn bellman_principle() -> CriterionReport {
    timed(8, "Bellman principle", 300.0, || {
        let cfg = benchmark::sde_config()?;
        let (rho0, x0) = benchmark::initial_state();
        let report = bellman_gap(
            &benchmark::cost(),
            &cfg,
            0.0,
            benchmark::MID_TIME,
            &rho0,
            &x0,
            ControlClass::PiecewiseConstant { pieces: 2 },
            benchmark::ELL,
            2000,
            808,
            BellmanOptions::default(),
        )?;
        let ok = report.gap <= 3.0 * report.se;
        Ok((
            ok,
            format!(
                "gap {:.5} vs 3 SE = {:.5} (lhs {:.5} +- {:.5}, rhs {:.5} +- {:.5}, lattice part {:.5}, clamped {:.3})",
                report.gap,
                3.0 * report.se,
                report.lhs.value,
                report.lhs.std_error,
                report.rhs,
                report.rhs_se,
                report.lattice_se,
                report.clamped_fraction
            ),
        ))
    })
}

fn truncation_apparatus() -> CriterionReport {
    timed(9, "truncation apparatus", 30.0, || {
        let beta = 0.5;
        let c = profile_constant();
        let mut plateau_ok = true;
        let mut bound: f64 = 0.0;
        for r in [1.0, 10.0, 100.0] {
            let tr = TruncationFn::new(r, beta)?;
            plateau_ok &= tr.eval(0.5 * r) == (1.0, 0.0, 0.0);
            plateau_ok &= tr.eval(3.0 * r) == (r.powf(-beta), 0.0, 0.0);
            let m = 20_000;
            for k in 1..m {
                let (_, d1, d2) = tr.eval(r * (1.0 + k as f64 / m as f64));
                bound = bound.max((d1.abs() * r).max(d2.abs() * r * r));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(909);
        let mut worst: f64 = 0.0;
        let mut band = 0usize;
        let mut broken: f64 = 0.0;
        for k in 0..1000 {
            let variant = if k % 2 == 0 {
                EnergyVariant::PolynomialInteraction
            } else {
                EnergyVariant::LogarithmicEntropy
            };
            let n = rng.random_range(2..=5);
            let g = random_graph(&mut rng, n);
            let mut spec = EnergySpec::new(g.clone(), ProbabilityWeight::new(KINDS[k % 3]), variant);
            if variant == EnergyVariant::PolynomialInteraction {
                spec = spec.with_interaction(random_interaction(&mut rng, &g))?;
            }
            let rho = random_density(&mut rng, n, 0.05);
            let mut x = random_vec(&mut rng, n, 2.0);
            let (tr, in_band) = if k % 2 == 0 {
                // rescale x so the energy lands inside (R, 2R)
                let r = [1.0, 10.0, 100.0][k % 3];
                let target = r * rng.random_range(1.1..1.9);
                let zero = vec![0.0; n];
                let rest = dominant_energy(&spec, &rho, &zero);
                let kin = dominant_energy(&spec, &rho, &x) - rest;
                if kin > 0.0 && target > rest {
                    let s = ((target - rest) / kin).sqrt();
                    x.iter_mut().for_each(|v| *v *= s);
                }
                (TruncationFn::new(r, beta)?, true)
            } else {
                (TruncationFn::new([1.0, 10.0, 100.0][k % 3], beta)?, false)
            };
            worst = worst.max(truncation_identity_check(&spec, &tr, &rho, &x)?);
            let h0 = dominant_energy(&spec, &rho, &x);
            if in_band && h0 > tr.r && h0 < 2.0 * tr.r {
                band += 1;
                let mut grads = energy_gradients(&spec, &rho, &x);
                let (_, d1, _) = tr.eval(h0);
                grads.d_x.iter_mut().for_each(|v| *v += 1.0);
                broken = broken.max(identity_residual(&grads, d1));
            }
        }
        let ok = plateau_ok && bound <= c * (1.0 + 1e-9) && worst <= 1e-8 && band > 0 && broken > 1e-4;
        Ok((
            ok,
            format!(
                "plateaus exact: {plateau_ok}; max(|phi'|R, |phi''|R^2) = {bound:.3} <= profile constant {c:.3}; identity residual {worst:.1e} over 1000 states ({band} in the band, tol 1e-8); broken tangency gives {broken:.2e} (need > 1e-4)"
            ),
        ))
    })
}

/// Benchmark value function on a 9-point grid, sampled on 9 time layers.
fn coarse_benchmark() -> Result<(PointGrid, Vec<f64>)> {
    let grid = benchmark::grid(9)?;
    let gvf = hjb_solve_backward(&grid, &benchmark::cost(), &benchmark::energy(), benchmark::ELL)?;
    let stride = grid.n_t / 8;
    let layers: Vec<usize> = (0..=8).map(|k| k * stride).collect();
    // ‖ρ − μ‖² = 2(ρ₁ − μ₁)² on the two-vertex simplex
    let axes = vec![
        layers.iter().map(|&k| grid.time(k)).collect(),
        (0..grid.n_rho).map(|i| std::f64::consts::SQRT_2 * grid.rho1(i)).collect(),
        (0..grid.n_x).map(|a| grid.x(a)).collect(),
        (0..grid.n_x).map(|b| grid.x(b)).collect(),
    ];
    let mut values = Vec::with_capacity(9 * grid.nodes());
    for &k in &layers {
        values.extend_from_slice(&gvf.layers[k]);
    }
    Ok((PointGrid::new(axes)?, values))
}

fn convolutions() -> CriterionReport {
    timed(10, "sup/inf convolution", 30.0, || {
        let (grid, u) = coarse_benchmark()?;
        let mut gaps = Vec::new();
        let mut ordered = true;
        let mut convex: f64 = f64::INFINITY;
        let mut concave: f64 = f64::INFINITY;
        for theta in [0.1, 0.05, 0.025] {
            let up = sup_convolution(&grid, &u, theta)?;
            let down = inf_convolution(&grid, &u, theta)?;
            ordered &= up.iter().zip(&u).all(|(a, b)| a >= b) && down.iter().zip(&u).all(|(a, b)| a <= b);
            convex = convex.min(midpoint_convexity_defect(&grid, &up, theta, 1.0));
            let neg: Vec<f64> = down.iter().map(|v| -v).collect();
            concave = concave.min(midpoint_convexity_defect(&grid, &neg, theta, 1.0));
            gaps.push(up.iter().zip(&u).map(|(a, b)| a - b).fold(0.0, f64::max));
        }
        let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
        let ok = ordered && convex >= -1e-12 && concave >= -1e-12 && monotone;
        Ok((
            ok,
            format!(
                "{} points; ordering {ordered}; min midpoint defect {convex:.1e} (sup), {concave:.1e} (inf); sup gaps {:.4e} > {:.4e} > {:.4e}",
                grid.len(),
                gaps[0],
                gaps[1],
                gaps[2]
            ),
        ))
    })
}

fn solve_levels(points: &[usize]) -> Result<Vec<GridValueFunction>> {
    points
        .iter()
        .map(|&p| hjb_solve_backward(&benchmark::grid(p)?, &benchmark::cost(), &benchmark::energy(), benchmark::ELL))
        .collect()
}

fn hjb_sanity() -> CriterionReport {
    timed(11, "HJB solver sanity", 300.0, || {
        let g = Graph::two_node(1.0)?;
        let flat = CostSpec::new(CostFamily::QuadraticControl, &g, 0.5)?.with_terminal_offset(0.7)?;
        let grid = benchmark::grid(33)?;
        let constant = hjb_solve_backward(&grid, &flat, &benchmark::energy(), benchmark::ELL)?;
        let const_err = constant
            .layers
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max((v - 0.7).abs()));

        let levels = solve_levels(&[9, 17, 33])?;
        let finest = &levels[2];
        let cost = benchmark::cost();
        let mut terminal_err: f64 = 0.0;
        for i in 0..finest.grid.n_rho {
            for a in 0..finest.grid.n_x {
                for b in 0..finest.grid.n_x {
                    let r = finest.grid.rho1(i);
                    let h = crate::control::terminal_cost(&cost, &[r, 1.0 - r], &[finest.grid.x(a), finest.grid.x(b)]);
                    terminal_err = terminal_err.max((finest.value(finest.grid.n_t, i, a, b) - h).abs());
                }
            }
        }
        let d1 = refinement_gap(&levels[0], &levels[1], 0.5)?;
        let d2 = refinement_gap(&levels[1], &levels[2], 0.5)?;
        let factor = d2 / d1;
        let violations = monotonicity_violations(&grid, &cost, &benchmark::energy(), benchmark::ELL, 1000, 1111)?;
        let ok = const_err <= 1e-12 && terminal_err == 0.0 && factor <= 0.7 && violations == 0;
        Ok((
            ok,
            format!(
                "constant case error {const_err:.1e}; terminal layer error {terminal_err:.1e}; refinement gaps {d1:.3e}, {d2:.3e}, factor {factor:.3} (need <= 0.7); {violations} monotonicity violations in 1000; CFL ratio {:.3} at 33^3 x {}",
                finest.cfl_ratio, finest.grid.n_t
            ),
        ))
    })
}

/// States used for the grid versus Monte-Carlo comparison.
pub const CROSS_CHECK_STATES: [([f64; 2], [f64; 2]); 5] = [
    ([0.5, 0.5], [0.0, 0.0]),
    ([0.4, 0.6], [0.25, 0.0]),
    ([0.6, 0.4], [-0.25, 0.25]),
    ([0.45, 0.55], [0.0, -0.25]),
    ([0.55, 0.45], [0.25, 0.25]),
];

fn hjb_vs_monte_carlo() -> CriterionReport {
    timed(12, "HJB vs Monte Carlo", 600.0, || {
        let levels = solve_levels(&[17, 33])?;
        let cfg = benchmark::sde_config()?;
        let cost = benchmark::cost();
        let rows: Vec<Result<(bool, String)>> = CROSS_CHECK_STATES
            .par_iter()
            .enumerate()
            .map(|(k, (rho, x))| {
                let grid_u = levels[1].interpolate(0.0, rho[0], x[0], x[1]);
                let trunc = (grid_u - levels[0].interpolate(0.0, rho[0], x[0], x[1])).abs();
                let mc = value_function_mc(
                    &cost,
                    &cfg,
                    0.0,
                    &DensityState::new(rho.to_vec())?,
                    &MomentumState::new(x.to_vec())?,
                    ControlClass::AffineFeedback { pieces: 1 },
                    benchmark::ELL,
                    2000,
                    1200 + k as u64,
                    200,
                )?;
                let diff = (grid_u - mc.value).abs();
                let tol = (0.1 * grid_u.abs().max(mc.value.abs())).max(3.0 * mc.std_error + trunc);
                Ok((
                    diff <= tol,
                    format!("{:.4}/{:.4} (SE {:.1e}, trunc {:.1e})", grid_u, mc.value, mc.std_error, trunc),
                ))
            })
            .collect();
        let mut ok = true;
        let mut parts = Vec::new();
        for r in rows {
            let (pass, text) = r?;
            ok &= pass;
            parts.push(text);
        }
        Ok((ok, format!("grid 33 / MC affine feedback at 5 states: {}", parts.join("; "))))
    })
}

fn wasserstein() -> CriterionReport {
    timed(13, "Wasserstein distance", 60.0, || {
        let g = Graph::two_node(1.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1313);
        let mut pairs = Vec::new();
        for kind in KINDS {
            for _ in 0..10 {
                pairs.push((kind, rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)));
            }
        }
        let errs: Vec<Result<f64>> = pairs
            .par_iter()
            .map(|&(kind, a, b)| {
                let w = ProbabilityWeight::new(kind);
                let est = wasserstein_distance(&g, &w, &[a, 1.0 - a], &[b, 1.0 - b], 32, 400)?;
                Ok((est.distance - two_node_distance_oracle(&w, 1.0, a, b)?).abs())
            })
            .collect();
        let mut worst: f64 = 0.0;
        for e in errs {
            worst = worst.max(e?);
        }
        Ok((worst <= 1e-3, format!("30 endpoint pairs over three weights, max error {worst:.2e} (tol 1e-3)")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_densities_are_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 2..7 {
            let r = random_density(&mut rng, n, 0.05);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(r.iter().all(|&v| v >= 0.05 - 1e-12));
        }
    }

    #[test]
    fn unknown_criterion_fails() {
        assert!(!run(99).passed);
    }
}
