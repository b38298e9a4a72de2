//! Time integration of the stochastic Wasserstein–Hamiltonian system
//!
//! ```text
//! dρ = D_x ℋ₀^𝕍 dt,    dS = −D_ρ ℋ₀^𝕍 dt − σ dW
//! ```
//!
//! by the explicit midpoint rule on the drift plus an additive noise
//! increment. The noise does not depend on the state, so Itô and Stratonovich
//! readings agree and the scheme is strong order one.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::control::ControlSignal;
use crate::energy::{controlled_energy, dominant_energy, energy_gradients, EnergySpec};
use crate::error::{check_len, Error, Result};
use crate::graph::{DensityState, MomentumState};
use crate::rng::RngStream;

pub const DEFAULT_BOUNDARY_FLOOR: f64 = 1e-6;
pub const DEFAULT_MAX_REJECTS: u32 = 8;
/// Deepest Brownian-bridge level the generator supports.
const MAX_LEVEL: u32 = 15;

#[derive(Debug, Clone)]
pub struct SdeConfig {
    pub t0: f64,
    pub t_end: f64,
    /// Base step. Noise is keyed on this grid, so runs with different
    /// `refine` levels share one Brownian path.
    pub dt: f64,
    /// The integrator uses `dt / 2^refine`.
    pub refine: u32,
    pub energy: EnergySpec,
    pub control: ControlSignal,
    pub boundary_floor: f64,
    pub max_rejects: u32,
}

impl SdeConfig {
    pub fn new(energy: EnergySpec, t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        let n = energy.n();
        let cfg = Self {
            t0,
            t_end,
            dt,
            refine: 0,
            control: ControlSignal::zero(n, t0, t_end),
            energy,
            boundary_floor: DEFAULT_BOUNDARY_FLOOR,
            max_rejects: DEFAULT_MAX_REJECTS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_control(mut self, control: ControlSignal) -> Result<Self> {
        if control.n() != self.energy.n() {
            return Err(Error::shape(self.energy.n(), control.n()));
        }
        self.control = control;
        Ok(self)
    }

    pub fn with_refine(mut self, refine: u32) -> Result<Self> {
        self.refine = refine;
        self.validate()?;
        Ok(self)
    }

    pub fn with_floor(mut self, floor: f64) -> Result<Self> {
        self.boundary_floor = floor;
        self.validate()?;
        Ok(self)
    }

    pub fn with_max_rejects(mut self, max_rejects: u32) -> Self {
        self.max_rejects = max_rejects;
        self
    }

    /// Same dynamics restricted to `[t0, t_end]`, keeping the base step.
    pub fn with_horizon(&self, t0: f64, t_end: f64) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.t0 = t0;
        cfg.t_end = t_end;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.energy.n() as f64;
        if !(self.t0 >= 0.0 && self.t0 < self.t_end && self.t_end.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= t0 < T, got t0 = {}, T = {}",
                self.t0, self.t_end
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        let span = self.t_end - self.t0;
        let ratio = span / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
            return Err(Error::Config(format!(
                "horizon {span} is not a multiple of dt = {}",
                self.dt
            )));
        }
        if !(self.boundary_floor > 0.0 && self.boundary_floor < 1.0 / n) {
            return Err(Error::Config(format!(
                "boundary floor must lie in (0, 1/n), got {}",
                self.boundary_floor
            )));
        }
        if self.refine > 10 {
            return Err(Error::Config("refine level above 10".into()));
        }
        Ok(())
    }

    pub fn base_steps(&self) -> usize {
        ((self.t_end - self.t0) / self.dt).round() as usize
    }

    /// Number of integrator steps on `[t0, T]`.
    pub fn steps(&self) -> usize {
        self.base_steps() << self.refine
    }

    /// Integrator step size.
    pub fn step_size(&self) -> f64 {
        (self.t_end - self.t0) / self.steps() as f64
    }

    fn noise_dt(&self) -> f64 {
        (self.t_end - self.t0) / self.base_steps() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps() {
            self.t_end
        } else {
            self.t0 + k as f64 * self.step_size()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub rho_path: Vec<Vec<f64>>,
    pub s_path: Vec<Vec<f64>>,
    /// `ℋ₀^𝕍` with the control active at each time.
    pub h0_path: Vec<f64>,
    /// `ℋ₀` without the control potential.
    pub energy_path: Vec<f64>,
    /// Control used on each step.
    pub controls: Vec<Vec<f64>>,
    /// Brownian increment used on each step.
    pub increments: Vec<Vec<f64>>,
    pub seed: u64,
    pub path_index: u64,
}

impl Trajectory {
    fn start(cfg: &SdeConfig, rho: &[f64], x: &[f64], rng: &RngStream) -> Self {
        let v = cfg.control.eval(cfg.t0, rho, x);
        Self {
            times: vec![cfg.t0],
            rho_path: vec![rho.to_vec()],
            s_path: vec![x.to_vec()],
            h0_path: vec![controlled_energy(&cfg.energy, &v, rho, x)],
            energy_path: vec![dominant_energy(&cfg.energy, rho, x)],
            controls: Vec::new(),
            increments: Vec::new(),
            seed: rng.master_seed,
            path_index: rng.stream_id,
        }
    }

    fn push(&mut self, cfg: &SdeConfig, t: f64, rho: Vec<f64>, x: Vec<f64>, v: &[f64], dw: Vec<f64>) {
        let next_v = cfg.control.eval(t, &rho, &x);
        self.h0_path.push(controlled_energy(&cfg.energy, &next_v, &rho, &x));
        self.energy_path.push(dominant_energy(&cfg.energy, &rho, &x));
        self.times.push(t);
        self.rho_path.push(rho);
        self.s_path.push(x);
        self.controls.push(v.to_vec());
        self.increments.push(dw);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> (&[f64], &[f64]) {
        (
            self.rho_path.last().expect("trajectory is never empty"),
            self.s_path.last().expect("trajectory is never empty"),
        )
    }

    /// Largest deviation of the total mass from one along the path.
    pub fn max_mass_defect(&self) -> f64 {
        self.rho_path
            .iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// CSV with header `t,rho_0..,S_0..,H0,H0V`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let n = self.rho_path[0].len();
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("rho_{i}")));
        header.extend((0..n).map(|i| format!("S_{i}")));
        header.push("H0".into());
        header.push("H0V".into());
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.times.len() {
            let mut row = vec![self.times[k]];
            row.extend(&self.rho_path[k]);
            row.extend(&self.s_path[k]);
            row.push(self.energy_path[k]);
            row.push(self.h0_path[k]);
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// `(dρ/dt, dS/dt)` without noise: `(D_x ℋ₀, −D_ρ ℋ₀ − 𝕍)`.
pub fn drift_field(energy: &EnergySpec, v: &[f64], rho: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let g = energy_gradients(energy, rho, x);
    let ds = g.d_rho.iter().zip(v).map(|(d, v)| -d - v).collect();
    (g.d_x, ds)
}

/// One midpoint step with a given Brownian increment and no admissibility
/// check. Returns `None` if the half step leaves the open simplex.
pub fn midpoint_step(
    energy: &EnergySpec,
    v: &[f64],
    rho: &[f64],
    x: &[f64],
    h: f64,
    dw: &[f64],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let (a, b) = drift_field(energy, v, rho, x);
    let rho_half: Vec<f64> = rho.iter().zip(&a).map(|(r, a)| r + 0.5 * h * a).collect();
    if rho_half.iter().any(|&r| !(r > 0.0)) {
        return None;
    }
    let x_half: Vec<f64> = x.iter().zip(&b).map(|(s, b)| s + 0.5 * h * b).collect();
    let (a2, b2) = drift_field(energy, v, &rho_half, &x_half);
    let rho_new: Vec<f64> = rho.iter().zip(&a2).map(|(r, a)| r + h * a).collect();
    let x_new: Vec<f64> = x
        .iter()
        .zip(&b2)
        .zip(energy.sigma())
        .zip(dw)
        .map(|(((s, b), sig), w)| s + h * b - sig * w)
        .collect();
    if rho_new.iter().chain(&x_new).any(|v| !v.is_finite()) {
        return None;
    }
    Some((rho_new, x_new))
}

/// Advances step `k` of the integrator grid, halving the step (with
/// Brownian-bridge refinement of the increment) when the density would drop
/// below the boundary floor.
pub fn step(
    cfg: &SdeConfig,
    rho: &[f64],
    x: &[f64],
    k: usize,
    rng: &RngStream,
) -> Result<(DensityState, MomentumState, Vec<f64>)> {
    let (r, s) = advance(cfg, rho, x, cfg.refine, k as u64, 0, rng).map_err(|time| {
        Error::BoundaryEscape {
            time,
            partial: None,
        }
    })?;
    let dw = rng.increment(cfg.noise_dt(), cfg.refine, k as u64, rho.len());
    Ok((DensityState::from_trusted(r), MomentumState::new(s)?, dw))
}

fn advance(
    cfg: &SdeConfig,
    rho: &[f64],
    x: &[f64],
    level: u32,
    index: u64,
    depth: u32,
    rng: &RngStream,
) -> std::result::Result<(Vec<f64>, Vec<f64>), f64> {
    let n = rho.len();
    let h = cfg.noise_dt() / f64::from(1u32 << level);
    let t = cfg.t0 + index as f64 * h;
    let v = cfg.control.eval(t + 0.5 * h, rho, x);
    let dw = rng.increment(cfg.noise_dt(), level, index, n);
    if let Some((r, s)) = midpoint_step(&cfg.energy, &v, rho, x, h, &dw) {
        if r.iter().all(|&ri| ri >= cfg.boundary_floor) {
            return Ok((r, s));
        }
    }
    if depth >= cfg.max_rejects || level >= MAX_LEVEL {
        return Err(t);
    }
    let (r1, s1) = advance(cfg, rho, x, level + 1, 2 * index, depth + 1, rng)?;
    advance(cfg, &r1, &s1, level + 1, 2 * index + 1, depth + 1, rng)
}

pub fn simulate(
    cfg: &SdeConfig,
    rho0: &DensityState,
    x0: &MomentumState,
    rng: &RngStream,
) -> Result<Trajectory> {
    let n = cfg.energy.n();
    check_len(rho0, n)?;
    check_len(x0, n)?;
    if n > 1 && rho0.iter().any(|&r| r < cfg.boundary_floor) {
        return Err(Error::Domain("initial density below the boundary floor".into()));
    }
    let mut traj = Trajectory::start(cfg, rho0, x0, rng);
    let mut rho = rho0.to_vec();
    let mut x = x0.to_vec();
    let h = cfg.step_size();
    for k in 0..cfg.steps() {
        let t = cfg.time(k);
        match advance(cfg, &rho, &x, cfg.refine, k as u64, 0, rng) {
            Ok((r, s)) => {
                let v = cfg.control.eval(t + 0.5 * h, &rho, &x);
                let dw = rng.increment(cfg.noise_dt(), cfg.refine, k as u64, n);
                traj.push(cfg, cfg.time(k + 1), r.clone(), s.clone(), &v, dw);
                rho = r;
                x = s;
            }
            Err(time) => {
                return Err(Error::BoundaryEscape {
                    time,
                    partial: Some(Box::new(traj)),
                })
            }
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub paths: Vec<Trajectory>,
    /// Stream ids of the paths that escaped.
    pub escaped: Vec<u64>,
    pub master_seed: u64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub master_seed: u64,
    pub n_paths: usize,
    pub escaped: Vec<u64>,
    pub mean_sup_h0: f64,
    pub max_mass_defect: f64,
}

impl Ensemble {
    pub fn summary(&self) -> EnsembleSummary {
        let sup: Vec<f64> = self
            .paths
            .iter()
            .map(|p| p.h0_path.iter().fold(f64::NEG_INFINITY, |m, &h| m.max(h.abs())))
            .collect();
        EnsembleSummary {
            master_seed: self.master_seed,
            n_paths: self.n_paths,
            escaped: self.escaped.clone(),
            mean_sup_h0: sup.iter().sum::<f64>() / sup.len().max(1) as f64,
            max_mass_defect: self
                .paths
                .iter()
                .map(Trajectory::max_mass_defect)
                .fold(0.0, f64::max),
        }
    }
}

/// Runs paths `0..n_paths` and maps each through `f`, in stream order.
/// Escaped paths are dropped; more than 1% escapes is an error.
pub fn map_paths<T: Send>(
    cfg: &SdeConfig,
    rho0: &DensityState,
    x0: &MomentumState,
    n_paths: usize,
    master_seed: u64,
    f: impl Fn(&Trajectory) -> T + Sync,
) -> Result<(Vec<T>, Vec<u64>)> {
    if n_paths == 0 {
        return Err(Error::Config("need at least one path".into()));
    }
    let results: Vec<Result<T>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|id| simulate(cfg, rho0, x0, &RngStream::new(master_seed, id)).map(|t| f(&t)))
        .collect();
    let mut values = Vec::with_capacity(n_paths);
    let mut escaped = Vec::new();
    for (id, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => values.push(v),
            Err(Error::BoundaryEscape { .. }) => escaped.push(id as u64),
            Err(e) => return Err(e),
        }
    }
    if escaped.len() * 100 > n_paths {
        return Err(Error::EscapeQuota {
            escaped: escaped.len(),
            total: n_paths,
        });
    }
    Ok((values, escaped))
}

pub fn simulate_batch(
    cfg: &SdeConfig,
    rho0: &DensityState,
    x0: &MomentumState,
    n_paths: usize,
    master_seed: u64,
) -> Result<Ensemble> {
    let (paths, escaped) = map_paths(cfg, rho0, x0, n_paths, master_seed, Clone::clone)?;
    Ok(Ensemble {
        paths,
        escaped,
        master_seed,
        n_paths,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityScan {
    pub horizons: Vec<f64>,
    /// `E[sup_{r ≤ t0+Δ} |ℋ₀^𝕍(r) − ℋ₀^𝕍(t0)|²]` per horizon.
    pub moments: Vec<f64>,
    pub moment_se: Vec<f64>,
    pub slope: f64,
    pub slope_se: f64,
    /// True when some moment vanished and no slope could be fitted.
    pub degenerate: bool,
}

/// Substeps per horizon in [`regularity_scan`].
pub const SCAN_SUBSTEPS: usize = 64;

/// Fits the log-log slope of the second moment of the energy modulus
/// against the horizon length. Horizons use independent noise streams.
pub fn regularity_scan(
    cfg: &SdeConfig,
    rho0: &DensityState,
    x0: &MomentumState,
    horizons: &[f64],
    n_paths: usize,
    master_seed: u64,
) -> Result<RegularityScan> {
    if horizons.len() < 4 {
        return Err(Error::Config("need at least four horizons".into()));
    }
    if horizons.windows(2).any(|w| !(w[1] < w[0])) || horizons.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::Config("horizons must be positive and decreasing".into()));
    }
    let mut moments = Vec::new();
    let mut moment_se = Vec::new();
    for (hi, &delta) in horizons.iter().enumerate() {
        let mut sub = cfg.clone();
        sub.t_end = cfg.t0 + delta;
        sub.dt = delta / SCAN_SUBSTEPS as f64;
        sub.refine = 0;
        sub.validate()?;
        let seed = master_seed ^ ((hi as u64 + 1) << 56);
        let (sq, _) = map_paths(&sub, rho0, x0, n_paths, seed, |t| {
            let h0 = t.h0_path[0];
            t.h0_path.iter().fold(0.0f64, |m, &h| m.max((h - h0).abs())).powi(2)
        })?;
        let (mean, se) = mean_and_se(&sq);
        moments.push(mean);
        moment_se.push(se);
    }
    let degenerate = moments.iter().any(|&m| !(m > 0.0));
    let (slope, slope_se) = if degenerate {
        (f64::NAN, f64::NAN)
    } else {
        loglog_fit(horizons, &moments, &moment_se)
    };
    Ok(RegularityScan {
        horizons: horizons.to_vec(),
        moments,
        moment_se,
        slope,
        slope_se,
        degenerate,
    })
}

pub(crate) fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Least-squares slope of `log m` on `log h` with a delta-method standard error.
fn loglog_fit(h: &[f64], m: &[f64], se: &[f64]) -> (f64, f64) {
    let xs: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = m.iter().map(|v| v.ln()).collect();
    let k = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let w: Vec<f64> = xs.iter().map(|x| (x - xbar) / sxx).collect();
    let slope = w.iter().zip(&ys).map(|(w, y)| w * y).sum();
    let var: f64 = w
        .iter()
        .zip(m.iter().zip(se))
        .map(|(w, (m, s))| w * w * (s / m).powi(2))
        .sum();
    (slope, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::EnergyVariant;
    use crate::graph::Graph;
    use crate::weight::ProbabilityWeight;

    fn spec(sigma: f64) -> EnergySpec {
        EnergySpec::new(
            Graph::two_node(1.0).unwrap(),
            ProbabilityWeight::average(),
            EnergyVariant::PolynomialInteraction,
        )
        .with_sigma(vec![sigma, sigma])
        .unwrap()
    }

    #[test]
    fn drift_examples() {
        let s = spec(0.0);
        let (a, _) = drift_field(&s, &[0.0, 0.0], &[0.5, 0.5], &[1.0, 0.0]);
        assert_eq!(a, vec![0.5, -0.5]);
        let (a0, b0) = drift_field(&s, &[0.0, 0.0], &[0.5, 0.5], &[2.0, 2.0]);
        assert_eq!(a0, vec![0.0, 0.0]);
        assert!(b0.iter().all(|v| v.abs() < 1e-15));
        let (_, b1) = drift_field(&s, &[1.0, -1.0], &[0.5, 0.5], &[2.0, 2.0]);
        assert!((b1[0] + 1.0).abs() < 1e-15 && (b1[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stationary_state_is_fixed() {
        let cfg = SdeConfig::new(spec(0.0), 0.0, 1.0, 0.1).unwrap();
        let traj = simulate(
            &cfg,
            &DensityState::uniform(2),
            &MomentumState::zeros(2),
            &RngStream::new(1, 0),
        )
        .unwrap();
        for r in &traj.rho_path {
            assert!((r[0] - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SdeConfig::new(spec(0.4), 0.0, 0.5, 0.01).unwrap();
        let rho = DensityState::new(vec![0.3, 0.7]).unwrap();
        let x = MomentumState::new(vec![0.2, -0.1]).unwrap();
        let a = simulate(&cfg, &rho, &x, &RngStream::new(5, 2)).unwrap();
        let b = simulate(&cfg, &rho, &x, &RngStream::new(5, 2)).unwrap();
        assert_eq!(a.rho_path, b.rho_path);
        assert_eq!(a.s_path, b.s_path);
    }

    #[test]
    fn rejects_misaligned_horizon() {
        assert!(SdeConfig::new(spec(0.0), 0.0, 1.0, 0.3).is_err());
        assert!(SdeConfig::new(spec(0.0), 0.5, 0.5, 0.1).is_err());
    }

    #[test]
    fn escape_reports_time_and_partial_path() {
        // a large momentum gap drives the density into the boundary
        let cfg = SdeConfig::new(spec(0.0), 0.0, 1.0, 0.25)
            .unwrap()
            .with_floor(0.2)
            .unwrap()
            .with_max_rejects(2);
        let rho = DensityState::new(vec![0.3, 0.7]).unwrap();
        let x = MomentumState::new(vec![-20.0, 0.0]).unwrap();
        match simulate(&cfg, &rho, &x, &RngStream::new(0, 0)) {
            Err(Error::BoundaryEscape { time, partial }) => {
                assert!(time < 1.0);
                assert!(partial.is_some());
            }
            other => panic!("expected escape, got {other:?}"),
        }
    }

    #[test]
    fn loglog_fit_recovers_power() {
        let h = [0.1, 0.05, 0.025, 0.0125];
        let m: Vec<f64> = h.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        let (s, _) = loglog_fit(&h, &m, &[0.0; 4]);
        assert!((s - 1.5).abs() < 1e-12);
    }
}
