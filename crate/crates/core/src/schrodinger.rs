//! Madelung transform `u_j = √ρ_j e^{iS_j}` and the stochastic Schrödinger
//! form of the dynamics.
//!
//! Wave states carry the unwrapped phase alongside `u`, because the momentum
//! lives on `ℝⁿ` rather than the torus; `log u_j` is always `½ log ρ_j + iS_j`
//! with that phase.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use num_complex::Complex64;
use serde::Serialize;

use crate::dynamics::{midpoint_step, Trajectory};
use crate::energy::{EnergySpec, EnergyVariant};
use crate::error::{check_len, Error, Result};
use crate::graph::{DensityState, MomentumState};

/// Allowed deviation of `Σ|u_j|²` from one.
pub const WAVE_MASS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct WaveState {
    pub u: Vec<Complex64>,
    /// Unwrapped phase, `arg u_j ≡ lift_j (mod 2π)`.
    pub lift: Vec<f64>,
}

impl WaveState {
    /// Wave state with the principal-branch phase.
    pub fn new(u: Vec<Complex64>) -> Result<Self> {
        let lift = u.iter().map(|z| z.arg()).collect();
        Self::with_lift(u, lift)
    }

    pub fn with_lift(u: Vec<Complex64>, lift: Vec<f64>) -> Result<Self> {
        if lift.len() != u.len() {
            return Err(Error::shape(u.len(), lift.len()));
        }
        if let Some(index) = u.iter().position(|z| !(z.norm_sqr() > 0.0)) {
            return Err(Error::Vacuum { index });
        }
        let mass = mass(&u);
        if (mass - 1.0).abs() > WAVE_MASS_TOL {
            return Err(Error::Domain(format!("wave mass {mass} differs from 1")));
        }
        for (z, s) in u.iter().zip(&lift) {
            let d = wrap(z.arg() - s);
            if d.abs() > 1e-6 {
                return Err(Error::Domain("phase lift inconsistent with wave".into()));
            }
        }
        Ok(Self { u, lift })
    }

    pub fn mass(&self) -> f64 {
        mass(&self.u)
    }
}

fn mass(u: &[Complex64]) -> f64 {
    u.iter().map(|z| z.norm_sqr()).sum()
}

/// Reduces an angle to `(−π, π]`.
fn wrap(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

pub fn madelung_forward(rho: &DensityState, s: &MomentumState) -> Result<WaveState> {
    check_len(s, rho.len())?;
    let u = rho
        .iter()
        .zip(s.iter())
        .map(|(&r, &p)| Complex64::from_polar(r.sqrt(), p))
        .collect();
    Ok(WaveState {
        u,
        lift: s.to_vec(),
    })
}

/// `ρ_j = |u_j|²` and the phase on the branch nearest `s_prev` (principal
/// branch without one).
pub fn madelung_inverse(
    u: &[Complex64],
    s_prev: Option<&[f64]>,
) -> Result<(DensityState, MomentumState)> {
    if let Some(index) = u.iter().position(|z| !(z.norm_sqr() > 0.0)) {
        return Err(Error::Vacuum { index });
    }
    let rho: Vec<f64> = u.iter().map(|z| z.norm_sqr()).collect();
    let s: Vec<f64> = match s_prev {
        Some(prev) => {
            check_len(prev, u.len())?;
            u.iter()
                .zip(prev)
                .map(|(z, p)| p + wrap(z.arg() - p))
                .collect()
        }
        None => u.iter().map(|z| z.arg()).collect(),
    };
    let total: f64 = rho.iter().sum();
    if (total - 1.0).abs() > WAVE_MASS_TOL {
        return Err(Error::Domain(format!("wave mass {total} differs from 1")));
    }
    Ok((DensityState::from_trusted(rho), MomentumState::new(s)?))
}

/// Nonlinear graph Laplacian evaluated term by term:
///
/// ```text
/// (Δu)_j = −(u_j/|u_j|²)(Σ_l ω (ℓ_j − ℓ_l) g + Σ_l ω g̃ Re(ℓ_j − ℓ_l))
///          − u_j (Σ_l ω ∂_j g |ℓ_j − ℓ_l|² + Σ_l ω ∂_j g̃ |Re(ℓ_j − ℓ_l)|²)
/// ```
///
/// with `ℓ = log u`, `g` the energy's weight and `g̃` the logarithmic mean.
pub fn nonlinear_laplacian(spec: &EnergySpec, wave: &WaveState) -> Result<Vec<Complex64>> {
    let n = spec.n();
    if wave.u.len() != n {
        return Err(Error::shape(n, wave.u.len()));
    }
    if let Some(index) = wave.u.iter().position(|z| !(z.norm_sqr() > 0.0)) {
        return Err(Error::Vacuum { index });
    }
    let rho: Vec<f64> = wave.u.iter().map(|z| z.norm_sqr()).collect();
    let logs: Vec<Complex64> = rho
        .iter()
        .zip(&wave.lift)
        .map(|(r, s)| Complex64::new(0.5 * r.ln(), *s))
        .collect();
    let tilde = crate::weight::ProbabilityWeight::logarithmic();
    let mut first = vec![Complex64::new(0.0, 0.0); n];
    let mut second = vec![0.0; n];
    for e in spec.graph.edges() {
        let (i, j, w) = (e.i, e.j, e.weight);
        let g = spec.weight.value(rho[i], rho[j]);
        let (gi, gj) = spec.weight.grad(rho[i], rho[j]);
        let gt = tilde.value(rho[i], rho[j]);
        let (gti, gtj) = tilde.grad(rho[i], rho[j]);
        let d = logs[i] - logs[j];
        let dr = d.re;
        let contrib = w * (d * g + Complex64::new(gt * dr, 0.0));
        first[i] += contrib;
        first[j] -= contrib;
        second[i] += w * (gi * d.norm_sqr() + gti * dr * dr);
        second[j] += w * (gj * d.norm_sqr() + gtj * dr * dr);
    }
    Ok((0..n)
        .map(|k| {
            let u = wave.u[k];
            -(u / rho[k]) * first[k] - u * second[k]
        })
        .collect())
}

/// Deterministic right-hand side `−½Δu + u𝕍 + nonlinearity` of `i du`.
pub fn sse_rhs(spec: &EnergySpec, v: &[f64], wave: &WaveState) -> Result<Vec<Complex64>> {
    let lap = nonlinear_laplacian(spec, wave)?;
    let n = spec.n();
    check_len(v, n)?;
    let rho: Vec<f64> = wave.u.iter().map(|z| z.norm_sqr()).collect();
    Ok((0..n)
        .map(|j| {
            let u = wave.u[j];
            let nl = match spec.variant {
                EnergyVariant::PolynomialInteraction => (0..n)
                    .map(|l| spec.interaction()[j * n + l] * rho[l])
                    .sum::<f64>(),
                EnergyVariant::LogarithmicEntropy => -rho[j].ln(),
            };
            -0.5 * lap[j] + u * (v[j] + nl)
        })
        .collect())
}

/// One step of `i du = RHS dt + σ u ∘ dW`, carried out on `(ρ, S)` with the
/// same midpoint scheme as the density dynamics and mapped back.
pub fn sse_step(
    spec: &EnergySpec,
    v: &[f64],
    wave: &WaveState,
    dt: f64,
    dw: &[f64],
) -> Result<WaveState> {
    let n = spec.n();
    check_len(v, n)?;
    check_len(dw, n)?;
    if wave.u.len() != n {
        return Err(Error::shape(n, wave.u.len()));
    }
    let (rho, s) = madelung_inverse(&wave.u, Some(&wave.lift))?;
    let (r, x) = midpoint_step(spec, v, &rho, &s, dt, dw).ok_or(Error::BoundaryEscape {
        time: f64::NAN,
        partial: None,
    })?;
    if r.iter().any(|&ri| !(ri > 0.0)) {
        return Err(Error::BoundaryEscape {
            time: f64::NAN,
            partial: None,
        });
    }
    madelung_forward(&DensityState::from_trusted(r), &MomentumState::new(x)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualStats {
    pub max: f64,
    pub rms: f64,
    pub steps: usize,
}

/// Finite-difference residual of the Schrödinger form along a trajectory,
/// using the recorded controls and Brownian increments:
/// `[i(u_{k+1} − u_k) − RHS(u_k) h − σ ū ΔW] / h` with `ū` the midpoint.
pub fn sse_residual(spec: &EnergySpec, traj: &Trajectory) -> Result<ResidualStats> {
    let mut max: f64 = 0.0;
    let mut sq = 0.0;
    let mut count = 0usize;
    let waves: Vec<WaveState> = traj
        .rho_path
        .iter()
        .zip(&traj.s_path)
        .map(|(r, s)| {
            madelung_forward(
                &DensityState::from_trusted(r.clone()),
                &MomentumState::new(s.clone())?,
            )
        })
        .collect::<Result<_>>()?;
    let sigma = spec.sigma();
    let i = Complex64::i();
    for k in 0..traj.controls.len() {
        let h = traj.times[k + 1] - traj.times[k];
        let rhs = sse_rhs(spec, &traj.controls[k], &waves[k])?;
        for j in 0..spec.n() {
            let u0 = waves[k].u[j];
            let u1 = waves[k + 1].u[j];
            let mid = 0.5 * (u0 + u1);
            let r = (i * (u1 - u0) - rhs[j] * h - mid * (sigma[j] * traj.increments[k][j])) / h;
            let a = r.norm();
            max = max.max(a);
            sq += a * a;
            count += 1;
        }
    }
    Ok(ResidualStats {
        max,
        rms: if count == 0 { 0.0 } else { (sq / count as f64).sqrt() },
        steps: traj.controls.len(),
    })
}

/// CSV with header `t,re_0,im_0,…,mass`.
pub fn write_wave_csv(traj: &Trajectory, mut w: impl Write) -> std::io::Result<()> {
    let n = traj.rho_path[0].len();
    let mut header = vec!["t".to_string()];
    for j in 0..n {
        header.push(format!("re_{j}"));
        header.push(format!("im_{j}"));
    }
    header.push("mass".into());
    writeln!(w, "{}", header.join(","))?;
    for k in 0..traj.times.len() {
        let mut cells = vec![format!("{:.17e}", traj.times[k])];
        let mut m = 0.0;
        for j in 0..n {
            let z = Complex64::from_polar(traj.rho_path[k][j].sqrt(), traj.s_path[k][j]);
            m += z.norm_sqr();
            cells.push(format!("{:.17e}", z.re));
            cells.push(format!("{:.17e}", z.im));
        }
        cells.push(format!("{m:.17e}"));
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::weight::ProbabilityWeight;

    fn state(r: &[f64], s: &[f64]) -> (DensityState, MomentumState) {
        (
            DensityState::new(r.to_vec()).unwrap(),
            MomentumState::new(s.to_vec()).unwrap(),
        )
    }

    #[test]
    fn forward_example() {
        let (r, s) = state(&[0.5, 0.5], &[0.0, PI / 2.0]);
        let w = madelung_forward(&r, &s).unwrap();
        let h = 0.5f64.sqrt();
        assert!((w.u[0] - Complex64::new(h, 0.0)).norm() < 1e-15);
        assert!((w.u[1] - Complex64::new(0.0, h)).norm() < 1e-15);
    }

    #[test]
    fn inverse_unwraps_to_nearest_branch() {
        let h = 0.5f64.sqrt();
        let u = [Complex64::new(h, 0.0), Complex64::new(0.0, h)];
        let (_, s) = madelung_inverse(&u, Some(&[0.0, 1.5 * PI + 0.1])).unwrap();
        assert!((s[1] - 2.5 * PI).abs() < 1e-12);
        let (r, s0) = madelung_inverse(&u, None).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-15 && (s0[1] - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn vacuum_is_rejected() {
        let u = [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)];
        assert!(matches!(madelung_inverse(&u, None), Err(Error::Vacuum { index: 1 })));
    }

    #[test]
    fn laplacian_vanishes_on_constant_state() {
        let spec = EnergySpec::new(
            Graph::path(3).unwrap(),
            ProbabilityWeight::harmonic(),
            EnergyVariant::PolynomialInteraction,
        );
        let (r, s) = state(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], &[0.7, 0.7, 0.7]);
        let lap = nonlinear_laplacian(&spec, &madelung_forward(&r, &s).unwrap()).unwrap();
        assert!(lap.iter().all(|z| z.norm() < 1e-15));
    }

    #[test]
    fn laplacian_is_gauge_covariant() {
        let spec = EnergySpec::new(
            Graph::path(3).unwrap(),
            ProbabilityWeight::logarithmic(),
            EnergyVariant::PolynomialInteraction,
        );
        let (r, s) = state(&[0.2, 0.3, 0.5], &[0.1, -0.4, 0.9]);
        let a = nonlinear_laplacian(&spec, &madelung_forward(&r, &s).unwrap()).unwrap();
        let theta = 0.83;
        let shifted = MomentumState::new(s.iter().map(|v| v + theta).collect()).unwrap();
        let b = nonlinear_laplacian(&spec, &madelung_forward(&r, &shifted).unwrap()).unwrap();
        let phase = Complex64::from_polar(1.0, theta);
        for (x, y) in a.iter().zip(&b) {
            assert!((x * phase - y).norm() < 1e-13);
        }
    }
}
