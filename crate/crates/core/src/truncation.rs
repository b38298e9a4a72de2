//! Energy truncation `φ_R(ℋ₀)` and the truncated Hamiltonian built on it.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::control::{half_trace, quadratic_sup, CostSpec};
use crate::energy::{dominant_energy, energy_gradients, EnergyGradients, EnergySpec};
use crate::error::{check_len, Error, Result};
use crate::graph::{dot, frechet_project};

/// `φ_R(r) = 1` on `[0, R]`, `R^{−β}` on `[2R, ∞)` and a smooth monotone
/// blend in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationFn {
    pub r: f64,
    pub beta: f64,
}

impl TruncationFn {
    pub fn new(r: f64, beta: f64) -> Result<Self> {
        if !(r >= 1.0 && r.is_finite()) {
            // below R = 1 the plateau R^{−β} would exceed one
            return Err(Error::Config(format!("truncation level must be >= 1, got {r}")));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1), got {beta}")));
        }
        Ok(Self { r, beta })
    }

    pub fn floor(&self) -> f64 {
        self.r.powf(-self.beta)
    }

    /// `(φ_R(r), φ_R'(r), φ_R''(r))`.
    pub fn eval(&self, r: f64) -> (f64, f64, f64) {
        let lo = self.floor();
        if r <= self.r {
            return (1.0, 0.0, 0.0);
        }
        if r >= 2.0 * self.r {
            return (lo, 0.0, 0.0);
        }
        let (p, dp, ddp) = profile((r - self.r) / self.r);
        let a = 1.0 - lo;
        (lo + a * p, a * dp / self.r, a * ddp / (self.r * self.r))
    }
}

/// Cut-off `φ(s) = e^{−1/(1−s)} / (e^{−1/(1−s)} + e^{−1/s})` on `(0, 1)` with
/// its first two derivatives.
pub fn profile(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (1.0, 0.0, 0.0);
    }
    if s >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    // φ = 1/(1 + e^E) with E = 1/(1−s) − 1/s
    let e = 1.0 / (1.0 - s) - 1.0 / s;
    let (phi, w) = if e > 0.0 {
        let q = (-e).exp();
        (q / (1.0 + q), q / ((1.0 + q) * (1.0 + q)))
    } else {
        let q = e.exp();
        (1.0 / (1.0 + q), q / ((1.0 + q) * (1.0 + q)))
    };
    // w = φ(1 − φ)
    let de = 1.0 / (1.0 - s).powi(2) + 1.0 / (s * s);
    let dde = 2.0 / (1.0 - s).powi(3) - 2.0 / s.powi(3);
    let dphi = -w * de;
    let ddphi = -dphi * (1.0 - 2.0 * phi) * de - w * dde;
    (phi, dphi, ddphi)
}

/// `max(sup|φ'|, sup|φ''|)` of the cut-off, sampled densely once.
pub fn profile_constant() -> f64 {
    static C: OnceLock<f64> = OnceLock::new();
    *C.get_or_init(|| {
        let m = 200_000;
        (1..m)
            .map(|k| {
                let (_, d1, d2) = profile(k as f64 / m as f64);
                d1.abs().max(d2.abs())
            })
            .fold(0.0, f64::max)
    })
}

/// `|⟨∂_ρφ, D_x ℋ₀⟩ − ⟨D_xφ, D_ρ ℋ₀⟩|` for `φ = φ_R(ℋ₀)` given the gradients
/// and `φ_R'(ℋ₀)`. `∂_ρ` is the projected (Fréchet) derivative.
pub fn identity_residual(g: &EnergyGradients, phi_prime: f64) -> f64 {
    let p = frechet_project(&g.d_rho);
    let lhs = phi_prime * dot(&p, &g.d_x);
    let rhs = phi_prime * dot(&g.d_x, &g.d_rho);
    (lhs - rhs).abs()
}

pub fn truncation_identity_check(
    energy: &EnergySpec,
    tr: &TruncationFn,
    rho: &[f64],
    x: &[f64],
) -> Result<f64> {
    check_len(rho, energy.n())?;
    check_len(x, energy.n())?;
    let h = dominant_energy(energy, rho, x);
    let (_, d1, _) = tr.eval(h);
    Ok(identity_residual(&energy_gradients(energy, rho, x), d1))
}

/// `𝔽^R(t, ρ, x, q − U D_xφ) = sup_{𝕍∈B_ℓ} ⟨q − U D_xφ, 𝕍⟩ − φ F(t, ρ, x, 𝕍)`.
#[allow(clippy::too_many_arguments)]
pub fn fhat_r(
    spec: &CostSpec,
    energy: &EnergySpec,
    tr: &TruncationFn,
    _t: f64,
    rho: &[f64],
    x: &[f64],
    q: &[f64],
    u_value: f64,
    ell: f64,
) -> Result<f64> {
    check_len(q, energy.n())?;
    let h = dominant_energy(energy, rho, x);
    let (phi, d1, _) = tr.eval(h);
    let g = energy_gradients(energy, rho, x);
    let shifted: Vec<f64> = q
        .iter()
        .zip(&g.d_x)
        .map(|(q, d)| q - u_value * d1 * d)
        .collect();
    Ok(quadratic_sup(phi * spec.control_coeff, &shifted, ell) - phi * spec.running_tracking(rho, x))
}

/// Truncated Hamiltonian `H^R_U(t, ρ, x, p, q, Q)` on `𝒜_R = {ℋ₀ < 2R}`.
#[allow(clippy::too_many_arguments)]
pub fn truncated_hamiltonian(
    spec: &CostSpec,
    energy: &EnergySpec,
    tr: &TruncationFn,
    t: f64,
    rho: &[f64],
    x: &[f64],
    u_value: f64,
    p: &[f64],
    q: &[f64],
    qq: &[f64],
    ell: f64,
) -> Result<f64> {
    let n = energy.n();
    for v in [rho, x, p, q] {
        check_len(v, n)?;
    }
    crate::control::check_symmetric(qq, n)?;
    let h = dominant_energy(energy, rho, x);
    if !(h < 2.0 * tr.r) {
        return Err(Error::Domain(format!(
            "state with energy {h} lies outside the truncated domain (2R = {})",
            2.0 * tr.r
        )));
    }
    let (phi, d1, d2) = tr.eval(h);
    let g = energy_gradients(energy, rho, x);
    let sigma = energy.sigma();
    let s2: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    let dphi: Vec<f64> = g.d_x.iter().map(|d| d1 * d).collect();
    let transport: f64 = (0..n).map(|i| s2[i] * dphi[i] * q[i]).sum::<f64>() / phi;
    let trace_d2phi: f64 = (0..n)
        .map(|i| s2[i] * (d2 * g.d_x[i] * g.d_x[i] + d1 * g.hess_x[i * n + i]))
        .sum();
    let grad_sq: f64 = (0..n).map(|i| s2[i] * dphi[i] * dphi[i]).sum::<f64>() / phi;
    let fr = fhat_r(spec, energy, tr, t, rho, x, q, u_value, ell)?;
    Ok(dot(p, &g.d_x) - dot(q, &g.d_rho) + half_trace(sigma, qq) - transport
        - u_value * (0.5 * trace_d2phi - grad_sq)
        - fr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_values() {
        let tr = TruncationFn::new(10.0, 0.5).unwrap();
        assert_eq!(tr.eval(5.0), (1.0, 0.0, 0.0));
        assert_eq!(tr.eval(30.0), (10f64.powf(-0.5), 0.0, 0.0));
    }

    #[test]
    fn profile_derivatives_match_differences() {
        for s in [0.1, 0.37, 0.5, 0.81, 0.95] {
            let h = 1e-6;
            let (_, d1, d2) = profile(s);
            let fd1 = (profile(s + h).0 - profile(s - h).0) / (2.0 * h);
            let fd2 = (profile(s + h).1 - profile(s - h).1) / (2.0 * h);
            assert!((d1 - fd1).abs() < 1e-7, "{s}: {d1} vs {fd1}");
            assert!((d2 - fd2).abs() < 1e-6, "{s}: {d2} vs {fd2}");
        }
    }

    #[test]
    fn profile_is_monotone() {
        let mut prev = 1.0;
        for k in 1..1000 {
            let (p, d, _) = profile(k as f64 / 1000.0);
            assert!(p <= prev && d <= 0.0);
            prev = p;
        }
    }

    #[test]
    fn rejects_small_levels() {
        assert!(TruncationFn::new(0.5, 0.5).is_err());
        assert!(TruncationFn::new(2.0, 1.0).is_err());
    }
}
