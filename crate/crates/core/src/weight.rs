//! Probability weights `g(t, r)`: symmetric means that assign an edge mobility
//! from the densities at its two endpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative gap below which the logarithmic mean switches to its series branch.
pub const LOG_MEAN_BRANCH_TOL: f64 = 1e-8;

// Below this value of s = (t - r)/(t + r) the derivative of s/atanh(s) is
// evaluated from its Taylor series; the closed form cancels badly there.
const SERIES_S: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// `(t + r) / 2`
    Average,
    /// `(t - r) / (log t - log r)`
    Logarithmic,
    /// `2 / (1/t + 1/r)`
    Harmonic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityWeight {
    pub kind: WeightKind,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    LOG_MEAN_BRANCH_TOL
}

impl ProbabilityWeight {
    pub fn new(kind: WeightKind) -> Self {
        Self {
            kind,
            tolerance: LOG_MEAN_BRANCH_TOL,
        }
    }

    pub fn average() -> Self {
        Self::new(WeightKind::Average)
    }

    pub fn logarithmic() -> Self {
        Self::new(WeightKind::Logarithmic)
    }

    pub fn harmonic() -> Self {
        Self::new(WeightKind::Harmonic)
    }

    /// Checked evaluation of `g(t, r)`.
    pub fn eval(&self, t: f64, r: f64) -> Result<f64> {
        if !(t >= 0.0 && r >= 0.0) {
            return Err(Error::Domain(format!(
                "probability weight needs nonnegative arguments, got ({t}, {r})"
            )));
        }
        Ok(self.value(t, r))
    }

    /// Checked evaluation of `(dg/dt, dg/dr)` on the open quadrant.
    pub fn partial(&self, t: f64, r: f64) -> Result<(f64, f64)> {
        if !(t > 0.0 && r > 0.0) {
            return Err(Error::Domain(format!(
                "weight derivative needs positive arguments, got ({t}, {r})"
            )));
        }
        Ok(self.grad(t, r))
    }

    /// Unchecked `g(t, r)` for `t, r >= 0`.
    #[inline]
    pub fn value(&self, t: f64, r: f64) -> f64 {
        match self.kind {
            WeightKind::Average => 0.5 * (t + r),
            WeightKind::Harmonic => {
                if t == 0.0 || r == 0.0 {
                    0.0
                } else {
                    2.0 * t * r / (t + r)
                }
            }
            WeightKind::Logarithmic => log_mean(t, r, self.tolerance),
        }
    }

    /// Unchecked `(dg/dt, dg/dr)` for `t, r > 0`.
    #[inline]
    pub fn grad(&self, t: f64, r: f64) -> (f64, f64) {
        match self.kind {
            WeightKind::Average => (0.5, 0.5),
            WeightKind::Harmonic => {
                let s = t + r;
                let s2 = s * s;
                (2.0 * r * r / s2, 2.0 * t * t / s2)
            }
            WeightKind::Logarithmic => log_mean_grad(t, r),
        }
    }

    /// `dg/dt` only, i.e. the derivative in the first slot.
    #[inline]
    pub fn d_first(&self, t: f64, r: f64) -> f64 {
        self.grad(t, r).0
    }
}

/// Logarithmic mean written as `m * s / atanh(s)` with `m` the arithmetic mean
/// and `s = (t - r)/(t + r)`, which avoids the `log t - log r` cancellation.
fn log_mean(t: f64, r: f64, tol: f64) -> f64 {
    if t == 0.0 || r == 0.0 {
        return 0.0;
    }
    let m = 0.5 * (t + r);
    let s = (t - r) / (t + r);
    if (t - r).abs() <= tol * t.max(r) {
        // series branch: s/atanh(s) = 1 - s^2/3 - 4 s^4/45 - ...
        return m * (1.0 - s * s / 3.0);
    }
    if s.abs() > 0.5 {
        // far from the diagonal the direct form is accurate, and atanh(s)
        // overflows once s rounds to ±1
        return (t - r) / (t.ln() - r.ln());
    }
    m * s / s.atanh()
}

/// phi(s) = s/atanh(s) and phi'(s).
fn phi_and_derivative(s: f64) -> (f64, f64) {
    if s.abs() < SERIES_S {
        let x = s * s;
        let phi = 1.0 - x / 3.0 - 4.0 * x * x / 45.0 - 44.0 * x * x * x / 945.0;
        let dphi = s * (-2.0 / 3.0 - 16.0 * x / 45.0 - 264.0 * x * x / 945.0);
        (phi, dphi)
    } else {
        let a = s.atanh();
        let phi = s / a;
        let dphi = (a - s / (1.0 - s * s)) / (a * a);
        (phi, dphi)
    }
}

fn log_mean_grad(t: f64, r: f64) -> (f64, f64) {
    let s = (t - r) / (t + r);
    if s.abs() > 0.5 {
        let d = t.ln() - r.ln();
        let l = (t - r) / d;
        return ((1.0 - l / t) / d, (l / r - 1.0) / d);
    }
    let (phi, dphi) = phi_and_derivative(s);
    (
        0.5 * (phi + (1.0 - s) * dphi),
        0.5 * (phi - (1.0 + s) * dphi),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_is_midpoint() {
        let w = ProbabilityWeight::average();
        assert_eq!(w.eval(0.2, 0.8).unwrap(), 0.5);
        assert_eq!(w.partial(0.1, 0.7).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn log_mean_extreme_ratio() {
        let w = ProbabilityWeight::logarithmic();
        let g = w.eval(1e-20, 1.0).unwrap();
        assert!((g - 1.0 / (20.0 * 10f64.ln())).abs() < 1e-15);
        let (a, b) = w.partial(0.1, 0.9).unwrap();
        let h = 1e-7;
        assert!((a - (w.value(0.1 + h, 0.9) - w.value(0.1 - h, 0.9)) / (2.0 * h)).abs() < 1e-7);
        assert!((b - (w.value(0.1, 0.9 + h) - w.value(0.1, 0.9 - h)) / (2.0 * h)).abs() < 1e-7);
    }

    #[test]
    fn log_mean_equal_arguments() {
        let w = ProbabilityWeight::logarithmic();
        assert!((w.eval(0.3, 0.3).unwrap() - 0.3).abs() < 1e-15);
        let (a, b) = w.partial(0.3, 0.3).unwrap();
        assert!((a - 0.5).abs() < 1e-15 && (b - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_mean_closed_form() {
        // 0.5 / ln 3
        let expected = 0.455_119_613_313_418_7;
        let got = ProbabilityWeight::logarithmic().eval(0.25, 0.75).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got}");
    }

    #[test]
    fn harmonic_symmetric_point() {
        let w = ProbabilityWeight::harmonic();
        let (a, b) = w.partial(0.5, 0.5).unwrap();
        assert!((a - 0.5).abs() < 1e-15 && (b - 0.5).abs() < 1e-15);
        assert_eq!(w.eval(0.0, 0.4).unwrap(), 0.0);
    }

    #[test]
    fn log_mean_vanishes_on_boundary() {
        let w = ProbabilityWeight::logarithmic();
        assert_eq!(w.eval(0.0, 0.4).unwrap(), 0.0);
        assert_eq!(w.eval(0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn negative_arguments_rejected() {
        let w = ProbabilityWeight::average();
        assert!(matches!(w.eval(-0.1, 0.2), Err(Error::Domain(_))));
        assert!(matches!(w.partial(0.0, 0.2), Err(Error::Domain(_))));
    }

    #[test]
    fn log_mean_partials_match_central_differences() {
        let w = ProbabilityWeight::logarithmic();
        let (t, r) = (0.25, 0.75);
        let h = 1e-6;
        let fd_t = (w.value(t + h, r) - w.value(t - h, r)) / (2.0 * h);
        let fd_r = (w.value(t, r + h) - w.value(t, r - h)) / (2.0 * h);
        let (a, b) = w.partial(t, r).unwrap();
        assert!(((a - fd_t) / fd_t).abs() < 1e-8, "{a} vs {fd_t}");
        assert!(((b - fd_r) / fd_r).abs() < 1e-8, "{b} vs {fd_r}");
    }

    #[test]
    fn series_and_closed_form_agree_at_switch() {
        // both sides of |s| = SERIES_S
        let r = 1.0;
        for t in [1.0 + 2.0 * 0.0099 / (1.0 - 0.0099), 1.0 + 2.0 * 0.0101 / (1.0 - 0.0101)] {
            let (a, b) = log_mean_grad(t, r);
            let h = 1e-7;
            let fd_t = (log_mean(t + h, r, 0.0) - log_mean(t - h, r, 0.0)) / (2.0 * h);
            let fd_r = (log_mean(t, r + h, 0.0) - log_mean(t, r - h, 0.0)) / (2.0 * h);
            assert!((a - fd_t).abs() < 1e-7 && (b - fd_r).abs() < 1e-7);
        }
    }
}
