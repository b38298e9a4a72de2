//! Monge–Kantorovich distance on a graph by direct minimisation of the
//! discretised Benamou–Brenier action over density paths.
//!
//! A path is a sequence `σ_0 = ρ⁰, σ_1, …, σ_K = ρ¹` on a uniform grid of
//! `[0, 1]`. On each interval the edge velocity is the minimum-action solution
//! of the continuity equation `σ̇ + div_σ(υ) = 0` for `σ̇ ≈ (σ_{k+1} − σ_k)/h`
//! with mobilities frozen at the interval midpoint. With edge fluxes
//! `m_e = √ω_e g_e υ_e` the constraint reads `σ̇ = Dᵀm` and the optimal action
//! is `σ̇ᵀ L⁺ σ̇`, `L` the Laplacian with coefficients `ω_e g_e`. The interior
//! nodes are then moved by L-BFGS.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{dot, frechet_project, Graph};
use crate::quadrature::adaptive_simpson;
use crate::weight::ProbabilityWeight;

const LBFGS_MEMORY: usize = 8;
const GRAD_TOL: f64 = 1e-10;
const MIN_DENSITY: f64 = 1e-14;

#[derive(Debug, Clone, Serialize)]
pub struct WassersteinEstimate {
    /// Square root of the minimised discrete action.
    pub distance: f64,
    pub action: f64,
    /// Action of the straight-line path the descent started from.
    pub linear_action: f64,
    pub iterations: usize,
    /// False when the gradient tolerance was not reached within the budget.
    pub converged: bool,
}

/// Upper approximation of the L²-Monge–Kantorovich distance between two
/// interior densities.
pub fn wasserstein_distance(
    graph: &Graph,
    weight: &ProbabilityWeight,
    rho0: &[f64],
    rho1: &[f64],
    steps: usize,
    iters: usize,
) -> Result<WassersteinEstimate> {
    let n = graph.n();
    for rho in [rho0, rho1] {
        if rho.len() != n {
            return Err(Error::shape(n, rho.len()));
        }
        if rho.iter().any(|&r| !(r > 0.0 && r < 1.0)) && n > 1 {
            return Err(Error::Domain("endpoints must be interior densities".into()));
        }
    }
    if steps < 8 {
        return Err(Error::Domain(format!("need at least 8 time steps, got {steps}")));
    }
    if rho0 == rho1 {
        return Ok(WassersteinEstimate {
            distance: 0.0,
            action: 0.0,
            linear_action: 0.0,
            iterations: 0,
            converged: true,
        });
    }

    let problem = PathProblem {
        graph,
        weight,
        rho0,
        rho1,
        steps,
    };
    let mut z = problem.linear_path();
    let (linear_action, mut grad) = problem.evaluate(&z)?;
    let mut action = linear_action;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = max_abs(&grad) <= GRAD_TOL;

    while !converged && iterations < iters {
        iterations += 1;
        let mut dir = two_loop(&grad, &history);
        let mut slope = dot(&dir, &grad);
        if slope >= 0.0 {
            history.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
        }
        // the first step of a fresh history is scaled to a small displacement
        let mut step = if history.is_empty() {
            (0.01 / max_abs(&dir)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = z.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            if trial.iter().all(|&v| v > MIN_DENSITY) {
                if let Ok((a, g)) = problem.evaluate(&trial) {
                    if a <= action + 1e-4 * step * slope {
                        accepted = Some((trial, a, g));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((trial, a, g)) = accepted else {
            // no descent possible along the search direction
            break;
        };
        let s: Vec<f64> = trial.iter().zip(&z).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&grad).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-16 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            history.push_back((s, y));
            if history.len() > LBFGS_MEMORY {
                history.pop_front();
            }
        }
        let improvement = action - a;
        z = trial;
        action = a;
        grad = g;
        converged = max_abs(&grad) <= GRAD_TOL || improvement <= 1e-15 * action.max(1e-300);
    }

    Ok(WassersteinEstimate {
        distance: action.max(0.0).sqrt(),
        action,
        linear_action,
        iterations,
        converged,
    })
}

/// `|∫_a^b dr / √(ω g(r, 1−r))|`, the exact distance on a single edge.
pub fn two_node_distance_oracle(
    weight: &ProbabilityWeight,
    omega: f64,
    a: f64,
    b: f64,
) -> Result<f64> {
    if !(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0) {
        return Err(Error::Domain("endpoints must lie in (0, 1)".into()));
    }
    if !(omega > 0.0) {
        return Err(Error::Domain("edge weight must be positive".into()));
    }
    let f = |r: f64| 1.0 / (omega * weight.value(r, 1.0 - r)).sqrt();
    adaptive_simpson(f, a.min(b), a.max(b), 1e-13)
}

struct PathProblem<'a> {
    graph: &'a Graph,
    weight: &'a ProbabilityWeight,
    rho0: &'a [f64],
    rho1: &'a [f64],
    steps: usize,
}

impl PathProblem<'_> {
    fn linear_path(&self) -> Vec<f64> {
        let k = self.steps;
        let mut z = Vec::with_capacity((k - 1) * self.rho0.len());
        for s in 1..k {
            let t = s as f64 / k as f64;
            z.extend(
                self.rho0
                    .iter()
                    .zip(self.rho1)
                    .map(|(a, b)| (1.0 - t) * a + t * b),
            );
        }
        z
    }

    fn node<'b>(&'b self, z: &'b [f64], k: usize) -> &'b [f64] {
        let n = self.rho0.len();
        if k == 0 {
            self.rho0
        } else if k == self.steps {
            self.rho1
        } else {
            &z[(k - 1) * n..k * n]
        }
    }

    /// Discrete action and its gradient with respect to the interior nodes,
    /// projected onto mass-preserving directions.
    fn evaluate(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = self.rho0.len();
        let k_steps = self.steps;
        let h = 1.0 / k_steps as f64;
        let mut action = 0.0;
        let mut grad = vec![0.0; z.len()];
        for k in 0..k_steps {
            let a = self.node(z, k);
            let b = self.node(z, k + 1);
            let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
            let y: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
            let phi = self.solve_potential(&mid, &y)?;
            action += dot(&y, &phi) / h;

            // ∂/∂mid of yᵀL⁺y is −Σ_e ω_e (φ_i − φ_j)² ∂g_e
            let mut dmid = vec![0.0; n];
            for e in self.graph.edges() {
                let (gi, gj) = self.weight.grad(mid[e.i], mid[e.j]);
                let d = phi[e.i] - phi[e.j];
                let c = e.weight * d * d;
                dmid[e.i] -= c * gi;
                dmid[e.j] -= c * gj;
            }
            for i in 0..n {
                let dy = 2.0 * phi[i] / h;
                let dm = 0.5 * dmid[i] / h;
                if k >= 1 {
                    grad[(k - 1) * n + i] += -dy + dm;
                }
                if k + 1 < k_steps {
                    grad[k * n + i] += dy + dm;
                }
            }
        }
        for node in grad.chunks_mut(n) {
            let p = frechet_project(node);
            node.copy_from_slice(&p);
        }
        if !action.is_finite() {
            return Err(Error::Numeric("non-finite path action".into()));
        }
        Ok((action, grad))
    }

    /// Solves `L(σ) φ = y` on mean-zero vectors via `(L + 𝟙𝟙ᵀ) φ = y`.
    fn solve_potential(&self, sigma: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let n = sigma.len();
        let lap = self
            .graph
            .laplacian_with(|e| e.weight * self.weight.value(sigma[e.i], sigma[e.j]));
        let m = DMatrix::from_fn(n, n, |i, j| lap[i * n + j] + 1.0);
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::Numeric("mobility Laplacian is singular".into()))?;
        let phi = chol.solve(&DVector::from_column_slice(y));
        Ok(phi.iter().copied().collect())
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn two_loop(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y) in history.iter().rev() {
        let rho = 1.0 / dot(y, s);
        let alpha = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= alpha * yi;
        }
        alphas.push((rho, alpha));
    }
    if let Some((s, y)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y), (rho, alpha)) in history.iter().zip(alphas.into_iter().rev()) {
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alpha - beta) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_endpoints_give_zero() {
        let g = Graph::path(3).unwrap();
        let rho = [0.2, 0.3, 0.5];
        let est = wasserstein_distance(&g, &ProbabilityWeight::average(), &rho, &rho, 16, 100)
            .unwrap();
        assert!(est.distance < 1e-9);
    }

    #[test]
    fn oracle_average_weight() {
        let d = two_node_distance_oracle(&ProbabilityWeight::average(), 1.0, 0.3, 0.6).unwrap();
        assert!((d - 2f64.sqrt() * 0.3).abs() < 1e-12);
        let zero = two_node_distance_oracle(&ProbabilityWeight::average(), 1.0, 0.4, 0.4).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn oracle_harmonic_exceeds_average() {
        let h = two_node_distance_oracle(&ProbabilityWeight::harmonic(), 1.0, 0.4, 0.6).unwrap();
        let a = two_node_distance_oracle(&ProbabilityWeight::average(), 1.0, 0.4, 0.6).unwrap();
        assert!(h.is_finite() && h >= a);
    }

    #[test]
    fn two_node_average_matches_closed_form() {
        let g = Graph::two_node(1.0).unwrap();
        let est = wasserstein_distance(
            &g,
            &ProbabilityWeight::average(),
            &[0.3, 0.7],
            &[0.6, 0.4],
            16,
            200,
        )
        .unwrap();
        assert!((est.distance - 0.424_264_068_711_928_5).abs() < 1e-3, "{est:?}");
    }

    #[test]
    fn rejects_short_grids_and_boundary_endpoints() {
        let g = Graph::two_node(1.0).unwrap();
        let w = ProbabilityWeight::average();
        assert!(wasserstein_distance(&g, &w, &[0.3, 0.7], &[0.6, 0.4], 4, 10).is_err());
        assert!(wasserstein_distance(&g, &w, &[1.0, 0.0], &[0.6, 0.4], 16, 10).is_err());
    }
}
