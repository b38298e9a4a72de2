//! Dominant energies on a graph and their Euclidean derivatives.
//!
//! `ℋ₀ = K + c_F·𝓘 + 𝒲` (polynomial interaction) or `ℋ₀ = K + c_F·𝓘 − ℒ`
//! (logarithmic entropy), where `K` is the kinetic energy, `𝓘` the Fisher
//! information with logarithmic-mean weights, `𝒲` the interaction potential
//! and `ℒ` the discrete entropy. Sums written over "edges" below run over
//! unordered edges.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::graph::{dot, Graph};
use crate::weight::ProbabilityWeight;

pub const DEFAULT_FISHER_COEFF: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyVariant {
    PolynomialInteraction,
    LogarithmicEntropy,
}

impl EnergyVariant {
    fn name(self) -> &'static str {
        match self {
            EnergyVariant::PolynomialInteraction => "polynomial_interaction",
            EnergyVariant::LogarithmicEntropy => "logarithmic_entropy",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnergySpec {
    pub variant: EnergyVariant,
    pub graph: Graph,
    pub weight: ProbabilityWeight,
    /// Dense row-major symmetric interaction matrix, supported on edges.
    interaction: Vec<f64>,
    pub fisher_coeff: f64,
    sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGradients {
    pub d_rho: Vec<f64>,
    pub d_x: Vec<f64>,
    /// Row-major `n × n`.
    pub hess_x: Vec<f64>,
}

impl EnergySpec {
    /// Spec with zero interaction, zero noise and the default Fisher coefficient.
    pub fn new(graph: Graph, weight: ProbabilityWeight, variant: EnergyVariant) -> Self {
        let n = graph.n();
        Self {
            variant,
            graph,
            weight,
            interaction: vec![0.0; n * n],
            fisher_coeff: DEFAULT_FISHER_COEFF,
            sigma: vec![0.0; n],
        }
    }

    pub fn with_interaction(mut self, w: Vec<f64>) -> Result<Self> {
        let n = self.n();
        if w.len() != n * n {
            return Err(Error::shape(n * n, w.len()));
        }
        if self.variant != EnergyVariant::PolynomialInteraction && w.iter().any(|&v| v != 0.0) {
            return Err(Error::Variant(self.variant.name()));
        }
        for i in 0..n {
            for j in 0..n {
                let v = w[i * n + j];
                if !v.is_finite() {
                    return Err(Error::Config("interaction entries must be finite".into()));
                }
                if v != w[j * n + i] {
                    return Err(Error::Config("interaction matrix must be symmetric".into()));
                }
                if v != 0.0 && (i == j || !self.graph.has_edge(i, j)) {
                    return Err(Error::Config(format!(
                        "interaction entry ({i}, {j}) lies off the edge set"
                    )));
                }
            }
        }
        self.interaction = w;
        Ok(self)
    }

    pub fn with_fisher_coeff(mut self, c: f64) -> Result<Self> {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(Error::Config(format!("fisher coefficient must be >= 0, got {c}")));
        }
        self.fisher_coeff = c;
        Ok(self)
    }

    pub fn with_sigma(mut self, sigma: Vec<f64>) -> Result<Self> {
        check_len(&sigma, self.n())?;
        if sigma.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("noise amplitudes must be finite".into()));
        }
        self.sigma = sigma;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn interaction(&self) -> &[f64] {
        &self.interaction
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }
}

/// `K = Σ_edges ω (x_i − x_j)² g(ρ_i, ρ_j)`, halved.
pub fn kinetic_energy(spec: &EnergySpec, rho: &[f64], x: &[f64]) -> f64 {
    0.5 * spec
        .graph
        .edges()
        .iter()
        .map(|e| {
            let d = x[e.i] - x[e.j];
            e.weight * d * d * spec.weight.value(rho[e.i], rho[e.j])
        })
        .sum::<f64>()
}

/// `𝓘 = Σ_edges ω |log ρ_i − log ρ_j|² g̃(ρ_i, ρ_j)` with `g̃` the logarithmic
/// mean, which collapses to `ω (log ρ_i − log ρ_j)(ρ_i − ρ_j)`.
pub fn fisher_information(spec: &EnergySpec, rho: &[f64]) -> f64 {
    spec.graph
        .edges()
        .iter()
        .map(|e| e.weight * (rho[e.i].ln() - rho[e.j].ln()) * (rho[e.i] - rho[e.j]))
        .sum()
}

/// `ℒ = Σ (ρ_i log ρ_i − ρ_i)`.
pub fn entropy(rho: &[f64]) -> f64 {
    rho.iter().map(|&r| r * r.ln() - r).sum()
}

/// `½ Σ_{i,j} 𝕎_ij ρ_i ρ_j`.
pub fn interaction_potential(spec: &EnergySpec, rho: &[f64]) -> Result<f64> {
    if spec.variant != EnergyVariant::PolynomialInteraction {
        return Err(Error::Variant(spec.variant.name()));
    }
    check_len(rho, spec.n())?;
    Ok(0.5 * quad_form(&spec.interaction, rho))
}

/// `Σ V_i ρ_i`.
pub fn control_potential(v: &[f64], rho: &[f64]) -> Result<f64> {
    check_len(v, rho.len())?;
    Ok(dot(v, rho))
}

/// `ℋ₀(ρ, x)`.
pub fn dominant_energy(spec: &EnergySpec, rho: &[f64], x: &[f64]) -> f64 {
    let base = kinetic_energy(spec, rho, x) + spec.fisher_coeff * fisher_information(spec, rho);
    match spec.variant {
        EnergyVariant::PolynomialInteraction => base + 0.5 * quad_form(&spec.interaction, rho),
        EnergyVariant::LogarithmicEntropy => base - entropy(rho),
    }
}

/// `ℋ₀^𝕍 = ℋ₀ + Σ V_i ρ_i`.
pub fn controlled_energy(spec: &EnergySpec, v: &[f64], rho: &[f64], x: &[f64]) -> f64 {
    dominant_energy(spec, rho, x) + dot(v, rho)
}

pub fn energy_gradients(spec: &EnergySpec, rho: &[f64], x: &[f64]) -> EnergyGradients {
    let n = spec.n();
    let cf = spec.fisher_coeff;
    let mut d_rho = vec![0.0; n];
    let mut d_x = vec![0.0; n];
    for e in spec.graph.edges() {
        let (ri, rj) = (rho[e.i], rho[e.j]);
        let dx = x[e.i] - x[e.j];
        let g = spec.weight.value(ri, rj);
        let (gi, gj) = spec.weight.grad(ri, rj);
        d_x[e.i] += e.weight * dx * g;
        d_x[e.j] -= e.weight * dx * g;

        let k = 0.5 * e.weight * dx * dx;
        d_rho[e.i] += k * gi;
        d_rho[e.j] += k * gj;

        let dl = ri.ln() - rj.ln();
        let dr = ri - rj;
        d_rho[e.i] += cf * e.weight * (dl + dr / ri);
        d_rho[e.j] += cf * e.weight * (-dl - dr / rj);
    }
    match spec.variant {
        EnergyVariant::PolynomialInteraction => {
            for (d, row) in d_rho.iter_mut().zip(spec.interaction.chunks(n)) {
                *d += dot(row, rho);
            }
        }
        EnergyVariant::LogarithmicEntropy => {
            for (d, r) in d_rho.iter_mut().zip(rho) {
                *d -= r.ln();
            }
        }
    }
    let hess_x = spec
        .graph
        .laplacian_with(|e| e.weight * spec.weight.value(rho[e.i], rho[e.j]));
    EnergyGradients { d_rho, d_x, hess_x }
}

fn quad_form(m: &[f64], v: &[f64]) -> f64 {
    let n = v.len();
    (0..n).map(|i| v[i] * dot(&m[i * n..(i + 1) * n], v)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node(variant: EnergyVariant) -> EnergySpec {
        EnergySpec::new(Graph::two_node(1.0).unwrap(), ProbabilityWeight::average(), variant)
    }

    #[test]
    fn kinetic_two_node() {
        let spec = two_node(EnergyVariant::PolynomialInteraction);
        assert!((kinetic_energy(&spec, &[0.5, 0.5], &[1.0, 0.0]) - 0.25).abs() < 1e-15);
        assert_eq!(kinetic_energy(&spec, &[0.5, 0.5], &[3.0, 3.0]), 0.0);
    }

    #[test]
    fn fisher_values() {
        let spec = two_node(EnergyVariant::PolynomialInteraction);
        assert_eq!(fisher_information(&spec, &[0.5, 0.5]), 0.0);
        let v = fisher_information(&spec, &[0.25, 0.75]);
        assert!((v - 0.5 * 3f64.ln()).abs() < 1e-14);
        let mut prev = 0.0;
        for k in 1..=6 {
            let eps = 10f64.powi(-k);
            let f = fisher_information(&spec, &[eps, 1.0 - eps]);
            assert!(f > prev);
            prev = f;
        }
    }

    #[test]
    fn entropy_values() {
        assert!((entropy(&[0.5, 0.5]) - (0.5f64.ln() - 1.0)).abs() < 1e-15);
        assert_eq!(entropy(&[1.0]), -1.0);
    }

    #[test]
    fn interaction_values() {
        let spec = two_node(EnergyVariant::PolynomialInteraction)
            .with_interaction(vec![0.0, 2.0, 2.0, 0.0])
            .unwrap();
        assert!((interaction_potential(&spec, &[0.5, 0.5]).unwrap() - 0.5).abs() < 1e-15);
        let log = two_node(EnergyVariant::LogarithmicEntropy);
        assert!(matches!(
            interaction_potential(&log, &[0.5, 0.5]),
            Err(Error::Variant(_))
        ));
    }

    #[test]
    fn interaction_must_live_on_edges() {
        let spec = EnergySpec::new(
            Graph::path(3).unwrap(),
            ProbabilityWeight::average(),
            EnergyVariant::PolynomialInteraction,
        );
        let mut w = vec![0.0; 9];
        w[2] = 1.0;
        w[6] = 1.0;
        assert!(spec.clone().with_interaction(w).is_err());
        let mut asym = vec![0.0; 9];
        asym[1] = 1.0;
        assert!(spec.with_interaction(asym).is_err());
    }

    #[test]
    fn control_potential_values() {
        assert_eq!(control_potential(&[1.0, -1.0], &[0.5, 0.5]).unwrap(), 0.0);
        let v = control_potential(&[2.0, 0.0, 0.0], &[0.2, 0.3, 0.5]).unwrap();
        assert!((v - 0.4).abs() < 1e-15);
        assert!(control_potential(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn dominant_energy_examples() {
        let poly = two_node(EnergyVariant::PolynomialInteraction);
        assert_eq!(dominant_energy(&poly, &[0.5, 0.5], &[1.0, 1.0]), 0.0);
        let log = two_node(EnergyVariant::LogarithmicEntropy);
        let v = dominant_energy(&log, &[0.5, 0.5], &[1.0, 1.0]);
        assert!((v - (1.0 - 0.5f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn d_x_two_node() {
        let spec = two_node(EnergyVariant::PolynomialInteraction);
        let g = energy_gradients(&spec, &[0.5, 0.5], &[1.0, 0.0]);
        assert_eq!(g.d_x, vec![0.5, -0.5]);
        let g0 = energy_gradients(&spec, &[0.3, 0.7], &[2.0, 2.0]);
        assert_eq!(g0.d_x, vec![0.0, 0.0]);
    }

    #[test]
    fn hessian_is_laplacian() {
        let spec = EnergySpec::new(
            Graph::path(3).unwrap(),
            ProbabilityWeight::logarithmic(),
            EnergyVariant::LogarithmicEntropy,
        );
        let g = energy_gradients(&spec, &[0.2, 0.3, 0.5], &[0.1, -0.4, 0.3]);
        for i in 0..3 {
            let row: f64 = g.hess_x[i * 3..i * 3 + 3].iter().sum();
            assert!(row.abs() < 1e-15);
            for j in 0..3 {
                assert_eq!(g.hess_x[i * 3 + j], g.hess_x[j * 3 + i]);
            }
        }
    }
}
