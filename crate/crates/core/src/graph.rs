//! Weighted graphs, states on the probability simplex, and the discrete
//! Wasserstein calculus (graph gradient, ρ-divergence, ρ-inner product).

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::weight::ProbabilityWeight;

/// Graphs larger than this are rejected; all matrices are stored densely.
pub const MAX_VERTICES: usize = 64;

/// Default lower bound for density components.
pub const DEFAULT_FLOOR: f64 = 1e-9;

/// Tolerance on `Σρ = 1` at construction.
pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Undirected connected weighted graph.
///
/// Edges are kept as `i < j` pairs alongside a dense symmetric weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<Edge>,
    weights: Vec<f64>,
    neighbors: Vec<Vec<(usize, f64)>>,
}

/// Wire format: `{"n": 3, "edges": [[0, 1, 1.0], [1, 2, 0.5]]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDoc {
    pub n: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

impl Graph {
    pub fn new(n: usize, edge_list: &[(usize, usize, f64)]) -> Result<Self> {
        if n == 0 || n > MAX_VERTICES {
            return Err(Error::Graph(format!(
                "vertex count must be in 1..={MAX_VERTICES}, got {n}"
            )));
        }
        let mut weights = vec![0.0; n * n];
        let mut edges = Vec::with_capacity(edge_list.len());
        for &(a, b, w) in edge_list {
            if a >= n || b >= n {
                return Err(Error::Graph(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(Error::Graph(format!("self loop at vertex {a}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Graph(format!(
                    "edge ({a}, {b}) needs a positive weight, got {w}"
                )));
            }
            let (i, j) = if a < b { (a, b) } else { (b, a) };
            if weights[i * n + j] != 0.0 {
                return Err(Error::Graph(format!("duplicate edge ({i}, {j})")));
            }
            weights[i * n + j] = w;
            weights[j * n + i] = w;
            edges.push(Edge { i, j, weight: w });
        }
        edges.sort_by_key(|e| (e.i, e.j));
        let mut neighbors = vec![Vec::new(); n];
        for e in &edges {
            neighbors[e.i].push((e.j, e.weight));
            neighbors[e.j].push((e.i, e.weight));
        }
        for list in &mut neighbors {
            list.sort_by_key(|&(k, _)| k);
        }
        let graph = Self {
            n,
            edges,
            weights,
            neighbors,
        };
        if !graph.is_connected() {
            return Err(Error::Graph("graph is not connected".into()));
        }
        Ok(graph)
    }

    pub fn from_doc(doc: &GraphDoc) -> Result<Self> {
        Self::new(doc.n, &doc.edges)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphDoc =
            serde_json::from_str(text).map_err(|e| Error::Graph(format!("bad graph JSON: {e}")))?;
        Self::from_doc(&doc)
    }

    pub fn to_doc(&self) -> GraphDoc {
        GraphDoc {
            n: self.n,
            edges: self.edges.iter().map(|e| (e.i, e.j, e.weight)).collect(),
        }
    }

    /// Path `0 - 1 - ... - (n-1)` with unit weights.
    pub fn path(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
        Self::new(n, &edges)
    }

    /// Single edge with weight `omega`.
    pub fn two_node(omega: f64) -> Result<Self> {
        Self::new(2, &[(0, 1, omega)])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Neighbors of `i` with their edge weights, sorted by index.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.weight(i, j) > 0.0
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(u, _) in &self.neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Graph gradient `(∇φ)_ij = √ω_ij (φ_i − φ_j)` on edges.
    pub fn gradient(&self, phi: &[f64]) -> Result<EdgeField> {
        check_len(phi, self.n)?;
        let mut field = EdgeField::zeros(self.n);
        for e in &self.edges {
            let v = e.weight.sqrt() * (phi[e.i] - phi[e.j]);
            field.set(e.i, e.j, v);
        }
        Ok(field)
    }

    /// `(div_ρ υ)_i = Σ_{j∈N(i)} √ω_ij υ_ji g_ij(ρ)`.
    pub fn divergence(
        &self,
        weight: &ProbabilityWeight,
        rho: &[f64],
        v: &EdgeField,
    ) -> Result<Vec<f64>> {
        check_len(rho, self.n)?;
        if v.n != self.n {
            return Err(Error::shape(self.n, v.n));
        }
        let mut out = vec![0.0; self.n];
        for e in &self.edges {
            let flux = e.weight.sqrt() * v.get(e.i, e.j) * weight.value(rho[e.i], rho[e.j]);
            // υ_ji = −υ_ij
            out[e.i] -= flux;
            out[e.j] += flux;
        }
        Ok(out)
    }

    /// `⟨u, v⟩_ρ = ½ Σ_{(i,j)∈E} u_ij v_ij g_ij(ρ)` over both orientations.
    pub fn rho_inner(
        &self,
        weight: &ProbabilityWeight,
        rho: &[f64],
        u: &EdgeField,
        v: &EdgeField,
    ) -> Result<f64> {
        check_len(rho, self.n)?;
        if u.n != self.n || v.n != self.n {
            return Err(Error::shape(self.n, u.n.max(v.n)));
        }
        // each unordered edge contributes twice with the same product
        Ok(self
            .edges
            .iter()
            .map(|e| u.get(e.i, e.j) * v.get(e.i, e.j) * weight.value(rho[e.i], rho[e.j]))
            .sum())
    }

    /// Weighted graph Laplacian with edge coefficients `c(e)`, dense row-major.
    pub fn laplacian_with(&self, coeff: impl Fn(&Edge) -> f64) -> Vec<f64> {
        let n = self.n;
        let mut l = vec![0.0; n * n];
        for e in &self.edges {
            let c = coeff(e);
            l[e.i * n + e.j] -= c;
            l[e.j * n + e.i] -= c;
            l[e.i * n + e.i] += c;
            l[e.j * n + e.j] += c;
        }
        l
    }
}

/// Skew-symmetric edge field, zero off the edge set.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeField {
    n: usize,
    values: Vec<f64>,
}

impl EdgeField {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n * n],
        }
    }

    /// Builds a field from upper-triangular edge values; entries off the
    /// edge set are rejected.
    pub fn from_edges(graph: &Graph, values: &[((usize, usize), f64)]) -> Result<Self> {
        let mut f = Self::zeros(graph.n());
        for &((i, j), v) in values {
            if !graph.has_edge(i, j) {
                return Err(Error::Domain(format!("({i}, {j}) is not an edge")));
            }
            f.set(i, j, v);
        }
        Ok(f)
    }

    /// Sets `υ_ij = v` and `υ_ji = −v`.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
        self.values[j * self.n + i] = -v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_skew(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == -self.get(j, i)))
    }
}

/// Point of the open probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DensityState(Vec<f64>);

impl DensityState {
    pub fn new(rho: Vec<f64>) -> Result<Self> {
        Self::with_floor(rho, DEFAULT_FLOOR)
    }

    pub fn with_floor(rho: Vec<f64>, floor: f64) -> Result<Self> {
        if rho.is_empty() {
            return Err(Error::Domain("empty density".into()));
        }
        let mass: f64 = rho.iter().sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Domain(format!("density sums to {mass}, not 1")));
        }
        // n = 1 is the degenerate single-vertex simplex {1}
        if rho.len() > 1 {
            if let Some((i, r)) = rho
                .iter()
                .enumerate()
                .find(|(_, &r)| !(r >= floor && r < 1.0))
            {
                return Err(Error::Domain(format!(
                    "density component {i} = {r} outside [{floor}, 1)"
                )));
            }
        }
        Ok(Self(rho))
    }

    /// Uniform density on `n` vertices.
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Wraps a vector produced by mass-preserving dynamics without re-checking it.
    pub(crate) fn from_trusted(rho: Vec<f64>) -> Self {
        Self(rho)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for DensityState {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for DensityState {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DensityState> for Vec<f64> {
    fn from(s: DensityState) -> Self {
        s.0
    }
}

/// Momentum (phase) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MomentumState(Vec<f64>);

impl MomentumState {
    pub fn new(s: Vec<f64>) -> Result<Self> {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("momentum has non-finite entries".into()));
        }
        Ok(Self(s))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for MomentumState {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for MomentumState {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MomentumState> for Vec<f64> {
    fn from(s: MomentumState) -> Self {
        s.0
    }
}

/// Fréchet projection onto the tangent space `{p : Σp = 0}`: removes the mean.
pub fn frechet_project(grad: &[f64]) -> Vec<f64> {
    let n = grad.len() as f64;
    let mean = grad.iter().sum::<f64>() / n;
    grad.iter().map(|g| g - mean).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_disconnected_graph() {
        let err = Graph::new(3, &[(0, 1, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::Graph(_)));
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(Graph::new(2, &[(0, 0, 1.0)]).is_err());
        assert!(Graph::new(2, &[(0, 1, 0.0)]).is_err());
        assert!(Graph::new(2, &[(0, 1, 1.0), (1, 0, 2.0)]).is_err());
        assert!(Graph::new(2, &[(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn parses_json_document() {
        let g = Graph::from_json(r#"{"n": 3, "edges": [[0, 1, 1.0], [2, 1, 0.5]]}"#).unwrap();
        assert_eq!(g.n(), 3);
        assert_eq!(g.weight(1, 2), 0.5);
        assert_eq!(g.weight(2, 1), 0.5);
        assert_eq!(g.weight(0, 2), 0.0);
        assert_eq!(g.edges()[1], Edge { i: 1, j: 2, weight: 0.5 });
    }

    #[test]
    fn gradient_two_node() {
        let g = Graph::two_node(1.0).unwrap();
        let f = g.gradient(&[2.0, 0.0]).unwrap();
        assert_eq!(f.get(0, 1), 2.0);
        assert_eq!(f.get(1, 0), -2.0);
        assert!(f.is_skew());
    }

    #[test]
    fn gradient_on_path() {
        let g = Graph::path(3).unwrap();
        let f = g.gradient(&[1.0, 0.0, -1.0]).unwrap();
        assert_eq!(f.get(0, 1), 1.0);
        assert_eq!(f.get(1, 2), 1.0);
        assert_eq!(f.get(0, 2), 0.0);
        assert_eq!(g.gradient(&[3.0; 3]).unwrap(), EdgeField::zeros(3));
        assert!(matches!(g.gradient(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn divergence_two_node() {
        let g = Graph::two_node(1.0).unwrap();
        let w = ProbabilityWeight::average();
        let v = EdgeField::from_edges(&g, &[((0, 1), 1.0)]).unwrap();
        let d = g.divergence(&w, &[0.5, 0.5], &v).unwrap();
        assert_eq!(d, vec![-0.5, 0.5]);
        let z = g.divergence(&w, &[0.5, 0.5], &EdgeField::zeros(2)).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn inner_product_two_node() {
        let g = Graph::two_node(1.0).unwrap();
        let w = ProbabilityWeight::average();
        let u = EdgeField::from_edges(&g, &[((0, 1), 1.0)]).unwrap();
        assert_eq!(g.rho_inner(&w, &[0.5, 0.5], &u, &u).unwrap(), 0.5);
        let z = EdgeField::zeros(2);
        assert_eq!(g.rho_inner(&w, &[0.5, 0.5], &u, &z).unwrap(), 0.0);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(frechet_project(&[1.0, 1.0, 1.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(frechet_project(&[1.0, 0.0]), vec![0.5, -0.5]);
    }

    #[test]
    fn density_validation() {
        assert!(DensityState::new(vec![0.5, 0.5]).is_ok());
        assert!(DensityState::new(vec![0.5, 0.6]).is_err());
        assert!(DensityState::new(vec![1.0, 0.0]).is_err());
        assert!(DensityState::new(vec![1.0]).is_ok());
        assert!(DensityState::with_floor(vec![0.01, 0.99], 0.05).is_err());
        assert!(MomentumState::new(vec![f64::NAN]).is_err());
    }
}
