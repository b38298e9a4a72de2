//! Explicit monotone grid solver for the HJB equation on two-vertex graphs.
//!
//! The state `(ρ, x)` with `ρ = (ρ₁, 1 − ρ₁)` lives on a box over
//! `(ρ₁, x₁, x₂)`. Backward steps apply
//!
//! ```text
//! U^k = U^{k+1} + dt · [ b_ρ ∂_{ρ₁}U + min_{𝕍∈B_ℓ} Σ_k ((b_k − 𝕍_k) ∂_{x_k}U + c𝕍_k²)
//!                        + a·τ(d) + ½ Σ_k σ_k² ∂²_{x_k}U ]
//! ```
//!
//! with `b_ρ = (D_xℋ₀)₁`, `b = −D_ρℋ₀`. Each first-order term is upwinded
//! by the sign of its drift under the control that is being tried, so every
//! candidate control gives a monotone stencil and so does the exact minimum.
//! Boundary nodes use linearly extrapolated ghost values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::control::{hamiltonian, terminal_cost, CostSpec};
use crate::energy::{energy_gradients, EnergySpec, EnergyVariant};
use crate::error::{Error, Result};
use crate::graph::GraphDoc;
use crate::weight::ProbabilityWeight;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimplexGrid {
    pub rho_min: f64,
    pub rho_max: f64,
    pub n_rho: usize,
    pub x_max: f64,
    pub n_x: usize,
    pub t_end: f64,
    /// Number of time steps; there are `n_t + 1` layers.
    pub n_t: usize,
}

impl SimplexGrid {
    /// `ρ₁ ∈ [ε, 1 − ε]`, `x ∈ [−X, X]²`, `t ∈ [0, T]`.
    pub fn new(eps: f64, n_rho: usize, x_max: f64, n_x: usize, t_end: f64, n_t: usize) -> Result<Self> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::Config(format!("grid margin must lie in (0, 1/2), got {eps}")));
        }
        if n_rho < 3 || n_x < 3 || n_t < 1 {
            return Err(Error::Config("grid needs at least 3 points per axis and one step".into()));
        }
        if !(x_max > 0.0 && t_end > 0.0) {
            return Err(Error::Config("grid extents must be positive".into()));
        }
        Ok(Self {
            rho_min: eps,
            rho_max: 1.0 - eps,
            n_rho,
            x_max,
            n_x,
            t_end,
            n_t,
        })
    }

    pub fn h_rho(&self) -> f64 {
        (self.rho_max - self.rho_min) / (self.n_rho - 1) as f64
    }

    pub fn h_x(&self) -> f64 {
        2.0 * self.x_max / (self.n_x - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n_t as f64
    }

    pub fn rho1(&self, i: usize) -> f64 {
        if i == self.n_rho - 1 {
            self.rho_max
        } else {
            self.rho_min + i as f64 * self.h_rho()
        }
    }

    pub fn x(&self, a: usize) -> f64 {
        -self.x_max + a as f64 * self.h_x()
    }

    pub fn time(&self, layer: usize) -> f64 {
        layer as f64 * self.dt()
    }

    pub fn nodes(&self) -> usize {
        self.n_rho * self.n_x * self.n_x
    }

    pub fn index(&self, i: usize, a: usize, b: usize) -> usize {
        (i * self.n_x + a) * self.n_x + b
    }

    fn state(&self, i: usize, a: usize, b: usize) -> ([f64; 2], [f64; 2]) {
        let r = self.rho1(i);
        ([r, 1.0 - r], [self.x(a), self.x(b)])
    }

    /// `dt · max_nodes(|b_ρ|/h_ρ + Σ_k (|b_k| + ℓ)/h_x + Σ_k σ_k²/h_x²)`;
    /// the scheme is monotone when this is at most one.
    pub fn cfl_ratio(&self, energy: &EnergySpec, ell: f64) -> f64 {
        let coefs = node_coefficients(self, energy, None);
        let s2: f64 = energy.sigma().iter().map(|s| s * s).sum();
        let hr = self.h_rho();
        let hx = self.h_x();
        let rate = coefs
            .iter()
            .map(|c| c.b_rho.abs() / hr + (c.b_s[0].abs() + c.b_s[1].abs() + 2.0 * ell) / hx + s2 / (hx * hx))
            .fold(0.0, f64::max);
        self.dt() * rate
    }
}

#[derive(Debug, Clone, Copy)]
struct NodeCoef {
    b_rho: f64,
    b_s: [f64; 2],
    track: f64,
}

fn node_coefficients(grid: &SimplexGrid, energy: &EnergySpec, cost: Option<&CostSpec>) -> Vec<NodeCoef> {
    let mut out = Vec::with_capacity(grid.nodes());
    for i in 0..grid.n_rho {
        for a in 0..grid.n_x {
            for b in 0..grid.n_x {
                let (rho, x) = grid.state(i, a, b);
                let g = energy_gradients(energy, &rho, &x);
                out.push(NodeCoef {
                    b_rho: g.d_x[0],
                    b_s: [-g.d_rho[0], -g.d_rho[1]],
                    track: cost.map_or(0.0, |c| c.running_tracking(&rho, &x)),
                });
            }
        }
    }
    out
}

/// Neighbour values of one node: `[minus, plus]` per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub center: f64,
    pub rho: [f64; 2],
    pub x: [[f64; 2]; 2],
}

/// `min_{‖v‖≤ℓ} Σ_k (b_k − v_k) D_k(v_k) + c v_k²` where `D_k` is the forward
/// difference `dp_k` when `v_k < b_k` and the backward one `dm_k` otherwise.
///
/// The objective is separable and piecewise quadratic but not necessarily
/// convex, so the minimum is found by enumerating every KKT configuration:
/// each coordinate sits on one of its two pieces or at the kink `v_k = b_k`.
pub fn control_min(b: [f64; 2], dp: [f64; 2], dm: [f64; 2], c: f64, ell: f64) -> f64 {
    let f = |v: [f64; 2]| -> f64 {
        (0..2)
            .map(|k| {
                let d = if v[k] < b[k] { dp[k] } else { dm[k] };
                (b[k] - v[k]) * d + c * v[k] * v[k]
            })
            .sum()
    };
    let feasible = |v: [f64; 2]| v[0] * v[0] + v[1] * v[1] <= ell * ell * (1.0 + 1e-12);
    let mut best = f([0.0, 0.0]);
    let mut consider = |v: [f64; 2]| {
        if feasible(v) {
            let val = f(v);
            if val < best {
                best = val;
            }
        }
    };
    // interior local minima per coordinate
    if c > 0.0 {
        let opts = |k: usize| [(dp[k] / (2.0 * c)).min(b[k]), (dm[k] / (2.0 * c)).max(b[k])];
        for v0 in opts(0) {
            for v1 in opts(1) {
                consider([v0, v1]);
            }
        }
    }
    // boundary KKT points; mode 0: forward piece, 1: backward piece, 2: kink
    for m0 in 0..3 {
        for m1 in 0..3 {
            let modes = [m0, m1];
            let mut fixed = 0.0;
            let mut free_sq = 0.0;
            for k in 0..2 {
                match modes[k] {
                    0 => free_sq += dp[k] * dp[k],
                    1 => free_sq += dm[k] * dm[k],
                    _ => fixed += b[k] * b[k],
                }
            }
            let rem = ell * ell - fixed;
            if rem < 0.0 {
                continue;
            }
            if free_sq == 0.0 {
                if modes.iter().all(|&m| m == 2) {
                    consider(b);
                }
                continue;
            }
            if rem == 0.0 {
                continue;
            }
            let kappa = (free_sq / (4.0 * rem)).sqrt();
            if kappa < c {
                continue;
            }
            let mut v = [0.0; 2];
            let mut consistent = true;
            for k in 0..2 {
                v[k] = match modes[k] {
                    0 => dp[k] / (2.0 * kappa),
                    1 => dm[k] / (2.0 * kappa),
                    _ => b[k],
                };
                consistent &= match modes[k] {
                    0 => v[k] <= b[k],
                    1 => v[k] >= b[k],
                    _ => true,
                };
            }
            if consistent {
                consider(v);
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
struct Scheme {
    h_rho: f64,
    h_x: f64,
    dt: f64,
    sigma: [f64; 2],
    c: f64,
    ell: f64,
}

impl Scheme {
    fn update(&self, coef: &NodeCoef, st: &Stencil) -> f64 {
        let u = st.center;
        let rho_term = if coef.b_rho > 0.0 {
            coef.b_rho * (st.rho[1] - u) / self.h_rho
        } else {
            coef.b_rho * (u - st.rho[0]) / self.h_rho
        };
        let dp = [(st.x[0][1] - u) / self.h_x, (st.x[1][1] - u) / self.h_x];
        let dm = [(u - st.x[0][0]) / self.h_x, (u - st.x[1][0]) / self.h_x];
        let ctrl = control_min(coef.b_s, dp, dm, self.c, self.ell);
        let diff: f64 = (0..2)
            .map(|k| 0.5 * self.sigma[k].powi(2) * (st.x[k][0] - 2.0 * u + st.x[k][1]) / (self.h_x * self.h_x))
            .sum();
        u + self.dt * (rho_term + ctrl + coef.track + diff)
    }
}

fn stencil_at(grid: &SimplexGrid, layer: &[f64], i: usize, a: usize, b: usize) -> Stencil {
    let u = layer[grid.index(i, a, b)];
    let along = |lo: Option<f64>, hi: Option<f64>| -> [f64; 2] {
        match (lo, hi) {
            (Some(l), Some(h)) => [l, h],
            (None, Some(h)) => [2.0 * u - h, h],
            (Some(l), None) => [l, 2.0 * u - l],
            (None, None) => [u, u],
        }
    };
    let get = |i: usize, a: usize, b: usize| layer[grid.index(i, a, b)];
    let rho = along(
        (i > 0).then(|| get(i - 1, a, b)),
        (i + 1 < grid.n_rho).then(|| get(i + 1, a, b)),
    );
    let x0 = along(
        (a > 0).then(|| get(i, a - 1, b)),
        (a + 1 < grid.n_x).then(|| get(i, a + 1, b)),
    );
    let x1 = along(
        (b > 0).then(|| get(i, a, b - 1)),
        (b + 1 < grid.n_x).then(|| get(i, a, b + 1)),
    );
    Stencil {
        center: u,
        rho,
        x: [x0, x1],
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridMetadata {
    pub scheme: String,
    pub grid: SimplexGrid,
    pub h_rho: f64,
    pub h_x: f64,
    pub dt: f64,
    pub cfl_ratio: f64,
    pub ell: f64,
    pub cost: CostSpec,
    pub energy_variant: EnergyVariant,
    pub weight: ProbabilityWeight,
    pub fisher_coeff: f64,
    pub sigma: Vec<f64>,
    pub graph: GraphDoc,
}

#[derive(Debug, Clone)]
pub struct GridValueFunction {
    pub grid: SimplexGrid,
    /// `layers[k]` holds `U(t_k, ·)`; the last layer is the terminal cost.
    pub layers: Vec<Vec<f64>>,
    pub cost: CostSpec,
    pub energy: EnergySpec,
    pub ell: f64,
    pub cfl_ratio: f64,
}

fn check_two_vertex(energy: &EnergySpec, cost: &CostSpec) -> Result<()> {
    if energy.n() != 2 || cost.n() != 2 {
        return Err(Error::Config("the grid solver handles two-vertex graphs only".into()));
    }
    Ok(())
}

/// Backward explicit time stepping from the terminal cost.
pub fn hjb_solve_backward(
    grid: &SimplexGrid,
    cost: &CostSpec,
    energy: &EnergySpec,
    ell: f64,
) -> Result<GridValueFunction> {
    check_two_vertex(energy, cost)?;
    if !(ell > 0.0) {
        return Err(Error::Config(format!("control radius must be positive, got {ell}")));
    }
    let cfl_ratio = grid.cfl_ratio(energy, ell);
    if !(cfl_ratio <= 1.0) {
        return Err(Error::Cfl { ratio: cfl_ratio });
    }
    let coefs = node_coefficients(grid, energy, Some(cost));
    let scheme = scheme_for(grid, cost, energy, ell);

    let mut terminal = vec![0.0; grid.nodes()];
    for i in 0..grid.n_rho {
        for a in 0..grid.n_x {
            for b in 0..grid.n_x {
                let (rho, x) = grid.state(i, a, b);
                terminal[grid.index(i, a, b)] = terminal_cost(cost, &rho, &x);
            }
        }
    }
    let mut layers = vec![Vec::new(); grid.n_t + 1];
    layers[grid.n_t] = terminal;
    let plane = grid.n_x * grid.n_x;
    for k in (0..grid.n_t).rev() {
        let next = &layers[k + 1];
        let mut cur = vec![0.0; grid.nodes()];
        cur.par_chunks_mut(plane).enumerate().for_each(|(i, chunk)| {
            for a in 0..grid.n_x {
                for b in 0..grid.n_x {
                    let idx = grid.index(i, a, b);
                    let st = stencil_at(grid, next, i, a, b);
                    chunk[a * grid.n_x + b] = scheme.update(&coefs[idx], &st);
                }
            }
        });
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: k });
        }
        layers[k] = cur;
    }
    Ok(GridValueFunction {
        grid: *grid,
        layers,
        cost: cost.clone(),
        energy: energy.clone(),
        ell,
        cfl_ratio,
    })
}

fn scheme_for(grid: &SimplexGrid, cost: &CostSpec, energy: &EnergySpec, ell: f64) -> Scheme {
    Scheme {
        h_rho: grid.h_rho(),
        h_x: grid.h_x(),
        dt: grid.dt(),
        sigma: [energy.sigma()[0], energy.sigma()[1]],
        c: cost.control_coeff,
        ell,
    }
}

/// Counts random stencils where raising one input lowers the scheme output.
pub fn monotonicity_violations(
    grid: &SimplexGrid,
    cost: &CostSpec,
    energy: &EnergySpec,
    ell: f64,
    trials: usize,
    seed: u64,
) -> Result<usize> {
    check_two_vertex(energy, cost)?;
    let ratio = grid.cfl_ratio(energy, ell);
    if !(ratio <= 1.0) {
        return Err(Error::Cfl { ratio });
    }
    let coefs = node_coefficients(grid, energy, Some(cost));
    let scheme = scheme_for(grid, cost, energy, ell);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..trials {
        let node = rng.random_range(0..grid.nodes());
        let scale = 0.1;
        let mut draw = || scale * (2.0 * rng.random::<f64>() - 1.0);
        let st = Stencil {
            center: draw(),
            rho: [draw(), draw()],
            x: [[draw(), draw()], [draw(), draw()]],
        };
        let base = scheme.update(&coefs[node], &st);
        let which = rng.random_range(0..7);
        let bump = 0.05 * rng.random::<f64>();
        let mut up = st;
        match which {
            0 => up.center += bump,
            1 | 2 => up.rho[which - 1] += bump,
            w => up.x[(w - 3) / 2][(w - 3) % 2] += bump,
        }
        if scheme.update(&coefs[node], &up) < base - 1e-12 {
            violations += 1;
        }
    }
    Ok(violations)
}

impl GridValueFunction {
    pub fn value(&self, layer: usize, i: usize, a: usize, b: usize) -> f64 {
        self.layers[layer][self.grid.index(i, a, b)]
    }

    /// Multilinear interpolation in `(t, ρ₁, x₁, x₂)`, clamped to the box.
    pub fn interpolate(&self, t: f64, rho1: f64, x1: f64, x2: f64) -> f64 {
        let g = &self.grid;
        let locate = |v: f64, lo: f64, h: f64, n: usize| -> (usize, f64) {
            let s = ((v - lo) / h).clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            (i, s - i as f64)
        };
        let (k, wt) = locate(t, 0.0, g.dt(), g.n_t + 1);
        let (i, wr) = locate(rho1, g.rho_min, g.h_rho(), g.n_rho);
        let (a, wa) = locate(x1, -g.x_max, g.h_x(), g.n_x);
        let (b, wb) = locate(x2, -g.x_max, g.h_x(), g.n_x);
        let mut total = 0.0;
        for (dk, ck) in [(0, 1.0 - wt), (1, wt)] {
            for (di, ci) in [(0, 1.0 - wr), (1, wr)] {
                for (da, ca) in [(0, 1.0 - wa), (1, wa)] {
                    for (db, cb) in [(0, 1.0 - wb), (1, wb)] {
                        let w = ck * ci * ca * cb;
                        if w != 0.0 {
                            total += w * self.value(k + dk, i + di, a + da, b + db);
                        }
                    }
                }
            }
        }
        total
    }

    pub fn metadata(&self) -> GridMetadata {
        GridMetadata {
            scheme: "explicit monotone upwind, control-wise upwinding, linear ghost extrapolation".into(),
            grid: self.grid,
            h_rho: self.grid.h_rho(),
            h_x: self.grid.h_x(),
            dt: self.grid.dt(),
            cfl_ratio: self.cfl_ratio,
            ell: self.ell,
            cost: self.cost.clone(),
            energy_variant: self.energy.variant,
            weight: self.energy.weight,
            fisher_coeff: self.energy.fisher_coeff,
            sigma: self.energy.sigma().to_vec(),
            graph: self.energy.graph.to_doc(),
        }
    }

    /// Writes every `stride`-th layer (and the first and last) as
    /// `layer_<k>.csv` with columns `t,rho1,x1,x2,U`.
    pub fn write_layers(&self, dir: &Path, stride: usize) -> std::io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let stride = stride.max(1);
        let mut written = Vec::new();
        for k in 0..=self.grid.n_t {
            if k % stride != 0 && k != self.grid.n_t {
                continue;
            }
            let path = dir.join(format!("layer_{k:05}.csv"));
            let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
            writeln!(w, "t,rho1,x1,x2,U")?;
            let t = self.grid.time(k);
            for i in 0..self.grid.n_rho {
                for a in 0..self.grid.n_x {
                    for b in 0..self.grid.n_x {
                        writeln!(
                            w,
                            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                            t,
                            self.grid.rho1(i),
                            self.grid.x(a),
                            self.grid.x(b),
                            self.value(k, i, a, b)
                        )?;
                    }
                }
            }
            w.flush()?;
            written.push(path);
        }
        Ok(written)
    }

    /// Random interior nodes at least two cells from every spatial boundary,
    /// on layers that admit a centred time difference.
    pub fn interior_samples(&self, count: usize, seed: u64) -> Vec<GridPoint> {
        let g = &self.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if g.n_rho < 5 || g.n_x < 5 || g.n_t < 2 {
            return Vec::new();
        }
        (0..count)
            .map(|_| GridPoint {
                layer: rng.random_range(1..g.n_t),
                i: rng.random_range(2..g.n_rho - 2),
                a: rng.random_range(2..g.n_x - 2),
                b: rng.random_range(2..g.n_x - 2),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GridPoint {
    pub layer: usize,
    pub i: usize,
    pub a: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub max: f64,
    pub rms: f64,
    pub points: usize,
    /// Tolerance used by the probes: the largest centred residual.
    pub probe_tol: f64,
    pub sub_violations: usize,
    pub super_violations: usize,
    pub note: &'static str,
}

/// `|∂_tU + H(t, ρ, x, ∂_ρU, D_xU, D²_xU)|` from centred differences at
/// sample nodes, plus quadratic touching probes for the sub- and
/// supersolution inequalities.
pub fn hjb_residual(gvf: &GridValueFunction, points: &[GridPoint]) -> Result<ResidualReport> {
    let g = &gvf.grid;
    let mut residuals = Vec::with_capacity(points.len());
    let mut probes = Vec::with_capacity(points.len());
    for p in points {
        if p.layer == 0 || p.layer >= g.n_t || p.i < 1 || p.i + 1 >= g.n_rho || p.a < 1 || p.a + 1 >= g.n_x || p.b < 1 || p.b + 1 >= g.n_x {
            return Err(Error::Domain(format!("sample point {p:?} is not interior")));
        }
        let jet = Jet::at(gvf, p);
        let (rho, x) = g.state(p.i, p.a, p.b);
        let t = g.time(p.layer);
        let eval = |mu: f64| -> Result<f64> {
            let scale = [g.dt(), g.h_rho(), g.h_x(), g.h_x()];
            let ut = jet.grad[0] / scale[0];
            let ur = jet.grad[1] / scale[1];
            let q = [jet.grad[2] / scale[2], jet.grad[3] / scale[3]];
            let hx2 = scale[2] * scale[2];
            let qq = [
                (jet.hess[2][2] + mu) / hx2,
                jet.hess[2][3] / hx2,
                jet.hess[3][2] / hx2,
                (jet.hess[3][3] + mu) / hx2,
            ];
            Ok(ut + hamiltonian(&gvf.cost, &gvf.energy, t, &rho, &x, &[0.5 * ur, -0.5 * ur], &q, &qq, gvf.ell)?)
        };
        residuals.push(eval(0.0)?);
        probes.push((eval(jet.mu_above)?, eval(jet.mu_below)?));
    }
    let abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    let max = abs.iter().copied().fold(0.0, f64::max);
    let rms = if abs.is_empty() {
        0.0
    } else {
        (abs.iter().map(|r| r * r).sum::<f64>() / abs.len() as f64).sqrt()
    };
    let tol = max * (1.0 + 1e-9) + 1e-12;
    Ok(ResidualReport {
        max,
        rms,
        points: points.len(),
        probe_tol: tol,
        sub_violations: probes.iter().filter(|p| p.0 < -tol).count(),
        super_violations: probes.iter().filter(|p| p.1 > tol).count(),
        note: "finite probe family: evidence for the viscosity inequalities, not a verification",
    })
}

/// Discrete second-order jet in index units over `(t, ρ₁, x₁, x₂)` together
/// with the smallest isotropic curvature shifts that make the quadratic touch
/// `U` from above and from below on the 3⁴ stencil.
struct Jet {
    grad: [f64; 4],
    hess: [[f64; 4]; 4],
    mu_above: f64,
    mu_below: f64,
}

impl Jet {
    fn at(gvf: &GridValueFunction, p: &GridPoint) -> Self {
        let base = [p.layer as isize, p.i as isize, p.a as isize, p.b as isize];
        let u = |d: [isize; 4]| -> f64 {
            gvf.value(
                (base[0] + d[0]) as usize,
                (base[1] + d[1]) as usize,
                (base[2] + d[2]) as usize,
                (base[3] + d[3]) as usize,
            )
        };
        let unit = |k: usize, s: isize| {
            let mut d = [0isize; 4];
            d[k] = s;
            d
        };
        let u0 = u([0; 4]);
        let mut grad = [0.0; 4];
        let mut hess = [[0.0; 4]; 4];
        for k in 0..4 {
            grad[k] = 0.5 * (u(unit(k, 1)) - u(unit(k, -1)));
            hess[k][k] = u(unit(k, 1)) - 2.0 * u0 + u(unit(k, -1));
            for l in 0..k {
                let mut pp = [0isize; 4];
                pp[k] = 1;
                pp[l] = 1;
                let mut pm = pp;
                pm[l] = -1;
                let mut mp = pp;
                mp[k] = -1;
                let mut mm = [0isize; 4];
                mm[k] = -1;
                mm[l] = -1;
                let v = 0.25 * (u(pp) - u(pm) - u(mp) + u(mm));
                hess[k][l] = v;
                hess[l][k] = v;
            }
        }
        let mut mu_above: f64 = 0.0;
        let mut mu_below: f64 = 0.0;
        for code in 0..81 {
            let d = [
                code % 3 - 1,
                (code / 3) % 3 - 1,
                (code / 9) % 3 - 1,
                (code / 27) % 3 - 1,
            ]
            .map(|v| v as isize);
            if d == [0; 4] {
                continue;
            }
            let df = d.map(|v| v as f64);
            let lin: f64 = (0..4).map(|k| grad[k] * df[k]).sum();
            let quad: f64 = (0..4)
                .map(|k| (0..4).map(|l| hess[k][l] * df[k] * df[l]).sum::<f64>())
                .sum();
            let r2: f64 = df.iter().map(|v| v * v).sum();
            let gap = u(d) - (u0 + lin + 0.5 * quad);
            mu_above = mu_above.max(2.0 * gap / r2);
            mu_below = mu_below.min(2.0 * gap / r2);
        }
        Self {
            grad,
            hess,
            mu_above,
            mu_below,
        }
    }
}

/// Largest `|U_coarse − U_fine|` at `t = 0` over coarse nodes in the central
/// `fraction` of every spatial axis. The fine grid must refine the coarse one
/// by an integer factor on the same box.
pub fn refinement_gap(coarse: &GridValueFunction, fine: &GridValueFunction, fraction: f64) -> Result<f64> {
    let (c, f) = (&coarse.grid, &fine.grid);
    if (f.n_rho - 1) % (c.n_rho - 1) != 0 || (f.n_x - 1) % (c.n_x - 1) != 0 {
        return Err(Error::Config("fine grid does not nest the coarse grid".into()));
    }
    let rr = (f.n_rho - 1) / (c.n_rho - 1);
    let rx = (f.n_x - 1) / (c.n_x - 1);
    let inside = |k: usize, n: usize| {
        let s = k as f64 / (n - 1) as f64;
        (s - 0.5).abs() <= 0.5 * fraction + 1e-12
    };
    let mut gap: f64 = 0.0;
    for i in (0..c.n_rho).filter(|&i| inside(i, c.n_rho)) {
        for a in (0..c.n_x).filter(|&a| inside(a, c.n_x)) {
            for b in (0..c.n_x).filter(|&b| inside(b, c.n_x)) {
                let d = coarse.value(0, i, a, b) - fine.value(0, i * rr, a * rx, b * rx);
                gap = gap.max(d.abs());
            }
        }
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::CostFamily;
    use crate::graph::Graph;

    fn energy() -> EnergySpec {
        EnergySpec::new(
            Graph::two_node(1.0).unwrap(),
            ProbabilityWeight::average(),
            EnergyVariant::PolynomialInteraction,
        )
        .with_sigma(vec![0.3, 0.3])
        .unwrap()
    }

    #[test]
    fn control_min_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let mut r = || 4.0 * rng.random::<f64>() - 2.0;
            let b = [r(), r()];
            let dp = [r(), r()];
            let dm = [r(), r()];
            let c = 0.5;
            let got = control_min(b, dp, dm, c, 1.0);
            let mut brute = f64::INFINITY;
            let m = 400;
            for ia in 0..=m {
                for ib in 0..=m {
                    let v = [-1.0 + 2.0 * ia as f64 / m as f64, -1.0 + 2.0 * ib as f64 / m as f64];
                    if v[0] * v[0] + v[1] * v[1] > 1.0 {
                        continue;
                    }
                    let val: f64 = (0..2)
                        .map(|k| {
                            let d = if v[k] < b[k] { dp[k] } else { dm[k] };
                            (b[k] - v[k]) * d + c * v[k] * v[k]
                        })
                        .sum();
                    brute = brute.min(val);
                }
            }
            assert!(got <= brute + 1e-12, "{got} > {brute}");
            assert!(got >= brute - 0.05, "{got} << {brute}");
        }
    }

    #[test]
    fn constant_terminal_is_preserved() {
        let g = Graph::two_node(1.0).unwrap();
        let cost = CostSpec::new(CostFamily::QuadraticControl, &g, 0.5)
            .unwrap()
            .with_terminal_offset(0.7)
            .unwrap();
        let grid = SimplexGrid::new(0.2, 9, 1.0, 9, 0.25, 16).unwrap();
        let gvf = hjb_solve_backward(&grid, &cost, &energy(), 1.0).unwrap();
        for layer in &gvf.layers {
            assert!(layer.iter().all(|v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn cfl_violation_is_refused() {
        let g = Graph::two_node(1.0).unwrap();
        let cost = CostSpec::new(CostFamily::QuadraticControl, &g, 0.5).unwrap();
        let grid = SimplexGrid::new(0.2, 33, 1.0, 33, 0.25, 2).unwrap();
        assert!(matches!(
            hjb_solve_backward(&grid, &cost, &energy(), 1.0),
            Err(Error::Cfl { .. })
        ));
    }
}
