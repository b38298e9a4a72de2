use graph_whs::control::{legendre_fhat, CostFamily, CostSpec};
use graph_whs::convolution::{inf_convolution, midpoint_convexity_defect, sup_convolution, PointGrid};
use graph_whs::dynamics::midpoint_step;
use graph_whs::energy::{energy_gradients, EnergySpec, EnergyVariant};
use graph_whs::graph::{frechet_project, EdgeField, Graph};
use graph_whs::hjb::control_min;
use graph_whs::truncation::{truncation_identity_check, TruncationFn};
use graph_whs::weight::{ProbabilityWeight, WeightKind};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = WeightKind> {
    prop_oneof![Just(WeightKind::Average), Just(WeightKind::Logarithmic), Just(WeightKind::Harmonic)]
}

/// A density on `n` vertices bounded away from zero.
fn density(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, n).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|r| r / s).collect()
    })
}

fn graph_and_state() -> impl Strategy<Value = (Graph, Vec<f64>, Vec<f64>)> {
    (2usize..=6).prop_flat_map(|n| {
        (
            prop::collection::vec(0.2f64..3.0, n - 1),
            density(n),
            prop::collection::vec(-2.0f64..2.0, n),
        )
            .prop_map(move |(w, rho, x)| {
                let edges: Vec<_> = w.iter().enumerate().map(|(i, &w)| (i, i + 1, w)).collect();
                (Graph::new(n, &edges).unwrap(), rho, x)
            })
    })
}

proptest! {
    #[test]
    fn weight_is_a_symmetric_homogeneous_mean(k in kind(), t in 1e-3f64..1.0, r in 1e-3f64..1.0, lam in 0.01f64..1.0) {
        let w = ProbabilityWeight::new(k);
        let g = w.eval(t, r).unwrap();
        prop_assert!((g - w.eval(r, t).unwrap()).abs() <= 1e-12);
        prop_assert!(g >= t.min(r) * (1.0 - 1e-12) && g <= t.max(r) * (1.0 + 1e-12));
        prop_assert!((w.eval(lam * t, lam * r).unwrap() - lam * g).abs() <= 1e-12);
    }

    #[test]
    fn weight_is_midpoint_concave(k in kind(), a in (1e-3f64..1.0, 1e-3f64..1.0), b in (1e-3f64..1.0, 1e-3f64..1.0)) {
        let w = ProbabilityWeight::new(k);
        let mid = w.value(0.5 * (a.0 + b.0), 0.5 * (a.1 + b.1));
        prop_assert!(mid >= 0.5 * (w.value(a.0, a.1) + w.value(b.0, b.1)) - 1e-12);
    }

    #[test]
    fn negative_weight_arguments_are_rejected(k in kind(), t in -1.0f64..-1e-9, r in 0.0f64..1.0) {
        prop_assert!(ProbabilityWeight::new(k).eval(t, r).is_err());
    }

    #[test]
    fn integration_by_parts((g, rho, phi) in graph_and_state(), k in kind(), vals in prop::collection::vec(-2.0f64..2.0, 5)) {
        let w = ProbabilityWeight::new(k);
        let entries: Vec<_> = g.edges().iter().zip(&vals).map(|(e, &v)| ((e.i, e.j), v)).collect();
        let ups = EdgeField::from_edges(&g, &entries).unwrap();
        let lhs = g.rho_inner(&w, &rho, &g.gradient(&phi).unwrap(), &ups).unwrap();
        let div = g.divergence(&w, &rho, &ups).unwrap();
        let rhs: f64 = phi.iter().zip(&div).map(|(a, b)| a * b).sum();
        prop_assert!((lhs + rhs).abs() <= 1e-10);
    }

    #[test]
    fn projection_is_idempotent_and_mean_free(v in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let p = frechet_project(&v);
        prop_assert!(p.iter().sum::<f64>().abs() <= 1e-12);
        let pp = frechet_project(&p);
        prop_assert!(p.iter().zip(&pp).all(|(a, b)| (a - b).abs() <= 1e-14));
    }

    #[test]
    fn momentum_gradient_is_tangent((g, rho, x) in graph_and_state(), k in kind()) {
        let spec = EnergySpec::new(g, ProbabilityWeight::new(k), EnergyVariant::LogarithmicEntropy);
        let d = energy_gradients(&spec, &rho, &x);
        prop_assert!(d.d_x.iter().sum::<f64>().abs() <= 1e-12);
        let n = rho.len();
        for i in 0..n {
            prop_assert!(d.hess_x[i * n..(i + 1) * n].iter().sum::<f64>().abs() <= 1e-12);
        }
    }

    #[test]
    fn a_step_conserves_mass((g, rho, x) in graph_and_state(), dw in prop::collection::vec(-0.1f64..0.1, 6)) {
        let n = rho.len();
        let spec = EnergySpec::new(g, ProbabilityWeight::average(), EnergyVariant::PolynomialInteraction)
            .with_sigma(vec![0.3; n])
            .unwrap();
        if let Some((r, _)) = midpoint_step(&spec, &vec![0.0; n], &rho, &x, 1e-3, &dw[..n]) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-13);
        }
    }

    #[test]
    fn legendre_transform_is_ell_lipschitz(q1 in prop::collection::vec(-4.0f64..4.0, 2), q2 in prop::collection::vec(-4.0f64..4.0, 2), ell in 0.1f64..2.0) {
        let g = Graph::two_node(1.0).unwrap();
        let cost = CostSpec::new(CostFamily::QuadraticControl, &g, 0.5).unwrap();
        let (rho, x) = ([0.4, 0.6], [0.1, -0.2]);
        let a = legendre_fhat(&cost, 0.0, &rho, &x, &q1, ell);
        let b = legendre_fhat(&cost, 0.0, &rho, &x, &q2, ell);
        let dq = ((q1[0] - q2[0]).powi(2) + (q1[1] - q2[1]).powi(2)).sqrt();
        prop_assert!((a - b).abs() <= ell * dq + 1e-12);
    }

    #[test]
    fn control_minimum_is_monotone_in_the_differences(
        b in prop::collection::vec(-2.0f64..2.0, 2),
        dp in prop::collection::vec(-2.0f64..2.0, 2),
        dm in prop::collection::vec(-2.0f64..2.0, 2),
        bump in 0.0f64..0.5,
        axis in 0usize..2,
    ) {
        // raising a forward difference or lowering a backward one never lowers the minimum
        let (b, dp, dm) = ([b[0], b[1]], [dp[0], dp[1]], [dm[0], dm[1]]);
        let base = control_min(b, dp, dm, 0.5, 1.0);
        let mut up = dp;
        up[axis] += bump;
        prop_assert!(control_min(b, up, dm, 0.5, 1.0) >= base - 1e-12);
        let mut down = dm;
        down[axis] -= bump;
        prop_assert!(control_min(b, dp, down, 0.5, 1.0) >= base - 1e-12);
    }

    #[test]
    fn truncation_identity_holds((g, rho, x) in graph_and_state(), k in kind(), r in 1.0f64..50.0) {
        let spec = EnergySpec::new(g, ProbabilityWeight::new(k), EnergyVariant::PolynomialInteraction);
        let tr = TruncationFn::new(r, 0.5).unwrap();
        prop_assert!(truncation_identity_check(&spec, &tr, &rho, &x).unwrap() <= 1e-8);
    }

    #[test]
    fn truncation_is_positive_and_non_increasing(r in 1.0f64..100.0, beta in 0.05f64..0.95, s in 0.0f64..3.0, ds in 0.0f64..0.5) {
        let tr = TruncationFn::new(r, beta).unwrap();
        let (a, _, _) = tr.eval(s * r);
        let (b, _, _) = tr.eval((s + ds) * r);
        prop_assert!(a > 0.0 && b > 0.0 && b <= a);
    }

    #[test]
    fn convolutions_bracket_the_input(vals in prop::collection::vec(-1.0f64..1.0, 25), theta in 0.01f64..0.5) {
        let axis: Vec<f64> = (0..5).map(|k| k as f64 / 4.0).collect();
        let grid = PointGrid::new(vec![axis.clone(), axis]).unwrap();
        let up = sup_convolution(&grid, &vals, theta).unwrap();
        let down = inf_convolution(&grid, &vals, theta).unwrap();
        for k in 0..vals.len() {
            prop_assert!(down[k] <= vals[k] && vals[k] <= up[k]);
        }
        prop_assert!(midpoint_convexity_defect(&grid, &up, theta, 1.0) >= -1e-12);
        let neg: Vec<f64> = down.iter().map(|v| -v).collect();
        prop_assert!(midpoint_convexity_defect(&grid, &neg, theta, 1.0) >= -1e-12);
    }
}
