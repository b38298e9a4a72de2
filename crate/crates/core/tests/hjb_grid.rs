use graph_whs::benchmark;
use graph_whs::control::{CostFamily, CostSpec};
use graph_whs::graph::Graph;
use graph_whs::hjb::{hjb_residual, hjb_solve_backward, GridPoint, SimplexGrid};
use graph_whs::Error;

fn solve(points: usize) -> graph_whs::hjb::GridValueFunction {
    hjb_solve_backward(&benchmark::grid(points).unwrap(), &benchmark::cost(), &benchmark::energy(), benchmark::ELL).unwrap()
}

#[test]
fn layers_do_not_depend_on_worker_count() {
    let grid = benchmark::grid(17).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| hjb_solve_backward(&grid, &benchmark::cost(), &benchmark::energy(), 1.0).unwrap())
    };
    let a = run(1);
    let b = run(4);
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        assert!(la.iter().zip(lb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn constant_solution_has_no_residual() {
    let g = Graph::two_node(1.0).unwrap();
    let flat = CostSpec::new(CostFamily::QuadraticControl, &g, 0.5)
        .unwrap()
        .with_terminal_offset(1.5)
        .unwrap();
    let grid = benchmark::grid(17).unwrap();
    let gvf = hjb_solve_backward(&grid, &flat, &benchmark::energy(), 1.0).unwrap();
    let report = hjb_residual(&gvf, &gvf.interior_samples(50, 3)).unwrap();
    assert!(report.max <= 1e-10, "{}", report.max);
    assert_eq!(report.sub_violations + report.super_violations, 0);
}

#[test]
fn benchmark_residual_shrinks_under_refinement() {
    let coarse = solve(17);
    let fine = solve(33);
    // the same physical sample points on both grids
    let pts = |g: &SimplexGrid, r: usize| -> Vec<GridPoint> {
        let mut out = Vec::new();
        for i in [3, 4, 5] {
            for a in [3, 4, 5] {
                for b in [3, 4, 5] {
                    out.push(GridPoint { layer: 32, i: i * r, a: a * r, b: b * r });
                }
            }
        }
        assert!(out.iter().all(|p| p.i + 2 < g.n_rho));
        out
    };
    let rc = hjb_residual(&coarse, &pts(&coarse.grid, 2)).unwrap();
    let rf = hjb_residual(&fine, &pts(&fine.grid, 4)).unwrap();
    assert!(rf.rms < rc.rms, "{} vs {}", rf.rms, rc.rms);
    assert_eq!(rf.sub_violations + rf.super_violations, 0);
}

#[test]
fn residual_rejects_boundary_points() {
    let gvf = solve(9);
    let p = GridPoint { layer: 1, i: 0, a: 4, b: 4 };
    assert!(matches!(hjb_residual(&gvf, &[p]), Err(Error::Domain(_))));
}

#[test]
fn interpolation_reproduces_nodes() {
    let gvf = solve(9);
    let g = gvf.grid;
    for (k, i, a, b) in [(0, 2, 3, 4), (64, 8, 0, 8), (17, 5, 5, 1)] {
        let v = gvf.interpolate(g.time(k), g.rho1(i), g.x(a), g.x(b));
        assert!((v - gvf.value(k, i, a, b)).abs() < 1e-12);
    }
}

#[test]
fn layer_bundle_is_written_with_stride() {
    let gvf = solve(9);
    let dir = tempfile::tempdir().unwrap();
    let files = gvf.write_layers(dir.path(), 16).unwrap();
    assert_eq!(files.len(), 5);
    let text = std::fs::read_to_string(&files[4]).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,rho1,x1,x2,U"));
    assert_eq!(lines.count(), 9 * 9 * 9);
    let meta = serde_json::to_value(gvf.metadata()).unwrap();
    assert_eq!(meta["grid"]["n_t"], 64);
}

#[test]
fn refuses_to_run_above_the_cfl_bound() {
    let grid = SimplexGrid::new(0.2, 33, 1.0, 33, 0.25, 8).unwrap();
    match hjb_solve_backward(&grid, &benchmark::cost(), &benchmark::energy(), 1.0) {
        Err(Error::Cfl { ratio }) => assert!(ratio > 1.0),
        other => panic!("expected a CFL error, got {other:?}"),
    }
}
