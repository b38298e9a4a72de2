//! Sup- and inf-convolutions of functions sampled on tensor grids, computed
//! by direct search over the sample points.

use crate::error::{Error, Result};

/// Tensor grid; points are enumerated with the last axis varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGrid {
    pub axes: Vec<Vec<f64>>,
}

impl PointGrid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|a| a.is_empty()) {
            return Err(Error::Config("grid needs at least one point per axis".into()));
        }
        Ok(Self { axes })
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn point(&self, mut idx: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.axes.len()];
        for (k, axis) in self.axes.iter().enumerate().rev() {
            p[k] = axis[idx % axis.len()];
            idx /= axis.len();
        }
        p
    }

    fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn check(grid: &PointGrid, values: &[f64], theta: f64) -> Result<()> {
    if values.len() != grid.len() {
        return Err(Error::shape(grid.len(), values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("convolution input must be finite".into()));
    }
    if !(theta > 0.0) {
        return Err(Error::Domain(format!("theta must be positive, got {theta}")));
    }
    Ok(())
}

/// `Û^ϑ(z) = max_w Û(w) − |z − w|²/(2ϑ)`.
pub fn sup_convolution(grid: &PointGrid, values: &[f64], theta: f64) -> Result<Vec<f64>> {
    check(grid, values, theta)?;
    let pts = grid.points();
    Ok(pts
        .iter()
        .map(|z| {
            pts.iter()
                .zip(values)
                .map(|(w, u)| u - sq_dist(z, w) / (2.0 * theta))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// `Û_ϑ(z) = min_w Û(w) + |z − w|²/(2ϑ)`.
pub fn inf_convolution(grid: &PointGrid, values: &[f64], theta: f64) -> Result<Vec<f64>> {
    check(grid, values, theta)?;
    let pts = grid.points();
    Ok(pts
        .iter()
        .map(|z| {
            pts.iter()
                .zip(values)
                .map(|(w, u)| u + sq_dist(z, w) / (2.0 * theta))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Smallest midpoint second difference of `f(z) + sign·|z|²/(2ϑ)` along grid
/// lines on uniformly spaced axes, scaled by the squared spacing. Nonnegative
/// (up to rounding) for `sign = +1` exactly when `f` passes the discrete
/// semiconvexity test; use `sign = −1` and `−f` for semiconcavity.
pub fn midpoint_convexity_defect(grid: &PointGrid, values: &[f64], theta: f64, sign: f64) -> f64 {
    let dims = grid.dims();
    let pts = grid.points();
    let shifted: Vec<f64> = pts
        .iter()
        .zip(values)
        .map(|(z, v)| v + sign * z.iter().map(|c| c * c).sum::<f64>() / (2.0 * theta))
        .collect();
    let mut strides = vec![1usize; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * dims[k + 1];
    }
    let mut worst = f64::INFINITY;
    for idx in 0..pts.len() {
        for k in 0..dims.len() {
            let coord = (idx / strides[k]) % dims[k];
            if coord == 0 || coord + 1 >= dims[k] {
                continue;
            }
            let lo = shifted[idx - strides[k]];
            let hi = shifted[idx + strides[k]];
            worst = worst.min(lo + hi - 2.0 * shifted[idx]);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> PointGrid {
        let axis: Vec<f64> = (0..7).map(|k| k as f64 / 6.0).collect();
        PointGrid::new(vec![axis.clone(), axis]).unwrap()
    }

    #[test]
    fn constant_is_fixed() {
        let g = grid();
        let v = vec![2.5; g.len()];
        assert_eq!(sup_convolution(&g, &v, 0.1).unwrap(), v);
        assert_eq!(inf_convolution(&g, &v, 0.1).unwrap(), v);
    }

    #[test]
    fn ordering_and_duality() {
        let g = grid();
        let v: Vec<f64> = (0..g.len())
            .map(|i| {
                let p = g.point(i);
                (3.0 * p[0]).sin() * (p[1] - 0.4).abs()
            })
            .collect();
        let up = sup_convolution(&g, &v, 0.05).unwrap();
        let down = inf_convolution(&g, &v, 0.05).unwrap();
        for k in 0..v.len() {
            assert!(up[k] >= v[k] && down[k] <= v[k]);
        }
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let dual: Vec<f64> = sup_convolution(&g, &neg, 0.05).unwrap().iter().map(|x| -x).collect();
        assert_eq!(dual, down);
        assert!(midpoint_convexity_defect(&g, &up, 0.05, 1.0) >= -1e-12);
        let neg_down: Vec<f64> = down.iter().map(|x| -x).collect();
        assert!(midpoint_convexity_defect(&g, &neg_down, 0.05, 1.0) >= -1e-12);
    }
}
