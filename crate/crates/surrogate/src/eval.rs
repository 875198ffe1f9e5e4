//! Field metrics and full-sequence autoregressive rollouts.

use crate::model::{ModelError, Stepper};
use nd_core::dataset::{CoordTransform, Trajectory};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::Instant;
use thiserror::Error;

/// Radius (scaled units) of the ball the Hausdorff distance is restricted to.
pub const HAUSDORFF_RADIUS: f64 = 50.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("fields differ in length: {0} vs {1}")]
    Shape(usize, usize),
    #[error("point set empty after radius filtering")]
    EmptySet,
    #[error("trajectory has fewer than two snapshots")]
    ShortTrajectory,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Field = [[f64; 3]];

/// `(1/K) Σ ‖u_i − û_i‖²`.
pub fn mse(u: &Field, u_hat: &Field) -> Result<f64, EvalError> {
    if u.len() != u_hat.len() {
        return Err(EvalError::Shape(u.len(), u_hat.len()));
    }
    if u.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = u
        .iter()
        .zip(u_hat)
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(s / u.len() as f64)
}

/// Largest absolute component error over all nodes.
pub fn err_max(u: &Field, u_hat: &Field) -> Result<f64, EvalError> {
    if u.len() != u_hat.len() {
        return Err(EvalError::Shape(u.len(), u_hat.len()));
    }
    Ok(u.iter()
        .zip(u_hat)
        .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
        .fold(0.0, f64::max))
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Uniform hash grid over a point set for nearest-neighbour distances.
struct HashGrid<'a> {
    points: &'a [[f64; 3]],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> HashGrid<'a> {
    fn new(points: &'a [[f64; 3]]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        let extent = (0..3).map(|k| max[k] - min[k]).fold(0.0, f64::max);
        let cell = if extent > 0.0 {
            extent / (points.len() as f64).cbrt().max(1.0)
        } else {
            1.0
        };
        let mut grid = Self {
            points,
            cell,
            cells: HashMap::new(),
            lo: [i64::MAX; 3],
            hi: [i64::MIN; 3],
        };
        for (i, p) in points.iter().enumerate() {
            let key = grid.key(p);
            for k in 0..3 {
                grid.lo[k] = grid.lo[k].min(key[k]);
                grid.hi[k] = grid.hi[k].max(key[k]);
            }
            grid.cells.entry(key).or_default().push(i as u32);
        }
        grid
    }

    fn key(&self, p: &[f64; 3]) -> [i64; 3] {
        std::array::from_fn(|k| (p[k] / self.cell).floor() as i64)
    }

    /// Distance from `q` to the nearest grid point. Cells in Chebyshev ring
    /// `j` around the query cell are at least `(j − 1)·cell` away, so the
    /// search stops once the best distance is within the next ring's bound.
    fn nearest(&self, q: &[f64; 3]) -> f64 {
        let c = self.key(q);
        // Rings below `first` lie entirely outside the occupied box.
        let first = (0..3)
            .map(|k| (self.lo[k] - c[k]).max(c[k] - self.hi[k]).max(0))
            .max()
            .unwrap_or(0);
        let last = (0..3)
            .map(|k| (c[k] - self.lo[k]).abs().max((self.hi[k] - c[k]).abs()))
            .max()
            .unwrap_or(0);
        let span = |k: usize, ring: i64| (self.lo[k] - c[k]).max(-ring)..=(self.hi[k] - c[k]).min(ring);
        let mut best = f64::INFINITY;
        for ring in first..=last {
            for dx in span(0, ring) {
                for dy in span(1, ring) {
                    for dz in span(2, ring) {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &i in ids {
                                best = best.min(dist2(q, &self.points[i as usize]));
                            }
                        }
                    }
                }
            }
            let reach = ring as f64 * self.cell;
            if best.is_finite() && best <= reach * reach {
                break;
            }
        }
        best.sqrt()
    }
}

fn directed(a: &[[f64; 3]], grid_b: &HashGrid) -> f64 {
    a.iter().map(|p| grid_b.nearest(p)).fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance between the parts of `a` and `b` inside the
/// ball of radius `r` about `center`. `r = ∞` gives the global distance.
pub fn hausdorff_local(a: &[[f64; 3]], b: &[[f64; 3]], center: &[f64; 3], r: f64) -> Result<f64, EvalError> {
    let r2 = r * r;
    let keep = |s: &[[f64; 3]]| -> Vec<[f64; 3]> {
        s.iter()
            .filter(|p| r.is_infinite() || dist2(p, center) <= r2)
            .copied()
            .collect()
    };
    let (fa, fb) = (keep(a), keep(b));
    if fa.is_empty() || fb.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let (ga, gb) = (HashGrid::new(&fa), HashGrid::new(&fb));
    Ok(directed(&fa, &gb).max(directed(&fb, &ga)))
}

/// Anything that maps `(u^t, c^{t+1})` in mm to `u^{t+1}` in mm.
pub trait Predictor {
    fn predict(&mut self, u: &Field, c: &Field) -> Result<Vec<[f64; 3]>, ModelError>;
}

impl Predictor for Stepper {
    fn predict(&mut self, u: &Field, c: &Field) -> Result<Vec<[f64; 3]>, ModelError> {
        self.step(u, c)
    }
}

impl Predictor for &Stepper {
    fn predict(&mut self, u: &Field, c: &Field) -> Result<Vec<[f64; 3]>, ModelError> {
        self.step(u, c)
    }
}

/// Mesh-level data the rollout metrics need.
#[derive(Debug, Clone)]
pub struct EvalGeometry {
    /// Rest vertex positions (mm).
    pub rest: Vec<[f64; 3]>,
    pub coord: CoordTransform,
    /// Hausdorff radius in scaled units.
    pub radius: f64,
}

impl EvalGeometry {
    pub fn new(rest: Vec<[f64; 3]>, coord: CoordTransform) -> Self {
        Self {
            rest,
            coord,
            radius: HAUSDORFF_RADIUS,
        }
    }

    /// Rest centroid of the collision-site nodes (mm).
    pub fn site_center(&self, traj: &Trajectory) -> [f64; 3] {
        let nodes = &traj.site.nodes;
        let mut c = [0.0; 3];
        for &n in nodes {
            for k in 0..3 {
                c[k] += self.rest[n as usize][k];
            }
        }
        c.map(|x| x / nodes.len().max(1) as f64)
    }

    /// Nodes whose rest position lies within the Hausdorff radius of the
    /// site centroid. Membership is fixed at rest so a prediction that
    /// drifts away is still compared node for node.
    pub fn local_nodes(&self, traj: &Trajectory) -> Vec<usize> {
        let center = self.site_center(traj);
        let r = self.coord.to_mm(self.radius);
        (0..self.rest.len())
            .filter(|&i| dist2(&self.rest[i], &center) <= r * r)
            .collect()
    }

    fn deformed(&self, u: &Field, nodes: &[usize]) -> Vec<[f64; 3]> {
        nodes
            .iter()
            .map(|&i| std::array::from_fn(|k| self.rest[i][k] + u[i][k]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub trajectory: String,
    pub scheme_id: u32,
    /// One entry per predicted snapshot.
    pub mse_curve: Vec<f64>,
    pub hausdorff_curve: Vec<f64>,
    pub err_max_curve: Vec<f64>,
    pub l_auto_mse: f64,
    /// mm.
    pub l_auto_hausdorff: f64,
    /// Largest per-step max error (mm).
    pub l_auto_max: f64,
    pub ms_per_step: f64,
    /// The model produced non-finite values; curves stop at that step.
    pub diverged: bool,
}

pub fn to_f64(u: &[[f32; 3]]) -> Vec<[f64; 3]> {
    u.iter().map(|v| v.map(f64::from)).collect()
}

/// Feeds the rest state and the recorded collision sequence, feeding every
/// prediction back as the next input.
pub fn rollout<P: Predictor>(
    model: &mut P,
    traj: &Trajectory,
    geo: &EvalGeometry,
    name: &str,
) -> Result<RolloutReport, EvalError> {
    if traj.steps.len() < 2 {
        return Err(EvalError::ShortTrajectory);
    }
    let local = geo.local_nodes(traj);
    let mut report = RolloutReport {
        trajectory: name.to_string(),
        scheme_id: traj.scheme_id,
        mse_curve: Vec::new(),
        hausdorff_curve: Vec::new(),
        err_max_curve: Vec::new(),
        l_auto_mse: 0.0,
        l_auto_hausdorff: 0.0,
        l_auto_max: 0.0,
        ms_per_step: 0.0,
        diverged: false,
    };
    let mut u = to_f64(&traj.steps[0].u);
    let mut mse_sum = 0.0;
    let mut h_sum = 0.0;
    let mut elapsed = 0.0;
    for step in &traj.steps[1..] {
        let c = to_f64(&step.c.to_dense(traj.n_nodes));
        let t0 = Instant::now();
        let pred = match model.predict(&u, &c) {
            Ok(p) => p,
            Err(ModelError::NonFinite) => {
                report.diverged = true;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        elapsed += t0.elapsed().as_secs_f64() * 1e3;
        let truth = to_f64(&step.u);
        let m = mse(&truth, &pred)?;
        let h = hausdorff_local(&geo.deformed(&truth, &local), &geo.deformed(&pred, &local), &[0.0; 3], f64::INFINITY)?;
        let e = err_max(&truth, &pred)?;
        mse_sum += m;
        h_sum += h;
        report.mse_curve.push(m);
        report.hausdorff_curve.push(h);
        report.err_max_curve.push(e);
        report.l_auto_max = report.l_auto_max.max(e);
        u = pred;
    }
    let n = report.mse_curve.len().max(1) as f64;
    report.l_auto_mse = mse_sum / n;
    report.l_auto_hausdorff = h_sum / n;
    report.ms_per_step = elapsed / n;
    Ok(report)
}

/// Per-step mean with the per-trajectory min/max band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBand {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn mse_band(reports: &[RolloutReport]) -> CurveBand {
    let len = reports.iter().map(|r| r.mse_curve.len()).min().unwrap_or(0);
    let col = |i: usize| reports.iter().map(move |r| r.mse_curve[i]);
    CurveBand {
        mean: (0..len).map(|i| col(i).sum::<f64>() / reports.len() as f64).collect(),
        min: (0..len).map(|i| col(i).fold(f64::INFINITY, f64::min)).collect(),
        max: (0..len).map(|i| col(i).fold(f64::NEG_INFINITY, f64::max)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(xs: impl IntoIterator<Item = f64>) -> MeanStd {
    let v: Vec<f64> = xs.into_iter().collect();
    if v.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    MeanStd { mean, std: var.sqrt() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_values() {
        assert_eq!(mse(&[[0.0; 3]], &[[3.0, 4.0, 0.0]]).unwrap(), 25.0);
        assert_eq!(err_max(&[[0.0; 3]], &[[0.1, -0.4, 0.2]]).unwrap(), 0.4);
        let h = hausdorff_local(&[[0.0; 3]], &[[3.0, 4.0, 0.0]], &[0.0; 3], f64::INFINITY).unwrap();
        assert_eq!(h, 5.0);
        assert!(mse(&[[0.0; 3]], &[]).is_err());
    }

    #[test]
    fn radius_filter() {
        let a = [[0.0; 3], [100.0, 0.0, 0.0]];
        let b = [[1.0, 0.0, 0.0], [0.0, 100.0, 0.0]];
        assert_eq!(hausdorff_local(&a, &b, &[0.0; 3], 10.0).unwrap(), 1.0);
        assert!(hausdorff_local(&a, &b, &[500.0, 0.0, 0.0], 10.0).is_err());
    }

    #[test]
    fn coincident_points() {
        let a = [[1.0, 2.0, 3.0]; 4];
        assert_eq!(hausdorff_local(&a, &a, &[0.0; 3], f64::INFINITY).unwrap(), 0.0);
    }
}
