//! Exact Wasserstein-1 between equal-size empirical clouds, and the
//! closed-form shift-size bounds for the three experiment families.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    L2,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        }
    }
}

/// Equal-weight point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    points: Vec<Vec<f64>>,
    metric: Metric,
}

impl EmpiricalDistribution {
    pub fn new(points: Vec<Vec<f64>>, metric: Metric) -> Result<Self> {
        let dim = points.first().map(Vec::len).ok_or_else(|| Error::Shape("empty point cloud".into()))?;
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::Shape("points must share a positive dimension".into()));
        }
        Ok(EmpiricalDistribution { points, metric })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `assignment[i]` is the target point matched to source point `i`.
    pub assignment: Vec<usize>,
    pub cost: f64,
}

impl TransportPlan {
    /// Short hex digest of the assignment.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &j in &self.assignment {
            h.update((j as u64).to_le_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// JSON-facing summary of one distance computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W1Record {
    pub distance: f64,
    pub metric: Metric,
    pub n_points: usize,
    pub plan_checksum: String,
}

pub fn cost_matrix(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> Vec<Vec<f64>> {
    p.points
        .iter()
        .map(|a| q.points.iter().map(|b| p.metric.distance(a, b)).collect())
        .collect()
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with row/column potentials, O(n^3)). Returns the column of each row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("assignment needs a square cost matrix".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Domain("non-finite cost".into()));
    }
    // 1-based: index 0 is a virtual column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Exact empirical W1: the cheapest average matched-pair distance.
pub fn w1_exact(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> Result<(f64, TransportPlan)> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("cloud sizes differ: {} vs {}", p.len(), q.len())));
    }
    if p.dim() != q.dim() {
        return Err(Error::Shape(format!("dimensions differ: {} vs {}", p.dim(), q.dim())));
    }
    if p.metric != q.metric {
        return Err(Error::Shape("clouds use different metrics".into()));
    }
    let cost = cost_matrix(p, q);
    let assignment = min_cost_assignment(&cost)?;
    // Summed in row order so the result does not depend on solver internals.
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    let d = total / p.len() as f64;
    Ok((d, TransportPlan { assignment, cost: d }))
}

pub fn w1_record(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> Result<W1Record> {
    let (distance, plan) = w1_exact(p, q)?;
    Ok(W1Record { distance, metric: p.metric, n_points: p.len(), plan_checksum: plan.checksum() })
}

/// Largest distance between any source and any target point.
pub fn max_cross_distance(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> f64 {
    cost_matrix(p, q).into_iter().flatten().fold(0.0, f64::max)
}

/// Interval shift: `4 (i + 0.5)` under the L1 metric on 4-vectors.
pub fn w1_bound_interval(i: u32) -> f64 {
    4.0 * (i as f64 + 0.5)
}

/// Per-coordinate spread of the latent values times the square root of the
/// prompt dimension.
pub fn permutation_diameter(h: usize, n: usize) -> f64 {
    4.0 * (((h + 1) * n + 1) as f64).sqrt()
}

/// Permutation shift: `D_max · r / (1 + r)`.
pub fn w1_bound_permutation(ratio: f64, h: usize, n: usize) -> f64 {
    permutation_diameter(h, n) * ratio / (1.0 + ratio)
}

/// Scaling shift: `2 δ sqrt(dim)`.
pub fn w1_bound_scaling(delta: f64, dim: usize) -> f64 {
    2.0 * delta * (dim as f64).sqrt()
}
