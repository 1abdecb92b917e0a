//! Empirical laws and 2-Wasserstein distances between particle clouds.

use crate::error::{Error, Result};

/// Largest cloud accepted by [`w2_exact_small`].
pub const SMALL_MATCHING_LIMIT: usize = 64;

/// A weighted particle cloud in R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalLaw {
    points: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
    mean: Vec<f64>,
    second_moment: f64,
}

impl EmpiricalLaw {
    /// Uniformly weighted cloud from a row-major buffer of `len / dim` points.
    pub fn from_flat(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot hold points of dimension {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        let mut law = Self { points, weights: vec![1.0 / n as f64; n], dim, mean: vec![], second_moment: 0.0 };
        law.refresh_moments();
        Ok(law)
    }

    fn refresh_moments(&mut self) {
        let (mean, second) = compute_moments(&self.points, &self.weights, self.dim);
        self.mean = mean;
        self.second_moment = second;
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::Shape("points have differing dimensions".into()));
        }
        Self::from_flat(points.concat(), dim)
    }

    /// One-dimensional cloud.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::from_flat(values.to_vec(), 1)
    }

    pub fn with_weights(points: Vec<f64>, dim: usize, weights: Vec<f64>) -> Result<Self> {
        let mut law = Self::from_flat(points, dim)?;
        if weights.len() != law.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} points",
                weights.len(),
                law.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter("weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("weights sum to {total}, expected 1")));
        }
        law.weights = weights;
        law.refresh_moments();
        Ok(law)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|x| (x - w).abs() <= 1e-15)
    }

    /// Weighted mean, cached at construction.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn mean_component(&self, c: usize) -> f64 {
        self.mean[c]
    }

    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// Cloud of the components `range` of every point.
    pub fn marginal(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.dim || range.is_empty() {
            return Err(Error::Shape(format!("marginal {range:?} of a {}-dimensional law", self.dim)));
        }
        let points = (0..self.len()).flat_map(|i| self.point(i)[range.clone()].to_vec()).collect();
        let mut law = Self::from_flat(points, range.len())?;
        law.weights = self.weights.clone();
        law.refresh_moments();
        Ok(law)
    }
}

fn compute_moments(points: &[f64], weights: &[f64], dim: usize) -> (Vec<f64>, f64) {
    let mut mean = vec![0.0; dim];
    let mut second = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let p = &points[i * dim..(i + 1) * dim];
        for (m, x) in mean.iter_mut().zip(p) {
            *m += w * x;
        }
        second += w * p.iter().map(|x| x * x).sum::<f64>();
    }
    (mean, second)
}

/// Weighted mean vector and weighted mean of |x|².
pub fn moments(a: &EmpiricalLaw) -> (Vec<f64>, f64) {
    (a.mean.clone(), a.second_moment)
}

fn check_same_shape(a: &EmpiricalLaw, b: &EmpiricalLaw) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::Shape(format!("dimensions {} and {}", a.dim, b.dim)));
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!("point counts {} and {}", a.len(), b.len())));
    }
    Ok(())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Root-mean-square distance of the index-wise coupling, an upper bound on W₂.
///
/// With `paired = false` the clouds are still coupled by index; the flag only
/// records that the caller knows the pairing to be meaningful.
pub fn w2_coupled_bound(a: &EmpiricalLaw, b: &EmpiricalLaw, paired: bool) -> Result<f64> {
    let _ = paired;
    check_same_shape(a, b)?;
    let ms: f64 = (0..a.len())
        .map(|i| a.weights[i] * sq_dist(a.point(i), b.point(i)))
        .sum();
    Ok(ms.max(0.0).sqrt())
}

/// Exact W₂ between two uniform one-dimensional clouds via order statistics.
pub fn w2_exact_1d(a: &EmpiricalLaw, b: &EmpiricalLaw) -> Result<f64> {
    if a.dim != 1 || b.dim != 1 {
        return Err(Error::UnsupportedDimension(format!(
            "sorted coupling needs d = 1, got {} and {}",
            a.dim, b.dim
        )));
    }
    check_same_shape(a, b)?;
    if !a.is_uniform() || !b.is_uniform() {
        return Err(Error::InvalidParameter("sorted coupling needs uniform weights".into()));
    }
    let mut xs = a.points.clone();
    let mut ys = b.points.clone();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let ms = xs.iter().zip(&ys).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / xs.len() as f64;
    Ok(ms.sqrt())
}

/// Exact W₂ between two uniform clouds of at most 64 points by optimal matching.
pub fn w2_exact_small(a: &EmpiricalLaw, b: &EmpiricalLaw) -> Result<f64> {
    check_same_shape(a, b)?;
    // Fixed argument order keeps the result bit-identical under swapping.
    let (a, b) = if a.points.iter().zip(&b.points).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne())
        == Some(std::cmp::Ordering::Greater)
    {
        (b, a)
    } else {
        (a, b)
    };
    let n = a.len();
    if n > SMALL_MATCHING_LIMIT {
        return Err(Error::TooLarge(format!(
            "{n} points exceed the matching limit of {SMALL_MATCHING_LIMIT}; use w2_coupled_bound"
        )));
    }
    if !a.is_uniform() || !b.is_uniform() {
        return Err(Error::InvalidParameter("matching needs uniform weights".into()));
    }
    let cost: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(a.point(i), b.point(j)))
        .collect();
    let assignment = min_cost_assignment(&cost, n);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

/// Hungarian algorithm with potentials on a dense `n × n` cost matrix.
/// Returns the column assigned to each row.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}
