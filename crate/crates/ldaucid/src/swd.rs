//! Sliced Wasserstein distance: random unit projections, the closed-form 1-D
//! transport cost, the empirical squared-distance estimator, its gradient
//! with respect to one sample set, and an exact small-instance oracle.
//!
//! The estimator follows the empirical form
//! `(1/L) * sum_l sum_i |<g_l, x_{s_l[i]}> - <g_l, y_{t_l[i]}>|^2`
//! with `s_l`, `t_l` the per-projection sort orders. Note the inner sum runs
//! over the batch without dividing by it; `sliced_wasserstein_sq_norm`
//! additionally divides by the batch size so the value is batch-size
//! independent.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::util::seeded_rng;

/// A fixed set of unit-norm projection directions (rows).
#[derive(Debug, Clone)]
pub struct ProjectionSet {
    pub directions: Matrix,
    pub seed: u64,
}

impl ProjectionSet {
    pub fn count(&self) -> usize {
        self.directions.rows()
    }

    pub fn dim(&self) -> usize {
        self.directions.cols()
    }
}

/// Draws `l` directions i.i.d. uniform on the unit sphere in `R^p`
/// (normalized standard-normal vectors); deterministic given `seed`.
pub fn sample_projections(p: usize, l: usize, seed: u64) -> Result<ProjectionSet> {
    if p == 0 || l == 0 {
        return Err(Error::Invalid(format!(
            "projection set needs p >= 1 and l >= 1 (got p={p}, l={l})"
        )));
    }
    let mut rng = seeded_rng(seed, "swd-projections", 0);
    let mut directions = Matrix::zeros(l, p);
    for i in 0..l {
        let row = directions.row_mut(i);
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let norm = dot(row, row).sqrt();
            if norm > 1e-12 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
                break;
            }
        }
    }
    Ok(ProjectionSet { directions, seed })
}

/// Closed-form squared 1-D transport cost between equal-size samples:
/// sort both, sum squared differences of the matched order statistics.
pub fn wasserstein1d_sq(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "1-D samples must have equal length ({} vs {}); subsample the larger set",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Invalid("1-D samples must be nonempty".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn check_pair(x: &Matrix, y: &Matrix, proj: &ProjectionSet) -> Result<()> {
    if x.rows() != y.rows() {
        return Err(Error::Invalid(format!(
            "sample sets must have equal row counts ({} vs {}); subsample the larger set",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::Invalid("sample sets must be nonempty".into()));
    }
    if x.cols() != proj.dim() || y.cols() != proj.dim() {
        return Err(Error::Shape(format!(
            "sample width {} / {} does not match projection width {}",
            x.cols(),
            y.cols(),
            proj.dim()
        )));
    }
    Ok(())
}

/// Indices of `vals` in ascending order; stable, so ties keep original order.
fn argsort(vals: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
    idx
}

fn project(x: &Matrix, direction: &[f64]) -> Vec<f64> {
    x.iter_rows().map(|row| dot(row, direction)).collect()
}

/// Empirical squared sliced Wasserstein distance (sum over the batch,
/// averaged over projections).
pub fn sliced_wasserstein_sq(x: &Matrix, y: &Matrix, proj: &ProjectionSet) -> Result<f64> {
    sliced_wasserstein_sq_impl(x, y, proj, false)
}

/// As [`sliced_wasserstein_sq`] but divided by the batch size, making the
/// value independent of how many samples each set carries.
pub fn sliced_wasserstein_sq_norm(x: &Matrix, y: &Matrix, proj: &ProjectionSet) -> Result<f64> {
    sliced_wasserstein_sq_impl(x, y, proj, true)
}

fn sliced_wasserstein_sq_impl(
    x: &Matrix,
    y: &Matrix,
    proj: &ProjectionSet,
    normalize_by_m: bool,
) -> Result<f64> {
    check_pair(x, y, proj)?;
    let l = proj.count();
    let mut total = 0.0;
    for pi in 0..l {
        let direction = proj.directions.row(pi);
        let mut px = project(x, direction);
        let mut py = project(y, direction);
        px.sort_by(f64::total_cmp);
        py.sort_by(f64::total_cmp);
        total += px
            .iter()
            .zip(&py)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    let mut out = total / l as f64;
    if normalize_by_m {
        out /= x.rows() as f64;
    }
    Ok(out)
}

/// Gradient of [`sliced_wasserstein_sq`] with respect to the rows of `x`,
/// holding the per-projection sort matchings fixed:
/// `d/dx_j = (2/L) * sum_l (<g_l, x_j> - <g_l, y_{match(j,l)}>) * g_l`.
pub fn sliced_wasserstein_grad_x(x: &Matrix, y: &Matrix, proj: &ProjectionSet) -> Result<Matrix> {
    sliced_wasserstein_grad_x_impl(x, y, proj, false)
}

/// Gradient of [`sliced_wasserstein_sq_norm`] with respect to the rows of `x`.
pub fn sliced_wasserstein_grad_x_norm(
    x: &Matrix,
    y: &Matrix,
    proj: &ProjectionSet,
) -> Result<Matrix> {
    sliced_wasserstein_grad_x_impl(x, y, proj, true)
}

fn sliced_wasserstein_grad_x_impl(
    x: &Matrix,
    y: &Matrix,
    proj: &ProjectionSet,
    normalize_by_m: bool,
) -> Result<Matrix> {
    check_pair(x, y, proj)?;
    let l = proj.count();
    let m = x.rows();
    let mut grad = Matrix::zeros(m, x.cols());
    let mut scale = 2.0 / l as f64;
    if normalize_by_m {
        scale /= m as f64;
    }
    for pi in 0..l {
        let direction = proj.directions.row(pi);
        let px = project(x, direction);
        let py = project(y, direction);
        let sx = argsort(&px);
        let sy = argsort(&py);
        for (rank, &j) in sx.iter().enumerate() {
            let diff = px[j] - py[sy[rank]];
            let row = grad.row_mut(j);
            for (g, &d) in row.iter_mut().zip(direction) {
                *g += scale * diff * d;
            }
        }
    }
    Ok(grad)
}

/// Maximum instance size the brute-force oracle accepts.
pub const EXACT_WASSERSTEIN_MAX_N: usize = 8;

/// Exact squared 2-Wasserstein distance between uniform empirical measures:
/// `min over permutations pi of (1/n) * sum_i ||x_i - y_{pi(i)}||^2`.
/// Factorial search, refused above `EXACT_WASSERSTEIN_MAX_N`; test oracle.
pub fn exact_wasserstein_sq_small(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::Invalid(format!(
            "sample sets must have equal row counts ({} vs {})",
            x.rows(),
            y.rows()
        )));
    }
    if x.cols() != y.cols() {
        return Err(Error::Shape("sample widths differ".into()));
    }
    let n = x.rows();
    if n == 0 {
        return Err(Error::Invalid("sample sets must be nonempty".into()));
    }
    if n > EXACT_WASSERSTEIN_MAX_N {
        return Err(Error::Invalid(format!(
            "exact oracle refuses n={n} > {EXACT_WASSERSTEIN_MAX_N}"
        )));
    }
    // Pairwise squared costs, then branch-and-bound over assignments.
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = x
                .row(i)
                .iter()
                .zip(y.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
        }
    }
    let mut used = vec![false; n];
    let mut best = f64::INFINITY;
    fn search(i: usize, acc: f64, n: usize, cost: &[f64], used: &mut [bool], best: &mut f64) {
        if acc >= *best {
            return;
        }
        if i == n {
            *best = acc;
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                search(i + 1, acc + cost[i * n + j], n, cost, used, best);
                used[j] = false;
            }
        }
    }
    search(0, 0.0, n, &cost, &mut used, &mut best);
    Ok(best / n as f64)
}
