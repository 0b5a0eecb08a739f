//! Class-conditional Gaussian mixture over the embedding space: closed-form
//! MAP estimation from labeled (or pseudo-labeled) embeddings, sampling, a
//! stable log-density, and confidence-filtered pseudo-dataset generation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::nn::{classify_from_embedding, softmax_rows, ModelParams};
use crate::util::seeded_rng;

/// Default relative covariance ridge: each class covariance receives
/// `max(reg_epsilon * trace/p, REG_ABSOLUTE_FLOOR) * I`.
pub const DEFAULT_REG_EPSILON: f64 = 1e-4;
pub const REG_ABSOLUTE_FLOOR: f64 = 1e-6;

/// Per-class mixture weights, means, and covariances of the internal
/// distribution; one component per class.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmState {
    pub weights: Vec<f64>,
    pub means: Matrix,
    pub covariances: Vec<Matrix>,
    pub reg_epsilon: f64,
}

impl GmmState {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn p(&self) -> usize {
        self.means.cols()
    }

    /// Checks the mixture invariants: weights form a probability vector and
    /// every covariance admits a Cholesky factorization.
    pub fn validate(&self) -> Result<()> {
        if self.means.rows() != self.k() || self.covariances.len() != self.k() {
            return Err(Error::Shape("component count mismatch".into()));
        }
        if self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Invalid("negative mixture weight".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("mixture weights sum to {sum}")));
        }
        for (j, cov) in self.covariances.iter().enumerate() {
            if cov.rows() != self.p() || cov.cols() != self.p() {
                return Err(Error::Shape(format!("covariance {j} has wrong shape")));
            }
            cholesky(cov).ok_or(Error::Cholesky { component: j })?;
        }
        Ok(())
    }
}

/// Lower-triangular Cholesky factor, or `None` when the matrix is not
/// positive definite.
pub fn cholesky(m: &Matrix) -> Option<Matrix> {
    let n = m.rows();
    if m.cols() != n {
        return None;
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m.at(i, j);
            for k in 0..j {
                sum -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                *l.at_mut(i, j) = sum.sqrt();
            } else {
                *l.at_mut(i, j) = sum / l.at(j, j);
            }
        }
    }
    Some(l)
}

/// Closed-form MAP estimates per class: weight = class share, mean = class
/// average, covariance = class scatter average plus a relative ridge. Every
/// class must be populated; use [`fit_map_with_fallback`] when a previous
/// mixture can stand in for missing classes.
pub fn fit_map(
    embeddings: &Matrix,
    labels: &[usize],
    k: usize,
    reg_epsilon: f64,
) -> Result<GmmState> {
    fit_map_impl(embeddings, labels, k, reg_epsilon, None)
}

/// As [`fit_map`], but classes with no members retain the previous mixture's
/// component (mean, covariance, and weight, renormalized).
pub fn fit_map_with_fallback(
    embeddings: &Matrix,
    labels: &[usize],
    k: usize,
    reg_epsilon: f64,
    previous: &GmmState,
) -> Result<GmmState> {
    fit_map_impl(embeddings, labels, k, reg_epsilon, Some(previous))
}

fn fit_map_impl(
    embeddings: &Matrix,
    labels: &[usize],
    k: usize,
    reg_epsilon: f64,
    previous: Option<&GmmState>,
) -> Result<GmmState> {
    let n = embeddings.rows();
    let p = embeddings.cols();
    if n == 0 {
        return Err(Error::Invalid("cannot fit a mixture to an empty set".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range [0, {k})")));
    }
    if let Some(prev) = previous {
        if prev.k() != k || prev.p() != p {
            return Err(Error::Shape("fallback mixture shape mismatch".into()));
        }
    }

    let mut counts = vec![0usize; k];
    for &y in labels {
        counts[y] += 1;
    }

    let mut weights = vec![0.0; k];
    let mut means = Matrix::zeros(k, p);
    let mut covariances = vec![Matrix::zeros(p, p); k];

    for (i, &y) in labels.iter().enumerate() {
        let row = embeddings.row(i);
        for (slot, &v) in means.row_mut(y).iter_mut().zip(row) {
            *slot += v;
        }
    }
    for (j, &count) in counts.iter().enumerate() {
        if count > 0 {
            let inv = 1.0 / count as f64;
            for v in means.row_mut(j) {
                *v *= inv;
            }
        }
    }

    for (i, &y) in labels.iter().enumerate() {
        let row = embeddings.row(i);
        let mu = means.row(y).to_vec();
        let cov = &mut covariances[y];
        for a in 0..p {
            let da = row[a] - mu[a];
            let crow = cov.row_mut(a);
            for (b, slot) in crow.iter_mut().enumerate() {
                *slot += da * (row[b] - mu[b]);
            }
        }
    }

    for (j, &count) in counts.iter().enumerate() {
        match count {
            0 => {
                let prev = previous.ok_or_else(|| {
                    Error::Invalid(format!(
                        "class {j} has no members and no fallback mixture was supplied"
                    ))
                })?;
                weights[j] = prev.weights[j];
                means.row_mut(j).copy_from_slice(prev.means.row(j));
                covariances[j] = prev.covariances[j].clone();
            }
            c => {
                weights[j] = c as f64 / n as f64;
                let inv = 1.0 / c as f64;
                for v in covariances[j].data_mut() {
                    *v *= inv;
                }
                let trace: f64 = (0..p).map(|a| covariances[j].at(a, a)).sum();
                let ridge = (reg_epsilon * trace / p as f64).max(REG_ABSOLUTE_FLOOR);
                for a in 0..p {
                    *covariances[j].at_mut(a, a) += ridge;
                }
            }
        }
    }

    // Fallback components keep their old weight; renormalize the vector.
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }

    Ok(GmmState {
        weights,
        means,
        covariances,
        reg_epsilon,
    })
}

/// Draws `n` mixture samples: component by weight, point by
/// `mean + chol(cov) * standard normal`. Deterministic given `seed`.
pub fn sample(gmm: &GmmState, n: usize, seed: u64) -> Result<(Matrix, Vec<usize>)> {
    let mut rng = seeded_rng(seed, "gmm-sample", 0);
    sample_with_rng(gmm, n, &mut rng)
}

pub fn sample_with_rng(
    gmm: &GmmState,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Matrix, Vec<usize>)> {
    let k = gmm.k();
    let p = gmm.p();
    let factors: Vec<Matrix> = gmm
        .covariances
        .iter()
        .enumerate()
        .map(|(j, cov)| cholesky(cov).ok_or(Error::Cholesky { component: j }))
        .collect::<Result<_>>()?;
    let total: f64 = gmm.weights.iter().sum();
    let mut z = Matrix::zeros(n, p);
    let mut component_ids = Vec::with_capacity(n);
    let mut noise = vec![0.0; p];
    for i in 0..n {
        let u: f64 = rng.random_range(0.0..total);
        let mut acc = 0.0;
        let mut j = k - 1;
        for (idx, &w) in gmm.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                j = idx;
                break;
            }
        }
        for v in noise.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let l = &factors[j];
        let mu = gmm.means.row(j);
        let row = z.row_mut(i);
        for a in 0..p {
            let mut v = mu[a];
            for (lv, nv) in l.row(a)[..=a].iter().zip(&noise) {
                v += lv * nv;
            }
            row[a] = v;
        }
        component_ids.push(j);
    }
    Ok((z, component_ids))
}

/// Stable mixture log-density `log sum_j w_j N(z | mu_j, cov_j)`.
pub fn log_density(gmm: &GmmState, z: &[f64]) -> Result<f64> {
    let p = gmm.p();
    if z.len() != p {
        return Err(Error::Shape(format!(
            "point width {} does not match mixture width {p}",
            z.len()
        )));
    }
    let mut terms = Vec::with_capacity(gmm.k());
    for (j, cov) in gmm.covariances.iter().enumerate() {
        let w = gmm.weights[j];
        if w <= 0.0 {
            continue;
        }
        let l = cholesky(cov).ok_or(Error::Cholesky { component: j })?;
        // log det = 2 * sum log L_ii; quadratic form via forward substitution.
        let log_det: f64 = (0..p).map(|a| l.at(a, a).ln()).sum::<f64>() * 2.0;
        let mu = gmm.means.row(j);
        let mut y = vec![0.0; p];
        for a in 0..p {
            let mut v = z[a] - mu[a];
            for (lv, yv) in l.row(a)[..a].iter().zip(&y) {
                v -= lv * yv;
            }
            y[a] = v / l.at(a, a);
        }
        let quad = dot(&y, &y);
        let log_norm = -0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        terms.push(w.ln() + log_norm - 0.5 * quad);
    }
    if terms.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Mixture samples accepted by the classifier at confidence above the
/// generation threshold, labeled by the classifier's argmax.
#[derive(Debug, Clone)]
pub struct PseudoDataset {
    pub z: Matrix,
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    /// Size originally asked for; the accepted set may be smaller.
    pub requested: usize,
}

impl PseudoDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Repeatedly samples the mixture, labels each point with the classifier
/// head, and keeps points whose max softmax probability exceeds `tau`.
/// Stops at `n_target` accepted points or `max_attempts` total draws.
pub fn draw_pseudo_dataset(
    gmm: &GmmState,
    model: &ModelParams,
    n_target: usize,
    tau: f64,
    max_attempts: usize,
    seed: u64,
) -> Result<PseudoDataset> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Invalid(format!("tau must be in [0, 1), got {tau}")));
    }
    if n_target == 0 {
        return Err(Error::Invalid("n_target must be >= 1".into()));
    }
    let p = gmm.p();
    if model.embedding_dim() != p {
        return Err(Error::Shape(format!(
            "mixture width {p} does not match classifier input width {}",
            model.embedding_dim()
        )));
    }
    let mut rng = seeded_rng(seed, "pseudo-dataset", 0);
    let mut accepted_rows: Vec<Vec<f64>> = Vec::with_capacity(n_target);
    let mut labels = Vec::with_capacity(n_target);
    let mut confidence = Vec::with_capacity(n_target);
    let mut attempts = 0usize;
    while accepted_rows.len() < n_target && attempts < max_attempts {
        let chunk = (max_attempts - attempts).min(256);
        let (z, _) = sample_with_rng(gmm, chunk, &mut rng)?;
        let probs = softmax_rows(&classify_from_embedding(model, &z)?);
        for i in 0..chunk {
            attempts += 1;
            let row = probs.row(i);
            let (label, conf) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, &v)| (j, v))
                .expect("k >= 1");
            if conf > tau {
                accepted_rows.push(z.row(i).to_vec());
                labels.push(label);
                confidence.push(conf);
                if accepted_rows.len() == n_target {
                    break;
                }
            }
        }
    }
    if accepted_rows.is_empty() {
        return Err(Error::PseudoSetEmpty { attempts, tau });
    }
    Ok(PseudoDataset {
        z: Matrix::from_rows(&accepted_rows)?,
        labels,
        confidence,
        requested: n_target,
    })
}
