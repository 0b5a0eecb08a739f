//! The full continual adaptation loop: supervised source training, then one
//! time-step per arriving unlabeled domain. Each time-step draws a
//! confidence-filtered pseudo-dataset from the consolidated mixture,
//! minimizes the replay-augmented alignment objective for a fixed number of
//! epochs, refits the mixture, and tops up the replay buffer.
//!
//! The objective per minibatch is the sum of four terms: cross entropy of
//! the classifier head on pseudo-samples, cross entropy of the full model on
//! replayed buffer samples, and the sliced Wasserstein distance from the
//! embedded target batch (and embedded buffer batch) to fresh mixture
//! samples, both scaled by `lambda`. Cross entropy is a per-sample mean, so
//! the SWD terms use the batch-normalized estimator to keep the terms on a
//! common per-sample scale.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::buffer::{select_mof_budgeted, split_budget, ReplayBuffer};
use crate::error::{Error, Result};
use crate::gmm::{
    self, draw_pseudo_dataset, fit_map, fit_map_with_fallback, GmmState, DEFAULT_REG_EPSILON,
};
use crate::matrix::Matrix;
use crate::metrics::MetricsRecord;
use crate::nn::{
    adam_step, backward, classifier_backward, classifier_forward, cross_entropy, forward,
    softmax_rows, AdamState, ModelGrads, ModelParams,
};
use crate::swd::{
    sample_projections, sliced_wasserstein_grad_x_norm, sliced_wasserstein_sq_norm, ProjectionSet,
};
use crate::util::{derive_seed, seeded_rng};

/// Draws used for the mixture-drift diagnostic.
const DRIFT_SAMPLES: usize = 512;
/// Attempt multiplier for pseudo-dataset generation.
const PSEUDO_ATTEMPT_FACTOR: usize = 20;

/// Run hyperparameters. `lambda` trades classification terms against
/// alignment terms; `tau` is the pseudo-label confidence threshold; `n_b`
/// the per-task replay budget; `n_p` the pseudo-set size (`None`: match the
/// current target's size).
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub lambda: f64,
    pub tau: f64,
    pub n_b: usize,
    pub n_p: Option<usize>,
    pub l_projections: usize,
    pub epochs_source: usize,
    pub epochs_adapt: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda: 1.0,
            tau: 0.9,
            n_b: 10,
            n_p: None,
            l_projections: 64,
            epochs_source: 40,
            epochs_adapt: 25,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Invalid(format!(
                "tau must be in [0, 1), got {}",
                self.tau
            )));
        }
        if self.batch_size == 0 || self.l_projections == 0 {
            return Err(Error::Invalid(
                "batch_size and l_projections must be >= 1".into(),
            ));
        }
        if self.n_p == Some(0) {
            return Err(Error::Invalid("n_p must be >= 1 when set".into()));
        }
        Ok(())
    }
}

/// A labeled test split used for per-epoch evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalSpec<'a> {
    pub domain_id: usize,
    pub inputs: &'a Matrix,
    pub labels: &'a [usize],
}

/// Everything the algorithm carries across time-steps.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub model: ModelParams,
    pub gmm: Option<GmmState>,
    pub buffer: ReplayBuffer,
    /// Completed tasks (source included); rows emitted during a task carry
    /// the value at entry.
    pub time_step: usize,
    pub history: Vec<MetricsRecord>,
    pub run_id: String,
    /// Next global epoch index to assign; restorable after a checkpoint load.
    pub global_epoch: usize,
    /// Adam learning rate for every phase.
    pub learning_rate: f64,
}

impl TrainerState {
    pub fn new(model: ModelParams, n_b: usize, run_id: impl Into<String>) -> Result<Self> {
        let k = model.num_classes();
        Ok(TrainerState {
            buffer: ReplayBuffer::new(n_b, k)?,
            model,
            gmm: None,
            time_step: 0,
            history: Vec::new(),
            run_id: run_id.into(),
            global_epoch: 0,
            learning_rate: 1e-3,
        })
    }

    fn check_budget(&self, hyper: &HyperParams) -> Result<()> {
        if self.buffer.per_task_budget() != hyper.n_b {
            return Err(Error::Invalid(format!(
                "buffer was created with per-task budget {} but hyper.n_b is {}",
                self.buffer.per_task_budget(),
                hyper.n_b
            )));
        }
        Ok(())
    }

    /// Supervised empirical risk minimization on the labeled source, then
    /// the initial mixture fit (true labels) and the initial buffer fill.
    pub fn train_source(
        &mut self,
        inputs: &Matrix,
        labels: &[usize],
        evals: &[EvalSpec],
        hyper: &HyperParams,
    ) -> Result<()> {
        hyper.validate()?;
        self.check_budget(hyper)?;
        if self.time_step != 0 {
            return Err(Error::Invalid(format!(
                "source training must run at time_step 0 (currently {})",
                self.time_step
            )));
        }
        let n = inputs.rows();
        let k = self.model.num_classes();
        if labels.len() != n || n == 0 {
            return Err(Error::Shape(format!("{} labels for {n} inputs", labels.len())));
        }
        let mut present = vec![false; k];
        for &y in labels {
            if y >= k {
                return Err(Error::Invalid(format!("label {y} out of range [0, {k})")));
            }
            present[y] = true;
        }
        if let Some(missing) = present.iter().position(|&p| !p) {
            return Err(Error::Invalid(format!(
                "class {missing} absent from the source data; the mixture needs all {k} modes"
            )));
        }

        let mut adam = AdamState::with_learning_rate(&self.model, self.learning_rate);
        let mut shuffle_rng = seeded_rng(hyper.seed, "source-shuffle", 0);
        for _ in 0..hyper.epochs_source {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut shuffle_rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(hyper.batch_size) {
                let batch = inputs.select_rows(chunk);
                let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let cache = forward(&self.model, &batch)?;
                let (ce, dlogits) = cross_entropy(cache.logits(), &batch_labels)?;
                let zeros = Matrix::zeros(batch.rows(), self.model.embedding_dim());
                let grads = backward(&self.model, &cache, &dlogits, &zeros)?;
                adam_step(&mut self.model, &grads, &mut adam)?;
                loss_sum += ce * chunk.len() as f64;
            }
            let loss_total = loss_sum / n as f64;
            let epoch = self.global_epoch;
            self.global_epoch += 1;
            for eval in evals {
                let accuracy = evaluate(&self.model, eval.inputs, eval.labels)?;
                self.history.push(MetricsRecord {
                    run_id: self.run_id.clone(),
                    seed: hyper.seed,
                    time_step: 0,
                    epoch,
                    domain_id: eval.domain_id,
                    accuracy,
                    loss_total,
                    loss_ce_pseudo: 0.0,
                    loss_ce_buffer: 0.0,
                    loss_swd_target: 0.0,
                    loss_swd_buffer: 0.0,
                    swd_current: 0.0,
                    swd_gmm_drift: 0.0,
                });
            }
        }

        let embeddings = forward(&self.model, inputs)?.embeddings().clone();
        let gmm = fit_map(&embeddings, labels, k, DEFAULT_REG_EPSILON)?;

        let mut class_counts = vec![0usize; k];
        for &y in labels {
            class_counts[y] += 1;
        }
        let budgets = split_budget(hyper.n_b, &class_counts);
        let entries = select_mof_budgeted(inputs, &embeddings, labels, &gmm.means, &budgets)?;
        self.buffer.append(entries, 0)?;

        self.gmm = Some(gmm);
        self.time_step = 1;
        Ok(())
    }

    /// One continual adaptation step on an unlabeled target: pseudo-dataset
    /// generation, `epochs_adapt` epochs of the four-term objective, mixture
    /// refit from target pseudo-labels plus buffer labels, buffer top-up.
    pub fn run_time_step(
        &mut self,
        target_inputs: &Matrix,
        evals: &[EvalSpec],
        hyper: &HyperParams,
    ) -> Result<()> {
        hyper.validate()?;
        self.check_budget(hyper)?;
        if self.time_step == 0 || self.gmm.is_none() {
            return Err(Error::Invalid(
                "run_time_step requires a completed source phase".into(),
            ));
        }
        let n = target_inputs.rows();
        if n == 0 {
            return Err(Error::Invalid("target dataset is empty".into()));
        }
        let t = self.time_step;
        let k = self.model.num_classes();
        let gmm = self.gmm.clone().expect("checked above");

        let n_p = hyper.n_p.unwrap_or(n);
        let pseudo = draw_pseudo_dataset(
            &gmm,
            &self.model,
            n_p,
            hyper.tau,
            PSEUDO_ATTEMPT_FACTOR * n_p,
            derive_seed(hyper.seed, "pseudo", t as u64),
        )?;
        if pseudo.len() < pseudo.requested {
            eprintln!(
                "note: time-step {t}: pseudo-set has {} of {} requested samples (tau={})",
                pseudo.len(),
                pseudo.requested,
                hyper.tau
            );
        }

        let proj = sample_projections(
            self.model.embedding_dim(),
            hyper.l_projections,
            derive_seed(hyper.seed, "projections", t as u64),
        )?;

        let diag_seed = derive_seed(hyper.seed, "diag", t as u64);
        let mut adam = AdamState::with_learning_rate(&self.model, self.learning_rate);
        let mut shuffle_rng = seeded_rng(hyper.seed, "adapt-shuffle", t as u64);
        let mut pseudo_rng = seeded_rng(hyper.seed, "pseudo-batch", t as u64);
        let mut gmm_rng = seeded_rng(hyper.seed, "gmm-batch", t as u64);
        let mut buffer_batch_count = 0u64;
        let mut step_records: Vec<MetricsRecord> = Vec::new();

        for _ in 0..hyper.epochs_adapt {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut shuffle_rng);
            let mut sums = LossBreakdown::default();
            for chunk in order.chunks(hyper.batch_size) {
                let m = chunk.len();
                let target_batch = target_inputs.select_rows(chunk);
                let pseudo_idx = draw_indices(pseudo.len(), m, &mut pseudo_rng);
                let pseudo_z = pseudo.z.select_rows(&pseudo_idx);
                let pseudo_labels: Vec<usize> =
                    pseudo_idx.iter().map(|&i| pseudo.labels[i]).collect();
                let buffer_batch = if self.buffer.is_empty() {
                    None
                } else {
                    let seed = derive_seed(
                        hyper.seed,
                        "buffer-batch",
                        (t as u64) << 32 | buffer_batch_count,
                    );
                    buffer_batch_count += 1;
                    // Capped at the buffer size: resampling a small buffer up
                    // to the batch size would put duplicate atoms into the
                    // transport matching, where they draw conflicting
                    // alignment gradients.
                    Some(self.buffer.sample_batch(m.min(self.buffer.len()), seed)?)
                };
                let (gmm_samples, _) = gmm::sample_with_rng(&gmm, m, &mut gmm_rng)?;

                let (breakdown, grads) = adaptation_loss(
                    &self.model,
                    &target_batch,
                    &pseudo_z,
                    &pseudo_labels,
                    buffer_batch
                        .as_ref()
                        .map(|(inputs, labels)| (inputs, labels.as_slice())),
                    &gmm_samples,
                    &proj,
                    hyper.lambda,
                )?;
                adam_step(&mut self.model, &grads, &mut adam)?;
                sums.accumulate(&breakdown, m as f64);
            }
            let means = sums.finish(n as f64);

            // Theorem-style diagnostic: distance between the embedded target
            // set and fresh mixture samples, fixed sampling seed per step.
            let embeddings = forward(&self.model, target_inputs)?.embeddings().clone();
            let (diag_samples, _) = gmm::sample(&gmm, n, diag_seed)?;
            let swd_current = sliced_wasserstein_sq_norm(&embeddings, &diag_samples, &proj)?;

            let epoch = self.global_epoch;
            self.global_epoch += 1;
            for eval in evals {
                let accuracy = evaluate(&self.model, eval.inputs, eval.labels)?;
                step_records.push(MetricsRecord {
                    run_id: self.run_id.clone(),
                    seed: hyper.seed,
                    time_step: t,
                    epoch,
                    domain_id: eval.domain_id,
                    accuracy,
                    loss_total: means.total,
                    loss_ce_pseudo: means.ce_pseudo,
                    loss_ce_buffer: means.ce_buffer,
                    loss_swd_target: means.swd_target,
                    loss_swd_buffer: means.swd_buffer,
                    swd_current,
                    swd_gmm_drift: 0.0, // patched after the refit below
                });
            }
        }

        // Mixture refit. The pool consolidates three sources:
        //  - the step's pseudo-dataset (draws from the previous mixture),
        //    which gives the internal distribution inertia instead of
        //    letting it chase whatever the newest domain looks like;
        //  - adapted target embeddings whose prediction clears the same
        //    confidence threshold used for pseudo-label generation (points
        //    below it would smear the modes exactly where labels are least
        //    reliable; all points when nothing clears tau);
        //  - buffer embeddings with their stored labels.
        let target_pass = forward(&self.model, target_inputs)?;
        let target_emb = target_pass.embeddings().clone();
        let probs = softmax_rows(target_pass.logits());
        let target_labels: Vec<usize> = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
        let confident: Vec<usize> = (0..probs.rows())
            .filter(|&i| probs.at(i, target_labels[i]) > hyper.tau)
            .collect();
        let refit_rows: Vec<usize> = if confident.is_empty() {
            (0..target_emb.rows()).collect()
        } else {
            confident
        };
        let mut rows: Vec<Vec<f64>> = pseudo.z.iter_rows().map(<[f64]>::to_vec).collect();
        let mut labels: Vec<usize> = pseudo.labels.clone();
        rows.extend(refit_rows.iter().map(|&i| target_emb.row(i).to_vec()));
        labels.extend(refit_rows.iter().map(|&i| target_labels[i]));
        if !self.buffer.is_empty() {
            let (buf_inputs, buf_labels) = buffer_contents(&self.buffer);
            let buf_emb = forward(&self.model, &buf_inputs)?.embeddings().clone();
            rows.extend(buf_emb.iter_rows().map(<[f64]>::to_vec));
            labels.extend(buf_labels);
        }
        let refit_emb = Matrix::from_rows(&rows)?;
        let new_gmm =
            fit_map_with_fallback(&refit_emb, &labels, k, DEFAULT_REG_EPSILON, &gmm)?;

        // Drift of the internal distribution caused by this refit; the same
        // sampling seed on both sides makes an unchanged mixture read 0.
        let drift_seed = derive_seed(hyper.seed, "gmm-drift", 0);
        let (old_samples, _) = gmm::sample(&gmm, DRIFT_SAMPLES, drift_seed)?;
        let (new_samples, _) = gmm::sample(&new_gmm, DRIFT_SAMPLES, drift_seed)?;
        let drift = sliced_wasserstein_sq_norm(&old_samples, &new_samples, &proj)?;
        for r in &mut step_records {
            r.swd_gmm_drift = drift;
        }
        self.history.append(&mut step_records);

        let mut class_counts = vec![0usize; k];
        for &y in &target_labels {
            class_counts[y] += 1;
        }
        let budgets = split_budget(hyper.n_b, &class_counts);
        let entries = select_mof_budgeted(
            target_inputs,
            &target_emb,
            &target_labels,
            &new_gmm.means,
            &budgets,
        )?;
        self.buffer.append(entries, t)?;

        self.gmm = Some(new_gmm);
        self.time_step += 1;
        Ok(())
    }
}

/// Stacks buffer entries into a batch.
fn buffer_contents(buffer: &ReplayBuffer) -> (Matrix, Vec<usize>) {
    let rows: Vec<Vec<f64>> = buffer.entries().iter().map(|e| e.input.clone()).collect();
    let labels = buffer.entries().iter().map(|e| e.pseudo_label).collect();
    (
        Matrix::from_rows(&rows).expect("buffer entries share a width"),
        labels,
    )
}

/// `m` indices into `0..len`: without replacement when possible.
fn draw_indices(len: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if m <= len {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(rng);
        idx.truncate(m);
        idx
    } else {
        (0..m).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Argmax class per row of the full model's logits (first index on ties).
pub fn predict_labels(model: &ModelParams, inputs: &Matrix) -> Result<Vec<usize>> {
    let logits = forward(model, inputs)?.logits().clone();
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of argmax-correct predictions on a labeled evaluation set.
pub fn evaluate(model: &ModelParams, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
    if inputs.rows() == 0 {
        return Err(Error::Invalid("cannot evaluate on an empty set".into()));
    }
    if labels.len() != inputs.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            inputs.rows()
        )));
    }
    let predicted = predict_labels(model, inputs)?;
    let correct = predicted
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Loss components of the adaptation objective. The SWD terms are already
/// scaled by `lambda`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_pseudo: f64,
    pub ce_buffer: f64,
    pub swd_target: f64,
    pub swd_buffer: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.total += other.total * weight;
        self.ce_pseudo += other.ce_pseudo * weight;
        self.ce_buffer += other.ce_buffer * weight;
        self.swd_target += other.swd_target * weight;
        self.swd_buffer += other.swd_buffer * weight;
    }

    fn finish(mut self, total_weight: f64) -> LossBreakdown {
        self.total /= total_weight;
        self.ce_pseudo /= total_weight;
        self.ce_buffer /= total_weight;
        self.swd_target /= total_weight;
        self.swd_buffer /= total_weight;
        self
    }
}

/// The four-term minibatch objective and its parameter gradient:
/// (i) head cross entropy on pseudo-samples, (ii) full-model cross entropy
/// on buffer samples, (iii) `lambda` x SWD(embedded target, mixture
/// samples), (iv) `lambda` x SWD(embedded buffer, mixture samples). Buffer
/// terms drop out when `buffer_batch` is `None`.
#[allow(clippy::too_many_arguments)]
pub fn adaptation_loss(
    model: &ModelParams,
    target_batch: &Matrix,
    pseudo_z: &Matrix,
    pseudo_labels: &[usize],
    buffer_batch: Option<(&Matrix, &[usize])>,
    gmm_samples: &Matrix,
    proj: &ProjectionSet,
    lambda: f64,
) -> Result<(LossBreakdown, ModelGrads)> {
    if target_batch.rows() == 0 || pseudo_z.rows() == 0 {
        return Err(Error::Invalid(
            "target and pseudo batches must be nonempty".into(),
        ));
    }
    if lambda > 0.0 && gmm_samples.rows() != target_batch.rows() {
        return Err(Error::Invalid(format!(
            "mixture batch ({} rows) must match target batch ({} rows)",
            gmm_samples.rows(),
            target_batch.rows()
        )));
    }
    let mut grads = ModelGrads::zeros_like(model);
    let mut breakdown = LossBreakdown::default();

    // (i) pseudo-samples through the head only; no encoder gradient.
    let head = classifier_forward(model, pseudo_z)?;
    let (ce_pseudo, dlogits) = cross_entropy(head.logits(), pseudo_labels)?;
    let (clf_grads, _) = classifier_backward(model, &head, &dlogits)?;
    let mut pseudo_grads = ModelGrads::zeros_like(model);
    pseudo_grads.classifier = clf_grads;
    grads.add_assign(&pseudo_grads);
    breakdown.ce_pseudo = ce_pseudo;

    // (iii) align embedded target batch to the mixture samples.
    let target_cache = forward(model, target_batch)?;
    let mut d_emb = Matrix::zeros(target_batch.rows(), model.embedding_dim());
    let mut swd_target = 0.0;
    if lambda > 0.0 {
        swd_target =
            lambda * sliced_wasserstein_sq_norm(target_cache.embeddings(), gmm_samples, proj)?;
        d_emb = sliced_wasserstein_grad_x_norm(target_cache.embeddings(), gmm_samples, proj)?;
        for v in d_emb.data_mut() {
            *v *= lambda;
        }
    }
    let zero_logits = Matrix::zeros(target_batch.rows(), model.num_classes());
    grads.add_assign(&backward(model, &target_cache, &zero_logits, &d_emb)?);
    breakdown.swd_target = swd_target;

    // (ii) + (iv) replayed buffer samples: cross entropy through the full
    // model and alignment of their embeddings, in one backward pass. A
    // buffer batch smaller than the mixture batch compares against an
    // equal-size prefix of the mixture samples (they are i.i.d.).
    if let Some((buf_inputs, buf_labels)) = buffer_batch {
        if buf_inputs.rows() > 0 {
            let cache = forward(model, buf_inputs)?;
            let (ce_buffer, dlogits) = cross_entropy(cache.logits(), buf_labels)?;
            let mut d_emb = Matrix::zeros(buf_inputs.rows(), model.embedding_dim());
            let mut swd_buffer = 0.0;
            if lambda > 0.0 {
                if gmm_samples.rows() < buf_inputs.rows() {
                    return Err(Error::Invalid(format!(
                        "mixture batch ({} rows) is smaller than the buffer batch ({} rows)",
                        gmm_samples.rows(),
                        buf_inputs.rows()
                    )));
                }
                let gmm_for_buffer = if gmm_samples.rows() == buf_inputs.rows() {
                    gmm_samples.clone()
                } else {
                    gmm_samples.select_rows(&(0..buf_inputs.rows()).collect::<Vec<_>>())
                };
                swd_buffer = lambda
                    * sliced_wasserstein_sq_norm(cache.embeddings(), &gmm_for_buffer, proj)?;
                d_emb =
                    sliced_wasserstein_grad_x_norm(cache.embeddings(), &gmm_for_buffer, proj)?;
                for v in d_emb.data_mut() {
                    *v *= lambda;
                }
            }
            grads.add_assign(&backward(model, &cache, &dlogits, &d_emb)?);
            breakdown.ce_buffer = ce_buffer;
            breakdown.swd_buffer = swd_buffer;
        }
    }

    breakdown.total =
        breakdown.ce_pseudo + breakdown.ce_buffer + breakdown.swd_target + breakdown.swd_buffer;
    Ok((breakdown, grads))
}

/// The measurable generalization-bound terms: the sliced distance between
/// the embedded target set and fresh mixture samples, and the drift between
/// the previous mixture's sample set and the current one. Drawing both
/// sample sets with the same `seed` makes an unchanged mixture read exactly
/// zero drift.
pub fn bound_diagnostics(
    model: &ModelParams,
    gmm: &GmmState,
    target_inputs: &Matrix,
    previous_gmm_samples: &Matrix,
    proj: &ProjectionSet,
    seed: u64,
) -> Result<(f64, f64)> {
    let embeddings = forward(model, target_inputs)?.embeddings().clone();
    let (current_for_target, _) = gmm::sample(gmm, target_inputs.rows(), seed)?;
    let swd_current = sliced_wasserstein_sq_norm(&embeddings, &current_for_target, proj)?;
    let (current_for_drift, _) = gmm::sample(gmm, previous_gmm_samples.rows(), seed)?;
    let swd_gmm_drift =
        sliced_wasserstein_sq_norm(previous_gmm_samples, &current_for_drift, proj)?;
    Ok((swd_current, swd_gmm_drift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_blobs, gen_two_moons, make_task_stream, StreamConfig};
    use crate::nn::Activation;

    fn blob_domain(shift: &[f64], n: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let means = Matrix::from_rows(&[vec![-2.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let d = gen_gaussian_blobs(2, n, &means, 0.4, shift, seed).unwrap();
        let labels = d.labels.clone().unwrap();
        (d.inputs, labels)
    }

    fn small_hyper(seed: u64, n_b: usize) -> HyperParams {
        HyperParams {
            epochs_source: 12,
            epochs_adapt: 8,
            batch_size: 32,
            l_projections: 32,
            n_b,
            seed,
            ..HyperParams::default()
        }
    }

    fn fresh_state(seed: u64, n_b: usize) -> TrainerState {
        let mut rng = seeded_rng(seed, "model-init", 0);
        let model = ModelParams::random(2, &[16, 8], &[], 2, Activation::Relu, &mut rng).unwrap();
        TrainerState::new(model, n_b, "test").unwrap()
    }

    #[test]
    fn source_training_separates_linear_blobs() {
        // Oracle: the blobs are linearly separable by construction — the
        // hand-built classifier sign(x0) scores 1.0.
        let (inputs, labels) = blob_domain(&[0.0, 0.0], 400, 1);
        let hand_correct = inputs
            .iter_rows()
            .zip(&labels)
            .filter(|(r, &y)| (r[0] > 0.0) == (y == 1))
            .count();
        assert_eq!(hand_correct, 400);

        let mut state = fresh_state(7, 10);
        state
            .train_source(&inputs, &labels, &[], &small_hyper(7, 10))
            .unwrap();
        let acc = evaluate(&state.model, &inputs, &labels).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
        assert!(state.gmm.is_some());
        assert_eq!(state.time_step, 1);
    }

    #[test]
    fn zero_source_epochs_leave_model_unchanged_but_fit_gmm() {
        let (inputs, labels) = blob_domain(&[0.0, 0.0], 100, 2);
        let mut state = fresh_state(8, 4);
        let before = state.model.clone();
        let hyper = HyperParams {
            epochs_source: 0,
            ..small_hyper(8, 4)
        };
        state.train_source(&inputs, &labels, &[], &hyper).unwrap();
        assert_eq!(state.model, before);
        state.gmm.as_ref().unwrap().validate().unwrap();
        assert!(state.history.is_empty());
    }

    #[test]
    fn source_buffer_respects_budget_arithmetic() {
        let (inputs, labels) = blob_domain(&[0.0, 0.0], 100, 3);
        let mut state = fresh_state(9, 10);
        state
            .train_source(&inputs, &labels, &[], &small_hyper(9, 10))
            .unwrap();
        // n_b=10, two well-populated classes -> 5 + 5
        assert_eq!(state.buffer.len(), 10);

        // availability-limited: 100 points, budget 300 -> all stored
        let mut state = fresh_state(9, 300);
        state
            .train_source(&inputs, &labels, &[], &small_hyper(9, 300))
            .unwrap();
        assert_eq!(state.buffer.len(), 100);
    }

    #[test]
    fn source_training_rejects_missing_class() {
        let (inputs, mut labels) = blob_domain(&[0.0, 0.0], 60, 4);
        labels.fill(0);
        let mut state = fresh_state(10, 4);
        let err = state.train_source(&inputs, &labels, &[], &small_hyper(10, 4));
        assert!(matches!(err, Err(Error::Invalid(_))));
    }

    fn adaptation_fixture() -> (TrainerState, Matrix, HyperParams) {
        let (inputs, labels) = blob_domain(&[0.0, 0.0], 240, 5);
        let hyper = small_hyper(11, 10);
        let mut state = fresh_state(11, 10);
        state.train_source(&inputs, &labels, &[], &hyper).unwrap();
        let (target, _) = blob_domain(&[0.6, 0.3], 240, 6);
        (state, target, hyper)
    }

    #[test]
    fn lambda_zero_reduces_to_cross_entropy_terms() {
        let (state, target, hyper) = adaptation_fixture();
        let gmm = state.gmm.as_ref().unwrap();
        let (gmm_samples, _) = gmm::sample(gmm, 32, 1).unwrap();
        let pseudo = draw_pseudo_dataset(gmm, &state.model, 32, 0.0, 640, 2).unwrap();
        let proj = sample_projections(state.model.embedding_dim(), 16, 3).unwrap();
        let (buf_inputs, buf_labels) = buffer_contents(&state.buffer);
        let target_batch = target.select_rows(&(0..32).collect::<Vec<_>>());
        let buf_batch = buf_inputs.select_rows(&(0..10).collect::<Vec<_>>());
        let buf_batch_labels = &buf_labels[..10];

        let (breakdown, _) = adaptation_loss(
            &state.model,
            &target_batch,
            &pseudo.z,
            &pseudo.labels,
            Some((&buf_batch, buf_batch_labels)),
            &gmm_samples,
            &proj,
            0.0,
        )
        .unwrap();
        assert_eq!(breakdown.swd_target, 0.0);
        assert_eq!(breakdown.swd_buffer, 0.0);
        assert!(
            (breakdown.total - breakdown.ce_pseudo - breakdown.ce_buffer).abs() < 1e-15
        );
        let _ = hyper;
    }

    #[test]
    fn alignment_term_vanishes_when_target_matches_samples() {
        let (state, target, _) = adaptation_fixture();
        let gmm = state.gmm.as_ref().unwrap();
        let pseudo = draw_pseudo_dataset(gmm, &state.model, 16, 0.0, 320, 2).unwrap();
        let proj = sample_projections(state.model.embedding_dim(), 16, 3).unwrap();
        let target_batch = target.select_rows(&(0..16).collect::<Vec<_>>());
        // Use the target's own embeddings as the comparison set.
        let emb = forward(&state.model, &target_batch).unwrap().embeddings().clone();
        let (breakdown, _) = adaptation_loss(
            &state.model,
            &target_batch,
            &pseudo.z,
            &pseudo.labels,
            None,
            &emb,
            &proj,
            1.0,
        )
        .unwrap();
        assert_eq!(breakdown.swd_target, 0.0);
        assert_eq!(breakdown.ce_buffer, 0.0);
    }

    #[test]
    fn adaptation_gradient_matches_finite_differences() {
        let (mut state, target, _) = adaptation_fixture();
        let gmm = state.gmm.clone().unwrap();
        let (gmm_samples, _) = gmm::sample(&gmm, 24, 4).unwrap();
        let pseudo = draw_pseudo_dataset(&gmm, &state.model, 24, 0.0, 480, 5).unwrap();
        let proj = sample_projections(state.model.embedding_dim(), 24, 6).unwrap();
        let (buf_inputs, buf_labels) = buffer_contents(&state.buffer);
        let buf_batch = {
            let idx: Vec<usize> = (0..24).map(|i| i % buf_inputs.rows()).collect();
            buf_inputs.select_rows(&idx)
        };
        let buf_batch_labels: Vec<usize> =
            (0..24).map(|i| buf_labels[i % buf_labels.len()]).collect();
        let target_batch = target.select_rows(&(0..24).collect::<Vec<_>>());

        let loss_of = |m: &ModelParams| {
            adaptation_loss(
                m,
                &target_batch,
                &pseudo.z,
                &pseudo.labels,
                Some((&buf_batch, buf_batch_labels.as_slice())),
                &gmm_samples,
                &proj,
                1.0,
            )
            .unwrap()
            .0
            .total
        };
        let (_, grads) = adaptation_loss(
            &state.model,
            &target_batch,
            &pseudo.z,
            &pseudo.labels,
            Some((&buf_batch, buf_batch_labels.as_slice())),
            &gmm_samples,
            &proj,
            1.0,
        )
        .unwrap();

        fn slot(m: &mut ModelParams, enc: bool, layer: usize, r: usize, c: usize) -> &mut f64 {
            if enc {
                m.encoder_layers[layer].weight.at_mut(r, c)
            } else {
                m.classifier_layers[layer].weight.at_mut(r, c)
            }
        }

        let h = 1e-5;
        let probes = [
            (true, 0usize, 3usize, 1usize),
            (true, 1, 2, 7),
            (false, 0, 1, 5),
            (false, 0, 0, 0),
        ];
        for (enc, layer, r, c) in probes {
            let analytic = if enc {
                grads.encoder[layer].0.at(r, c)
            } else {
                grads.classifier[layer].0.at(r, c)
            };
            let orig = *slot(&mut state.model, enc, layer, r, c);
            *slot(&mut state.model, enc, layer, r, c) = orig + h;
            let lp = loss_of(&state.model);
            *slot(&mut state.model, enc, layer, r, c) = orig - h;
            let lm = loss_of(&state.model);
            *slot(&mut state.model, enc, layer, r, c) = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "enc={enc} layer={layer} ({r},{c}): rel {rel}");
        }
    }

    #[test]
    fn zero_adaptation_epochs_update_gmm_and_buffer_only() {
        let (mut state, target, hyper) = adaptation_fixture();
        let model_before = state.model.clone();
        let gmm_before = state.gmm.clone().unwrap();
        let buffer_before = state.buffer.len();
        let hyper = HyperParams {
            epochs_adapt: 0,
            ..hyper
        };
        state.run_time_step(&target, &[], &hyper).unwrap();
        assert_eq!(state.model, model_before);
        assert_ne!(state.gmm.as_ref().unwrap(), &gmm_before);
        assert!(state.buffer.len() > buffer_before);
        assert_eq!(state.time_step, 2);
    }

    #[test]
    fn time_step_aborts_when_no_pseudo_sample_clears_tau() {
        let (mut state, target, hyper) = adaptation_fixture();
        // Collapse the classifier so every softmax is uniform: max prob 0.5.
        for layer in &mut state.model.classifier_layers {
            for v in layer.weight.data_mut() {
                *v = 0.0;
            }
            for v in &mut layer.bias {
                *v = 0.0;
            }
        }
        let hyper = HyperParams {
            tau: 0.95,
            ..hyper
        };
        match state.run_time_step(&target, &[], &hyper) {
            Err(Error::PseudoSetEmpty { .. }) => {}
            other => panic!("expected pseudo-set empty, got {other:?}"),
        }
    }

    #[test]
    fn self_adaptation_keeps_accuracy() {
        // Adapting to the source itself must not cost more than 2 points.
        let (inputs, labels) = blob_domain(&[0.0, 0.0], 300, 21);
        let hyper = small_hyper(21, 10);
        let mut state = fresh_state(21, 10);
        state.train_source(&inputs, &labels, &[], &hyper).unwrap();
        let before = evaluate(&state.model, &inputs, &labels).unwrap();
        state.run_time_step(&inputs, &[], &hyper).unwrap();
        let after = evaluate(&state.model, &inputs, &labels).unwrap();
        assert!(
            after >= before - 0.02,
            "self-adaptation dropped accuracy {before} -> {after}"
        );
    }

    #[test]
    fn rotating_moons_adaptation_beats_source_only() {
        let mut wins = 0;
        for seed in 0..5u64 {
            let src = gen_two_moons(300, 0.12, 0.0, derive_seed(seed, "m-src", 0)).unwrap();
            let tgt = gen_two_moons(300, 0.12, 30.0, derive_seed(seed, "m-tgt", 0)).unwrap();
            let tgt_labels = tgt.labels.clone().unwrap();
            let hyper = HyperParams {
                epochs_source: 30,
                epochs_adapt: 15,
                batch_size: 32,
                l_projections: 32,
                seed,
                ..HyperParams::default()
            };
            let mut rng = seeded_rng(seed, "model-init", 1);
            let model =
                ModelParams::random(2, &[16, 8], &[], 2, Activation::Relu, &mut rng).unwrap();
            let mut state = TrainerState::new(model, 10, "moons").unwrap();
            state
                .train_source(&src.inputs, src.labels.as_ref().unwrap(), &[], &hyper)
                .unwrap();
            let source_only = evaluate(&state.model, &tgt.inputs, &tgt_labels).unwrap();
            state.run_time_step(&tgt.inputs, &[], &hyper).unwrap();
            let adapted = evaluate(&state.model, &tgt.inputs, &tgt_labels).unwrap();
            if adapted > source_only {
                wins += 1;
            }
        }
        assert!(wins >= 4, "adaptation beat source-only in only {wins}/5 seeds");
    }

    #[test]
    fn evaluate_constant_and_perfect_predictors() {
        // constant-class model on a balanced set -> 0.5
        let clf = crate::nn::Layer::new(
            Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap(),
            vec![1.0, 0.0],
            Activation::Identity,
        )
        .unwrap();
        let constant = ModelParams::new(vec![], vec![clf]).unwrap();
        let inputs = Matrix::from_rows(&[vec![-1.0], vec![-2.0], vec![-3.0], vec![-4.0]]).unwrap();
        let labels = [0usize, 0, 1, 1];
        let acc = evaluate(&constant, &inputs, &labels).unwrap();
        assert_eq!(acc, 0.5);

        // identity model classifying by sign -> 1.0 on its own labels
        let clf = crate::nn::Layer::new(
            Matrix::from_rows(&[vec![-1.0], vec![1.0]]).unwrap(),
            vec![0.0, 0.0],
            Activation::Identity,
        )
        .unwrap();
        let perfect = ModelParams::new(vec![], vec![clf]).unwrap();
        let labels = [0usize, 0, 0, 0];
        assert_eq!(evaluate(&perfect, &inputs, &labels).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_matches_hand_count() {
        let clf = crate::nn::Layer::new(
            Matrix::from_rows(&[vec![-1.0], vec![1.0]]).unwrap(),
            vec![0.0, 0.0],
            Activation::Identity,
        )
        .unwrap();
        let model = ModelParams::new(vec![], vec![clf]).unwrap();
        let inputs = Matrix::from_rows(
            &(0..10).map(|i| vec![i as f64 - 4.5]).collect::<Vec<_>>(),
        )
        .unwrap();
        // sign classifier predicts 0 for the five negatives, 1 for the rest;
        // this label vector agrees on exactly 7 of 10 points.
        let labels = [0usize, 0, 0, 1, 1, 1, 1, 1, 0, 1];
        assert_eq!(evaluate(&model, &inputs, &labels).unwrap(), 0.7);
        assert!(evaluate(&model, &Matrix::zeros(0, 1), &[]).is_err());
    }

    #[test]
    fn diagnostics_zero_drift_for_unchanged_mixture() {
        let (state, target, _) = adaptation_fixture();
        let gmm = state.gmm.as_ref().unwrap();
        let proj = sample_projections(state.model.embedding_dim(), 16, 1).unwrap();
        let (prev_samples, _) = gmm::sample(gmm, 64, 123).unwrap();
        let (swd_current, drift) =
            bound_diagnostics(&state.model, gmm, &target, &prev_samples, &proj, 123).unwrap();
        assert_eq!(drift, 0.0);
        assert!(swd_current >= 0.0);
    }

    #[test]
    fn histories_are_deterministic_per_seed() {
        let config = StreamConfig::Moons {
            rotations_deg: vec![0.0, 40.0],
            n_per_domain: 120,
            n_test: 80,
            noise_sigma: 0.12,
            imbalanced: false,
        };
        let run = || {
            let stream = make_task_stream(&config, 33).unwrap();
            let hyper = HyperParams {
                epochs_source: 6,
                epochs_adapt: 4,
                batch_size: 32,
                l_projections: 16,
                tau: 0.5, // 6 source epochs leave the head short of 0.9 confidence
                seed: 33,
                ..HyperParams::default()
            };
            let mut rng = seeded_rng(33, "model-init", 2);
            let model =
                ModelParams::random(2, &[8, 4], &[], 2, Activation::Relu, &mut rng).unwrap();
            let mut state = TrainerState::new(model, 10, "det").unwrap();
            let src_test = &stream.source.test;
            let evals = [EvalSpec {
                domain_id: 0,
                inputs: &src_test.inputs,
                labels: src_test.labels.as_ref().unwrap(),
            }];
            state
                .train_source(
                    &stream.source.train.inputs,
                    stream.source.train.labels.as_ref().unwrap(),
                    &evals,
                    &hyper,
                )
                .unwrap();
            state
                .run_time_step(&stream.targets[0].train.inputs, &evals, &hyper)
                .unwrap();
            state.history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn state_invariants_hold_after_each_step() {
        let (mut state, target, hyper) = adaptation_fixture();
        state.run_time_step(&target, &[], &hyper).unwrap();
        state.gmm.as_ref().unwrap().validate().unwrap();
        // per-task totals within budget
        for task in 0..state.time_step {
            let total = state
                .buffer
                .entries()
                .iter()
                .filter(|e| e.source_task == task)
                .count();
            assert!(total <= hyper.n_b);
        }
    }
}
