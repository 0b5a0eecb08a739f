//! Mean-of-features sample selection and the cumulative replay memory.
//!
//! Each task contributes at most `n_b` entries, split across classes; the
//! buffer only ever grows, and stored entries are never relabeled or
//! mutated.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::util::seeded_rng;

/// One stored replay sample in input space.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub input: Vec<f64>,
    pub pseudo_label: usize,
    /// Stamped by [`ReplayBuffer::append`]; selection leaves it at 0.
    pub source_task: usize,
    pub distance_to_mean: f64,
}

/// Cumulative replay store with a per-task budget of `n_b` entries and a
/// per-(task, class) cap derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    entries: Vec<BufferEntry>,
    per_task_budget: usize,
    num_classes: usize,
}

impl ReplayBuffer {
    pub fn new(per_task_budget: usize, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Invalid("buffer needs num_classes >= 1".into()));
        }
        Ok(ReplayBuffer {
            entries: Vec::new(),
            per_task_budget,
            num_classes,
        })
    }

    /// Rebuilds a buffer from stored parts (checkpoint load), re-validating
    /// the per-task and per-class budgets.
    pub fn from_parts(
        entries: Vec<BufferEntry>,
        per_task_budget: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let mut buffer = ReplayBuffer::new(per_task_budget, num_classes)?;
        let mut tasks: Vec<usize> = entries.iter().map(|e| e.source_task).collect();
        tasks.sort_unstable();
        tasks.dedup();
        for task in tasks {
            let group: Vec<BufferEntry> = entries
                .iter()
                .filter(|e| e.source_task == task)
                .cloned()
                .collect();
            buffer.append(group, task)?;
        }
        Ok(buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn per_task_budget(&self) -> usize {
        self.per_task_budget
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Uniform per-class cap `floor(n_b / k)`, plus one slot when the budget
    /// does not divide evenly (the remainder rule hands those slots out).
    fn per_class_cap(&self) -> usize {
        let base = self.per_task_budget / self.num_classes;
        if self.per_task_budget.is_multiple_of(self.num_classes) {
            base
        } else {
            base + 1
        }
    }

    /// Appends a task's selected entries, stamping `task_id`. Prior entries
    /// are untouched; budget violations are rejected.
    pub fn append(&mut self, new_entries: Vec<BufferEntry>, task_id: usize) -> Result<()> {
        let existing_for_task = self
            .entries
            .iter()
            .filter(|e| e.source_task == task_id)
            .count();
        if existing_for_task + new_entries.len() > self.per_task_budget {
            return Err(Error::Invalid(format!(
                "appending {} entries exceeds task {task_id} budget {} ({} already stored)",
                new_entries.len(),
                self.per_task_budget,
                existing_for_task
            )));
        }
        let cap = self.per_class_cap();
        let mut class_counts = vec![0usize; self.num_classes];
        for e in self.entries.iter().filter(|e| e.source_task == task_id) {
            class_counts[e.pseudo_label] += 1;
        }
        for e in &new_entries {
            if e.pseudo_label >= self.num_classes {
                return Err(Error::Invalid(format!(
                    "entry label {} out of range [0, {})",
                    e.pseudo_label, self.num_classes
                )));
            }
            class_counts[e.pseudo_label] += 1;
            if class_counts[e.pseudo_label] > cap {
                return Err(Error::Invalid(format!(
                    "class {} exceeds per-class cap {cap} for task {task_id}",
                    e.pseudo_label
                )));
            }
        }
        for mut e in new_entries {
            e.source_task = task_id;
            self.entries.push(e);
        }
        Ok(())
    }

    /// Draws `m` entries: without replacement when `m <= len`, with
    /// replacement otherwise. Deterministic per seed.
    pub fn sample_batch(&self, m: usize, seed: u64) -> Result<(Matrix, Vec<usize>)> {
        if self.entries.is_empty() {
            return Err(Error::Invalid("cannot sample from an empty buffer".into()));
        }
        let mut rng = seeded_rng(seed, "buffer-batch", 0);
        let indices: Vec<usize> = if m <= self.entries.len() {
            let mut idx: Vec<usize> = (0..self.entries.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(m);
            idx
        } else {
            (0..m)
                .map(|_| rng.random_range(0..self.entries.len()))
                .collect()
        };
        let d = self.entries[0].input.len();
        let mut inputs = Matrix::zeros(indices.len(), d);
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            inputs.row_mut(row).copy_from_slice(&self.entries[i].input);
            labels.push(self.entries[i].pseudo_label);
        }
        Ok((inputs, labels))
    }
}

/// Splits a task budget `n_b` over `k` classes: everyone gets
/// `floor(n_b / k)`, and the remainder goes one slot at a time to the
/// classes with the most candidates (ties to the lower class id).
pub fn split_budget(n_b: usize, class_counts: &[usize]) -> Vec<usize> {
    let k = class_counts.len();
    if k == 0 {
        return Vec::new();
    }
    let base = n_b / k;
    let remainder = n_b % k;
    let mut budgets = vec![base; k];
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| class_counts[b].cmp(&class_counts[a]).then(a.cmp(&b)));
    for &j in order.iter().take(remainder) {
        budgets[j] += 1;
    }
    budgets
}

/// Per class, the entries whose embeddings lie closest to that class mean
/// (squared Euclidean), up to `m_b` per class; ties break on original index.
pub fn select_mof(
    inputs: &Matrix,
    embeddings: &Matrix,
    pseudo_labels: &[usize],
    means: &Matrix,
    m_b: usize,
) -> Result<Vec<BufferEntry>> {
    let budgets = vec![m_b; means.rows()];
    select_mof_budgeted(inputs, embeddings, pseudo_labels, means, &budgets)
}

/// As [`select_mof`] with an explicit per-class budget vector (see
/// [`split_budget`] for the remainder rule).
pub fn select_mof_budgeted(
    inputs: &Matrix,
    embeddings: &Matrix,
    pseudo_labels: &[usize],
    means: &Matrix,
    budgets: &[usize],
) -> Result<Vec<BufferEntry>> {
    let n = inputs.rows();
    let k = means.rows();
    if embeddings.rows() != n || pseudo_labels.len() != n {
        return Err(Error::Shape(format!(
            "inputs ({n}), embeddings ({}), labels ({}) must align",
            embeddings.rows(),
            pseudo_labels.len()
        )));
    }
    if embeddings.cols() != means.cols() {
        return Err(Error::Shape(format!(
            "embedding width {} does not match means width {}",
            embeddings.cols(),
            means.cols()
        )));
    }
    if budgets.len() != k {
        return Err(Error::Invalid(format!(
            "{} budgets for {k} classes",
            budgets.len()
        )));
    }
    if let Some(&bad) = pseudo_labels.iter().find(|&&y| y >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range [0, {k})")));
    }

    // (distance, original index) per class, sorted ascending; stable sort
    // keeps the original-index tiebreak.
    let mut per_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); k];
    for (i, &y) in pseudo_labels.iter().enumerate() {
        let d: f64 = embeddings
            .row(i)
            .iter()
            .zip(means.row(y))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        per_class[y].push((d, i));
    }
    let mut selected = Vec::new();
    for (j, mut candidates) in per_class.into_iter().enumerate() {
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(dist, idx) in candidates.iter().take(budgets[j]) {
            selected.push(BufferEntry {
                input: inputs.row(idx).to_vec(),
                pseudo_label: j,
                source_task: 0,
                distance_to_mean: dist,
            });
        }
    }
    Ok(selected)
}
