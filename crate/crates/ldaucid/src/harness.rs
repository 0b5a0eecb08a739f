//! Experiment orchestration: build the task stream, train on the source,
//! adapt through every target in order, and emit metrics, learning curves,
//! and per-step checkpoints under the configured output directory.
//!
//! After every epoch the model is evaluated on the test split of every
//! domain seen so far, which is what gives the learning curves their shape:
//! earlier domains keep accumulating points while later domains join at
//! their first adaptation epoch.

use std::path::Path;

use crate::checkpoint::write_checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{make_task_stream, TaskStream};
use crate::error::{Error, Result};
use crate::metrics::{emit_learning_curves, MetricsRecord, MetricsWriter};
use crate::nn::ModelParams;
use crate::trainer::{EvalSpec, TrainerState};
use crate::util::seeded_rng;

/// Runs one experiment end to end, writing `metrics.csv` (incrementally,
/// after each task phase), `curve_domain<id>.csv` files, and
/// `checkpoint_step<t>.bin` snapshots into the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    run_experiment_inner(config)
        .map_err(|e| e.with_context(format!("run \"{}\"", config.run_id)))
}

fn evals_for(stream: &TaskStream, upto: usize) -> Vec<EvalSpec<'_>> {
    (0..=upto)
        .map(|id| {
            let test = stream.test_split(id);
            EvalSpec {
                domain_id: id,
                inputs: &test.inputs,
                labels: test.labels.as_ref().expect("test splits keep labels"),
            }
        })
        .collect()
}

fn run_experiment_inner(config: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    let hyper = config.effective_hyper();
    hyper.validate()?;
    let stream = make_task_stream(&config.stream, hyper.seed)?;

    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| Error::io(&config.output_dir, e))?;
    let mut writer = MetricsWriter::create(&config.output_dir.join("metrics.csv"))?;

    let mut rng = seeded_rng(hyper.seed, "model-init", 0);
    let model = ModelParams::random(
        stream.d,
        &config.model.encoder,
        &config.model.classifier_hidden,
        stream.k,
        config.model.activation,
        &mut rng,
    )?;
    let mut state = TrainerState::new(model, hyper.n_b, config.run_id.clone())?;
    state.learning_rate = config.model.learning_rate;

    let mut flushed = 0usize;
    let flush = |state: &TrainerState, writer: &mut MetricsWriter, from: &mut usize| {
        for record in &state.history[*from..] {
            writer.append(record)?;
        }
        *from = state.history.len();
        Ok::<(), Error>(())
    };

    let source = &stream.source.train;
    let labels = source.labels.as_ref().expect("source train is labeled");
    state.train_source(&source.inputs, labels, &evals_for(&stream, 0), &hyper)?;
    flush(&state, &mut writer, &mut flushed)?;
    write_checkpoint(
        &state,
        &config.output_dir.join("checkpoint_step0.bin"),
    )?;

    for t in 1..=stream.targets.len() {
        let target = &stream.targets[t - 1].train;
        state.run_time_step(&target.inputs, &evals_for(&stream, t), &hyper)?;
        flush(&state, &mut writer, &mut flushed)?;
        write_checkpoint(
            &state,
            &config.output_dir.join(format!("checkpoint_step{t}.bin")),
        )?;
    }
    writer.finish()?;

    if !state.history.is_empty() {
        emit_learning_curves(&state.history, &config.output_dir)?;
    }
    Ok(state.history)
}

/// Runs the sweeps declared in `[ablation]`: one full experiment per sweep
/// value, each in its own subdirectory. Returns `(run_id, records)` pairs.
pub fn run_ablation(config: &ExperimentConfig) -> Result<Vec<(String, Vec<MetricsRecord>)>> {
    let tau_sweep = config.ablation.tau_sweep.clone().unwrap_or_default();
    let n_b_sweep = config.ablation.n_b_sweep.clone().unwrap_or_default();
    if tau_sweep.is_empty() && n_b_sweep.is_empty() {
        return Err(Error::Config(
            "ablate needs ablation.tau_sweep and/or ablation.n_b_sweep".into(),
        ));
    }
    let mut results = Vec::new();
    for tau in tau_sweep {
        let mut sub = config.clone();
        sub.hyper.tau = tau;
        sub.run_id = format!("{}_tau{tau}", config.run_id);
        sub.output_dir = config.output_dir.join(format!("tau_{tau}"));
        let records = run_experiment(&sub)?;
        results.push((sub.run_id, records));
    }
    for n_b in n_b_sweep {
        let mut sub = config.clone();
        sub.hyper.n_b = n_b;
        sub.run_id = format!("{}_nb{n_b}", config.run_id);
        sub.output_dir = config.output_dir.join(format!("nb_{n_b}"));
        let records = run_experiment(&sub)?;
        results.push((sub.run_id, records));
    }
    Ok(results)
}

/// Final accuracy of every domain (its last record), for run summaries.
pub fn final_accuracies(records: &[MetricsRecord]) -> Vec<(usize, f64)> {
    let max_domain = match records.iter().map(|r| r.domain_id).max() {
        Some(m) => m,
        None => return Vec::new(),
    };
    (0..=max_domain)
        .filter_map(|id| {
            records
                .iter()
                .rev()
                .find(|r| r.domain_id == id)
                .map(|r| (id, r.accuracy))
        })
        .collect()
}

/// Convenience wrapper: parse a config file, then run it.
pub fn run_config_file(path: &Path) -> Result<Vec<MetricsRecord>> {
    let config = crate::config::parse_config(path)?;
    run_experiment(&config)
}
