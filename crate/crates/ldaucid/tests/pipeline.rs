//! End-to-end integration: checkpoint resume equivalence, jumpstart on the
//! synthetic streams, and the shipped example configs.

use ldaucid::checkpoint::{read_checkpoint, write_checkpoint};
use ldaucid::config::parse_config;
use ldaucid::data::{make_task_stream, StreamConfig};
use ldaucid::nn::{Activation, ModelParams};
use ldaucid::trainer::{evaluate, HyperParams, TrainerState};
use ldaucid::util::seeded_rng;

fn moons_stream() -> StreamConfig {
    StreamConfig::Moons {
        rotations_deg: vec![0.0, 30.0, 60.0],
        n_per_domain: 200,
        n_test: 150,
        noise_sigma: 0.15,
        imbalanced: false,
    }
}

fn hyper(seed: u64) -> HyperParams {
    HyperParams {
        epochs_source: 15,
        epochs_adapt: 5,
        batch_size: 32,
        l_projections: 32,
        tau: 0.7,
        seed,
        ..HyperParams::default()
    }
}

fn fresh_state(stream_k: usize, d: usize, seed: u64) -> TrainerState {
    let mut rng = seeded_rng(seed, "model-init", 0);
    let model =
        ModelParams::random(d, &[16, 8], &[], stream_k, Activation::Relu, &mut rng).unwrap();
    TrainerState::new(model, 10, "pipeline").unwrap()
}

/// A stream interrupted by a checkpoint after the first target continues to
/// exactly the state an uninterrupted run reaches.
#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let h = hyper(5);
    let stream = make_task_stream(&moons_stream(), h.seed).unwrap();
    let source_labels = stream.source.train.labels.as_ref().unwrap();

    let mut straight = fresh_state(stream.k, stream.d, h.seed);
    straight
        .train_source(&stream.source.train.inputs, source_labels, &[], &h)
        .unwrap();
    straight
        .run_time_step(&stream.targets[0].train.inputs, &[], &h)
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("step1.bin");
    write_checkpoint(&straight, &ckpt).unwrap();

    straight
        .run_time_step(&stream.targets[1].train.inputs, &[], &h)
        .unwrap();

    let mut resumed = read_checkpoint(&ckpt, "pipeline").unwrap();
    resumed
        .run_time_step(&stream.targets[1].train.inputs, &[], &h)
        .unwrap();

    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.gmm, straight.gmm);
    assert_eq!(resumed.buffer, straight.buffer);
    assert_eq!(resumed.time_step, straight.time_step);
}

/// Arriving domains start well above chance: cross-domain similarity gives a
/// jumpstart before any adaptation on the new domain happens.
#[test]
fn jumpstart_exceeds_chance_by_ten_points() {
    let blobs = StreamConfig::Blobs {
        k: 3,
        means: vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 3.0]],
        shifts: vec![vec![0.0, 0.0], vec![1.5, 0.75], vec![3.0, 1.5]],
        cov_scale: 0.6,
        n_per_domain: 300,
        n_test: 300,
        imbalanced: false,
    };
    for seed in 0..3u64 {
        let h = HyperParams {
            epochs_source: 25,
            epochs_adapt: 10,
            batch_size: 32,
            l_projections: 32,
            seed,
            ..HyperParams::default()
        };
        let stream = make_task_stream(&blobs, seed).unwrap();
        let chance = 1.0 / stream.k as f64;
        let mut state = fresh_state(stream.k, stream.d, seed);
        state
            .train_source(
                &stream.source.train.inputs,
                stream.source.train.labels.as_ref().unwrap(),
                &[],
                &h,
            )
            .unwrap();
        for t in 1..=stream.targets.len() {
            let test = stream.test_split(t);
            let arrival =
                evaluate(&state.model, &test.inputs, test.labels.as_ref().unwrap()).unwrap();
            assert!(
                arrival >= chance + 0.10,
                "seed {seed}: domain {t} arrived at {arrival:.3}, chance {chance:.3}"
            );
            state
                .run_time_step(&stream.targets[t - 1].train.inputs, &[], &h)
                .unwrap();
        }
    }

    // First moons target likewise arrives far above the 1/2 chance level.
    let h = hyper(1);
    let stream = make_task_stream(&moons_stream(), h.seed).unwrap();
    let mut state = fresh_state(stream.k, stream.d, h.seed);
    state
        .train_source(
            &stream.source.train.inputs,
            stream.source.train.labels.as_ref().unwrap(),
            &[],
            &h,
        )
        .unwrap();
    let test = stream.test_split(1);
    let arrival = evaluate(&state.model, &test.inputs, test.labels.as_ref().unwrap()).unwrap();
    assert!(arrival >= 0.60, "moons target 1 arrived at {arrival:.3}");
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .parent()
        .unwrap()
        .parent()
        .unwrap();
    for name in ["moons.toml", "blobs.toml", "moons_ablate.toml"] {
        let cfg = parse_config(&root.join("configs").join(name))
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.hyper.validate().unwrap();
    }
}
