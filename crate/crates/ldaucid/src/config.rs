//! Experiment configuration: a TOML file with a `[stream]` section naming
//! the domain sequence, optional `[hyper]`, `[model]`, and `[ablation]`
//! sections, and top-level `run_id` / `seed` / `output_dir` keys. Unknown
//! keys and type mismatches are rejected with the offending key and line.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::{IdxDomainPaths, StreamConfig};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::trainer::HyperParams;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    run_id: Option<String>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    stream: RawStream,
    #[serde(default)]
    hyper: RawHyper,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    ablation: RawAblation,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStream {
    kind: String,
    // moons
    rotations_deg: Option<Vec<f64>>,
    noise_sigma: Option<f64>,
    // blobs
    k: Option<usize>,
    means: Option<Vec<Vec<f64>>>,
    shifts: Option<Vec<Vec<f64>>>,
    cov_scale: Option<f64>,
    // idx
    domains: Option<Vec<RawIdxDomain>>,
    // shared
    n_per_domain: Option<usize>,
    n_test: Option<usize>,
    imbalanced: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIdxDomain {
    name: String,
    train_images: PathBuf,
    train_labels: PathBuf,
    test_images: PathBuf,
    test_labels: PathBuf,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHyper {
    lambda: Option<f64>,
    tau: Option<f64>,
    n_b: Option<usize>,
    n_p: Option<usize>,
    l_projections: Option<usize>,
    epochs_source: Option<usize>,
    epochs_adapt: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    encoder: Option<Vec<usize>>,
    classifier_hidden: Option<Vec<usize>>,
    activation: Option<Activation>,
    learning_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAblation {
    disable_buffer: Option<bool>,
    lambda_override: Option<f64>,
    tau_sweep: Option<Vec<f64>>,
    n_b_sweep: Option<Vec<usize>>,
}

/// Network architecture: encoder widths (last entry is the embedding
/// dimension), classifier hidden widths, activation, Adam learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: vec![16, 8],
            classifier_hidden: vec![],
            activation: Activation::Relu,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationConfig {
    pub disable_buffer: bool,
    pub lambda_override: Option<f64>,
    pub tau_sweep: Option<Vec<f64>>,
    pub n_b_sweep: Option<Vec<usize>>,
}

/// A fully validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub stream: StreamConfig,
    pub hyper: HyperParams,
    pub model: ModelConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    /// The hyperparameters a run actually uses, with ablation flags folded
    /// in: `disable_buffer` zeroes the replay budget and `lambda_override`
    /// replaces `lambda`.
    pub fn effective_hyper(&self) -> HyperParams {
        let mut hyper = self.hyper.clone();
        if self.ablation.disable_buffer {
            hyper.n_b = 0;
        }
        if let Some(lambda) = self.ablation.lambda_override {
            hyper.lambda = lambda;
        }
        hyper
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

/// Parses and validates config text (see [`parse_config`]).
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;

    let defaults = HyperParams::default();
    let hyper = HyperParams {
        lambda: raw.hyper.lambda.unwrap_or(defaults.lambda),
        tau: raw.hyper.tau.unwrap_or(defaults.tau),
        n_b: raw.hyper.n_b.unwrap_or(defaults.n_b),
        n_p: raw.hyper.n_p,
        l_projections: raw.hyper.l_projections.unwrap_or(defaults.l_projections),
        epochs_source: raw.hyper.epochs_source.unwrap_or(defaults.epochs_source),
        epochs_adapt: raw.hyper.epochs_adapt.unwrap_or(defaults.epochs_adapt),
        batch_size: raw.hyper.batch_size.unwrap_or(defaults.batch_size),
        seed: raw.hyper.seed.or(raw.seed).unwrap_or(0),
    };
    hyper
        .validate()
        .map_err(|e| Error::Config(format!("hyper: {e}")))?;

    let model_defaults = ModelConfig::default();
    let model = ModelConfig {
        encoder: raw.model.encoder.unwrap_or(model_defaults.encoder),
        classifier_hidden: raw
            .model
            .classifier_hidden
            .unwrap_or(model_defaults.classifier_hidden),
        activation: raw.model.activation.unwrap_or(model_defaults.activation),
        learning_rate: raw
            .model
            .learning_rate
            .unwrap_or(model_defaults.learning_rate),
    };
    if model.learning_rate <= 0.0 {
        return Err(Error::Config("model.learning_rate must be > 0".into()));
    }
    if model.encoder.is_empty() {
        return Err(Error::Config("model.encoder must name at least one width".into()));
    }

    let ablation = AblationConfig {
        disable_buffer: raw.ablation.disable_buffer.unwrap_or(false),
        lambda_override: raw.ablation.lambda_override,
        tau_sweep: raw.ablation.tau_sweep,
        n_b_sweep: raw.ablation.n_b_sweep,
    };
    if let Some(sweep) = &ablation.tau_sweep {
        if sweep.is_empty() {
            return Err(Error::Config("ablation.tau_sweep declared but empty".into()));
        }
        if let Some(bad) = sweep.iter().find(|t| !(0.0..1.0).contains(*t)) {
            return Err(Error::Config(format!(
                "ablation.tau_sweep value {bad} outside [0, 1)"
            )));
        }
    }
    if let Some(sweep) = &ablation.n_b_sweep {
        if sweep.is_empty() {
            return Err(Error::Config("ablation.n_b_sweep declared but empty".into()));
        }
    }
    if let Some(lambda) = ablation.lambda_override {
        if lambda < 0.0 {
            return Err(Error::Config(format!(
                "ablation.lambda_override must be >= 0, got {lambda}"
            )));
        }
    }

    let s = &raw.stream;
    let n_per_domain = s.n_per_domain.unwrap_or(500);
    let n_test = s.n_test.unwrap_or(n_per_domain);
    let imbalanced = s.imbalanced.unwrap_or(false);
    let reject = |field: &str, kind: &str| -> Error {
        Error::Config(format!("stream.{field} does not apply to kind \"{kind}\""))
    };
    let stream = match s.kind.as_str() {
        "moons" => {
            for (name, set) in [
                ("k", s.k.is_some()),
                ("means", s.means.is_some()),
                ("shifts", s.shifts.is_some()),
                ("cov_scale", s.cov_scale.is_some()),
                ("domains", s.domains.is_some()),
            ] {
                if set {
                    return Err(reject(name, "moons"));
                }
            }
            StreamConfig::Moons {
                rotations_deg: s
                    .rotations_deg
                    .clone()
                    .ok_or_else(|| Error::Config("stream.rotations_deg is required for moons".into()))?,
                n_per_domain,
                n_test,
                noise_sigma: s.noise_sigma.unwrap_or(0.15),
                imbalanced,
            }
        }
        "blobs" => {
            for (name, set) in [
                ("rotations_deg", s.rotations_deg.is_some()),
                ("noise_sigma", s.noise_sigma.is_some()),
                ("domains", s.domains.is_some()),
            ] {
                if set {
                    return Err(reject(name, "blobs"));
                }
            }
            StreamConfig::Blobs {
                k: s.k.ok_or_else(|| Error::Config("stream.k is required for blobs".into()))?,
                means: s
                    .means
                    .clone()
                    .ok_or_else(|| Error::Config("stream.means is required for blobs".into()))?,
                shifts: s
                    .shifts
                    .clone()
                    .ok_or_else(|| Error::Config("stream.shifts is required for blobs".into()))?,
                cov_scale: s.cov_scale.unwrap_or(0.5),
                n_per_domain,
                n_test,
                imbalanced,
            }
        }
        "idx" => StreamConfig::Idx {
            domains: s
                .domains
                .clone()
                .ok_or_else(|| Error::Config("stream.domains is required for idx".into()))?
                .into_iter()
                .map(|d| IdxDomainPaths {
                    name: d.name,
                    train_images: d.train_images,
                    train_labels: d.train_labels,
                    test_images: d.test_images,
                    test_labels: d.test_labels,
                })
                .collect(),
            imbalanced,
        },
        other => {
            return Err(Error::Config(format!(
                "stream.kind must be moons, blobs, or idx (got \"{other}\")"
            )))
        }
    };

    let run_id = raw.run_id.unwrap_or_else(|| "run".into());
    let output_dir = raw.output_dir.unwrap_or_else(|| PathBuf::from("out"));
    Ok(ExperimentConfig {
        run_id,
        output_dir,
        stream,
        hyper,
        model,
        ablation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config_str(
            r#"
            seed = 7
            [stream]
            kind = "moons"
            rotations_deg = [0.0, 30.0]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.hyper.lambda, 1.0);
        assert_eq!(cfg.hyper.tau, 0.9);
        assert_eq!(cfg.hyper.n_b, 10);
        assert_eq!(cfg.hyper.l_projections, 64);
        assert_eq!(cfg.hyper.seed, 7);
        assert_eq!(cfg.run_id, "run");
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn tau_out_of_range_is_rejected() {
        let err = parse_config_str(
            r#"
            [stream]
            kind = "moons"
            rotations_deg = [0.0]
            [hyper]
            tau = 1.5
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("tau"), "{err}");
    }

    #[test]
    fn unknown_key_is_named_with_line() {
        let err = parse_config_str(
            r#"
            [stream]
            kind = "moons"
            rotations_deg = [0.0]
            typo_key = 3
            "#,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("typo_key"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn type_mismatch_is_reported() {
        let err = parse_config_str(
            r#"
            [stream]
            kind = "moons"
            rotations_deg = "zero"
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("rotations_deg"), "{err}");
    }

    #[test]
    fn declared_empty_sweep_is_rejected() {
        let err = parse_config_str(
            r#"
            [stream]
            kind = "moons"
            rotations_deg = [0.0]
            [ablation]
            tau_sweep = []
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("tau_sweep"), "{err}");
    }

    #[test]
    fn ablation_flags_fold_into_hyper() {
        let cfg = parse_config_str(
            r#"
            [stream]
            kind = "moons"
            rotations_deg = [0.0, 30.0]
            [ablation]
            disable_buffer = true
            lambda_override = 0.0
            "#,
        )
        .unwrap();
        let hyper = cfg.effective_hyper();
        assert_eq!(hyper.n_b, 0);
        assert_eq!(hyper.lambda, 0.0);
    }

    #[test]
    fn kind_specific_keys_are_enforced() {
        let err = parse_config_str(
            r#"
            [stream]
            kind = "moons"
            rotations_deg = [0.0]
            cov_scale = 0.5
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("cov_scale"), "{err}");

        let cfg = parse_config_str(
            r#"
            [stream]
            kind = "blobs"
            k = 2
            means = [[0.0, 0.0], [1.0, 1.0]]
            shifts = [[0.0, 0.0], [0.5, 0.5]]
            "#,
        )
        .unwrap();
        assert!(matches!(cfg.stream, StreamConfig::Blobs { .. }));
    }
}
