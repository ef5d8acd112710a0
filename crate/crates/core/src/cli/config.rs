//! Flat `key=value` run configuration with environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::corpus::{BatchConfig, Task};
use crate::decoding::{DecodeOptions, RemaskRule};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{AdamConfig, LossWeights, ReviewSampling, StepOptions, StopRule, TrainConfig};

/// Prefix for environment overrides: `CMTM_PEAK_LR=1e-3` sets `peak_lr`.
pub const ENV_PREFIX: &str = "CMTM_";

/// Every accepted key with its default and meaning. `-` means unset.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "-", "run seed (required)"),
    ("task", "copy", "copy | reverse | toy_grammar | files"),
    ("train_file", "-", "TSV training pairs (task=files)"),
    ("dev_file", "-", "TSV held-out pairs (task=files)"),
    ("train_pairs", "5000", "synthetic training pairs"),
    ("dev_pairs", "500", "synthetic held-out pairs"),
    ("max_len", "12", "longest synthetic source"),
    ("min_count", "1", "vocabulary frequency cut-off"),
    ("layers", "2", "encoder and decoder layers"),
    ("model_dim", "64", "hidden size"),
    ("ffn_dim", "256", "feed-forward width"),
    ("heads", "4", "attention heads"),
    ("max_source_len", "16", "longest source, without <LEN>"),
    ("max_target_len", "16", "longest target, with <EOS>; also the length classes"),
    ("dropout", "0.0", "dropout rate"),
    ("review_mask_mode", "inclusive", "inclusive | shifted"),
    ("init", "normal", "normal | uniform"),
    ("init_scale", "0.02", "init standard deviation or half-width"),
    ("steps", "10000", "optimiser updates"),
    ("batch_tokens", "512", "padded target tokens per batch"),
    ("mask_eos", "true", "let <EOS> be masked"),
    ("warmup", "500", "warmup steps"),
    ("peak_lr", "0.0005", "learning rate at the end of warmup"),
    ("adam_beta1", "0.9", "Adam first-moment decay"),
    ("adam_beta2", "0.98", "Adam second-moment decay"),
    ("adam_eps", "1e-9", "Adam denominator epsilon"),
    ("w_dec", "1.0", "decoder loss weight"),
    ("w_len", "1.0", "length loss weight"),
    ("w_rev", "1.0", "review loss weight"),
    ("review_sampling", "argmax", "argmax | sample"),
    ("eval_interval", "100", "steps between evaluations (0 = off)"),
    ("eval_examples", "200", "held-out pairs decoded per evaluation"),
    ("iterations", "4", "Mask-Predict iterations T"),
    ("length_beam", "3", "length candidates k"),
    ("remask_threshold", "-", "re-mask below this confidence instead of by count"),
    ("stop_token_accuracy", "-", "stop once token accuracy reaches this (%)"),
    ("stop_exact_match", "-", "stop once exact match reaches this (%)"),
    ("checkpoint_interval", "500", "steps between checkpoints (0 = end only)"),
];

fn is_key(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

/// Parses `key=value` lines; `#` starts a comment line.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            what: "config",
            line: i + 1,
            message: "expected key=value".into(),
        })?;
        let key = key.trim();
        if !is_key(key) {
            return Err(Error::Config {
                key: key.into(),
                message: "unknown key".into(),
            });
        }
        if out.insert(key.to_owned(), value.trim().to_owned()).is_some() {
            return Err(Error::Config {
                key: key.into(),
                message: "given twice".into(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { task: Task, train_pairs: usize, dev_pairs: usize, max_len: usize },
    Files { train: PathBuf, dev: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub min_count: usize,
    /// `vocab_size` is filled in once the vocabulary is built.
    pub train: TrainConfig,
    pub checkpoint_interval: u64,
    values: BTreeMap<String, String>,
}

struct Values(BTreeMap<String, String>);

impl Values {
    fn raw(&self, key: &str) -> &str {
        &self.0[key]
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        self.raw(key).parse().map_err(|_| Error::Config {
            key: key.into(),
            message: format!("cannot parse `{}`", self.raw(key)),
        })
    }

    fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.raw(key) == "-" {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }
}

impl RunConfig {
    /// Resolves file values over defaults, then `CMTM_*` variables from
    /// `env` over both.
    pub fn resolve(file: BTreeMap<String, String>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut values: BTreeMap<String, String> = KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        values.extend(file);
        for (name, value) in env {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                if !is_key(&key) {
                    return Err(Error::Config {
                        key: name,
                        message: "unknown key in environment override".into(),
                    });
                }
                values.insert(key, value.trim().to_owned());
            }
        }
        Self::from_values(values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::resolve(parse_config_text(&text)?, std::env::vars())
    }

    fn from_values(values: BTreeMap<String, String>) -> Result<Self> {
        let v = Values(values);
        if v.raw("seed") == "-" {
            return Err(Error::Config {
                key: "seed".into(),
                message: "seed required".into(),
            });
        }
        let data = match v.raw("task") {
            "files" => {
                let path = |key: &str| -> Result<PathBuf> {
                    let p = PathBuf::from(v.raw(key));
                    if v.raw(key) == "-" || !p.is_file() {
                        return Err(Error::Config {
                            key: key.into(),
                            message: format!("file `{}` not found", v.raw(key)),
                        });
                    }
                    Ok(p)
                };
                DataSource::Files {
                    train: path("train_file")?,
                    dev: path("dev_file")?,
                }
            }
            other => DataSource::Synthetic {
                task: other.parse().map_err(|e: Error| Error::Config {
                    key: "task".into(),
                    message: e.to_string(),
                })?,
                train_pairs: v.get("train_pairs")?,
                dev_pairs: v.get("dev_pairs")?,
                max_len: v.get("max_len")?,
            },
        };
        let mut model = ModelConfig::default();
        for key in [
            "layers",
            "model_dim",
            "ffn_dim",
            "heads",
            "max_source_len",
            "max_target_len",
            "dropout",
            "review_mask_mode",
            "init",
            "init_scale",
        ] {
            model.set_field(key, v.raw(key))?;
        }
        let sampling = match v.raw("review_sampling") {
            "argmax" => ReviewSampling::Argmax,
            "sample" => ReviewSampling::Sample,
            other => {
                return Err(Error::Config {
                    key: "review_sampling".into(),
                    message: format!("expected argmax or sample, got `{other}`"),
                })
            }
        };
        let remask = match v.optional::<f64>("remask_threshold")? {
            Some(t) if (0.0..=1.0).contains(&t) => RemaskRule::Threshold(t),
            Some(t) => {
                return Err(Error::Config {
                    key: "remask_threshold".into(),
                    message: format!("{t} outside [0, 1]"),
                })
            }
            None => RemaskRule::Count,
        };
        let positive = |key: &str| -> Result<usize> {
            let n: usize = v.get(key)?;
            if n == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    message: "must be positive".into(),
                });
            }
            Ok(n)
        };
        let unit = |key: &str| -> Result<f64> {
            let b: f64 = v.get(key)?;
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config {
                    key: key.into(),
                    message: format!("{b} outside [0, 1)"),
                });
            }
            Ok(b)
        };
        let train = TrainConfig {
            batch: BatchConfig {
                batch_tokens: positive("batch_tokens")?,
                max_source_len: model.max_source_len,
                max_target_len: model.max_target_len,
                mask_eos: v.get("mask_eos")?,
            },
            model,
            seed: v.get("seed")?,
            steps: v.get("steps")?,
            warmup: v.get("warmup")?,
            peak_lr: v.get("peak_lr")?,
            adam: AdamConfig {
                beta1: unit("adam_beta1")?,
                beta2: unit("adam_beta2")?,
                eps: match v.get::<f64>("adam_eps")? {
                    e if e > 0.0 && e.is_finite() => e,
                    e => {
                        return Err(Error::Config {
                            key: "adam_eps".into(),
                            message: format!("{e} must be positive"),
                        })
                    }
                },
            },
            step: StepOptions {
                weights: LossWeights {
                    dec: v.get("w_dec")?,
                    len: v.get("w_len")?,
                    rev: v.get("w_rev")?,
                },
                sampling,
                detach_review: true,
            },
            eval_interval: v.get("eval_interval")?,
            eval_examples: v.get("eval_examples")?,
            eval_decode: DecodeOptions {
                iterations: positive("iterations")?,
                length_beam: positive("length_beam")?,
                remask,
                trace: false,
            },
            stop: StopRule {
                token_accuracy: v.optional("stop_token_accuracy")?,
                exact_match: v.optional("stop_exact_match")?,
            },
        };
        Ok(Self {
            data,
            min_count: v.get("min_count")?,
            checkpoint_interval: v.get("checkpoint_interval")?,
            train,
            values: v.0,
        })
    }

    /// Forces the review loss off.
    pub fn ablate_review(&mut self) {
        self.train.step.weights.rev = 0.0;
        self.values.insert("w_rev".into(), "0.0".into());
    }

    pub fn is_ablated(&self) -> bool {
        self.train.step.weights.rev == 0.0
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Every key in table order, resolved.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _, _)| format!("{k}={}\n", self.values[*k]))
            .collect()
    }

    /// First 12 hex digits of the SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir_name(&self) -> String {
        format!("{}-s{}", self.hash(), self.train.seed)
    }
}

/// The `--help` key table.
pub fn key_help() -> String {
    let mut out = String::from("Config keys (key=value; override with CMTM_<KEY>):\n");
    for (k, d, doc) in KEYS {
        out.push_str(&format!("  {k:<22} {d:<10} {doc}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str, env: &[(&str, &str)]) -> Result<RunConfig> {
        RunConfig::resolve(
            parse_config_text(text)?,
            env.iter().map(|(a, b)| (a.to_string(), b.to_string())),
        )
    }

    #[test]
    fn seed_is_required() {
        match resolve("steps=10\n", &[]) {
            Err(Error::Config { key, message }) => {
                assert_eq!(key, "seed");
                assert_eq!(message, "seed required");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_named() {
        match resolve("seed=1\nlearning_rate=3\n", &[]) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "learning_rate"),
            other => panic!("{other:?}"),
        }
        assert!(resolve("seed=1\n", &[("CMTM_BOGUS", "1")]).is_err());
    }

    #[test]
    fn defaults_comments_and_env_overrides() {
        let c = resolve("# desk run\nseed=4\n\npeak_lr = 0.001\n", &[("CMTM_STEPS", "77"), ("HOME", "/x")]).unwrap();
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.train.steps, 77);
        assert_eq!(c.train.peak_lr, 0.001);
        assert_eq!(c.train.model.model_dim, 64);
        assert_eq!(c.train.step.weights, LossWeights::default());
        assert_eq!(c.train.eval_decode.remask, RemaskRule::Count);
        assert!(c.to_text().contains("steps=77\n"));
    }

    #[test]
    fn bad_values_name_their_key() {
        for (text, key) in [
            ("seed=1\nlayers=two\n", "layers"),
            ("seed=1\ntask=translate\n", "task"),
            ("seed=1\nremask_threshold=2\n", "remask_threshold"),
            ("seed=1\ntask=files\ntrain_file=/no/such/file\n", "train_file"),
            ("seed=1\nbatch_tokens=0\n", "batch_tokens"),
            ("seed=1\nadam_beta2=1\n", "adam_beta2"),
            ("seed=1\nadam_eps=0\n", "adam_eps"),
        ] {
            match resolve(text, &[]) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(resolve("seed=1\nnonsense\n", &[]), Err(Error::Parse { line: 2, .. })));
        assert!(resolve("seed=1\nseed=2\n", &[]).is_err());
    }

    #[test]
    fn hash_tracks_every_value() {
        let a = resolve("seed=1\n", &[]).unwrap();
        let b = resolve("seed=1\n", &[]).unwrap();
        let mut c = a.clone();
        c.ablate_review();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
        assert_ne!(a.hash(), c.hash());
        assert!(c.is_ablated());
        assert!(a.run_dir_name().ends_with("-s1"));
    }

    #[test]
    fn help_lists_every_key() {
        let help = key_help();
        for (k, _, _) in KEYS {
            assert!(help.contains(k));
        }
    }
}
