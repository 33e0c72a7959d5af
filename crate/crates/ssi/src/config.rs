//! Run configuration: one TOML file drives every subcommand.
//!
//! Every key has a default, so an empty file is a valid desk-scale config.
//! Unknown keys are rejected to catch typos, and the SHA-256 hash of the
//! canonical serialization is stamped into every artifact for provenance.

use crate::data::synthetic::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::imitation::{DistillConfig, TargetMode};
use crate::ssl::{CorruptionConfig, PretrainConfig};
use crate::student::{StudentArch, StudentConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::str::FromStr;

fn d_corpus_dir() -> String {
    "corpus".into()
}
fn d_synth_items() -> usize {
    300
}
fn d_synth_users() -> usize {
    500
}
fn d_synth_pools() -> usize {
    2
}
fn d_synth_succ_prob() -> f64 {
    0.85
}
fn d_synth_noise_prob() -> f64 {
    0.05
}
fn d_synth_len_min() -> usize {
    10
}
fn d_synth_len_max() -> usize {
    30
}

/// `[data]`: where the processed corpus lives, plus the generator parameters
/// used by the `synth` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding sessions.jsonl + vocab.json (written by
    /// `prepare`/`synth`, read by everything else). Default "corpus".
    pub corpus_dir: String,
    /// Synthetic corpus: number of items. Default 300.
    pub synth_items: usize,
    /// Synthetic corpus: number of users. Default 500.
    pub synth_users: usize,
    /// Synthetic corpus: persona pools. Default 2.
    pub synth_pools: usize,
    /// Synthetic corpus: Markov successor probability. Default 0.85.
    pub synth_succ_prob: f64,
    /// Synthetic corpus: uniform-noise probability. Default 0.05.
    pub synth_noise_prob: f64,
    /// Synthetic corpus: inclusive session-length range. Defaults 10..=30.
    pub synth_len_min: usize,
    pub synth_len_max: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            corpus_dir: d_corpus_dir(),
            synth_items: d_synth_items(),
            synth_users: d_synth_users(),
            synth_pools: d_synth_pools(),
            synth_succ_prob: d_synth_succ_prob(),
            synth_noise_prob: d_synth_noise_prob(),
            synth_len_min: d_synth_len_min(),
            synth_len_max: d_synth_len_max(),
        }
    }
}

impl DataSection {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec::markov_cycle(
            self.synth_items,
            self.synth_users,
            self.synth_pools,
            self.synth_succ_prob,
            self.synth_noise_prob,
            (self.synth_len_min, self.synth_len_max),
        )
    }
}

/// `[encoder]`: teacher architecture. Desk-scale defaults; the reference
/// scale (8 layers, dim 256) is reachable by overriding keys.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    /// Self-attention layers. Default 2.
    pub num_layers: usize,
    /// Attention heads. Default 4.
    pub num_heads: usize,
    /// Hidden width. Default 64.
    pub hidden_dim: usize,
    /// Feed-forward width. Default 256.
    pub ff_dim: usize,
    /// Maximum sequence length. Default 50.
    pub max_len: usize,
    /// Dropout probability. Default 0.1.
    pub dropout: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 64,
            ff_dim: 256,
            max_len: 50,
            dropout: 0.1,
        }
    }
}

impl EncoderSection {
    pub fn to_encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            hidden_dim: self.hidden_dim,
            ff_dim: self.ff_dim,
            max_len: self.max_len,
            dropout: self.dropout,
            vocab_size,
        }
    }
}

/// `[student]`: lightweight recommender architecture.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    /// "recurrent" or "gated". Default "gated".
    pub arch: String,
    /// Item-embedding / hidden width. Default 64.
    pub embed_dim: usize,
    /// Short-term aggregation window (gated arch). Default 5.
    pub window: usize,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection { arch: "gated".into(), embed_dim: 64, window: 5 }
    }
}

impl StudentSection {
    pub fn to_student_config(&self, vocab_size: usize) -> Result<StudentConfig> {
        Ok(StudentConfig {
            arch: StudentArch::from_str(&self.arch)?,
            embed_dim: self.embed_dim,
            window: self.window,
            vocab_size,
        })
    }
}

/// `[ssl]`: teacher pretraining (cloze + consistency task).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SslSection {
    /// Optimization steps. Default 500.
    pub steps: usize,
    /// Sequences per batch. Default 64.
    pub batch_size: usize,
    /// Adam learning rate. Default 0.001.
    pub lr: f64,
    /// λ on the consistency task (0 = pure cloze). Default 1.0.
    pub task_weight: f64,
    /// Cloze mask proportion ρ. Default 0.2.
    pub mask_prob: f64,
    /// Inclusive corruption n-gram length range. Defaults 2..=4.
    pub gram_min: usize,
    pub gram_max: usize,
    /// Temporal swap probability. Default 0.2.
    pub swap_prob: f64,
    /// Persona replacement probability. Default 0.2.
    pub replace_prob: f64,
}

impl Default for SslSection {
    fn default() -> Self {
        let c = CorruptionConfig::default();
        let p = PretrainConfig::default();
        SslSection {
            steps: p.steps,
            batch_size: p.batch_size,
            lr: p.lr,
            task_weight: p.task_weight,
            mask_prob: p.mask_prob,
            gram_min: c.gram_range.0,
            gram_max: c.gram_range.1,
            swap_prob: c.swap_prob,
            replace_prob: c.replace_prob,
        }
    }
}

impl SslSection {
    pub fn to_pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            task_weight: self.task_weight,
            mask_prob: self.mask_prob,
            corruption: CorruptionConfig {
                gram_range: (self.gram_min, self.gram_max),
                swap_prob: self.swap_prob,
                replace_prob: self.replace_prob,
            },
            seed,
        }
    }
}

/// `[imitation]`: distillation of teachers into the student.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ImitationSection {
    /// Training epochs. Default 10.
    pub epochs: usize,
    /// Steps per epoch. Default 50.
    pub steps_per_epoch: usize,
    /// Instances per batch. Default 64.
    pub batch_size: usize,
    /// Adam learning rate. Default 0.001.
    pub lr: f64,
    /// Prediction-distribution imitation on/off. Default true.
    pub pred_imitation: bool,
    /// Representation imitation on/off. Default true.
    pub repr_imitation: bool,
    /// Teacher view: "bidirectional" or "prefix". Default "bidirectional".
    pub mode: String,
    /// Scale on the 1/λ regularizer. Default 1.0.
    pub reg_coeff: f64,
    /// Keep the parameters with the best validation NDCG@10. Default true.
    pub keep_best: bool,
}

impl Default for ImitationSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        ImitationSection {
            epochs: d.epochs,
            steps_per_epoch: d.steps_per_epoch,
            batch_size: d.batch_size,
            lr: d.lr,
            pred_imitation: d.pred_imitation,
            repr_imitation: d.repr_imitation,
            mode: "bidirectional".into(),
            reg_coeff: d.reg_coeff,
            keep_best: d.keep_best,
        }
    }
}

impl ImitationSection {
    pub fn to_distill_config(&self, seed: u64, eval_seed: u64) -> Result<DistillConfig> {
        Ok(DistillConfig {
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            pred_imitation: self.pred_imitation,
            repr_imitation: self.repr_imitation,
            mode: TargetMode::from_str(&self.mode)?,
            reg_coeff: self.reg_coeff,
            eval_seed,
            keep_best: self.keep_best,
        })
    }
}

/// `[eval]`: ranking evaluation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Seed fixing the 99 sampled negatives per user. Default 17.
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { seed: 17 }
    }
}

/// `[run]`: global run parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Master seed for parameter init and batch sampling. Default 0.
    pub seed: u64,
    /// Worker-thread cap; 0 = all cores. Overridden by SSI_THREADS. Default 0.
    pub threads: usize,
    /// Directory for checkpoints, logs, and manifests. Default "runs".
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, threads: 0, out_dir: "runs".into() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub encoder: EncoderSection,
    pub student: StudentSection,
    pub ssl: SslSection,
    pub imitation: ImitationSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// SHA-256 over the canonical serialization: two configs hash equal iff
    /// every effective value (including defaults) is equal.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_documented_default() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.encoder.num_layers, 2);
        assert_eq!(cfg.ssl.lr, 0.001);
        assert_eq!(cfg.imitation.reg_coeff, 1.0);
    }

    #[test]
    fn partial_overrides_keep_other_defaults() {
        let cfg = RunConfig::parse("[encoder]\nnum_layers = 8\nhidden_dim = 256\n").unwrap();
        assert_eq!(cfg.encoder.num_layers, 8);
        assert_eq!(cfg.encoder.hidden_dim, 256);
        assert_eq!(cfg.encoder.num_heads, 4);
        assert_eq!(cfg.student, StudentSection::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::parse("[encoder]\nnum_layrs = 8\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::parse("[encodr]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_is_stable_and_value_sensitive() {
        let a = RunConfig::default().hash();
        let b = RunConfig::default().hash();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        let c = RunConfig::parse("[run]\nseed = 1\n").unwrap().hash();
        assert_ne!(a, c);
    }

    #[test]
    fn sections_convert_to_module_configs() {
        let cfg = RunConfig::default();
        let enc = cfg.encoder.to_encoder_config(100);
        assert_eq!(enc.vocab_size, 100);
        assert_eq!(enc.max_len, 50);
        let st = cfg.student.to_student_config(100).unwrap();
        assert_eq!(st.arch, StudentArch::Gated);
        let pt = cfg.ssl.to_pretrain_config(7);
        assert_eq!(pt.seed, 7);
        assert_eq!(pt.corruption, CorruptionConfig::default());
        let di = cfg.imitation.to_distill_config(7, cfg.eval.seed).unwrap();
        assert_eq!(di.mode, TargetMode::Bidirectional);
        assert_eq!(di.eval_seed, 17);
        let spec = cfg.data.synthetic_spec();
        assert_eq!(spec.num_items, 300);

        let bad = StudentSection { arch: "transformer".into(), ..Default::default() };
        assert!(bad.to_student_config(10).is_err());
    }

    #[test]
    fn round_trip_through_toml() {
        let cfg = RunConfig::parse("[student]\narch = \"recurrent\"\n[run]\nseed = 42\n").unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }
}
