//! Consistency pretraining: three self-supervised tasks over corrupted
//! sessions (shuffle detection, replaced-gram detection, global/local
//! agreement), each trained jointly with the cloze objective to produce an
//! independent teacher checkpoint.

use crate::data::{
    global_pairs, make_mlm_batch, replace_ngrams, shuffle_ngrams, worker_rng, DatasetSplit,
    InteractionSequence, SkipSample,
};
use crate::encoder::{mlm_loss, with_int_token, Encoder, EncoderConfig, EncoderVars, IntHead};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, Adam, Scalar, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Temporal,
    Persona,
    Global,
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(TaskKind::Temporal),
            "persona" => Ok(TaskKind::Persona),
            "global" => Ok(TaskKind::Global),
            other => Err(Error::Config(format!(
                "unknown task {other:?}; expected temporal, persona, or global"
            ))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Temporal => "temporal",
            TaskKind::Persona => "persona",
            TaskKind::Global => "global",
        })
    }
}

/// One binary consistency sample: a (possibly corrupted) session with a
/// trailing INT token.
#[derive(Debug, Clone)]
pub struct SslSample {
    pub tokens: Vec<u32>,
    pub int_pos: usize,
    /// 1.0 = corrupted (shuffled / contains foreign grams), 0.0 = original.
    pub label: f64,
    /// Corruption log: swap count (temporal) or replacement slots (persona).
    pub log: CorruptionLog,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CorruptionLog {
    Clean,
    Shuffled { swaps: usize },
    Replaced { slots: Vec<(usize, usize, usize)> },
}

/// One global-consistency pair: the session with an n-gram span masked, and
/// that gram as a standalone sequence.
#[derive(Debug, Clone)]
pub struct GlobalPair {
    pub masked: Vec<u32>,
    pub gram: Vec<u32>,
    pub span: (usize, usize),
}

/// Mean BCE of the temporal head over shuffle-detection samples.
pub fn temporal_loss<E: Scalar, R: Rng>(
    vars: &EncoderVars<E>,
    samples: &[SslSample],
    train: bool,
    rng: &mut R,
) -> Var<E> {
    int_head_loss(vars, samples, IntHead::Temporal, train, rng)
}

/// Mean BCE of the persona head over replacement-detection samples.
pub fn persona_loss<E: Scalar, R: Rng>(
    vars: &EncoderVars<E>,
    samples: &[SslSample],
    train: bool,
    rng: &mut R,
) -> Var<E> {
    int_head_loss(vars, samples, IntHead::Persona, train, rng)
}

fn int_head_loss<E: Scalar, R: Rng>(
    vars: &EncoderVars<E>,
    samples: &[SslSample],
    head: IntHead,
    train: bool,
    rng: &mut R,
) -> Var<E> {
    assert!(!samples.is_empty(), "consistency batch must be non-empty");
    let probs: Vec<Var<E>> = samples
        .iter()
        .map(|s| {
            let hidden = vars.encode_one(&s.tokens, train, rng);
            vars.int_prob(&hidden, s.int_pos, head)
        })
        .collect();
    let labels: Vec<E> = samples.iter().map(|s| E::from_f64c(s.label)).collect();
    Var::concat_rows(&probs).bce_mean(&labels)
}

/// InfoNCE agreement between each masked session's global representation and
/// its own gram, against the other pairs' grams as in-batch negatives.
///
/// Representations are last-token hidden states; scores are unnormalized dot
/// products, so the loss is exactly cross-entropy on the B×B score matrix
/// with diagonal targets.
pub fn global_loss<E: Scalar, R: Rng>(
    vars: &EncoderVars<E>,
    pairs: &[GlobalPair],
    train: bool,
    rng: &mut R,
) -> Var<E> {
    assert!(!pairs.is_empty(), "global batch must be non-empty");
    let mut globals = Vec::with_capacity(pairs.len());
    let mut locals = Vec::with_capacity(pairs.len());
    for p in pairs {
        let hg = vars.encode_one(&p.masked, train, rng);
        globals.push(hg.row(p.masked.len() - 1));
        let hl = vars.encode_one(&p.gram, train, rng);
        locals.push(hl.row(p.gram.len() - 1));
    }
    let g = Var::concat_rows(&globals);
    let l = Var::concat_rows(&locals);
    let targets: Vec<usize> = (0..pairs.len()).collect();
    g.matmul_nt(&l).cross_entropy_mean(&targets)
}

/// Corruption parameters shared by sample builders and pretraining.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorruptionConfig {
    /// Inclusive n-gram length range.
    pub gram_range: (usize, usize),
    /// Per-pair swap probability (temporal).
    pub swap_prob: f64,
    /// Per-slot replacement probability (persona).
    pub replace_prob: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig { gram_range: (2, 4), swap_prob: 0.2, replace_prob: 0.2 }
    }
}

const CORRUPT_RETRIES: usize = 20;

/// Build one labeled sample from a sequence: a fair coin picks corrupted vs
/// original, so batches are label-balanced and corrupted/clean samples have
/// identical length distributions.
pub fn make_binary_sample<R: Rng>(
    task: TaskKind,
    seq: &[u32],
    owner: usize,
    donors: &[InteractionSequence],
    cc: &CorruptionConfig,
    max_len: usize,
    rng: &mut R,
) -> std::result::Result<SslSample, SkipSample> {
    let keep = max_len - 1;
    // Random crop for long sequences: every contiguous window is a training
    // view, so the detector must learn the corruption rule rather than
    // memorize a fixed per-user suffix. The crop is drawn before the label
    // coin, so both classes share the same window distribution.
    let start = if seq.len() > keep { rng.gen_range(0..=seq.len() - keep) } else { 0 };
    let view = &seq[start..(start + keep).min(seq.len())];
    let corrupt = rng.gen_range(0.0..1.0f64) < 0.5;
    let (items, label, log) = if !corrupt {
        // Probe feasibility so clean samples come only from sequences that
        // could also have been corrupted (no length leakage).
        match task {
            TaskKind::Temporal if view.len() < 2 * cc.gram_range.0 => return Err(SkipSample),
            TaskKind::Persona if view.len() < cc.gram_range.0 => return Err(SkipSample),
            _ => {}
        }
        (view.to_vec(), 0.0, CorruptionLog::Clean)
    } else {
        let mut found = None;
        for _ in 0..CORRUPT_RETRIES {
            match task {
                TaskKind::Temporal => {
                    let (out, shuffled, swaps) =
                        shuffle_ngrams(view, cc.swap_prob, cc.gram_range, rng)?;
                    if shuffled {
                        found = Some((out, CorruptionLog::Shuffled { swaps }));
                        break;
                    }
                }
                TaskKind::Persona => {
                    let (out, replaced, slots) =
                        replace_ngrams(view, owner, donors, cc.replace_prob, cc.gram_range, rng)?;
                    if replaced {
                        found = Some((out, CorruptionLog::Replaced { slots }));
                        break;
                    }
                }
                TaskKind::Global => panic!("global task has no binary samples"),
            }
        }
        match found {
            Some((out, log)) => (out, 1.0, log),
            None => return Err(SkipSample),
        }
    };
    let (tokens, int_pos) = with_int_token(&items, max_len);
    Ok(SslSample { tokens, int_pos, label, log })
}

/// Draw a batch of binary samples by sampling sequences with replacement.
/// Errors if the corpus cannot produce a single eligible sample.
pub fn make_binary_batch<R: Rng>(
    task: TaskKind,
    sequences: &[InteractionSequence],
    batch_size: usize,
    cc: &CorruptionConfig,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<SslSample>> {
    let mut out = Vec::with_capacity(batch_size);
    let mut attempts = 0;
    while out.len() < batch_size {
        attempts += 1;
        if attempts > batch_size * CORRUPT_RETRIES {
            return Err(Error::Contract(format!(
                "could not build a {task} batch: sequences too short for gram range {:?}",
                cc.gram_range
            )));
        }
        let s = &sequences[rng.gen_range(0..sequences.len())];
        if let Ok(sample) =
            make_binary_sample(task, &s.items, s.user, sequences, cc, max_len, rng)
        {
            out.push(sample);
        }
    }
    Ok(out)
}

/// Draw a batch of masked-session / gram pairs.
pub fn make_global_batch<R: Rng>(
    sequences: &[InteractionSequence],
    batch_size: usize,
    cc: &CorruptionConfig,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<GlobalPair>> {
    let mut out = Vec::with_capacity(batch_size);
    let mut attempts = 0;
    while out.len() < batch_size {
        attempts += 1;
        if attempts > batch_size * CORRUPT_RETRIES {
            return Err(Error::Contract(format!(
                "could not build a global batch: sequences too short for gram range {:?}",
                cc.gram_range
            )));
        }
        let s = &sequences[rng.gen_range(0..sequences.len())];
        let keep = max_len.min(s.items.len());
        let view = &s.items[s.items.len() - keep..];
        if let Ok((masked, gram, span)) = global_pairs(view, cc.gram_range, rng) {
            out.push(GlobalPair { masked, gram, span });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// λ weighting the consistency task against the cloze loss. 0 disables
    /// the task entirely (pure cloze training).
    pub task_weight: f64,
    pub mask_prob: f64,
    pub corruption: CorruptionConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 500,
            batch_size: 64,
            lr: 0.001,
            task_weight: 1.0,
            mask_prob: 0.2,
            corruption: CorruptionConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_mlm: f64,
    pub l_task: f64,
}

/// Training prefixes as owned sequences (user ids preserved for donor
/// exclusion in the persona task).
pub fn train_sequences(split: &DatasetSplit) -> Vec<InteractionSequence> {
    split
        .entries
        .iter()
        .enumerate()
        .map(|(user, e)| InteractionSequence {
            user,
            items: e.prefix.clone(),
            timestamps: None,
        })
        .collect()
}

// Per-step RNG streams. Each purpose gets its own stream so that disabling
// one (e.g. task_weight = 0) leaves the others untouched.
const STREAMS_PER_STEP: u64 = 4;
const STREAM_MLM_DATA: u64 = 0;
const STREAM_TASK_DATA: u64 = 1;
const STREAM_MLM_DROPOUT: u64 = 2;
const STREAM_TASK_DROPOUT: u64 = 3;

/// Joint consistency + cloze pretraining: each step draws one cloze batch
/// and one task batch, combines the losses as L_MLM + λ·L_task, and applies
/// one Adam update.
pub fn pretrain<E: Scalar>(
    task: TaskKind,
    encoder: &mut Encoder<E>,
    train: &[InteractionSequence],
    cfg: &PretrainConfig,
) -> Result<Vec<StepLog>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.task_weight < 0.0 {
        return Err(Error::Contract("task weight must be ≥ 0".into()));
    }
    let max_len = encoder.cfg.max_len;
    let shapes: Vec<Vec<usize>> =
        encoder.named_params().iter().map(|(_, t)| t.shape.clone()).collect();
    let mut adam = Adam::new(cfg.lr, &shapes);
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let stream = |k: u64| worker_rng(cfg.seed, step as u64 * STREAMS_PER_STEP + k);
        let tape = Tape::new();
        let vars = encoder.bind(&tape);

        let mut rng_mlm = stream(STREAM_MLM_DATA);
        let picks: Vec<&[u32]> = (0..cfg.batch_size)
            .map(|_| train[rng_mlm.gen_range(0..train.len())].items.as_slice())
            .collect();
        let mlm_batch = make_mlm_batch(&picks, cfg.mask_prob, max_len, &mut rng_mlm);
        let l_mlm = mlm_loss(&vars, &mlm_batch, true, &mut stream(STREAM_MLM_DROPOUT));

        let (total, task_value) = if cfg.task_weight > 0.0 {
            let mut rng_task = stream(STREAM_TASK_DATA);
            let mut rng_drop = stream(STREAM_TASK_DROPOUT);
            let l_task = match task {
                TaskKind::Temporal | TaskKind::Persona => {
                    let samples = make_binary_batch(
                        task,
                        train,
                        cfg.batch_size,
                        &cfg.corruption,
                        max_len,
                        &mut rng_task,
                    )?;
                    int_head_loss(
                        &vars,
                        &samples,
                        match task {
                            TaskKind::Temporal => IntHead::Temporal,
                            _ => IntHead::Persona,
                        },
                        true,
                        &mut rng_drop,
                    )
                }
                TaskKind::Global => {
                    let pairs = make_global_batch(
                        train,
                        cfg.batch_size,
                        &cfg.corruption,
                        max_len,
                        &mut rng_task,
                    )?;
                    global_loss(&vars, &pairs, true, &mut rng_drop)
                }
            };
            let v = l_task.scalar_value().to_f64c();
            (l_mlm.add(&l_task.scale(E::from_f64c(cfg.task_weight))), v)
        } else {
            (l_mlm.clone(), 0.0)
        };

        let mlm_value = l_mlm.scalar_value().to_f64c();
        if !total.scalar_value().is_finite() {
            return Err(Error::Diverged(format!(
                "{task} pretraining diverged at step {step}: L_MLM={mlm_value}, L_task={task_value}"
            )));
        }
        let grads = tape.backward(&total)?;
        let grad_tensors: Vec<_> = vars.params().iter().map(|v| grads.get_or_zeros(v)).collect();
        let mut params = encoder.named_params_mut();
        let mut slots: Vec<&mut _> = params.iter_mut().map(|(_, t)| &mut **t).collect();
        adam.step(&mut slots, &grad_tensors)?;
        logs.push(StepLog { step, l_mlm: mlm_value, l_task: task_value });
    }
    Ok(logs)
}

/// Fraction of held-out samples whose corruption the trained INT head
/// classifies correctly at threshold 0.5.
pub fn detection_accuracy<E: Scalar, R: Rng>(
    encoder: &Encoder<E>,
    task: TaskKind,
    heldout: &[InteractionSequence],
    num_samples: usize,
    cc: &CorruptionConfig,
    rng: &mut R,
) -> Result<f64> {
    let head = match task {
        TaskKind::Temporal => IntHead::Temporal,
        TaskKind::Persona => IntHead::Persona,
        TaskKind::Global => {
            return Err(Error::Contract("detection accuracy applies to binary tasks only".into()))
        }
    };
    let samples =
        make_binary_batch(task, heldout, num_samples, cc, encoder.cfg.max_len, rng)?;
    let tape = Tape::new();
    let vars = encoder.bind(&tape);
    let mut correct = 0usize;
    let mut eval_rng = worker_rng(0, 0); // eval mode: never consulted
    for s in &samples {
        let hidden = vars.encode_one(&s.tokens, false, &mut eval_rng);
        let p = vars.int_prob(&hidden, s.int_pos, head).scalar_value().to_f64c();
        if (p > 0.5) == (s.label > 0.5) {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

pub const TEACHER_META_FILE: &str = "teacher.json";

/// Checkpoint sidecar describing how a teacher was trained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherMeta {
    pub task: TaskKind,
    pub encoder: EncoderConfig,
    pub config_hash: String,
    pub steps: usize,
    pub final_mlm: f64,
    pub final_task: f64,
}

pub fn save_teacher<E: Scalar>(dir: &Path, encoder: &Encoder<E>, meta: &TeacherMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    checkpoint::save(dir, &encoder.named_params())?;
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(dir.join(TEACHER_META_FILE), json)?;
    Ok(())
}

pub fn load_teacher(dir: &Path) -> Result<(Encoder<f32>, TeacherMeta)> {
    let meta_path = dir.join(TEACHER_META_FILE);
    if !meta_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "no teacher checkpoint at {}",
            dir.display()
        )));
    }
    let meta: TeacherMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
    let mut encoder = Encoder::new(meta.encoder.clone(), &mut worker_rng(0, 0))?;
    checkpoint::load_into(dir, encoder.named_params_mut())?;
    Ok((encoder, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::rebind_with;
    use crate::numerics::gradcheck::assert_gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_cfg(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 8,
            ff_dim: 16,
            max_len: 12,
            dropout: 0.0,
            vocab_size: vocab,
        }
    }

    fn corpus(num_users: usize, len: usize, vocab: usize) -> Vec<InteractionSequence> {
        let mut r = rng(77);
        (0..num_users)
            .map(|user| InteractionSequence {
                user,
                items: (0..len).map(|_| r.gen_range(3..vocab as u32)).collect(),
                timestamps: None,
            })
            .collect()
    }

    fn sample_batch(task: TaskKind, n: usize, seed: u64) -> Vec<SslSample> {
        let seqs = corpus(6, 9, 30);
        make_binary_batch(
            task,
            &seqs,
            n,
            &CorruptionConfig::default(),
            12,
            &mut rng(seed),
        )
        .unwrap()
    }

    #[test]
    fn half_predictor_gives_ln2() {
        let mut enc: Encoder<f64> = Encoder::new(tiny_cfg(30), &mut rng(1)).unwrap();
        enc.zero_int_head_outputs();
        let tape = Tape::new();
        let vars = enc.bind(&tape);
        for task in [TaskKind::Temporal, TaskKind::Persona] {
            let samples = sample_batch(task, 8, 2);
            let loss = int_head_loss(
                &vars,
                &samples,
                if task == TaskKind::Temporal { IntHead::Temporal } else { IntHead::Persona },
                false,
                &mut rng(0),
            )
            .scalar_value();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-6, "{task}: {loss}");
        }
    }

    #[test]
    fn binary_loss_matches_per_sample_oracle() {
        let enc: Encoder<f64> = Encoder::new(tiny_cfg(30), &mut rng(3)).unwrap();
        let tape = Tape::new();
        let vars = enc.bind(&tape);
        let samples = sample_batch(TaskKind::Temporal, 8, 4);
        let loss =
            temporal_loss(&vars, &samples, false, &mut rng(0)).scalar_value();
        let mut oracle = 0.0;
        for s in &samples {
            let hidden = vars.encode_one(&s.tokens, false, &mut rng(0));
            let p = vars.int_prob(&hidden, s.int_pos, IntHead::Temporal).scalar_value();
            oracle += -(s.label * p.ln() + (1.0 - s.label) * (1.0 - p).ln());
        }
        oracle /= samples.len() as f64;
        assert!((loss - oracle).abs() < 1e-6, "{loss} vs {oracle}");
    }

    #[test]
    fn flipped_labels_complement_probabilities() {
        let enc: Encoder<f64> = Encoder::new(tiny_cfg(30), &mut rng(5)).unwrap();
        let tape = Tape::new();
        let vars = enc.bind(&tape);
        let samples = sample_batch(TaskKind::Persona, 8, 6);
        let mut flipped = samples.clone();
        for s in flipped.iter_mut() {
            s.label = 1.0 - s.label;
        }
        let l_flip = persona_loss(&vars, &flipped, false, &mut rng(0)).scalar_value();
        let mut oracle = 0.0;
        for s in &samples {
            let hidden = vars.encode_one(&s.tokens, false, &mut rng(0));
            let p = vars.int_prob(&hidden, s.int_pos, IntHead::Persona).scalar_value();
            let q = 1.0 - p;
            oracle += -(s.label * q.ln() + (1.0 - s.label) * (1.0 - q).ln());
        }
        oracle /= samples.len() as f64;
        assert!((l_flip - oracle).abs() < 1e-6);
    }

    #[test]
    fn batch_permutation_invariance() {
        let enc: Encoder<f64> = Encoder::new(tiny_cfg(30), &mut rng(7)).unwrap();
        let tape = Tape::new();
        let vars = enc.bind(&tape);
        let samples = sample_batch(TaskKind::Temporal, 6, 8);
        let mut reversed = samples.clone();
        reversed.reverse();
        let a = temporal_loss(&vars, &samples, false, &mut rng(0)).scalar_value();
        let b = temporal_loss(&vars, &reversed, false, &mut rng(0)).scalar_value();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn global_single_pair_is_zero() {
        let enc: Encoder<f64> = Encoder::new(tiny_cfg(30), &mut rng(9)).unwrap();
        let tape = Tape::new();
        let vars = enc.bind(&tape);
        let pairs = vec![GlobalPair {
            masked: vec![3, 4, crate::data::MASK, crate::data::MASK, 7],
            gram: vec![5, 6],
            span: (2, 2),
        }];
        let loss = global_loss(&vars, &pairs, false, &mut rng(0)).scalar_value();
        assert!(loss.abs() < 1e-9, "single-candidate loss {loss}");
    }

    #[test]
    fn global_identical_reps_give_ln_b() {
        let enc: Encoder<f64> = Encoder::new(tiny_cfg(30), &mut rng(10)).unwrap();
        let tape = Tape::new();
        let vars = enc.bind(&tape);
        let pair = GlobalPair {
            masked: vec![3, 4, crate::data::MASK, crate::data::MASK, 7],
            gram: vec![5, 6],
            span: (2, 2),
        };
        let pairs = vec![pair.clone(), pair.clone(), pair.clone(), pair];
        let loss = global_loss(&vars, &pairs, false, &mut rng(0)).scalar_value();
        assert!((loss - 4.0f64.ln()).abs() < 1e-6, "uniform-score loss {loss}");
    }

    #[test]
    fn global_matches_logsumexp_oracle() {
        let enc: Encoder<f64> = Encoder::new(tiny_cfg(40), &mut rng(11)).unwrap();
        let tape = Tape::new();
        let vars = enc.bind(&tape);
        let seqs = corpus(5, 10, 40);
        let pairs = make_global_batch(
            &seqs,
            4,
            &CorruptionConfig::default(),
            12,
            &mut rng(12),
        )
        .unwrap();
        let loss = global_loss(&vars, &pairs, false, &mut rng(0)).scalar_value();

        let rep = |tokens: &[u32]| {
            vars.encode_one(tokens, false, &mut rng(0)).value().row(tokens.len() - 1).to_vec()
        };
        let g: Vec<Vec<f64>> = pairs.iter().map(|p| rep(&p.masked)).collect();
        let l: Vec<Vec<f64>> = pairs.iter().map(|p| rep(&p.gram)).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut oracle = 0.0;
        for i in 0..pairs.len() {
            let pos = dot(&g[i], &l[i]);
            let lse = l.iter().map(|lj| dot(&g[i], lj).exp()).sum::<f64>().ln();
            oracle += -(pos - lse);
        }
        oracle /= pairs.len() as f64;
        assert!((loss - oracle).abs() < 1e-5, "{loss} vs {oracle}");
        assert!(loss >= -1e-9);
    }

    #[test]
    fn global_invariant_to_pair_order() {
        let enc: Encoder<f64> = Encoder::new(tiny_cfg(40), &mut rng(13)).unwrap();
        let tape = Tape::new();
        let vars = enc.bind(&tape);
        let seqs = corpus(5, 10, 40);
        let mut pairs = make_global_batch(
            &seqs,
            4,
            &CorruptionConfig::default(),
            12,
            &mut rng(14),
        )
        .unwrap();
        let a = global_loss(&vars, &pairs, false, &mut rng(0)).scalar_value();
        pairs.reverse();
        let b = global_loss(&vars, &pairs, false, &mut rng(0)).scalar_value();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn labels_match_corruption_log() {
        for task in [TaskKind::Temporal, TaskKind::Persona] {
            for s in sample_batch(task, 64, 15) {
                match &s.log {
                    CorruptionLog::Clean => assert_eq!(s.label, 0.0),
                    CorruptionLog::Shuffled { swaps } => {
                        assert_eq!(s.label, 1.0);
                        assert!(*swaps >= 1);
                    }
                    CorruptionLog::Replaced { slots } => {
                        assert_eq!(s.label, 1.0);
                        assert!(!slots.is_empty());
                    }
                }
                assert_eq!(*s.tokens.last().unwrap(), crate::data::INT);
            }
        }
    }

    #[test]
    fn corrupted_and_clean_lengths_match() {
        // No label leakage through sequence length.
        let samples = sample_batch(TaskKind::Temporal, 128, 16);
        let lens = |label: f64| {
            let mut v: Vec<usize> = samples
                .iter()
                .filter(|s| s.label == label)
                .map(|s| s.tokens.len())
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        assert_eq!(lens(0.0), lens(1.0));
    }

    #[test]
    fn consistency_losses_pass_gradcheck() {
        let cfg = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 8,
            ff_dim: 16,
            max_len: 10,
            dropout: 0.0,
            vocab_size: 20,
        };
        let enc: Encoder<f64> = Encoder::new(cfg, &mut rng(17)).unwrap();
        let points: Vec<_> = enc.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        let seqs: Vec<InteractionSequence> = (0..4)
            .map(|user| InteractionSequence {
                user,
                items: (0..8).map(|k| 3 + ((user as u32 * 5 + k) % 17)).collect(),
                timestamps: None,
            })
            .collect();
        let cc = CorruptionConfig::default();

        let t_samples =
            make_binary_batch(TaskKind::Temporal, &seqs, 3, &cc, 10, &mut rng(18)).unwrap();
        let p_samples =
            make_binary_batch(TaskKind::Persona, &seqs, 3, &cc, 10, &mut rng(19)).unwrap();
        let g_pairs = make_global_batch(&seqs, 3, &cc, 10, &mut rng(20)).unwrap();

        let model = enc.clone();
        assert_gradcheck(
            "temporal_loss",
            |_, vars| {
                let bound = rebind_with(&model, vars);
                temporal_loss(&bound, &t_samples, false, &mut rng(0))
            },
            &points,
            1e-4,
            1e-3,
        );
        let model = enc.clone();
        assert_gradcheck(
            "persona_loss",
            |_, vars| {
                let bound = rebind_with(&model, vars);
                persona_loss(&bound, &p_samples, false, &mut rng(0))
            },
            &points,
            1e-4,
            1e-3,
        );
        let model = enc.clone();
        assert_gradcheck(
            "global_loss",
            |_, vars| {
                let bound = rebind_with(&model, vars);
                global_loss(&bound, &g_pairs, false, &mut rng(0))
            },
            &points,
            1e-4,
            1e-3,
        );
    }

    #[test]
    fn pretrain_logs_and_is_deterministic() {
        let seqs = corpus(8, 10, 30);
        let cfg = PretrainConfig {
            steps: 3,
            batch_size: 4,
            seed: 21,
            ..PretrainConfig::default()
        };
        let run = |task| {
            let mut enc: Encoder<f32> = Encoder::new(tiny_cfg(30), &mut rng(22)).unwrap();
            let logs = pretrain(task, &mut enc, &seqs, &cfg).unwrap();
            (enc, logs)
        };
        let (enc_a, logs_a) = run(TaskKind::Temporal);
        let (enc_b, logs_b) = run(TaskKind::Temporal);
        assert_eq!(logs_a.len(), 3);
        assert!(logs_a.iter().all(|l| l.l_mlm.is_finite() && l.l_task.is_finite()));
        for (a, b) in logs_a.iter().zip(&logs_b) {
            assert_eq!((a.l_mlm, a.l_task), (b.l_mlm, b.l_task));
        }
        for ((_, ta), (_, tb)) in enc_a.named_params().iter().zip(enc_b.named_params().iter()) {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn zero_task_weight_is_pure_cloze_regardless_of_task() {
        // With λ=0 the task machinery is bypassed; all task kinds reduce to
        // the identical cloze-only trajectory.
        let seqs = corpus(8, 10, 30);
        let cfg = PretrainConfig {
            steps: 3,
            batch_size: 4,
            task_weight: 0.0,
            seed: 23,
            ..PretrainConfig::default()
        };
        let run = |task| {
            let mut enc: Encoder<f32> = Encoder::new(tiny_cfg(30), &mut rng(24)).unwrap();
            let logs = pretrain(task, &mut enc, &seqs, &cfg).unwrap();
            (enc, logs)
        };
        let (enc_a, logs_a) = run(TaskKind::Temporal);
        let (enc_b, logs_b) = run(TaskKind::Global);
        for (a, b) in logs_a.iter().zip(&logs_b) {
            assert_eq!(a.l_mlm, b.l_mlm);
            assert_eq!(a.l_task, 0.0);
        }
        for ((_, ta), (_, tb)) in enc_a.named_params().iter().zip(enc_b.named_params().iter()) {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn teacher_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let enc: Encoder<f32> = Encoder::new(tiny_cfg(30), &mut rng(25)).unwrap();
        let meta = TeacherMeta {
            task: TaskKind::Persona,
            encoder: enc.cfg.clone(),
            config_hash: "abc".into(),
            steps: 3,
            final_mlm: 1.5,
            final_task: 0.4,
        };
        save_teacher(dir.path(), &enc, &meta).unwrap();
        let (loaded, meta2) = load_teacher(dir.path()).unwrap();
        assert_eq!(meta2.task, TaskKind::Persona);
        for ((na, ta), (nb, tb)) in enc.named_params().iter().zip(loaded.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data);
        }
        assert!(matches!(
            load_teacher(&dir.path().join("missing")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
