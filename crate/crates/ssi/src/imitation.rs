//! Distillation of the frozen consistency teachers into one student:
//! prediction-distribution KL, projected-representation MSE, and an
//! integrated objective with learnable, regularized teacher weights.

use crate::data::{worker_rng, Dataset, MASK, NUM_RESERVED};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Split};
use crate::numerics::{Adam, Scalar, Tape, Tensor, Var};
use crate::ssl::TeacherMeta;
use crate::student::{student_loss, Student};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

/// How a teacher sees the session when producing targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Target position masked inside the full session: future items visible
    /// (privileged context the student never gets).
    Bidirectional,
    /// Next-item prediction from the prefix only.
    Prefix,
}

impl FromStr for TargetMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidirectional" => Ok(TargetMode::Bidirectional),
            "prefix" => Ok(TargetMode::Prefix),
            other => Err(Error::Config(format!("unknown teacher target mode {other:?}"))),
        }
    }
}

/// Soft distribution over the full vocabulary (reserved entries zero, real
/// entries summing to 1) plus the teacher's hidden state at the masked
/// position.
pub fn teacher_targets<E: Scalar>(
    encoder: &Encoder<E>,
    session: &[u32],
    pos: usize,
    mode: TargetMode,
) -> Result<(Vec<E>, Vec<E>)> {
    if pos >= session.len() {
        return Err(Error::Contract(format!(
            "target position {pos} outside session of length {}",
            session.len()
        )));
    }
    let max_len = encoder.cfg.max_len;
    let (tokens, mask_idx) = match mode {
        TargetMode::Bidirectional => {
            let w = session.len().min(max_len);
            // Window containing pos with balanced context on both sides.
            let start = (pos.saturating_sub(w / 2)).min(session.len() - w);
            let mut tokens = session[start..start + w].to_vec();
            tokens[pos - start] = MASK;
            (tokens, pos - start)
        }
        TargetMode::Prefix => {
            if pos == 0 {
                return Err(Error::Contract(
                    "prefix-mode targets need at least one preceding item".into(),
                ));
            }
            let prefix = &session[..pos];
            let keep = max_len - 1;
            let start = prefix.len().saturating_sub(keep);
            let mut tokens = prefix[start..].to_vec();
            tokens.push(MASK);
            let idx = tokens.len() - 1;
            (tokens, idx)
        }
    };
    let tape = Tape::new();
    let vars = encoder.bind(&tape);
    let mut rng = worker_rng(0, 0); // eval mode: never consulted
    let hidden = vars.encode_one(&tokens, false, &mut rng);
    let logits = vars.mlm_logits(&hidden, &[mask_idx]).value();
    let mut probs = crate::numerics::kernels::softmax_unchecked(logits.row(0));
    for p in probs.iter_mut().take(NUM_RESERVED) {
        *p = E::zero();
    }
    let z: E = probs.iter().copied().sum();
    for p in probs.iter_mut() {
        *p = *p / z;
    }
    let rep = hidden.value().row(mask_idx).to_vec();
    Ok((probs, rep))
}

/// D_KL(teacher ‖ softmax(student scores)). The teacher distribution is a
/// constant; gradient reaches the student only.
pub fn prediction_imitation_loss<E: Scalar>(
    teacher: &[E],
    student_scores: &Var<E>,
) -> Result<Var<E>> {
    let shape = student_scores.shape();
    if shape.len() != 2 || shape[0] != 1 || shape[1] != teacher.len() {
        return Err(Error::Shape(format!(
            "teacher distribution over {} items vs student scores {shape:?}",
            teacher.len()
        )));
    }
    let sum = teacher.iter().copied().sum::<E>().to_f64c();
    if (sum - 1.0).abs() > 1e-5 || teacher.iter().any(|p| p.to_f64c() < 0.0) {
        return Err(Error::Contract(format!(
            "teacher distribution must be normalized (sum {sum})"
        )));
    }
    // KL = −H(teacher) − Σ_q t_q · log softmax(s)_q
    let neg_entropy: f64 = teacher
        .iter()
        .map(|p| {
            let p = p.to_f64c();
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        })
        .sum();
    let t = Tensor::matrix(1, teacher.len(), teacher.to_vec());
    Ok(student_scores
        .log_softmax_rows()
        .mul_const(&t)
        .sum_all()
        .scale(E::from_f64c(-1.0))
        .add_scalar(E::from_f64c(neg_entropy)))
}

/// mse(g^t, g^s·P) with a learned d_s×d_t projection. Gradient reaches the
/// student and P; the teacher representation is a constant.
pub fn representation_imitation_loss<E: Scalar>(
    teacher_rep: &[E],
    student_hidden: &Var<E>,
    projection: &Var<E>,
) -> Result<Var<E>> {
    let hs = student_hidden.shape();
    let ps = projection.shape();
    if hs.len() != 2 || hs[0] != 1 || ps.len() != 2 || ps[0] != hs[1] || ps[1] != teacher_rep.len()
    {
        return Err(Error::Shape(format!(
            "projection {ps:?} must map student hidden {hs:?} onto teacher dim {}",
            teacher_rep.len()
        )));
    }
    let target = student_hidden
        .tape()
        .constant(Tensor::matrix(1, teacher_rep.len(), teacher_rep.to_vec()));
    Ok(student_hidden.matmul(projection).mse_loss(&target))
}

/// Learnable teacher weights λᵢ = softplus(rᵢ), initialized so λᵢ = 1.
#[derive(Debug, Clone)]
pub struct AdaptiveWeights<E: Scalar> {
    pub raw: Tensor<E>,
}

impl<E: Scalar> AdaptiveWeights<E> {
    pub fn new(n: usize) -> Self {
        // softplus(r) = 1  ⇔  r = ln(e − 1)
        let r = (std::f64::consts::E - 1.0).ln();
        AdaptiveWeights { raw: Tensor::full(vec![1, n], E::from_f64c(r)) }
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.raw.data.iter().map(|r| softplus_f64(r.to_f64c())).collect()
    }
}

fn softplus_f64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// L = L_s + Σᵢ λᵢ(L¹ᵢ + L²ᵢ) + reg_coeff·[Σᵢ 1/λᵢ + (Σᵢ 1/λᵢ)²]
/// where λ = softplus(raw). With no teachers this is exactly L_s.
pub fn integrated_loss<E: Scalar>(
    l_s: &Var<E>,
    per_teacher: &[(Var<E>, Var<E>)],
    raw_weights: Option<&Var<E>>,
    reg_coeff: f64,
) -> Var<E> {
    let Some(raw) = raw_weights else {
        assert!(per_teacher.is_empty(), "teacher losses without weights");
        return l_s.clone();
    };
    assert_eq!(raw.shape(), vec![1, per_teacher.len()], "one weight per teacher");
    let lambda = raw.softplus();
    let sums: Vec<Var<E>> = per_teacher.iter().map(|(l1, l2)| l1.add(l2)).collect();
    let weighted = lambda.mul(&Var::concat_cols(&sums)).sum_all();
    let inv_sum = lambda.recip().sum_all();
    let reg = inv_sum.add(&inv_sum.mul(&inv_sum));
    l_s.add(&weighted).add(&reg.scale(E::from_f64c(reg_coeff)))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistillConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Prediction-distribution imitation (KL) on/off.
    pub pred_imitation: bool,
    /// Representation imitation (projected MSE) on/off.
    pub repr_imitation: bool,
    pub mode: TargetMode,
    pub reg_coeff: f64,
    /// Seed for validation negatives.
    pub eval_seed: u64,
    /// Keep the parameters with the best validation NDCG@10.
    pub keep_best: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 10,
            steps_per_epoch: 50,
            batch_size: 64,
            lr: 0.001,
            seed: 0,
            pred_imitation: true,
            repr_imitation: true,
            mode: TargetMode::Bidirectional,
            reg_coeff: 1.0,
            eval_seed: 17,
            keep_best: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_s: f64,
    pub l_pred: Vec<f64>,
    pub l_repr: Vec<f64>,
    pub lambda: Vec<f64>,
    pub val_recall10: f64,
    pub val_ndcg10: f64,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub epochs: Vec<EpochLog>,
    /// Per-step student loss, for exact trajectory comparisons.
    pub step_losses: Vec<f64>,
}

/// Next-item scorer over a frozen student snapshot.
pub fn student_scorer(student: &Student<f32>) -> impl Fn(&[u32]) -> Vec<f64> + Sync + '_ {
    move |prefix: &[u32]| {
        let tape = Tape::new();
        let vars = student.bind(&tape);
        let (scores, _) = vars.forward(prefix);
        scores.value().data.into_iter().map(|x| x as f64).collect()
    }
}

// Distinct RNG streams per step: batch/position sampling only (students are
// dropout-free), so disabling imitation cannot shift any stream.
const STREAM_DATA: u64 = 0;
const STREAMS_PER_STEP: u64 = 1;
const PROJ_INIT_STREAM: u64 = u64::MAX;

/// Train the student against frozen teachers. With both imitation flags off
/// (or no teachers) this reduces exactly to plain student training: same
/// batches, same losses, same updates.
pub fn distill(
    student: &mut Student<f32>,
    teachers: &[(Encoder<f32>, TeacherMeta)],
    dataset: &Dataset,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    for (enc, meta) in teachers {
        if enc.cfg.vocab_size != student.cfg.vocab_size {
            return Err(Error::Compatibility(format!(
                "{} teacher vocabulary {} vs student vocabulary {}",
                meta.task, enc.cfg.vocab_size, student.cfg.vocab_size
            )));
        }
    }
    let split = crate::data::split(dataset)?;
    // Targets are drawn from positions 1.., so a prefix needs ≥ 2 items.
    let usable: Vec<usize> = (0..split.entries.len())
        .filter(|i| split.entries[*i].prefix.len() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let imitation = (cfg.pred_imitation || cfg.repr_imitation) && !teachers.is_empty();
    let n = if imitation { teachers.len() } else { 0 };

    let mut weights = AdaptiveWeights::<f32>::new(n);
    let mut proj_rng = worker_rng(cfg.seed, PROJ_INIT_STREAM);
    let mut projections: Vec<Tensor<f32>> = teachers
        .iter()
        .take(n)
        .map(|(enc, _)| {
            Tensor::randn(vec![student.cfg.embed_dim, enc.cfg.hidden_dim], 0.02, &mut proj_rng)
        })
        .collect();

    let mut shapes: Vec<Vec<usize>> =
        student.named_params().iter().map(|(_, t)| t.shape.clone()).collect();
    if imitation {
        shapes.extend(projections.iter().map(|p| p.shape.clone()));
        shapes.push(weights.raw.shape.clone());
    }
    let mut adam = Adam::new(cfg.lr, &shapes);

    let mut outcome = DistillOutcome { epochs: Vec::new(), step_losses: Vec::new() };
    let mut best: Option<(f64, Vec<Tensor<f32>>)> = None;

    for epoch in 0..cfg.epochs {
        let mut epoch_ls = 0.0;
        let mut epoch_pred = vec![0.0; n];
        let mut epoch_repr = vec![0.0; n];
        for step in 0..cfg.steps_per_epoch {
            let global = (epoch * cfg.steps_per_epoch + step) as u64;
            let mut rng = worker_rng(cfg.seed, global * STREAMS_PER_STEP + STREAM_DATA);

            // One (prefix, target) instance per batch slot.
            let mut samples: Vec<(&[u32], usize)> = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let e = &split.entries[usable[rng.gen_range(0..usable.len())]];
                let t = rng.gen_range(1..e.prefix.len());
                samples.push((&e.prefix, t));
            }

            let tape = Tape::new();
            let vars = student.bind(&tape);
            let mut score_rows = Vec::with_capacity(samples.len());
            let mut hiddens = Vec::with_capacity(samples.len());
            let mut targets = Vec::with_capacity(samples.len());
            for (session, t) in &samples {
                let (scores, hidden) = vars.forward(&session[..*t]);
                score_rows.push(scores);
                hiddens.push(hidden);
                targets.push(session[*t]);
            }
            let l_s = student_loss(&Var::concat_rows(&score_rows), &targets)?;

            let (raw_var, proj_vars): (Option<Var<f32>>, Vec<Var<f32>>) = if imitation {
                (
                    Some(tape.leaf(weights.raw.clone())),
                    projections.iter().map(|p| tape.leaf(p.clone())).collect(),
                )
            } else {
                (None, Vec::new())
            };

            let mut per_teacher: Vec<(Var<f32>, Var<f32>)> = Vec::with_capacity(n);
            for (ti, (enc, _)) in teachers.iter().take(n).enumerate() {
                let mut l_pred: Option<Var<f32>> = None;
                let mut l_repr: Option<Var<f32>> = None;
                for (si, (session, t)) in samples.iter().enumerate() {
                    let (dist, rep) = teacher_targets(enc, session, *t, cfg.mode)?;
                    if cfg.pred_imitation {
                        let l = prediction_imitation_loss(&dist, &score_rows[si])?;
                        l_pred = Some(match l_pred {
                            Some(acc) => acc.add(&l),
                            None => l,
                        });
                    }
                    if cfg.repr_imitation {
                        let l =
                            representation_imitation_loss(&rep, &hiddens[si], &proj_vars[ti])?;
                        l_repr = Some(match l_repr {
                            Some(acc) => acc.add(&l),
                            None => l,
                        });
                    }
                }
                let b = 1.0 / samples.len() as f32;
                let zero = || l_s.scale(0.0);
                let l1 = l_pred.map(|l| l.scale(b)).unwrap_or_else(zero);
                let l2 = l_repr.map(|l| l.scale(b)).unwrap_or_else(zero);
                epoch_pred[ti] += l1.scalar_value() as f64;
                epoch_repr[ti] += l2.scalar_value() as f64;
                per_teacher.push((l1, l2));
            }

            let total = integrated_loss(&l_s, &per_teacher, raw_var.as_ref(), cfg.reg_coeff);
            let ls_val = l_s.scalar_value() as f64;
            if !total.scalar_value().is_finite() {
                return Err(Error::Diverged(format!(
                    "distillation diverged at epoch {epoch} step {step}: L_s={ls_val}"
                )));
            }
            epoch_ls += ls_val;
            outcome.step_losses.push(ls_val);

            let grads = tape.backward(&total)?;
            let mut grad_tensors: Vec<Tensor<f32>> =
                vars.params().iter().map(|v| grads.get_or_zeros(v)).collect();
            if imitation {
                for pv in &proj_vars {
                    grad_tensors.push(grads.get_or_zeros(pv));
                }
                grad_tensors.push(grads.get_or_zeros(raw_var.as_ref().unwrap()));
            }
            let mut params = student.named_params_mut();
            let mut slots: Vec<&mut Tensor<f32>> =
                params.iter_mut().map(|(_, t)| &mut **t).collect();
            if imitation {
                slots.extend(projections.iter_mut());
                slots.push(&mut weights.raw);
            }
            adam.step(&mut slots, &grad_tensors)?;
        }

        let report = evaluate(student_scorer(student), Split::Valid, dataset, cfg.eval_seed)?;
        let lambda = weights.lambdas();
        if lambda.iter().any(|l| !l.is_finite() || *l <= 0.0) {
            return Err(Error::Diverged(format!(
                "teacher weights left the positive domain at epoch {epoch}: {lambda:?}"
            )));
        }
        let steps = cfg.steps_per_epoch as f64;
        outcome.epochs.push(EpochLog {
            epoch,
            l_s: epoch_ls / steps,
            l_pred: epoch_pred.iter().map(|x| x / steps).collect(),
            l_repr: epoch_repr.iter().map(|x| x / steps).collect(),
            lambda,
            val_recall10: report.recall(10),
            val_ndcg10: report.ndcg(10),
        });
        if cfg.keep_best {
            let snapshot = || {
                student.named_params().into_iter().map(|(_, t)| t.clone()).collect::<Vec<_>>()
            };
            match &best {
                Some((b, _)) if *b >= report.ndcg(10) => {}
                _ => best = Some((report.ndcg(10), snapshot())),
            }
        }
    }
    if let Some((_, tensors)) = best {
        for ((_, slot), t) in student.named_params_mut().into_iter().zip(tensors) {
            *slot = t;
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticSpec};
    use crate::encoder::{predict_next, EncoderConfig};
    use crate::numerics::gradcheck::{assert_gradcheck, random_points, to_prob_vector};
    use crate::ssl::TaskKind;
    use crate::student::{StudentArch, StudentConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_encoder(vocab: usize, seed: u64) -> Encoder<f64> {
        let cfg = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 8,
            ff_dim: 16,
            max_len: 8,
            dropout: 0.0,
            vocab_size: vocab,
        };
        Encoder::new(cfg, &mut rng(seed)).unwrap()
    }

    #[test]
    fn prediction_loss_zero_at_identity_and_matches_primitive() {
        let tape: Tape<f64> = Tape::new();
        let logits = random_points(&[vec![1, 12]], 1.0, 1).pop().unwrap();
        let scores = tape.leaf(logits.clone());
        let student_probs = crate::numerics::kernels::softmax_unchecked(&logits.data);
        let zero = prediction_imitation_loss(&student_probs, &scores)
            .unwrap()
            .scalar_value();
        assert!(zero.abs() < 1e-9, "KL at identity {zero}");

        let teacher = to_prob_vector(&random_points(&[vec![1, 12]], 1.0, 2).pop().unwrap());
        let loss = prediction_imitation_loss(&teacher.data, &scores).unwrap().scalar_value();
        let oracle =
            crate::numerics::kernels::kl_divergence_unchecked(&teacher.data, &student_probs);
        assert!((loss - oracle).abs() < 1e-9, "{loss} vs {oracle}");
        assert!(loss >= 0.0);
    }

    #[test]
    fn one_hot_teacher_reduces_to_cross_entropy() {
        let tape: Tape<f64> = Tape::new();
        let logits = random_points(&[vec![1, 10]], 1.0, 3).pop().unwrap();
        let scores = tape.leaf(logits.clone());
        let mut teacher = vec![0.0; 10];
        teacher[6] = 1.0;
        let loss = prediction_imitation_loss(&teacher, &scores).unwrap().scalar_value();
        let ce = crate::numerics::kernels::cross_entropy_unchecked(&logits.data, 6);
        assert!((loss - ce).abs() < 1e-9);
    }

    #[test]
    fn unnormalized_teacher_rejected() {
        let tape: Tape<f64> = Tape::new();
        let scores = tape.leaf(Tensor::zeros(vec![1, 5]));
        let bad = vec![0.3, 0.3, 0.3, 0.3, 0.3];
        assert!(prediction_imitation_loss(&bad, &scores).is_err());
    }

    #[test]
    fn representation_loss_cases() {
        let tape: Tape<f64> = Tape::new();
        // d_s = d_t = 4, identity projection, equal reps → 0.
        let mut eye = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            eye.data[i * 4 + i] = 1.0;
        }
        let p = tape.leaf(eye);
        let h = tape.leaf(Tensor::matrix(1, 4, vec![0.5, -1.0, 2.0, 0.0]));
        let same = vec![0.5, -1.0, 2.0, 0.0];
        let loss = representation_imitation_loss(&same, &h, &p).unwrap().scalar_value();
        assert_eq!(loss, 0.0);

        // Zero teacher → mean of squared projected coordinates.
        let zero_t = vec![0.0; 4];
        let loss = representation_imitation_loss(&zero_t, &h, &p).unwrap().scalar_value();
        let oracle = (0.25 + 1.0 + 4.0 + 0.0) / 4.0;
        assert!((loss - oracle).abs() < 1e-12);

        // Random case matches the mse primitive.
        let pts = random_points(&[vec![1, 3], vec![3, 5], vec![1, 5]], 1.0, 4);
        let h = tape.leaf(pts[0].clone());
        let p = tape.leaf(pts[1].clone());
        let projected = crate::numerics::kernels::matmul(&pts[0], &pts[1]);
        let loss = representation_imitation_loss(&pts[2].data, &h, &p)
            .unwrap()
            .scalar_value();
        let oracle = crate::numerics::kernels::mse_unchecked(&pts[2].data, &projected.data);
        assert!((loss - oracle).abs() < 1e-12);

        // Dimension mismatch → shape error.
        assert!(matches!(
            representation_imitation_loss(&[0.0; 4], &h, &p),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn integrated_loss_analytic_anchors() {
        let tape: Tape<f64> = Tape::new();
        let c = 2.5;
        let l_s = tape.leaf(Tensor::scalar(c));
        let zero = || tape.leaf(Tensor::scalar(0.0));
        let raw = tape.leaf(AdaptiveWeights::<f64>::new(3).raw);
        let pt: Vec<(Var<f64>, Var<f64>)> = (0..3).map(|_| (zero(), zero())).collect();
        let total = integrated_loss(&l_s, &pt, Some(&raw), 1.0).scalar_value();
        assert!((total - (c + 12.0)).abs() < 1e-6, "λ=(1,1,1): {total}");

        let raw1 = tape.leaf(AdaptiveWeights::<f64>::new(1).raw);
        let pt1 = vec![(zero(), zero())];
        let total1 = integrated_loss(&l_s, &pt1, Some(&raw1), 1.0).scalar_value();
        assert!((total1 - (c + 2.0)).abs() < 1e-6, "n=1: {total1}");

        // No teachers → exactly L_s.
        let plain = integrated_loss(&l_s, &[], None, 1.0).scalar_value();
        assert_eq!(plain, c);
    }

    #[test]
    fn regularizer_gradient_at_unit_weights_is_minus_seven() {
        // d/dλᵢ [Σ1/λ + (Σ1/λ)²] at λ=(1,1,1) is −1/λᵢ² − 2(Σ1/λ)/λᵢ² = −7.
        let tape: Tape<f64> = Tape::new();
        let lambda = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]));
        let inv_sum = lambda.recip().sum_all();
        let reg = inv_sum.add(&inv_sum.mul(&inv_sum));
        let grads = tape.backward(&reg).unwrap();
        let g = grads.get_or_zeros(&lambda);
        for c in 0..3 {
            assert!((g.at(0, c) + 7.0).abs() < 1e-9, "grad {}", g.at(0, c));
        }
    }

    #[test]
    fn integrated_loss_gradcheck_and_permutation_invariance() {
        let pts = random_points(&[vec![1, 1], vec![1, 3], vec![1, 3], vec![1, 3]], 0.8, 5);
        assert_gradcheck(
            "integrated_loss",
            |_, v| {
                let pt: Vec<(Var<f64>, Var<f64>)> = (0..3)
                    .map(|i| {
                        // squares keep the per-teacher losses positive
                        let a = v[1].slice_cols(i, i + 1);
                        let b = v[2].slice_cols(i, i + 1);
                        (a.mul(&a), b.mul(&b))
                    })
                    .collect();
                integrated_loss(&v[0].mul(&v[0]), &pt, Some(&v[3]), 1.0)
            },
            &pts,
            1e-4,
            1e-3,
        );

        // Permutation invariance in teacher index.
        let tape: Tape<f64> = Tape::new();
        let l_s = tape.leaf(Tensor::scalar(1.0));
        let mk = |x: f64| tape.leaf(Tensor::scalar(x));
        let pt = vec![(mk(0.1), mk(0.2)), (mk(0.3), mk(0.4)), (mk(0.5), mk(0.6))];
        let raw = tape.leaf(Tensor::matrix(1, 3, vec![0.3, 0.9, 1.4]));
        let a = integrated_loss(&l_s, &pt, Some(&raw), 1.0).scalar_value();
        let pt_perm = vec![pt[2].clone(), pt[0].clone(), pt[1].clone()];
        let raw_perm = tape.leaf(Tensor::matrix(1, 3, vec![1.4, 0.3, 0.9]));
        let b = integrated_loss(&l_s, &pt_perm, Some(&raw_perm), 1.0).scalar_value();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn prefix_mode_last_position_equals_predict_next() {
        let enc = tiny_encoder(25, 6);
        let session: Vec<u32> = vec![3, 9, 4, 12, 7];
        let (dist, _) =
            teacher_targets(&enc, &session, session.len() - 1, TargetMode::Prefix).unwrap();
        let expect = predict_next(&enc, &session[..session.len() - 1]).unwrap();
        for (a, b) in dist.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let sum: f64 = dist.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for r in 0..NUM_RESERVED {
            assert_eq!(dist[r], 0.0);
        }
    }

    #[test]
    fn target_position_bounds_checked() {
        let enc = tiny_encoder(25, 7);
        let session: Vec<u32> = vec![3, 9, 4];
        assert!(teacher_targets(&enc, &session, 3, TargetMode::Bidirectional).is_err());
        assert!(teacher_targets(&enc, &session, 0, TargetMode::Prefix).is_err());
        // Bidirectional at position 0 is fine (right context only).
        let (dist, rep) = teacher_targets(&enc, &session, 0, TargetMode::Bidirectional).unwrap();
        assert_eq!(rep.len(), 8);
        let sum: f64 = dist.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bidirectional_window_keeps_target_visible_context() {
        // Sessions longer than max_len must still mask the right item.
        let enc = tiny_encoder(40, 8);
        let session: Vec<u32> = (3..23).collect(); // length 20, max_len 8
        for pos in [0usize, 5, 10, 19] {
            let (dist, _) =
                teacher_targets(&enc, &session, pos, TargetMode::Bidirectional).unwrap();
            let sum: f64 = dist.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "pos {pos}");
        }
    }

    fn tiny_dataset() -> Dataset {
        // Vocabulary comfortably above the 99 sampled negatives per user.
        let spec = SyntheticSpec::markov_cycle(150, 20, 1, 0.9, 0.05, (8, 12));
        generate_synthetic(&spec, &mut rng(9)).unwrap()
    }

    fn tiny_teacher_f32(vocab: usize, seed: u64, task: TaskKind) -> (Encoder<f32>, TeacherMeta) {
        let cfg = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 8,
            ff_dim: 16,
            max_len: 10,
            dropout: 0.0,
            vocab_size: vocab,
        };
        let enc = Encoder::new(cfg.clone(), &mut rng(seed)).unwrap();
        let meta = TeacherMeta {
            task,
            encoder: cfg,
            config_hash: String::new(),
            steps: 0,
            final_mlm: 0.0,
            final_task: 0.0,
        };
        (enc, meta)
    }

    fn tiny_student(vocab: usize, seed: u64) -> Student<f32> {
        let cfg = StudentConfig {
            arch: StudentArch::Gated,
            embed_dim: 6,
            window: 3,
            vocab_size: vocab,
        };
        Student::new(cfg, &mut rng(seed)).unwrap()
    }

    #[test]
    fn distill_runs_and_teachers_stay_frozen() {
        let ds = tiny_dataset();
        let vocab = ds.vocab.size();
        let teachers = vec![
            tiny_teacher_f32(vocab, 10, TaskKind::Temporal),
            tiny_teacher_f32(vocab, 11, TaskKind::Persona),
        ];
        let before: Vec<Vec<f32>> = teachers
            .iter()
            .flat_map(|(e, _)| e.named_params().into_iter().map(|(_, t)| t.data.clone()))
            .collect();
        let mut student = tiny_student(vocab, 12);
        let cfg = DistillConfig {
            epochs: 2,
            steps_per_epoch: 3,
            batch_size: 4,
            seed: 13,
            ..DistillConfig::default()
        };
        let outcome = distill(&mut student, &teachers, &ds, &cfg).unwrap();
        assert_eq!(outcome.epochs.len(), 2);
        assert_eq!(outcome.step_losses.len(), 6);
        for log in &outcome.epochs {
            assert_eq!(log.lambda.len(), 2);
            assert!(log.lambda.iter().all(|l| l.is_finite() && *l > 0.0));
            assert!(log.l_pred.iter().all(|l| *l >= -1e-7), "KL must be non-negative");
        }
        let after: Vec<Vec<f32>> = teachers
            .iter()
            .flat_map(|(e, _)| e.named_params().into_iter().map(|(_, t)| t.data.clone()))
            .collect();
        assert_eq!(before, after, "teachers must stay frozen");
    }

    #[test]
    fn disabled_imitation_is_bit_identical_to_student_only() {
        let ds = tiny_dataset();
        let vocab = ds.vocab.size();
        let teachers = vec![tiny_teacher_f32(vocab, 14, TaskKind::Global)];
        let cfg = DistillConfig {
            epochs: 2,
            steps_per_epoch: 3,
            batch_size: 4,
            seed: 15,
            pred_imitation: false,
            repr_imitation: false,
            keep_best: false,
            ..DistillConfig::default()
        };
        let mut with_teachers = tiny_student(vocab, 16);
        let a = distill(&mut with_teachers, &teachers, &ds, &cfg).unwrap();
        let mut alone = tiny_student(vocab, 16);
        let b = distill(&mut alone, &[], &ds, &cfg).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        for ((_, ta), (_, tb)) in
            with_teachers.named_params().iter().zip(alone.named_params().iter())
        {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn distill_is_seed_deterministic() {
        let ds = tiny_dataset();
        let vocab = ds.vocab.size();
        let teachers = vec![tiny_teacher_f32(vocab, 17, TaskKind::Temporal)];
        let cfg = DistillConfig {
            epochs: 1,
            steps_per_epoch: 3,
            batch_size: 4,
            seed: 18,
            ..DistillConfig::default()
        };
        let mut s1 = tiny_student(vocab, 19);
        let a = distill(&mut s1, &teachers, &ds, &cfg).unwrap();
        let mut s2 = tiny_student(vocab, 19);
        let b = distill(&mut s2, &teachers, &ds, &cfg).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        for ((_, ta), (_, tb)) in s1.named_params().iter().zip(s2.named_params().iter()) {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn vocabulary_mismatch_rejected() {
        let ds = tiny_dataset();
        let vocab = ds.vocab.size();
        let teachers = vec![tiny_teacher_f32(vocab + 5, 20, TaskKind::Temporal)];
        let mut student = tiny_student(vocab, 21);
        let cfg = DistillConfig { epochs: 1, steps_per_epoch: 1, ..DistillConfig::default() };
        assert!(matches!(
            distill(&mut student, &teachers, &ds, &cfg),
            Err(Error::Compatibility(_))
        ));
    }
}
