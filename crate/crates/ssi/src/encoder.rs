//! Teacher base model: a bidirectional multi-head self-attention encoder
//! trained with a cloze (masked-item) objective.
//!
//! Next-item inference appends the MASK token to the prefix and reads the
//! item distribution at that position. Consistency tasks append the INT
//! token and read a binary MLP head at its position.

use crate::data::{INT, MASK, NUM_RESERVED, PAD};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn desk_scale(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 64,
            ff_dim: 256,
            max_len: 50,
            dropout: 0.1,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Contract("hidden_dim must be divisible by num_heads".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Contract("max_len must be ≥ 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Contract("dropout must be in [0,1)".into()));
        }
        if self.vocab_size <= NUM_RESERVED {
            return Err(Error::Contract("vocabulary has no real items".into()));
        }
        Ok(())
    }
}

/// Which binary INT head to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntHead {
    Temporal,
    Persona,
}

#[derive(Debug, Clone)]
struct LayerParams<E: Scalar> {
    wq: Tensor<E>,
    wk: Tensor<E>,
    wv: Tensor<E>,
    wo: Tensor<E>,
    bq: Tensor<E>,
    bk: Tensor<E>,
    bv: Tensor<E>,
    bo: Tensor<E>,
    ln1_g: Tensor<E>,
    ln1_b: Tensor<E>,
    w1: Tensor<E>,
    b1: Tensor<E>,
    w2: Tensor<E>,
    b2: Tensor<E>,
    ln2_g: Tensor<E>,
    ln2_b: Tensor<E>,
}

#[derive(Debug, Clone)]
struct MlpHead<E: Scalar> {
    w1: Tensor<E>,
    b1: Tensor<E>,
    w2: Tensor<E>,
    b2: Tensor<E>,
}

/// Teacher parameters. The MLM output projection is the transposed item
/// embedding table (weight tying); only an output bias is separate.
#[derive(Debug, Clone)]
pub struct Encoder<E: Scalar> {
    pub cfg: EncoderConfig,
    item_emb: Tensor<E>,
    pos_emb: Tensor<E>,
    mlm_bias: Tensor<E>,
    layers: Vec<LayerParams<E>>,
    head_t: MlpHead<E>,
    head_p: MlpHead<E>,
}

const INIT_STD: f64 = 0.02;

impl<E: Scalar> Encoder<E> {
    pub fn new<R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let f = cfg.ff_dim;
        let v = cfg.vocab_size;
        let max_len = cfg.max_len;
        let mut layer = || LayerParams {
            wq: Tensor::randn(vec![d, d], INIT_STD, rng),
            wk: Tensor::randn(vec![d, d], INIT_STD, rng),
            wv: Tensor::randn(vec![d, d], INIT_STD, rng),
            wo: Tensor::randn(vec![d, d], INIT_STD, rng),
            bq: Tensor::zeros(vec![1, d]),
            bk: Tensor::zeros(vec![1, d]),
            bv: Tensor::zeros(vec![1, d]),
            bo: Tensor::zeros(vec![1, d]),
            ln1_g: Tensor::full(vec![1, d], E::one()),
            ln1_b: Tensor::zeros(vec![1, d]),
            w1: Tensor::randn(vec![d, f], INIT_STD, rng),
            b1: Tensor::zeros(vec![1, f]),
            w2: Tensor::randn(vec![f, d], INIT_STD, rng),
            b2: Tensor::zeros(vec![1, d]),
            ln2_g: Tensor::full(vec![1, d], E::one()),
            ln2_b: Tensor::zeros(vec![1, d]),
        };
        let layers = (0..cfg.num_layers).map(|_| layer()).collect();
        // The output layer starts random, not zero: a zero output layer
        // blocks all gradient into the encoder and the detection heads never
        // bootstrap past chance.
        let head = |rng: &mut R| MlpHead {
            w1: Tensor::randn(vec![d, d], INIT_STD, rng),
            b1: Tensor::zeros(vec![1, d]),
            w2: Tensor::randn(vec![d, 1], INIT_STD, rng),
            b2: Tensor::zeros(vec![1, 1]),
        };
        Ok(Encoder {
            cfg,
            item_emb: Tensor::randn(vec![v, d], INIT_STD, rng),
            pos_emb: Tensor::randn(vec![max_len, d], INIT_STD, rng),
            mlm_bias: Tensor::zeros(vec![1, v]),
            layers,
            head_t: head(rng),
            head_p: head(rng),
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = vec![
            ("item_emb".into(), &self.item_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("mlm_bias".into(), &self.mlm_bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("bq", &l.bq),
                ("bk", &l.bk),
                ("bv", &l.bv),
                ("bo", &l.bo),
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        for (prefix, h) in [("head_t", &self.head_t), ("head_p", &self.head_p)] {
            out.push((format!("{prefix}.w1"), &h.w1));
            out.push((format!("{prefix}.b1"), &h.b1));
            out.push((format!("{prefix}.w2"), &h.w2));
            out.push((format!("{prefix}.b2"), &h.b2));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = vec![
            ("item_emb".into(), &mut self.item_emb),
            ("pos_emb".into(), &mut self.pos_emb),
            ("mlm_bias".into(), &mut self.mlm_bias),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in [
                ("wq", &mut l.wq),
                ("wk", &mut l.wk),
                ("wv", &mut l.wv),
                ("wo", &mut l.wo),
                ("bq", &mut l.bq),
                ("bk", &mut l.bk),
                ("bv", &mut l.bv),
                ("bo", &mut l.bo),
                ("ln1_g", &mut l.ln1_g),
                ("ln1_b", &mut l.ln1_b),
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
                ("ln2_g", &mut l.ln2_g),
                ("ln2_b", &mut l.ln2_b),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        for (prefix, h) in [("head_t", &mut self.head_t), ("head_p", &mut self.head_p)] {
            out.push((format!("{prefix}.w1"), &mut h.w1));
            out.push((format!("{prefix}.b1"), &mut h.b1));
            out.push((format!("{prefix}.w2"), &mut h.w2));
            out.push((format!("{prefix}.b2"), &mut h.b2));
        }
        out
    }

    /// Register every parameter on a tape. Var order matches
    /// [`Encoder::named_params`].
    pub fn bind(&self, tape: &Tape<E>) -> EncoderVars<E> {
        EncoderVars {
            cfg: self.cfg.clone(),
            item_emb: tape.leaf(self.item_emb.clone()),
            pos_emb: tape.leaf(self.pos_emb.clone()),
            mlm_bias: tape.leaf(self.mlm_bias.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    wq: tape.leaf(l.wq.clone()),
                    wk: tape.leaf(l.wk.clone()),
                    wv: tape.leaf(l.wv.clone()),
                    wo: tape.leaf(l.wo.clone()),
                    bq: tape.leaf(l.bq.clone()),
                    bk: tape.leaf(l.bk.clone()),
                    bv: tape.leaf(l.bv.clone()),
                    bo: tape.leaf(l.bo.clone()),
                    ln1_g: tape.leaf(l.ln1_g.clone()),
                    ln1_b: tape.leaf(l.ln1_b.clone()),
                    w1: tape.leaf(l.w1.clone()),
                    b1: tape.leaf(l.b1.clone()),
                    w2: tape.leaf(l.w2.clone()),
                    b2: tape.leaf(l.b2.clone()),
                    ln2_g: tape.leaf(l.ln2_g.clone()),
                    ln2_b: tape.leaf(l.ln2_b.clone()),
                })
                .collect(),
            head_t: HeadVars {
                w1: tape.leaf(self.head_t.w1.clone()),
                b1: tape.leaf(self.head_t.b1.clone()),
                w2: tape.leaf(self.head_t.w2.clone()),
                b2: tape.leaf(self.head_t.b2.clone()),
            },
            head_p: HeadVars {
                w1: tape.leaf(self.head_p.w1.clone()),
                b1: tape.leaf(self.head_p.b1.clone()),
                w2: tape.leaf(self.head_p.w2.clone()),
                b2: tape.leaf(self.head_p.b2.clone()),
            },
        }
    }

    /// Zero out the output layer of both INT heads (used by tests exercising
    /// the untrained-head contract).
    pub fn zero_int_head_outputs(&mut self) {
        for h in [&mut self.head_t, &mut self.head_p] {
            h.w2 = Tensor::zeros(h.w2.shape.clone());
            h.b2 = Tensor::zeros(h.b2.shape.clone());
        }
    }
}

struct LayerVars<E: Scalar> {
    wq: Var<E>,
    wk: Var<E>,
    wv: Var<E>,
    wo: Var<E>,
    bq: Var<E>,
    bk: Var<E>,
    bv: Var<E>,
    bo: Var<E>,
    ln1_g: Var<E>,
    ln1_b: Var<E>,
    w1: Var<E>,
    b1: Var<E>,
    w2: Var<E>,
    b2: Var<E>,
    ln2_g: Var<E>,
    ln2_b: Var<E>,
}

struct HeadVars<E: Scalar> {
    w1: Var<E>,
    b1: Var<E>,
    w2: Var<E>,
    b2: Var<E>,
}

/// Tape-bound encoder for one forward/backward pass.
pub struct EncoderVars<E: Scalar> {
    cfg: EncoderConfig,
    pub item_emb: Var<E>,
    pub pos_emb: Var<E>,
    pub mlm_bias: Var<E>,
    layers: Vec<LayerVars<E>>,
    head_t: HeadVars<E>,
    head_p: HeadVars<E>,
}

const NEG_INF: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

impl<E: Scalar> EncoderVars<E> {
    /// Vars in [`Encoder::named_params`] order.
    pub fn params(&self) -> Vec<Var<E>> {
        let mut out = vec![self.item_emb.clone(), self.pos_emb.clone(), self.mlm_bias.clone()];
        for l in &self.layers {
            out.extend(
                [
                    &l.wq, &l.wk, &l.wv, &l.wo, &l.bq, &l.bk, &l.bv, &l.bo, &l.ln1_g, &l.ln1_b,
                    &l.w1, &l.b1, &l.w2, &l.b2, &l.ln2_g, &l.ln2_b,
                ]
                .into_iter()
                .cloned(),
            );
        }
        for h in [&self.head_t, &self.head_p] {
            out.extend([&h.w1, &h.b1, &h.w2, &h.b2].into_iter().cloned());
        }
        out
    }

    /// Bidirectional encode of one token row (length ≤ max_len, PAD allowed
    /// anywhere). Returns the L×d hidden-state matrix. PAD positions are
    /// never attended to.
    pub fn encode_one<R: Rng>(&self, tokens: &[u32], train: bool, rng: &mut R) -> Var<E> {
        assert!(
            tokens.len() <= self.cfg.max_len,
            "sequence longer than max_len; caller must truncate"
        );
        assert!(!tokens.is_empty(), "cannot encode an empty sequence");
        assert!(
            tokens.iter().all(|&t| (t as usize) < self.cfg.vocab_size),
            "token index out of vocabulary"
        );
        let len = tokens.len();
        let d = self.cfg.hidden_dim;
        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..len).collect();

        // Additive attention mask: PAD columns get -1e9 in every row.
        let mut mask = Tensor::zeros(vec![len, len]);
        for (j, &t) in tokens.iter().enumerate() {
            if t == PAD {
                for r in 0..len {
                    mask.data[r * len + j] = E::from_f64c(NEG_INF);
                }
            }
        }

        let mut x = self.item_emb.gather_rows(&idx).add(&self.pos_emb.gather_rows(&pos));
        let scale = E::from_f64c(1.0 / (dh as f64).sqrt());
        for l in &self.layers {
            let q = x.matmul(&l.wq).add_row(&l.bq);
            let k = x.matmul(&l.wk).add_row(&l.bk);
            let v = x.matmul(&l.wv).add_row(&l.bv);
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = q.slice_cols(lo, hi);
                let kh = k.slice_cols(lo, hi);
                let vh = v.slice_cols(lo, hi);
                let scores = qh.matmul_nt(&kh).scale(scale).add_const(&mask);
                head_outs.push(scores.softmax_rows().matmul(&vh));
            }
            let mut attn = Var::concat_cols(&head_outs).matmul(&l.wo).add_row(&l.bo);
            if train && self.cfg.dropout > 0.0 {
                attn = attn.dropout(self.cfg.dropout, rng);
            }
            x = x.add(&attn).layer_norm(&l.ln1_g, &l.ln1_b, LN_EPS);
            let mut ff = x.matmul(&l.w1).add_row(&l.b1).gelu().matmul(&l.w2).add_row(&l.b2);
            if train && self.cfg.dropout > 0.0 {
                ff = ff.dropout(self.cfg.dropout, rng);
            }
            x = x.add(&ff).layer_norm(&l.ln2_g, &l.ln2_b, LN_EPS);
        }
        x
    }

    /// Vocabulary logits at the queried positions of one encoded sequence:
    /// hidden · item_embᵀ + bias (tied weights).
    pub fn mlm_logits(&self, hidden: &Var<E>, positions: &[usize]) -> Var<E> {
        hidden.gather_rows(positions).matmul_nt(&self.item_emb).add_row(&self.mlm_bias)
    }

    /// Binary probability from the hidden state at the INT position.
    pub fn int_prob(&self, hidden: &Var<E>, int_position: usize, head: IntHead) -> Var<E> {
        let h = match head {
            IntHead::Temporal => &self.head_t,
            IntHead::Persona => &self.head_p,
        };
        hidden
            .row(int_position)
            .matmul(&h.w1)
            .add_row(&h.b1)
            .gelu()
            .matmul(&h.w2)
            .add_row(&h.b2)
            .sigmoid()
    }
}

/// Mean cloze loss over a masked batch.
pub fn mlm_loss<E: Scalar, R: Rng>(
    vars: &EncoderVars<E>,
    batch: &crate::data::MlmBatch,
    train: bool,
    rng: &mut R,
) -> Var<E> {
    assert!(!batch.labels.is_empty(), "MLM batch has no masked positions");
    let mut logit_blocks = Vec::new();
    let mut targets = Vec::new();
    for (row, tokens) in batch.tokens.iter().enumerate() {
        let positions: Vec<usize> = batch
            .labels
            .iter()
            .filter(|(r, _, _)| *r == row)
            .map(|(_, p, _)| *p)
            .collect();
        if positions.is_empty() {
            continue;
        }
        let hidden = vars.encode_one(tokens, train, rng);
        logit_blocks.push(vars.mlm_logits(&hidden, &positions));
        targets.extend(
            batch.labels.iter().filter(|(r, _, _)| *r == row).map(|(_, _, item)| *item as usize),
        );
    }
    Var::concat_rows(&logit_blocks).cross_entropy_mean(&targets)
}

/// Next-item distribution: append MASK to the prefix, read the softmax at
/// that position, zero out reserved tokens, renormalize.
pub fn predict_next<E: Scalar>(encoder: &Encoder<E>, prefix: &[u32]) -> Result<Vec<E>> {
    if prefix.is_empty() {
        return Err(Error::Contract("predict_next requires a non-empty prefix".into()));
    }
    let scores = next_item_scores(encoder, prefix);
    let mut probs = crate::numerics::kernels::softmax_unchecked(&scores);
    for i in 0..NUM_RESERVED {
        probs[i] = E::zero();
    }
    let z: E = probs.iter().copied().sum();
    for p in probs.iter_mut() {
        *p = *p / z;
    }
    Ok(probs)
}

/// Raw next-item logits with reserved tokens pushed to -1e9. Softmax of this
/// equals [`predict_next`]; the raw form is what ranking evaluation needs.
pub fn next_item_scores<E: Scalar>(encoder: &Encoder<E>, prefix: &[u32]) -> Vec<E> {
    assert!(!prefix.is_empty());
    let keep = encoder.cfg.max_len - 1;
    let start = prefix.len().saturating_sub(keep);
    let mut tokens: Vec<u32> = prefix[start..].to_vec();
    tokens.push(MASK);
    let mask_pos = tokens.len() - 1;
    let tape = Tape::new();
    let vars = encoder.bind(&tape);
    let mut rng = crate::data::worker_rng(0, 0); // unused in eval mode
    let hidden = vars.encode_one(&tokens, false, &mut rng);
    let logits = vars.mlm_logits(&hidden, &[mask_pos]);
    let mut out = logits.value().data;
    for slot in out.iter_mut().take(NUM_RESERVED) {
        *slot = E::from_f64c(NEG_INF);
    }
    out
}

/// Tokens for a consistency-task sample: most recent max_len−1 items plus a
/// trailing INT. Returns (tokens, INT position).
pub fn with_int_token(prefix: &[u32], max_len: usize) -> (Vec<u32>, usize) {
    let keep = max_len - 1;
    let start = prefix.len().saturating_sub(keep);
    let mut tokens: Vec<u32> = prefix[start..].to_vec();
    tokens.push(INT);
    let pos = tokens.len() - 1;
    (tokens, pos)
}

/// Build [`EncoderVars`] over pre-registered leaves, in
/// [`Encoder::named_params`] order. Gradcheck needs the leaves it perturbs to
/// be the exact vars the loss consumes.
#[cfg(test)]
pub(crate) fn rebind_with(
    model: &Encoder<f64>,
    vars: &[crate::numerics::Var<f64>],
) -> EncoderVars<f64> {
    let mut it = vars.iter().cloned();
    let mut next = || it.next().expect("one var per parameter");
    let item_emb = next();
    let pos_emb = next();
    let mlm_bias = next();
    let layers = (0..model.cfg.num_layers)
        .map(|_| LayerVars {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            bq: next(),
            bk: next(),
            bv: next(),
            bo: next(),
            ln1_g: next(),
            ln1_b: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            ln2_g: next(),
            ln2_b: next(),
        })
        .collect();
    let head_t = HeadVars { w1: next(), b1: next(), w2: next(), b2: next() };
    let head_p = HeadVars { w1: next(), b1: next(), w2: next(), b2: next() };
    EncoderVars { cfg: model.cfg.clone(), item_emb, pos_emb, mlm_bias, layers, head_t, head_p }
}
