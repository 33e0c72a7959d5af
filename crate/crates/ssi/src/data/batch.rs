//! Batch builders: cloze masking, the three corruption operations, and
//! evaluation negative sampling.
//!
//! Everything here is driven by a caller-supplied RNG, so corpora are
//! reproducible from (seed, input). Parallel batch builders should derive a
//! private stream per worker via [`worker_rng`].

use super::{InteractionSequence, Vocabulary, MASK, PAD};
#[cfg(test)]
use super::NUM_RESERVED;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

/// Signal that the caller should draw another sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipSample;

/// Deterministic per-worker RNG stream derived from the global seed.
pub fn worker_rng(seed: u64, worker: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker);
    rng
}

/// A cloze batch: right-padded token rows with original items recorded at
/// the masked positions.
#[derive(Debug, Clone)]
pub struct MlmBatch {
    /// batch × max_len token matrix, right-padded with PAD.
    pub tokens: Vec<Vec<u32>>,
    /// (row, position, original item) per masked slot.
    pub labels: Vec<(usize, usize, u32)>,
    /// Rows where masking was forced because no position masked naturally.
    pub forced: Vec<bool>,
}

/// Truncate each sequence to its most recent `max_len` items, right-pad, and
/// mask each non-pad position independently with probability `mask_prob`
/// (at least one mask forced per row).
pub fn make_mlm_batch<R: Rng>(
    sequences: &[&[u32]],
    mask_prob: f64,
    max_len: usize,
    rng: &mut R,
) -> MlmBatch {
    assert!(mask_prob > 0.0 && mask_prob < 1.0 || mask_prob == 1.0, "mask_prob in (0,1]");
    assert!(max_len >= 2, "max_len must be ≥ 2");
    let mut tokens = Vec::with_capacity(sequences.len());
    let mut labels = Vec::new();
    let mut forced = Vec::with_capacity(sequences.len());
    for (row, seq) in sequences.iter().enumerate() {
        let start = seq.len().saturating_sub(max_len);
        let window = &seq[start..];
        let mut toks: Vec<u32> = window.to_vec();
        toks.resize(max_len, PAD);
        let mut masked_any = false;
        for pos in 0..window.len() {
            if rng.gen_range(0.0..1.0f64) < mask_prob {
                labels.push((row, pos, window[pos]));
                toks[pos] = MASK;
                masked_any = true;
            }
        }
        if !masked_any {
            let pos = rng.gen_range(0..window.len());
            labels.push((row, pos, window[pos]));
            toks[pos] = MASK;
        }
        forced.push(!masked_any);
        tokens.push(toks);
    }
    MlmBatch { tokens, labels, forced }
}

/// Partition a sequence into non-overlapping n-grams with lengths drawn
/// uniformly from the inclusive range; the remainder becomes a final
/// (possibly shorter) gram. Returns gram lengths.
fn draw_partition<R: Rng>(len: usize, gram_range: (usize, usize), rng: &mut R) -> Vec<usize> {
    let (lo, hi) = gram_range;
    let mut grams = Vec::new();
    let mut remaining = len;
    while remaining > 0 {
        let g = rng.gen_range(lo..=hi).min(remaining);
        grams.push(g);
        remaining -= g;
    }
    grams
}

fn gram_bounds(grams: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(grams.len());
    let mut off = 0;
    for &g in grams {
        out.push((off, off + g));
        off += g;
    }
    out
}

/// Deterministic core of [`shuffle_ngrams`]: apply adjacent-gram swaps to a
/// fixed partition. `swaps` is consumed per considered pair; after a swap the
/// scan resumes past the swapped pair.
pub fn shuffle_with_partition(seq: &[u32], grams: &[usize], swaps: &[bool]) -> (Vec<u32>, usize) {
    assert_eq!(grams.iter().sum::<usize>(), seq.len());
    let mut bounds = gram_bounds(grams);
    let mut swapped = 0;
    let mut j = 0;
    let mut decision = swaps.iter();
    while j + 1 < bounds.len() {
        if *decision.next().expect("one decision per considered pair") {
            bounds.swap(j, j + 1);
            swapped += 1;
            j += 2;
        } else {
            j += 1;
        }
    }
    let mut out = Vec::with_capacity(seq.len());
    for (lo, hi) in bounds {
        out.extend_from_slice(&seq[lo..hi]);
    }
    (out, swapped)
}

/// Corrupt chronological order by swapping adjacent n-grams with probability
/// `swap_prob`. Label is `true` (shuffled) iff at least one swap occurred.
/// The item multiset is always preserved.
pub fn shuffle_ngrams<R: Rng>(
    seq: &[u32],
    swap_prob: f64,
    gram_range: (usize, usize),
    rng: &mut R,
) -> std::result::Result<(Vec<u32>, bool, usize), SkipSample> {
    if seq.len() < 2 * gram_range.0 {
        return Err(SkipSample);
    }
    let grams = draw_partition(seq.len(), gram_range, rng);
    let decisions: Vec<bool> =
        (0..grams.len()).map(|_| rng.gen_range(0.0..1.0f64) < swap_prob).collect();
    let (out, swapped) = shuffle_with_partition(seq, &grams, &decisions);
    Ok((out, swapped > 0, swapped))
}

/// Replace n-gram slots with equal-length grams from other users' sequences
/// with probability `replace_prob` per slot. Label is `true` (replaced) iff
/// at least one replacement occurred. Sequence length is preserved.
///
/// Returns (corrupted sequence, label, replacement log of
/// (slot start, length, donor user)).
pub fn replace_ngrams<R: Rng>(
    seq: &[u32],
    owner: usize,
    donors: &[InteractionSequence],
    replace_prob: f64,
    gram_range: (usize, usize),
    rng: &mut R,
) -> std::result::Result<(Vec<u32>, bool, Vec<(usize, usize, usize)>), SkipSample> {
    let candidates: Vec<&InteractionSequence> =
        donors.iter().filter(|s| s.user != owner).collect();
    if candidates.is_empty() || seq.len() < gram_range.0 {
        return Err(SkipSample);
    }
    let grams = draw_partition(seq.len(), gram_range, rng);
    let mut out = seq.to_vec();
    let mut log = Vec::new();
    for (lo, hi) in gram_bounds(&grams) {
        if rng.gen_range(0.0..1.0f64) >= replace_prob {
            continue;
        }
        // Try the slot length first, then shorter grams (filling the front
        // of the slot) if no donor is long enough.
        let mut need = hi - lo;
        let mut placed = false;
        while need > 0 && !placed {
            let feasible: Vec<&&InteractionSequence> =
                candidates.iter().filter(|s| s.items.len() >= need).collect();
            if feasible.is_empty() {
                need -= 1;
                continue;
            }
            let donor = feasible[rng.gen_range(0..feasible.len())];
            let start = rng.gen_range(0..=donor.items.len() - need);
            out[lo..lo + need].copy_from_slice(&donor.items[start..start + need]);
            log.push((lo, need, donor.user));
            placed = true;
        }
        if !placed {
            return Err(SkipSample);
        }
    }
    let replaced = !log.is_empty();
    Ok((out, replaced, log))
}

/// Pick a random n-gram span, return the sequence with the span masked and
/// the extracted gram. Reinserting the gram reconstructs the input.
pub fn global_pairs<R: Rng>(
    seq: &[u32],
    gram_range: (usize, usize),
    rng: &mut R,
) -> std::result::Result<(Vec<u32>, Vec<u32>, (usize, usize)), SkipSample> {
    let (lo, hi) = gram_range;
    if seq.len() <= hi {
        return Err(SkipSample);
    }
    let g = rng.gen_range(lo..=hi);
    let start = rng.gen_range(0..=seq.len() - g);
    let mut masked = seq.to_vec();
    for slot in masked.iter_mut().skip(start).take(g) {
        *slot = MASK;
    }
    let gram = seq[start..start + g].to_vec();
    Ok((masked, gram, (start, g)))
}

/// Draw `n` distinct items uniformly from the items the user never
/// interacted with. Deterministic for a fixed RNG state.
pub fn sample_negatives<R: Rng>(
    user_items: &HashSet<u32>,
    n: usize,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let mut candidates: Vec<u32> =
        vocab.real_items().filter(|i| !user_items.contains(i)).collect();
    if candidates.len() < n {
        return Err(Error::InsufficientItems(format!(
            "need {n} negatives, only {} items outside the user's history",
            candidates.len()
        )));
    }
    // Partial Fisher-Yates: uniform without replacement.
    for k in 0..n {
        let j = rng.gen_range(k..candidates.len());
        candidates.swap(k, j);
    }
    candidates.truncate(n);
    Ok(candidates)
}
