//! Planted-structure synthetic corpora for tests and desk-scale experiments.
//!
//! Items are split into persona pools; each user walks a Markov chain over
//! their pool's items, and each emission is replaced by a uniform random item
//! with the noise probability. The chain advances regardless of noise, so
//! noise corrupts observations without derailing the walk.

use super::{Dataset, InteractionSequence, Vocabulary, NUM_RESERVED};
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_items: usize,
    pub num_users: usize,
    /// Items are partitioned evenly into this many pools; user `u` belongs to
    /// pool `u % num_pools`.
    pub num_pools: usize,
    /// Row-stochastic transition matrix over pool-local item indices.
    pub transition: Vec<Vec<f64>>,
    pub noise_prob: f64,
    /// Inclusive sequence length range.
    pub len_range: (usize, usize),
}

impl SyntheticSpec {
    /// Cycle-with-noise chain: from local item `i`, go to `i+1 (mod pool)`
    /// with `succ_prob`, otherwise jump uniformly within the pool.
    pub fn markov_cycle(
        num_items: usize,
        num_users: usize,
        num_pools: usize,
        succ_prob: f64,
        noise_prob: f64,
        len_range: (usize, usize),
    ) -> Self {
        let pool = num_items / num_pools;
        let rest = (1.0 - succ_prob) / pool as f64;
        let mut transition = vec![vec![rest; pool]; pool];
        for (i, row) in transition.iter_mut().enumerate() {
            row[(i + 1) % pool] += succ_prob;
        }
        SyntheticSpec { num_items, num_users, num_pools, transition, noise_prob, len_range }
    }

    /// Deterministic successor chain (i → i+1), useful as a planted oracle.
    pub fn deterministic_cycle(num_items: usize, num_users: usize, len_range: (usize, usize)) -> Self {
        Self::markov_cycle(num_items, num_users, 1, 1.0, 0.0, len_range)
    }

    pub fn pool_size(&self) -> usize {
        self.num_items / self.num_pools
    }

    pub fn pool_of_user(&self, user: usize) -> usize {
        user % self.num_pools
    }

    /// Global item indices (vocabulary indices) of one pool.
    pub fn pool_items(&self, pool: usize) -> std::ops::Range<u32> {
        let p = self.pool_size() as u32;
        let lo = NUM_RESERVED as u32 + pool as u32 * p;
        lo..lo + p
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_items == 0 || self.num_users == 0 || self.num_pools == 0 {
            return Err(Error::Contract("synthetic spec dimensions must be positive".into()));
        }
        if self.num_items % self.num_pools != 0 {
            return Err(Error::Contract("num_items must divide evenly into pools".into()));
        }
        let pool = self.pool_size();
        if self.transition.len() != pool {
            return Err(Error::Contract("transition matrix must match pool size".into()));
        }
        for row in &self.transition {
            if row.len() != pool {
                return Err(Error::Contract("transition matrix must be square".into()));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Contract("transition rows must sum to 1".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(Error::Contract("noise probability must be in [0,1]".into()));
        }
        if self.len_range.0 < 5 || self.len_range.0 > self.len_range.1 {
            return Err(Error::Contract("sequence length range must be ≥ 5 and ordered".into()));
        }
        Ok(())
    }
}

fn sample_row<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let mut u = rng.gen_range(0.0..1.0f64);
    for (i, &p) in row.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    row.len() - 1
}

pub fn generate_synthetic<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    let mut vocab = Vocabulary::new();
    for i in 0..spec.num_items {
        vocab.intern(&format!("i{i}"));
    }
    let pool = spec.pool_size();
    let mut sequences = Vec::with_capacity(spec.num_users);
    let mut user_names = Vec::with_capacity(spec.num_users);
    for user in 0..spec.num_users {
        let pool_base = (spec.pool_of_user(user) * pool + NUM_RESERVED) as u32;
        let len = rng.gen_range(spec.len_range.0..=spec.len_range.1);
        let mut state = rng.gen_range(0..pool);
        let mut items = Vec::with_capacity(len);
        for step in 0..len {
            if step > 0 {
                state = sample_row(&spec.transition[state], rng);
            }
            let emitted = if rng.gen_range(0.0..1.0f64) < spec.noise_prob {
                NUM_RESERVED as u32 + rng.gen_range(0..spec.num_items) as u32
            } else {
                pool_base + state as u32
            };
            items.push(emitted);
        }
        let timestamps = (0..len as i64).collect();
        sequences.push(InteractionSequence { user, items, timestamps: Some(timestamps) });
        user_names.push(format!("u{user}"));
    }
    Ok(Dataset { sequences, vocab, user_names })
}
