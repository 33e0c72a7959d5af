//! Interaction-log ingestion, preprocessing, splits, corruption batches, and
//! synthetic corpora.
//!
//! Preprocessing keeps users with at least five interactions (the filter
//! applies to users only), orders each user's items chronologically with ties
//! broken by file order, and holds out the last two interactions per user as
//! validation and test targets.

pub mod batch;
pub mod synthetic;

pub use batch::{
    global_pairs, make_mlm_batch, replace_ngrams, sample_negatives, shuffle_ngrams, worker_rng,
    MlmBatch, SkipSample,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Reserved vocabulary indices. Real items start at [`NUM_RESERVED`].
pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const INT: u32 = 2;
pub const NUM_RESERVED: usize = 3;

/// Bijective map between raw item ids and dense indices ≥ 3.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    item_to_index: HashMap<String, u32>,
    index_to_item: Vec<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary {
            item_to_index: HashMap::new(),
            index_to_item: vec!["<pad>".into(), "<mask>".into(), "<int>".into()],
        }
    }

    pub fn intern(&mut self, item: &str) -> u32 {
        if let Some(&i) = self.item_to_index.get(item) {
            return i;
        }
        let idx = self.index_to_item.len() as u32;
        self.index_to_item.push(item.to_string());
        self.item_to_index.insert(item.to_string(), idx);
        idx
    }

    pub fn index_of(&self, item: &str) -> Option<u32> {
        self.item_to_index.get(item).copied()
    }

    pub fn name_of(&self, index: u32) -> &str {
        &self.index_to_item[index as usize]
    }

    /// Total vocabulary size including the three reserved tokens.
    pub fn size(&self) -> usize {
        self.index_to_item.len()
    }

    /// Number of real items.
    pub fn num_items(&self) -> usize {
        self.index_to_item.len() - NUM_RESERVED
    }

    pub fn is_real(&self, index: u32) -> bool {
        (index as usize) >= NUM_RESERVED && (index as usize) < self.size()
    }

    pub fn real_items(&self) -> impl Iterator<Item = u32> {
        (NUM_RESERVED as u32)..(self.size() as u32)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

/// One user's chronologically ordered interaction history.
#[derive(Debug, Clone)]
pub struct InteractionSequence {
    pub user: usize,
    pub items: Vec<u32>,
    pub timestamps: Option<Vec<i64>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub sequences: Vec<InteractionSequence>,
    pub vocab: Vocabulary,
    pub user_names: Vec<String>,
}

impl Dataset {
    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_actions(&self) -> usize {
        self.sequences.iter().map(|s| s.items.len()).sum()
    }

    pub fn stats(&self) -> DatasetStats {
        let users = self.num_users();
        let items = self.vocab.num_items();
        let actions = self.num_actions();
        DatasetStats {
            users,
            items,
            actions,
            avg_actions_per_user: actions as f64 / users.max(1) as f64,
            avg_actions_per_item: actions as f64 / items.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub avg_actions_per_user: f64,
    pub avg_actions_per_item: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    AmazonCsv,
    SessionsJsonl,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amazon-csv" => Ok(Format::AmazonCsv),
            "sessions-jsonl" => Ok(Format::SessionsJsonl),
            other => Err(Error::Config(format!("unknown format {other}"))),
        }
    }
}

const MIN_INTERACTIONS: usize = 5;

/// Parse raw interaction logs into per-user sequences.
///
/// Sorting is stable on timestamp, so equal timestamps keep file order.
/// Users with fewer than five interactions are dropped and the vocabulary
/// covers surviving items only.
pub fn ingest(path: &Path, format: Format) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    // raw user id -> list of (item name, timestamp)
    let mut per_user: Vec<(String, Vec<(String, i64)>)> = Vec::new();
    let mut user_slot: HashMap<String, usize> = HashMap::new();

    let mut push = |user: String, rows: Vec<(String, i64)>| {
        let slot = *user_slot.entry(user.clone()).or_insert_with(|| {
            per_user.push((user, Vec::new()));
            per_user.len() - 1
        });
        per_user[slot].1.extend(rows);
    };

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lnum = lineno + 1;
        match format {
            Format::AmazonCsv => {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 4 {
                    return Err(Error::Parse {
                        line: lnum,
                        msg: format!("expected 4 comma-separated fields, got {}", fields.len()),
                    });
                }
                let ts: i64 = fields[3].trim().parse().map_err(|_| Error::Parse {
                    line: lnum,
                    msg: format!("bad timestamp {:?}", fields[3]),
                })?;
                push(fields[0].trim().to_string(), vec![(fields[1].trim().to_string(), ts)]);
            }
            Format::SessionsJsonl => {
                #[derive(Deserialize)]
                struct Row {
                    user: String,
                    items: Vec<String>,
                    #[serde(default)]
                    ts: Option<Vec<i64>>,
                }
                let row: Row = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: lnum,
                    msg: e.to_string(),
                })?;
                if let Some(ts) = &row.ts {
                    if ts.len() != row.items.len() {
                        return Err(Error::Parse {
                            line: lnum,
                            msg: "ts length does not match items".into(),
                        });
                    }
                }
                let rows: Vec<(String, i64)> = match row.ts {
                    Some(ts) => row.items.into_iter().zip(ts).collect(),
                    // No timestamps: preserve order via a synthetic clock.
                    None => row.items.into_iter().map(|i| (i, 0)).collect(),
                };
                push(row.user, rows);
            }
        }
    }

    let mut vocab = Vocabulary::new();
    let mut sequences = Vec::new();
    let mut user_names = Vec::new();
    for (user, mut rows) in per_user {
        if rows.len() < MIN_INTERACTIONS {
            continue;
        }
        rows.sort_by_key(|(_, ts)| *ts); // stable: ties keep file order
        let user_idx = sequences.len();
        let items: Vec<u32> = rows.iter().map(|(item, _)| vocab.intern(item)).collect();
        let timestamps: Vec<i64> = rows.iter().map(|(_, ts)| *ts).collect();
        sequences.push(InteractionSequence { user: user_idx, items, timestamps: Some(timestamps) });
        user_names.push(user);
    }
    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset { sequences, vocab, user_names })
}

/// Per-user leave-last-two split.
#[derive(Debug, Clone)]
pub struct SplitEntry {
    pub prefix: Vec<u32>,
    pub valid: u32,
    pub test: u32,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub entries: Vec<SplitEntry>,
}

pub fn split(dataset: &Dataset) -> Result<DatasetSplit> {
    let mut entries = Vec::with_capacity(dataset.sequences.len());
    for seq in &dataset.sequences {
        let n = seq.items.len();
        if n < MIN_INTERACTIONS {
            return Err(Error::Contract(format!(
                "user {} has {} interactions; split requires ≥ {}",
                seq.user, n, MIN_INTERACTIONS
            )));
        }
        entries.push(SplitEntry {
            prefix: seq.items[..n - 2].to_vec(),
            valid: seq.items[n - 2],
            test: seq.items[n - 1],
        });
    }
    Ok(DatasetSplit { entries })
}

/// Write the processed corpus as sessions-jsonl plus a vocabulary JSON file.
/// Output is byte-deterministic for a given dataset.
pub fn save_corpus(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut sessions = fs::File::create(dir.join("sessions.jsonl"))?;
    for seq in &dataset.sequences {
        #[derive(Serialize)]
        struct Row<'a> {
            user: &'a str,
            items: Vec<&'a str>,
            #[serde(skip_serializing_if = "Option::is_none")]
            ts: Option<&'a Vec<i64>>,
        }
        let row = Row {
            user: &dataset.user_names[seq.user],
            items: seq.items.iter().map(|&i| dataset.vocab.name_of(i)).collect(),
            ts: seq.timestamps.as_ref(),
        };
        writeln!(sessions, "{}", serde_json::to_string(&row)?)?;
    }
    let vocab_names: Vec<&str> =
        dataset.vocab.real_items().map(|i| dataset.vocab.name_of(i)).collect();
    fs::write(dir.join("vocab.json"), serde_json::to_vec_pretty(&vocab_names)?)?;
    Ok(())
}

/// Load a corpus written by [`save_corpus`], restoring the exact vocabulary
/// order.
pub fn load_corpus(dir: &Path) -> Result<Dataset> {
    let vocab_names: Vec<String> = serde_json::from_slice(&fs::read(dir.join("vocab.json"))?)?;
    let mut vocab = Vocabulary::new();
    for name in &vocab_names {
        vocab.intern(name);
    }
    let file = fs::File::open(dir.join("sessions.jsonl"))?;
    let mut sequences = Vec::new();
    let mut user_names = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        #[derive(Deserialize)]
        struct Row {
            user: String,
            items: Vec<String>,
            #[serde(default)]
            ts: Option<Vec<i64>>,
        }
        let row: Row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let items: Vec<u32> = row
            .items
            .iter()
            .map(|name| {
                vocab.index_of(name).ok_or_else(|| Error::Parse {
                    line: lineno + 1,
                    msg: format!("item {name} missing from vocab.json"),
                })
            })
            .collect::<Result<_>>()?;
        sequences.push(InteractionSequence {
            user: sequences.len(),
            items,
            timestamps: row.ts,
        });
        user_names.push(row.user);
    }
    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset { sequences, vocab, user_names })
}
