//! Check-in corpus: data model, ingestion, filtering, truncation and the
//! leave-last-out split.
//!
//! POIs are addressed by a dense [`PoiIdx`] into the corpus catalog; the
//! external `poi_id` strings only matter at the file boundary.

mod geo;
mod regions;
mod synth;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use geo::{haversine_km, EARTH_RADIUS_KM};
pub use regions::{cluster_regions, cluster_regions_traced, RegionMap, DEFAULT_REGIONS};
pub use synth::{synth_corpus, synth_corpus_with_truth, SynthConfig, SynthCorpus};

pub type PoiIdx = u32;
pub type CatId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub poi_id: String,
    pub lat: f64,
    pub lon: f64,
    pub category_id: CatId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckIn {
    pub poi: PoiIdx,
    /// Seconds since the epoch. Only used for ordering.
    pub ts: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckInSequence {
    pub user_id: String,
    pub events: Vec<CheckIn>,
}

impl CheckInSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn pois(&self) -> Vec<PoiIdx> {
        self.events.iter().map(|e| e.poi).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySequence {
    /// `None` for generated sequences.
    pub user_id: Option<String>,
    pub categories: Vec<CatId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckInCorpus {
    pub pois: Vec<Poi>,
    pub num_categories: u32,
    pub sequences: Vec<CheckInSequence>,
}

#[derive(Deserialize)]
struct Record {
    user_id: String,
    poi_id: String,
    lat: f64,
    lon: f64,
    category_id: i64,
    ts: i64,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    user_id: &'a str,
    poi_id: &'a str,
    lat: f64,
    lon: f64,
    category_id: CatId,
    ts: i64,
}

pub fn load_corpus(path: impl AsRef<Path>, format: Format) -> Result<CheckInCorpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        Format::Jsonl => parse_jsonl(BufReader::new(file)),
    }
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<CheckInCorpus> {
    let mut corpus = CheckInCorpus::default();
    let mut poi_index: HashMap<String, PoiIdx> = HashMap::new();
    let mut user_index: HashMap<String, usize> = HashMap::new();

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if !(-90.0..=90.0).contains(&rec.lat) {
            return Err(Error::Range {
                line: lineno,
                field: "lat",
                value: rec.lat.to_string(),
            });
        }
        if !(-180.0..=180.0).contains(&rec.lon) {
            return Err(Error::Range {
                line: lineno,
                field: "lon",
                value: rec.lon.to_string(),
            });
        }
        if rec.category_id < 0 || rec.category_id > u32::MAX as i64 - 1 {
            return Err(Error::Range {
                line: lineno,
                field: "category_id",
                value: rec.category_id.to_string(),
            });
        }
        let category_id = rec.category_id as CatId;

        let poi = match poi_index.get(&rec.poi_id) {
            Some(&idx) => {
                let known = &corpus.pois[idx as usize];
                if known.lat != rec.lat || known.lon != rec.lon {
                    return Err(Error::Integrity(format!(
                        "line {lineno}: poi `{}` has coordinates ({}, {}) but was first seen at ({}, {})",
                        rec.poi_id, rec.lat, rec.lon, known.lat, known.lon
                    )));
                }
                if known.category_id != category_id {
                    return Err(Error::Integrity(format!(
                        "line {lineno}: poi `{}` has category {} but was first seen with {}",
                        rec.poi_id, category_id, known.category_id
                    )));
                }
                idx
            }
            None => {
                let idx = corpus.pois.len() as PoiIdx;
                corpus.pois.push(Poi {
                    poi_id: rec.poi_id.clone(),
                    lat: rec.lat,
                    lon: rec.lon,
                    category_id,
                });
                poi_index.insert(rec.poi_id, idx);
                corpus.num_categories = corpus.num_categories.max(category_id + 1);
                idx
            }
        };

        let slot = *user_index.entry(rec.user_id.clone()).or_insert_with(|| {
            corpus.sequences.push(CheckInSequence {
                user_id: rec.user_id.clone(),
                events: Vec::new(),
            });
            corpus.sequences.len() - 1
        });
        corpus.sequences[slot].events.push(CheckIn { poi, ts: rec.ts });
    }

    for seq in &mut corpus.sequences {
        // stable: equal timestamps keep file order
        seq.events.sort_by_key(|e| e.ts);
    }
    Ok(corpus)
}

impl CheckInCorpus {
    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_pois(&self) -> usize {
        self.pois.len()
    }

    pub fn num_checkins(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn category_of(&self, poi: PoiIdx) -> CatId {
        self.pois[poi as usize].category_id
    }

    pub fn category_sequence(&self, seq: &CheckInSequence) -> CategorySequence {
        CategorySequence {
            user_id: Some(seq.user_id.clone()),
            categories: seq.events.iter().map(|e| self.category_of(e.poi)).collect(),
        }
    }

    pub fn categories_of(&self, pois: &[PoiIdx]) -> Vec<CatId> {
        pois.iter().map(|&p| self.category_of(p)).collect()
    }

    /// Check-in count per POI.
    pub fn poi_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.pois.len()];
        for seq in &self.sequences {
            for e in &seq.events {
                counts[e.poi as usize] += 1;
            }
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.pois.iter().enumerate() {
            if !(-90.0..=90.0).contains(&p.lat) || !(-180.0..=180.0).contains(&p.lon) {
                return Err(Error::Integrity(format!("poi {i} has invalid coordinates")));
            }
            if p.category_id >= self.num_categories {
                return Err(Error::Integrity(format!(
                    "poi {i} has category {} >= {}",
                    p.category_id, self.num_categories
                )));
            }
        }
        for seq in &self.sequences {
            if seq.events.is_empty() {
                return Err(Error::Integrity(format!("user {} has no events", seq.user_id)));
            }
            if seq.events.windows(2).any(|w| w[0].ts > w[1].ts) {
                return Err(Error::Integrity(format!(
                    "user {} has decreasing timestamps",
                    seq.user_id
                )));
            }
            if let Some(e) = seq.events.iter().find(|e| e.poi as usize >= self.pois.len()) {
                return Err(Error::Integrity(format!("unknown poi index {}", e.poi)));
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for seq in &self.sequences {
            for e in &seq.events {
                let p = &self.pois[e.poi as usize];
                let rec = RecordOut {
                    user_id: &seq.user_id,
                    poi_id: &p.poi_id,
                    lat: p.lat,
                    lon: p.lon,
                    category_id: p.category_id,
                    ts: e.ts,
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    /// Drops POIs without check-ins and renumbers the rest, keeping order.
    fn compact(mut self) -> Self {
        let counts = self.poi_counts();
        let mut remap = vec![PoiIdx::MAX; self.pois.len()];
        let mut pois = Vec::new();
        for (i, p) in self.pois.into_iter().enumerate() {
            if counts[i] > 0 {
                remap[i] = pois.len() as PoiIdx;
                pois.push(p);
            }
        }
        for seq in &mut self.sequences {
            for e in &mut seq.events {
                e.poi = remap[e.poi as usize];
            }
        }
        self.pois = pois;
        self
    }
}

/// Removes users and POIs with fewer than `min` interactions, repeating until
/// nothing changes.
pub fn filter_min_interactions(corpus: &CheckInCorpus, min: usize) -> Result<CheckInCorpus> {
    if min == 0 {
        return Err(Error::Param("min_interactions must be at least 1".into()));
    }
    let mut out = corpus.clone();
    loop {
        let counts = out.poi_counts();
        let before = out.num_checkins() + out.num_users();
        for seq in &mut out.sequences {
            seq.events.retain(|e| counts[e.poi as usize] >= min);
        }
        out.sequences.retain(|s| s.len() >= min);
        if out.num_checkins() + out.num_users() == before {
            break;
        }
    }
    Ok(out.compact())
}

/// Keeps the most recent `max_len` events of each sequence.
pub fn truncate_sequences(corpus: &CheckInCorpus, max_len: usize) -> Result<CheckInCorpus> {
    if max_len < 3 {
        return Err(Error::Param(format!("max_len must be at least 3, got {max_len}")));
    }
    let mut out = corpus.clone();
    for seq in &mut out.sequences {
        if seq.events.len() > max_len {
            let cut = seq.events.len() - max_len;
            seq.events.drain(..cut);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: String,
    pub train: Vec<CheckIn>,
    pub val: Option<CheckIn>,
    pub test: Option<CheckIn>,
}

impl UserSplit {
    pub fn is_evaluable(&self) -> bool {
        self.val.is_some() && self.test.is_some()
    }

    pub fn train_pois(&self) -> Vec<PoiIdx> {
        self.train.iter().map(|e| e.poi).collect()
    }

    /// History preceding the test event: train followed by the validation event.
    pub fn test_context(&self) -> Vec<PoiIdx> {
        self.train.iter().chain(self.val.iter()).map(|e| e.poi).collect()
    }

    pub fn all_events(&self) -> Vec<CheckIn> {
        self.train
            .iter()
            .chain(self.val.iter())
            .chain(self.test.iter())
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCorpus {
    pub users: Vec<UserSplit>,
}

impl SplitCorpus {
    pub fn evaluable(&self) -> impl Iterator<Item = (usize, &UserSplit)> {
        self.users.iter().enumerate().filter(|(_, u)| u.is_evaluable())
    }
}

/// Last event for testing, second-last for validation, the rest for training.
/// Users with fewer than three events keep everything in train and are not evaluable.
pub fn split_leave_last_out(corpus: &CheckInCorpus) -> SplitCorpus {
    let users = corpus
        .sequences
        .iter()
        .map(|seq| {
            let n = seq.events.len();
            if n < 3 {
                UserSplit {
                    user_id: seq.user_id.clone(),
                    train: seq.events.clone(),
                    val: None,
                    test: None,
                }
            } else {
                UserSplit {
                    user_id: seq.user_id.clone(),
                    train: seq.events[..n - 2].to_vec(),
                    val: Some(seq.events[n - 2]),
                    test: Some(seq.events[n - 1]),
                }
            }
        })
        .collect();
    SplitCorpus { users }
}
