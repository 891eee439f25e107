//! Amazon-style review dump ingestion.
//!
//! Reviews and metadata arrive as line-delimited JSON (optionally gzip
//! compressed). Parsing is tolerant per line: malformed lines are counted
//! and skipped, and the whole stream is rejected only when more than half
//! of its non-blank lines are unusable.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ConfigError, IngestError};

/// Number of items in every candidate slate.
pub const SLATE_SIZE: usize = 20;

/// One user–item interaction with its review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub user_id: String,
    pub item_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub text: String,
    pub rating: u8,
    pub timestamp: u64,
}

/// A user's interactions sorted by `(timestamp, item_id)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub records: Vec<ReviewRecord>,
}

impl UserHistory {
    /// Number of interactions (`k_u`).
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Interaction at 1-based timestep `t`.
    pub fn at(&self, t: usize) -> Option<&ReviewRecord> {
        t.checked_sub(1).and_then(|i| self.records.get(i))
    }

    pub fn item_ids(&self) -> HashSet<&str> {
        self.records.iter().map(|r| r.item_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: String,
    pub title: String,
}

/// The 20-item slate for one session. Exactly one entry is the ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub items: Vec<Candidate>,
    pub truth_index: usize,
    pub seed: u64,
}

impl CandidateSet {
    pub fn truth(&self) -> &Candidate {
        &self.items[self.truth_index]
    }
}

/// Outcome of [`parse_reviews`].
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ParsedReviews {
    pub records: Vec<ReviewRecord>,
    pub skipped: usize,
    /// 1-based line numbers of the first few malformed lines.
    pub skipped_lines: Vec<usize>,
}

const SAMPLE_BAD_LINES: usize = 10;

/// Opens a file, transparently decompressing gzip content.
pub fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>, IngestError> {
    let unreadable = |source| IngestError::Unreadable {
        path: path.to_path_buf(),
        source,
    };
    let mut file = File::open(path).map_err(unreadable)?;
    let mut magic = [0u8; 2];
    let n = read_up_to(&mut file, &mut magic).map_err(unreadable)?;
    let file = File::open(path).map_err(unreadable)?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn read_up_to(reader: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

/// Calls `f` with each line (1-based number, lossily decoded) of the stream.
fn for_each_line(
    mut reader: impl BufRead,
    mut f: impl FnMut(usize, &str),
) -> Result<(), IngestError> {
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|source| IngestError::Read {
                line: line_no + 1,
                source,
            })?;
        if n == 0 {
            return Ok(());
        }
        line_no += 1;
        let line = String::from_utf8_lossy(&buf);
        f(line_no, line.trim_end_matches(['\n', '\r']));
    }
}

/// Parses a line-delimited review stream using Amazon 2018 field names
/// (`reviewerID`, `asin`, `reviewText`, `overall`, `unixReviewTime`).
pub fn parse_reviews(reader: impl BufRead) -> Result<ParsedReviews, IngestError> {
    let mut out = ParsedReviews::default();
    let mut total = 0usize;
    for_each_line(reader, |line_no, line| {
        if line.trim().is_empty() {
            return;
        }
        total += 1;
        match parse_review_line(line) {
            Some(rec) => out.records.push(rec),
            None => {
                out.skipped += 1;
                if out.skipped_lines.len() < SAMPLE_BAD_LINES {
                    out.skipped_lines.push(line_no);
                }
            }
        }
    })?;
    if out.skipped * 2 > total {
        return Err(IngestError::TooManyMalformed {
            malformed: out.skipped,
            total,
            sample: out.skipped_lines,
        });
    }
    Ok(out)
}

fn parse_review_line(line: &str) -> Option<ReviewRecord> {
    let v: Value = serde_json::from_str(line).ok()?;
    let obj = v.as_object()?;
    let user_id = non_empty_str(obj.get("reviewerID")?)?;
    let item_id = non_empty_str(obj.get("asin")?)?;
    let rating = parse_rating(obj.get("overall")?)?;
    let timestamp = parse_timestamp(obj.get("unixReviewTime")?)?;
    let text = match obj.get("reviewText") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return None,
    };
    Some(ReviewRecord {
        user_id,
        item_id,
        title: String::new(),
        text,
        rating,
        timestamp,
    })
}

fn non_empty_str(v: &Value) -> Option<String> {
    let s = v.as_str()?.trim();
    (!s.is_empty()).then(|| s.to_string())
}

fn parse_rating(v: &Value) -> Option<u8> {
    let x = match v {
        Value::Number(n) => n.as_f64()?,
        Value::String(s) => s.trim().parse::<f64>().ok()?,
        _ => return None,
    };
    if x.fract() != 0.0 || !(1.0..=5.0).contains(&x) {
        return None;
    }
    Some(x as u8)
}

fn parse_timestamp(v: &Value) -> Option<u64> {
    match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Outcome of [`parse_metadata`].
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ParsedMetadata {
    pub titles: HashMap<String, String>,
    pub skipped: usize,
}

/// Parses `{asin, title}` lines into an id → trimmed title map.
///
/// Entries with a blank title count as skipped; the first entry for an id wins.
pub fn parse_metadata(reader: impl BufRead) -> Result<ParsedMetadata, IngestError> {
    let mut out = ParsedMetadata::default();
    for_each_line(reader, |_, line| {
        if line.trim().is_empty() {
            return;
        }
        let entry = serde_json::from_str::<Value>(line).ok().and_then(|v| {
            let asin = non_empty_str(v.get("asin")?)?;
            let title = non_empty_str(v.get("title")?)?;
            Some((asin, title))
        });
        match entry {
            Some((asin, title)) => {
                out.titles.entry(asin).or_insert(title);
            }
            None => out.skipped += 1,
        }
    })?;
    Ok(out)
}

/// Attaches titles; records without a metadata entry are dropped.
/// Returns the joined records and the number dropped.
pub fn join_metadata(
    records: Vec<ReviewRecord>,
    metadata: &HashMap<String, String>,
) -> (Vec<ReviewRecord>, usize) {
    let mut dropped = 0;
    let joined = records
        .into_iter()
        .filter_map(|mut rec| {
            let title = metadata.get(&rec.item_id).map(|t| t.trim()).unwrap_or("");
            if title.is_empty() {
                dropped += 1;
                return None;
            }
            rec.title = title.to_string();
            Some(rec)
        })
        .collect();
    (joined, dropped)
}

/// Groups records per user, collapses duplicate `(item_id, timestamp)` pairs to
/// their first occurrence, sorts by `(timestamp, item_id)` and keeps users with
/// at least `min_interactions` interactions. Output is ordered by user id.
pub fn build_histories(records: Vec<ReviewRecord>, min_interactions: usize) -> Vec<UserHistory> {
    let mut by_user: BTreeMap<String, Vec<ReviewRecord>> = BTreeMap::new();
    let mut seen: HashSet<(String, String, u64)> = HashSet::new();
    for rec in records {
        if seen.insert((rec.user_id.clone(), rec.item_id.clone(), rec.timestamp)) {
            by_user.entry(rec.user_id.clone()).or_default().push(rec);
        }
    }
    by_user
        .into_iter()
        .filter(|(_, recs)| recs.len() >= min_interactions)
        .map(|(user_id, mut records)| {
            records.sort_by(|a, b| {
                a.timestamp
                    .cmp(&b.timestamp)
                    .then_with(|| a.item_id.cmp(&b.item_id))
            });
            UserHistory { user_id, records }
        })
        .collect()
}

/// Counts reported by [`ingest_files`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub review_records: usize,
    pub malformed_lines: usize,
    /// First few malformed line numbers (1-based).
    pub malformed_sample: Vec<usize>,
    pub metadata_titles: usize,
    pub metadata_skipped: usize,
    pub dropped_no_title: usize,
    pub duplicates_collapsed: usize,
    pub users_seen: usize,
    pub users_kept: usize,
    pub users_too_short: usize,
    pub interactions: usize,
    pub items: usize,
    pub min_interactions: usize,
    /// Sessions a continuous run would evaluate (targets from
    /// `first_target_index`, never below 2).
    pub continuous_sessions: usize,
    /// One per kept user with at least two interactions.
    pub oneshot_sessions: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub histories: Vec<UserHistory>,
    pub summary: IngestSummary,
}

/// Reads, joins and groups a review dump and its metadata (plain or gzip).
pub fn ingest_files(
    reviews: &Path,
    metadata: &Path,
    min_interactions: usize,
    first_target_index: usize,
) -> Result<Dataset, IngestError> {
    let parsed = parse_reviews(open_maybe_gz(reviews)?)?;
    let meta = parse_metadata(open_maybe_gz(metadata)?)?;
    let review_records = parsed.records.len();
    let (joined, dropped_no_title) = join_metadata(parsed.records, &meta.titles);

    let mut keys = HashSet::new();
    let mut users = HashSet::new();
    for r in &joined {
        keys.insert((r.user_id.as_str(), r.item_id.as_str(), r.timestamp));
        users.insert(r.user_id.as_str());
    }
    let duplicates_collapsed = joined.len() - keys.len();
    let users_seen = users.len();
    drop((keys, users));

    let histories = build_histories(joined, min_interactions);
    let first = first_target_index.max(2);
    let summary = IngestSummary {
        review_records,
        malformed_lines: parsed.skipped,
        malformed_sample: parsed.skipped_lines,
        metadata_titles: meta.titles.len(),
        metadata_skipped: meta.skipped,
        dropped_no_title,
        duplicates_collapsed,
        users_seen,
        users_kept: histories.len(),
        users_too_short: users_seen - histories.len(),
        interactions: histories.iter().map(UserHistory::len).sum(),
        items: ItemPool::from_histories(&histories).len(),
        min_interactions,
        continuous_sessions: histories
            .iter()
            .map(|h| (h.len() + 1).saturating_sub(first))
            .sum(),
        oneshot_sessions: histories.iter().filter(|h| h.len() >= 2).count(),
    };
    Ok(Dataset { histories, summary })
}

/// Every distinct item appearing in a dataset split, ordered by item id.
#[derive(Debug, Clone, Default)]
pub struct ItemPool {
    items: Vec<Candidate>,
}

impl ItemPool {
    pub fn from_histories(histories: &[UserHistory]) -> Self {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for rec in histories.iter().flat_map(|h| &h.records) {
            map.entry(&rec.item_id).or_insert(&rec.title);
        }
        Self {
            items: map
                .into_iter()
                .map(|(id, title)| Candidate {
                    item_id: id.to_string(),
                    title: title.to_string(),
                })
                .collect(),
        }
    }

    pub fn from_candidates(mut items: Vec<Candidate>) -> Self {
        items.sort();
        items.dedup_by(|a, b| a.item_id == b.item_id);
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Candidate] {
        &self.items
    }

    /// Items are kept sorted by id, so membership is a binary search.
    pub fn contains(&self, item_id: &str) -> bool {
        self.items
            .binary_search_by(|c| c.item_id.as_str().cmp(item_id))
            .is_ok()
    }
}

/// Builds the slate for predicting the interaction at 1-based timestep `target`.
///
/// The 19 negatives are drawn uniformly without replacement from the pool minus
/// every item the user ever interacts with, then the 20 items are shuffled.
/// The result depends only on `(history, target, pool, seed)`.
pub fn sample_candidates(
    history: &UserHistory,
    target: usize,
    pool: &ItemPool,
    seed: u64,
) -> Result<CandidateSet, ConfigError> {
    let truth = history.at(target).ok_or(ConfigError::TargetOutOfRange {
        target,
        len: history.len(),
    })?;
    let user_items = history.item_ids();
    let needed = SLATE_SIZE - 1;
    let eligible = pool.len() - user_items.iter().filter(|id| pool.contains(id)).count();
    if eligible < needed {
        return Err(ConfigError::PoolTooSmall {
            user_id: history.user_id.clone(),
            eligible,
            needed,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<Candidate> = Vec::with_capacity(SLATE_SIZE);
    items.push(Candidate {
        item_id: truth.item_id.clone(),
        title: truth.title.clone(),
    });

    if eligible >= 4 * needed {
        // Rejection sampling: uniform over eligible items, without replacement.
        let mut chosen: HashSet<usize> = HashSet::with_capacity(needed);
        while chosen.len() < needed {
            let i = rng.random_range(0..pool.items.len());
            if user_items.contains(pool.items[i].item_id.as_str()) || !chosen.insert(i) {
                continue;
            }
            items.push(pool.items[i].clone());
        }
    } else {
        let eligible: Vec<&Candidate> = pool
            .items
            .iter()
            .filter(|c| !user_items.contains(c.item_id.as_str()))
            .collect();
        for i in index::sample(&mut rng, eligible.len(), needed) {
            items.push(eligible[i].clone());
        }
    }

    items.shuffle(&mut rng);
    let truth_index = items
        .iter()
        .position(|c| c.item_id == truth.item_id)
        .expect("truth is in the slate");
    Ok(CandidateSet {
        items,
        truth_index,
        seed,
    })
}
