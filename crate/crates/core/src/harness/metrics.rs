//! Aggregation, token buckets and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::SessionResult;
use crate::ingest::UserHistory;
use crate::prompts::MethodSpec;
use crate::ranking::{ndcg_at_k, K_VALUES};
use crate::tokenize::Tokenizer;

pub const METRICS_HEADER: &str = "method_family,use_reviews,use_extractor,use_updater,k,ndcg_x100,mean_input_tokens,hallucination_rate,repaired_rate,fallback_rate,n_users,n_sessions";
pub const TRADEOFF_HEADER: &str = "bucket,method,ndcg_x100,mean_input_tokens";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: MethodSpec,
    pub k: usize,
    /// Per-user mean over sessions, then unweighted mean over users, ×100.
    pub ndcg_x100: f64,
    /// Flat mean of recommender prompt tokens over sessions.
    pub mean_input_tokens: f64,
    /// Fraction of sessions with at least one hallucinated label.
    pub hallucination_rate: f64,
    pub repaired_rate: f64,
    /// Fraction of sessions where any component fell back.
    pub fallback_rate: f64,
    pub n_users: usize,
    pub n_sessions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    /// Sorted by method, then k.
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, method: &MethodSpec, k: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == *method && r.k == k)
    }

    pub fn methods(&self) -> Vec<MethodSpec> {
        let set: BTreeSet<MethodSpec> = self.rows.iter().map(|r| r.method).collect();
        set.into_iter().collect()
    }
}

/// Two-level macro average per (method, k). The result does not depend on
/// the order of `results`: sessions are grouped and summed in a fixed order.
pub fn aggregate(results: &[SessionResult]) -> MetricsTable {
    let mut grouped: BTreeMap<MethodSpec, BTreeMap<&str, Vec<&SessionResult>>> = BTreeMap::new();
    for r in results {
        grouped
            .entry(r.method)
            .or_default()
            .entry(r.user_id.as_str())
            .or_default()
            .push(r);
    }

    let mut rows = Vec::new();
    for (method, users) in grouped {
        let mut sessions: Vec<&SessionResult> = Vec::new();
        for list in users.values() {
            let mut list = list.clone();
            list.sort_by_key(|r| r.target);
            sessions.extend(list);
        }
        let n = sessions.len();
        let frac = |pred: &dyn Fn(&SessionResult) -> bool| {
            sessions.iter().filter(|r| pred(r)).count() as f64 / n as f64
        };
        let total_tokens: u64 = sessions.iter().map(|r| r.recommender_prompt_tokens).sum();
        let mean_input_tokens = total_tokens as f64 / n as f64;
        let hallucination_rate = frac(&|r| r.ranking.hallucinated_count > 0);
        let repaired_rate = frac(&|r| r.ranking.repaired);
        let fallback_rate = frac(&|r| r.parse_fallbacks > 0);

        for k in K_VALUES {
            let mut macro_sum = 0.0;
            for list in users.values() {
                let mut list = list.clone();
                list.sort_by_key(|r| r.target);
                let user_sum: f64 = list
                    .iter()
                    .map(|r| ndcg_at_k(r.ranking.truth_rank, k))
                    .sum();
                macro_sum += user_sum / list.len() as f64;
            }
            rows.push(MetricsRow {
                method,
                k,
                ndcg_x100: 100.0 * macro_sum / users.len() as f64,
                mean_input_tokens,
                hallucination_rate,
                repaired_rate,
                fallback_rate,
                n_users: users.len(),
                n_sessions: n,
            });
        }
    }
    MetricsTable { rows }
}

pub fn metrics_csv(table: &MetricsTable) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.2},{:.6},{:.6},{:.6},{},{}",
            r.method.family,
            r.method.use_reviews,
            r.method.use_extractor,
            r.method.use_updater,
            r.k,
            r.ndcg_x100,
            r.mean_input_tokens,
            r.hallucination_rate,
            r.repaired_rate,
            r.fallback_rate,
            r.n_users,
            r.n_sessions
        )
        .unwrap();
    }
    out
}

/// Review-length bands for the trade-off report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Short,
    Middle,
    Long,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Short, Bucket::Middle, Bucket::Long];

    pub fn as_str(&self) -> &'static str {
        match self {
            Bucket::Short => "short",
            Bucket::Middle => "middle",
            Bucket::Long => "long",
        }
    }

    /// `[0,500)`, `[500,1000)`, `[1000,2000)`; anything longer has no bucket.
    pub fn of(tokens: u64) -> Option<Bucket> {
        match tokens {
            0..500 => Some(Bucket::Short),
            500..1000 => Some(Bucket::Middle),
            1000..2000 => Some(Bucket::Long),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketAssignment {
    pub tokenizer: String,
    pub members: BTreeMap<Bucket, BTreeSet<String>>,
    /// Users with 2000 or more review tokens; kept in the main table only.
    pub excluded: BTreeSet<String>,
    /// Total review-text tokens per user.
    pub review_tokens: BTreeMap<String, u64>,
}

impl BucketAssignment {
    pub fn sizes(&self) -> [usize; 3] {
        Bucket::ALL.map(|b| self.members.get(&b).map_or(0, BTreeSet::len))
    }

    pub fn bucket_of(&self, user_id: &str) -> Option<Bucket> {
        self.review_tokens.get(user_id).and_then(|&t| Bucket::of(t))
    }
}

/// Buckets users by the token count of all their review texts.
pub fn bucket_users(histories: &[UserHistory], tokenizer: Tokenizer) -> BucketAssignment {
    let mut out = BucketAssignment {
        tokenizer: tokenizer.id().to_string(),
        members: Bucket::ALL.iter().map(|&b| (b, BTreeSet::new())).collect(),
        ..BucketAssignment::default()
    };
    for h in histories {
        let tokens: u64 = h.records.iter().map(|r| tokenizer.count(&r.text)).sum();
        out.review_tokens.insert(h.user_id.clone(), tokens);
        match Bucket::of(tokens) {
            Some(b) => {
                out.members.entry(b).or_default().insert(h.user_id.clone());
            }
            None => {
                out.excluded.insert(h.user_id.clone());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub bucket: Bucket,
    pub method: MethodSpec,
    pub ndcg_x100: f64,
    pub mean_input_tokens: f64,
    pub n_users: usize,
}

/// Per-bucket macro NDCG at `k` and mean prompt tokens for every method.
pub fn tradeoff_rows(
    results: &[SessionResult],
    buckets: &BucketAssignment,
    k: usize,
) -> Vec<TradeoffRow> {
    let mut rows = Vec::new();
    for bucket in Bucket::ALL {
        let Some(members) = buckets.members.get(&bucket) else {
            continue;
        };
        let subset: Vec<SessionResult> = results
            .iter()
            .filter(|r| members.contains(&r.user_id))
            .cloned()
            .collect();
        let table = aggregate(&subset);
        for row in table.rows.iter().filter(|r| r.k == k) {
            rows.push(TradeoffRow {
                bucket,
                method: row.method,
                ndcg_x100: row.ndcg_x100,
                mean_input_tokens: row.mean_input_tokens,
                n_users: row.n_users,
            });
        }
    }
    rows
}

pub fn tradeoff_csv(rows: &[TradeoffRow]) -> String {
    let mut out = String::from(TRADEOFF_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.2}",
            r.bucket.as_str(),
            r.method.key(),
            r.ndcg_x100,
            r.mean_input_tokens
        )
        .unwrap();
    }
    out
}

/// Plain-text report: a compact NDCG table followed by the component grid
/// with token counts.
pub fn render_tables(table: &MetricsTable) -> String {
    if table.is_empty() {
        return "no sessions recorded for this run\n".to_string();
    }
    let methods = table.methods();
    let cell = |m: &MethodSpec, k| table.get(m, k).map_or(f64::NAN, |r| r.ndcg_x100);
    let width = methods
        .iter()
        .map(|m| m.key().len())
        .max()
        .unwrap_or(6)
        .max(6);

    let mut out = String::new();
    write!(out, "{:<width$}", "method").unwrap();
    for k in K_VALUES {
        write!(out, " {:>7}", format!("N@{k}")).unwrap();
    }
    out.push('\n');
    for m in &methods {
        write!(out, "{:<width$}", m.key()).unwrap();
        for k in K_VALUES {
            write!(out, " {:>7.2}", cell(m, k)).unwrap();
        }
        out.push('\n');
    }

    out.push('\n');
    write!(
        out,
        "{:<10} {:>4} {:>4} {:>4}",
        "family", "rev", "ext", "upd"
    )
    .unwrap();
    for k in K_VALUES {
        write!(out, " {:>7}", format!("N@{k}")).unwrap();
    }
    writeln!(out, " {:>10} {:>6} {:>8}", "|T|", "users", "sessions").unwrap();
    let mark = |b: bool| if b { "x" } else { "-" };
    for m in &methods {
        write!(
            out,
            "{:<10} {:>4} {:>4} {:>4}",
            m.family.as_str(),
            mark(m.use_reviews),
            mark(m.use_extractor),
            mark(m.use_updater)
        )
        .unwrap();
        for k in K_VALUES {
            write!(out, " {:>7.2}", cell(m, k)).unwrap();
        }
        let first = table
            .get(m, K_VALUES[0])
            .expect("every method has all cutoffs");
        writeln!(
            out,
            " {:>10.2} {:>6} {:>8}",
            first.mean_input_tokens, first.n_users, first.n_sessions
        )
        .unwrap();
    }
    out
}
