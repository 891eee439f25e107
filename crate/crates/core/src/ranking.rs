//! Turning model rankings into permutations of the slate, and scoring them.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::ingest::{CandidateSet, SLATE_SIZE};
use crate::tokenize::word_tokens;

/// Cutoffs reported for every method.
pub const K_VALUES: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    /// Permutation of slate indices `0..20`, best first.
    pub order: Vec<usize>,
    /// 1-based rank of the ground-truth item.
    pub truth_rank: usize,
    /// Labels that named no candidate.
    pub hallucinated_count: usize,
    /// Whether anything was dropped or appended.
    pub repaired: bool,
}

/// Maps labels `"1".."20"` to slate indices.
///
/// Unknown labels are dropped and counted as hallucinations, repeats are
/// dropped after their first occurrence, and candidates the model left
/// out are appended in slate order.
pub fn sanitize(raw_labels: &[String], slate: &CandidateSet) -> Ranking {
    let n = slate.items.len();
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    let mut hallucinated_count = 0;
    let mut repaired = false;
    for label in raw_labels {
        let idx = label
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|i| (1..=n).contains(i) && label.trim() == i.to_string());
        match idx {
            Some(i) if !seen[i - 1] => {
                seen[i - 1] = true;
                order.push(i - 1);
            }
            Some(_) => repaired = true,
            None => {
                hallucinated_count += 1;
                repaired = true;
            }
        }
    }
    for (i, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
        order.push(i);
        repaired = true;
    }
    let truth_rank = 1 + order
        .iter()
        .position(|&i| i == slate.truth_index)
        .expect("order is a permutation");
    Ranking {
        order,
        truth_rank,
        hallucinated_count,
        repaired,
    }
}

/// NDCG@k with a single relevant item: `1 / log2(rank + 1)` inside the
/// cutoff, 0 outside.
///
/// # Panics
///
/// When `truth_rank` or `k` lies outside `1..=20`.
pub fn ndcg_at_k(truth_rank: usize, k: usize) -> f64 {
    assert!(
        (1..=SLATE_SIZE).contains(&truth_rank),
        "truth_rank {truth_rank} outside 1..={SLATE_SIZE}"
    );
    assert!(
        (1..=SLATE_SIZE).contains(&k),
        "k {k} outside 1..={SLATE_SIZE}"
    );
    if truth_rank <= k {
        1.0 / ((truth_rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Orders candidate labels by the mock scoring rule:
/// `|tokens(title) ∩ positive| − |tokens(title) ∩ negative|`, descending,
/// ties broken by title then label.
pub fn overlap_order(
    candidates: &[(usize, String)],
    positive: &HashSet<String>,
    negative: &HashSet<String>,
) -> Vec<usize> {
    let mut scored: Vec<(i64, &str, usize)> = candidates
        .iter()
        .map(|(label, title)| {
            let toks: HashSet<String> = word_tokens(title).collect();
            let pos = toks.intersection(positive).count() as i64;
            let neg = toks.intersection(negative).count() as i64;
            (pos - neg, title.as_str(), *label)
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    scored.into_iter().map(|(_, _, l)| l).collect()
}
