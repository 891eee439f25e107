//! The evolving user profile: extract per review, merge by concatenation,
//! compact with the updater.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::GatewayError;
use crate::gateway::{ChatClient, SchemaId, SchemaValue};
use crate::ingest::ReviewRecord;
use crate::prompts::{render_extractor, render_updater, ListKind};

/// What the extractor pulled out of one review (or a batch of reviews).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extracted {
    pub likes: Vec<String>,
    pub dislikes: Vec<String>,
    pub features: Vec<String>,
}

impl Extracted {
    pub fn is_empty(&self) -> bool {
        self.likes.is_empty() && self.dislikes.is_empty() && self.features.is_empty()
    }
}

/// Previous profile lists concatenated with a fresh extraction, before
/// compaction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawProfile {
    pub likes: Vec<String>,
    pub dislikes: Vec<String>,
    pub features: Vec<String>,
}

impl RawProfile {
    pub fn is_empty(&self) -> bool {
        self.likes.is_empty() && self.dislikes.is_empty() && self.features.is_empty()
    }
}

/// The user profile after `version` interactions have been folded in.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub likes: Vec<String>,
    pub dislikes: Vec<String>,
    pub features: Vec<String>,
    pub version: u32,
}

impl Profile {
    pub fn list(&self, kind: ListKind) -> &[String] {
        match kind {
            ListKind::Likes => &self.likes,
            ListKind::Dislikes => &self.dislikes,
            ListKind::Features => &self.features,
        }
    }

    /// Entries that appear in both likes and dislikes (case-insensitive).
    pub fn conflicts(&self) -> usize {
        let dislikes: HashSet<String> = self.dislikes.iter().map(|d| norm(d)).collect();
        self.likes
            .iter()
            .map(|l| norm(l))
            .collect::<HashSet<_>>()
            .intersection(&dislikes)
            .count()
    }

    /// True when no list holds two entries equal under case-insensitive trim.
    pub fn is_deduped(&self) -> bool {
        ListKind::ALL.iter().all(|&k| {
            let list = self.list(k);
            list.iter().map(|e| norm(e)).collect::<HashSet<_>>().len() == list.len()
        })
    }
}

fn norm(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Case-insensitive dedup under trim; keeps the first occurrence (trimmed)
/// and drops blank entries.
pub fn dedup_entries(list: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    list.iter()
        .map(|e| e.trim())
        .filter(|e| !e.is_empty() && seen.insert(e.to_lowercase()))
        .map(str::to_string)
        .collect()
}

/// Drops exact repeats (after trimming) and blank entries.
pub fn collapse_exact(list: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    list.iter()
        .map(|e| e.trim())
        .filter(|e| !e.is_empty() && seen.insert(*e))
        .map(str::to_string)
        .collect()
}

/// How much of the history each extractor call sees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorScope {
    /// Only the incoming review; the result is merged into the profile.
    #[default]
    Incremental,
    /// Every review to date; the result replaces the profile lists.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOptions {
    pub use_updater: bool,
    /// Run the updater on timesteps divisible by this; otherwise only exact
    /// duplicates are collapsed.
    pub updater_stride: u32,
    pub scope: ExtractorScope,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            use_updater: true,
            updater_stride: 1,
            scope: ExtractorScope::Incremental,
        }
    }
}

/// Accounting for one profile step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepStats {
    pub extractor_tokens: u64,
    pub updater_tokens: u64,
    /// Extractor or updater replies that never validated.
    pub fallbacks: u32,
    /// Updater replies longer than their input (truncated).
    pub updater_violations: u32,
}

impl StepStats {
    pub fn absorb(&mut self, other: StepStats) {
        self.extractor_tokens += other.extractor_tokens;
        self.updater_tokens += other.updater_tokens;
        self.fallbacks += other.fallbacks;
        self.updater_violations += other.updater_violations;
    }
}

/// Runs the extractor over `records` (chronological).
pub fn extract(
    records: &[&ReviewRecord],
    gateway: &dyn ChatClient,
) -> Result<(Extracted, u64), GatewayError> {
    let outcome =
        gateway.complete_json(&gateway.request(render_extractor(records), SchemaId::Extract))?;
    let SchemaValue::Extract {
        likes,
        dislikes,
        key_features,
    } = outcome.parsed_value
    else {
        unreachable!("gateway validated the extract schema");
    };
    Ok((
        Extracted {
            likes,
            dislikes,
            features: key_features,
        },
        outcome.prompt_tokens,
    ))
}

/// Order-preserving concatenation of the previous lists and the new ones.
pub fn merge(prev: &Profile, ext: &Extracted) -> RawProfile {
    let cat = |a: &[String], b: &[String]| a.iter().chain(b).cloned().collect();
    RawProfile {
        likes: cat(&prev.likes, &ext.likes),
        dislikes: cat(&prev.dislikes, &ext.dislikes),
        features: cat(&prev.features, &ext.features),
    }
}

/// Compacts each list through the updater. Output lists are never longer
/// than their input and always deduplicated. A list whose reply never
/// validates falls back to plain dedup.
pub fn update(
    raw: &RawProfile,
    gateway: &dyn ChatClient,
) -> Result<(RawProfile, StepStats), GatewayError> {
    let mut stats = StepStats::default();
    let mut out = RawProfile::default();
    for kind in ListKind::ALL {
        let input = match kind {
            ListKind::Likes => &raw.likes,
            ListKind::Dislikes => &raw.dislikes,
            ListKind::Features => &raw.features,
        };
        let compacted = if input.is_empty() {
            Vec::new()
        } else {
            match gateway
                .complete_json(&gateway.request(render_updater(input, kind), SchemaId::UpdateList))
            {
                Ok(outcome) => {
                    stats.updater_tokens += outcome.prompt_tokens;
                    let SchemaValue::UpdateList { mut items } = outcome.parsed_value else {
                        unreachable!("gateway validated the update_list schema");
                    };
                    if items.len() > input.len() {
                        stats.updater_violations += 1;
                        items.truncate(input.len());
                    }
                    dedup_entries(&items)
                }
                Err(GatewayError::ParseExhausted { .. }) => {
                    stats.fallbacks += 1;
                    dedup_entries(input)
                }
                Err(e) => return Err(e),
            }
        };
        match kind {
            ListKind::Likes => out.likes = compacted,
            ListKind::Dislikes => out.dislikes = compacted,
            ListKind::Features => out.features = compacted,
        }
    }
    Ok((out, stats))
}

/// Folds the interaction at timestep `prev.version + 1` into the profile.
///
/// `history` holds the user's interactions up to and including that
/// timestep; only its last element is read in incremental scope.
pub fn step(
    prev: &Profile,
    history: &[ReviewRecord],
    gateway: &dyn ChatClient,
    opts: StepOptions,
) -> Result<(Profile, StepStats), GatewayError> {
    let t = prev.version + 1;
    debug_assert_eq!(history.len(), t as usize);
    let mut stats = StepStats::default();

    let slice: Vec<&ReviewRecord> = match opts.scope {
        ExtractorScope::Incremental => history.last().into_iter().collect(),
        ExtractorScope::Batch => history.iter().collect(),
    };
    let ext = match extract(&slice, gateway) {
        Ok((ext, tokens)) => {
            stats.extractor_tokens += tokens;
            ext
        }
        Err(GatewayError::ParseExhausted { .. }) => {
            stats.fallbacks += 1;
            Extracted::default()
        }
        Err(e) => return Err(e),
    };
    let raw = match opts.scope {
        ExtractorScope::Incremental => merge(prev, &ext),
        ExtractorScope::Batch if ext.is_empty() => merge(prev, &ext),
        ExtractorScope::Batch => merge(&Profile::default(), &ext),
    };

    let run_updater = opts.use_updater && t.is_multiple_of(opts.updater_stride.max(1));
    let lists = if run_updater {
        let (lists, s) = update(&raw, gateway)?;
        stats.absorb(s);
        lists
    } else {
        RawProfile {
            likes: collapse_exact(&raw.likes),
            dislikes: collapse_exact(&raw.dislikes),
            features: collapse_exact(&raw.features),
        }
    };
    Ok((
        Profile {
            likes: lists.likes,
            dislikes: lists.dislikes,
            features: lists.features,
            version: t,
        },
        stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Gateway;
    use crate::prompts::one_line;
    use crate::tokenize::Tokenizer;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn rec(i: usize, title: &str, rating: u8, text: &str) -> ReviewRecord {
        ReviewRecord {
            user_id: "U".into(),
            item_id: format!("I{i}"),
            title: title.into(),
            text: text.into(),
            rating,
            timestamp: i as u64,
        }
    }

    #[test]
    fn merge_concatenates_without_dedup() {
        let raw = merge(&Profile::default(), &Extracted::default());
        assert!(raw.is_empty());
        let prev = Profile {
            likes: s(&["A"]),
            features: s(&["x", "y"]),
            ..Profile::default()
        };
        let ext = Extracted {
            likes: s(&["A", "B"]),
            features: s(&["y"]),
            ..Extracted::default()
        };
        let raw = merge(&prev, &ext);
        assert_eq!(raw.likes, s(&["A", "A", "B"]));
        assert_eq!(raw.features.len(), prev.features.len() + ext.features.len());
    }

    #[test]
    fn mock_update_dedups() {
        let gw = Gateway::mock();
        let raw = RawProfile {
            likes: s(&["rpg", "RPG ", "roguelike"]),
            ..RawProfile::default()
        };
        let (out, stats) = update(&raw, &gw).unwrap();
        assert_eq!(out.likes, s(&["rpg", "roguelike"]));
        assert!(stats.updater_tokens > 0);
        let (empty, _) = update(&RawProfile::default(), &gw).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn extract_mock_rules() {
        let gw = Gateway::mock();
        let r = rec(1, "Celeste", 5, "great soundtrack and tight controls");
        let (ext, _) = extract(&[&r], &gw).unwrap();
        assert_eq!(ext.likes, s(&["Celeste"]));
        for f in ["soundtrack", "controls"] {
            assert!(ext.features.contains(&f.to_string()));
        }
        let (ext, _) = extract(&[&rec(1, "Bad Game", 1, "")], &gw).unwrap();
        assert_eq!((ext.likes.len(), ext.dislikes), (0, s(&["Bad Game"])));
        let (ext, _) = extract(&[&rec(1, "Meh", 3, "")], &gw).unwrap();
        assert!(ext.likes.is_empty() && ext.dislikes.is_empty());
        let (ext, _) = extract(&[&rec(1, "Quiet Win", 4, "")], &gw).unwrap();
        assert_eq!(ext.likes, s(&["Quiet Win"]));
    }

    #[test]
    fn step_with_neutral_empty_review_keeps_lists() {
        let gw = Gateway::mock();
        let prev = Profile {
            likes: s(&["A"]),
            dislikes: s(&["B"]),
            features: s(&["words"]),
            version: 1,
        };
        let hist = [rec(1, "A", 5, ""), rec(2, "Neutral", 3, "")];
        for use_updater in [true, false] {
            let (p, _) = step(
                &prev,
                &hist,
                &gw,
                StepOptions {
                    use_updater,
                    ..StepOptions::default()
                },
            )
            .unwrap();
            assert_eq!(
                (&p.likes, &p.dislikes, &p.features),
                (&prev.likes, &prev.dislikes, &prev.features)
            );
            assert_eq!(p.version, 2);
        }
    }

    fn rendered_tokens(p: &Profile) -> u64 {
        let tok = Tokenizer::Whitespace;
        ListKind::ALL
            .iter()
            .map(|&k| {
                p.list(k)
                    .iter()
                    .map(|e| tok.count(&one_line(e)))
                    .sum::<u64>()
            })
            .sum()
    }

    #[test]
    fn updater_compacts_redundant_profile() {
        // Every liked title comes in two case variants: half the entries
        // are redundant.
        let gw = Gateway::mock();
        let mut hist = Vec::new();
        for i in 0..10 {
            let base = format!("Galaxy Arena Chronicle {}", i / 2);
            let title = if i % 2 == 0 {
                base
            } else {
                base.to_uppercase()
            };
            hist.push(rec(i, &title, 5, ""));
        }
        let run = |use_updater| {
            let mut p = Profile::default();
            for t in 1..=hist.len() {
                p = step(
                    &p,
                    &hist[..t],
                    &gw,
                    StepOptions {
                        use_updater,
                        ..StepOptions::default()
                    },
                )
                .unwrap()
                .0;
            }
            p
        };
        let with = run(true);
        let without = run(false);
        assert_eq!(with.likes.len(), 5);
        assert_eq!(without.likes.len(), 10);
        let (a, b) = (rendered_tokens(&without), rendered_tokens(&with));
        assert!(b <= a);
        assert!((a - b) as f64 / a as f64 >= 0.3, "{a} -> {b}");
    }

    #[test]
    fn stride_skips_updater_between_multiples() {
        let gw = Gateway::mock();
        let hist = [rec(1, "Zed", 5, ""), rec(2, "ZED", 5, "")];
        let opts = StepOptions {
            updater_stride: 3,
            ..StepOptions::default()
        };
        let (p1, _) = step(&Profile::default(), &hist[..1], &gw, opts).unwrap();
        let (p2, stats) = step(&p1, &hist, &gw, opts).unwrap();
        assert_eq!(p2.likes, s(&["Zed", "ZED"]));
        assert_eq!(stats.updater_tokens, 0);
    }

    #[test]
    fn batch_scope_rebuilds_from_all_reviews() {
        let gw = Gateway::mock();
        let hist = [rec(1, "One", 5, ""), rec(2, "Two", 1, "")];
        let opts = StepOptions {
            scope: ExtractorScope::Batch,
            use_updater: false,
            ..StepOptions::default()
        };
        let (p1, _) = step(&Profile::default(), &hist[..1], &gw, opts).unwrap();
        let (p2, _) = step(&p1, &hist, &gw, opts).unwrap();
        assert_eq!(p2.likes, s(&["One"]));
        assert_eq!(p2.dislikes, s(&["Two"]));
    }

    #[test]
    fn conflicts_are_counted() {
        let p = Profile {
            likes: s(&["Halo", "Doom"]),
            dislikes: s(&["halo "]),
            ..Profile::default()
        };
        assert_eq!(p.conflicts(), 1);
    }

    fn arb_entries() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec("[a-cA-C ]{0,4}", 0..12)
    }

    proptest! {
        #[test]
        fn mock_update_is_idempotent(likes in arb_entries(), features in arb_entries()) {
            let gw = Gateway::mock();
            let raw = RawProfile { likes, dislikes: vec![], features };
            let (once, _) = update(&raw, &gw).unwrap();
            let (twice, _) = update(&once, &gw).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.likes.len() <= raw.likes.len());
            prop_assert!(once.features.len() <= raw.features.len());
            let p = Profile { likes: once.likes, dislikes: once.dislikes, features: once.features, version: 0 };
            prop_assert!(p.is_deduped());
        }

        #[test]
        fn dedup_matches_reference(list in arb_entries()) {
            let got = dedup_entries(&list);
            let mut expected: Vec<String> = Vec::new();
            for e in &list {
                let t = e.trim();
                if !t.is_empty() && !expected.iter().any(|x| x.to_lowercase() == t.to_lowercase()) {
                    expected.push(t.to_string());
                }
            }
            prop_assert_eq!(got, expected);
        }
    }
}
