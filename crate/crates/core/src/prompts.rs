//! Prompt rendering for the extractor, the updater, the profile-aware
//! recommender and the three history-only baseline families.
//!
//! Rendering is a pure function of its inputs. Free text (titles, reviews,
//! profile entries) is collapsed to a single line so every prompt keeps a
//! line-oriented layout that the mock backend can read back.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, PromptError};
use crate::gateway::SchemaId;
use crate::ingest::{CandidateSet, ReviewRecord, SLATE_SIZE};
use crate::profile::Profile;

/// Bumped whenever any template below changes; part of every cache key.
pub const PROMPT_VERSION: &str = "v1";

pub const SYSTEM_TEXT: &str =
    "You are a recommendation assistant. Follow the instructions exactly and reply with JSON only.";

pub(crate) const EXTRACT_HEADER: &str =
    "I purchased the following products and left reviews in chronological order:";
pub(crate) const EXTRACT_INSTRUCTION: &str =
    "Analyze user's likes/dislikes/key features by referring to their reviews.";
pub(crate) const RECORD_ASIN: &str = "] ASIN: ";
pub(crate) const RECORD_PRODUCT: &str = " | Product: ";
pub(crate) const RECORD_RATING: &str = " | Rating: ";
pub(crate) const REVIEW_PREFIX: &str = "Review:";

pub(crate) const UPDATE_HEADER: &str = "You are given a list:";
pub(crate) const UPDATE_INSTRUCTION: &str = "Update this list by removing redundant or overlapping information. Note that crucial information should be preserved.";
pub(crate) const EMPTY_LIST: &str = "(empty list)";

pub(crate) const HISTORY_HEADER: &str =
    "I've purchased the following products in the past, in order:";
pub(crate) const ICL_HEADER: &str = "I've purchased the following products:";
pub(crate) const ICL_RECOMMEND: &str = "then you should recommend ";
pub(crate) const ICL_BOUGHT: &str = " to me, and now that I've bought ";
pub(crate) const RECENCY_PREFIX: &str = "Note that my most recently purchased item is ";
pub(crate) const INLINE_REVIEW: &str = "   Review: ";

pub(crate) const POSITIVE: &str = "Positive aspects: ";
pub(crate) const NEGATIVE: &str = "Negative aspects: ";
pub(crate) const FEATURES: &str = "Key Features: ";
pub(crate) const NONE: &str = "none";
pub(crate) const ENTRY_SEP: &str = "; ";

pub(crate) const CANDIDATE_HEADER: &str =
    "Now there are 20 candidate products that I can consider purchasing next:";
pub(crate) const RANK_INSTRUCTION: &str = "Based on these inputs, rank the candidate list from 1 to 20 by evaluating their likelihood of being purchased.";

/// Baseline prompting strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Sequential,
    Recency,
    Icl,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Sequential, Family::Recency, Family::Icl];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Sequential => "sequential",
            Family::Recency => "recency",
            Family::Icl => "icl",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One row of the method grid: a prompting family plus which data sources
/// and profile components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MethodSpec {
    pub family: Family,
    pub use_reviews: bool,
    pub use_extractor: bool,
    pub use_updater: bool,
}

impl MethodSpec {
    pub fn new(
        family: Family,
        use_reviews: bool,
        use_extractor: bool,
        use_updater: bool,
    ) -> Result<Self, ConfigError> {
        if use_updater && !use_extractor {
            return Err(ConfigError::InvalidMethod(
                "the updater requires the extractor".into(),
            ));
        }
        if use_extractor && !use_reviews {
            return Err(ConfigError::InvalidMethod(
                "the extractor requires reviews".into(),
            ));
        }
        Ok(Self {
            family,
            use_reviews,
            use_extractor,
            use_updater,
        })
    }

    pub fn items_only(family: Family) -> Self {
        Self::new(family, false, false, false).unwrap()
    }

    pub fn raw_reviews(family: Family) -> Self {
        Self::new(family, true, false, false).unwrap()
    }

    pub fn extractor(family: Family) -> Self {
        Self::new(family, true, true, false).unwrap()
    }

    pub fn full(family: Family) -> Self {
        Self::new(family, true, true, true).unwrap()
    }

    /// The 12 configurations: 3 families × {items, +reviews, +ext, +ext+upd}.
    pub fn grid() -> Vec<MethodSpec> {
        Family::ALL
            .iter()
            .flat_map(|&f| {
                [
                    Self::items_only(f),
                    Self::raw_reviews(f),
                    Self::extractor(f),
                    Self::full(f),
                ]
            })
            .collect()
    }

    /// Stable identifier, e.g. `recency+ext+upd`.
    pub fn key(&self) -> String {
        let mut s = self.family.as_str().to_string();
        if self.use_extractor {
            s.push_str("+ext");
            if self.use_updater {
                s.push_str("+upd");
            }
        } else if self.use_reviews {
            s.push_str("+reviews");
        }
        s
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for MethodSpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || ConfigError::UnknownMethod(s.to_string());
        let mut parts = s.trim().split('+');
        let family = match parts.next().map(str::to_ascii_lowercase).as_deref() {
            Some("sequential") => Family::Sequential,
            Some("recency") => Family::Recency,
            Some("icl") => Family::Icl,
            _ => return Err(unknown()),
        };
        let (mut reviews, mut ext, mut upd) = (false, false, false);
        for part in parts {
            match part.to_ascii_lowercase().as_str() {
                "reviews" => reviews = true,
                "ext" => {
                    reviews = true;
                    ext = true
                }
                "upd" => upd = true,
                _ => return Err(unknown()),
            }
        }
        MethodSpec::new(family, reviews, ext, upd)
    }
}

/// Which profile list an updater call compacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ListKind {
    Likes,
    Dislikes,
    Features,
}

impl ListKind {
    pub const ALL: [ListKind; 3] = [ListKind::Likes, ListKind::Dislikes, ListKind::Features];

    fn describe(&self) -> &'static str {
        match self {
            ListKind::Likes => "the items and aspects the user likes",
            ListKind::Dislikes => "the items and aspects the user dislikes",
            ListKind::Features => "the user's key features",
        }
    }
}

/// Collapses every whitespace run to a single space.
pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Extractor prompt over a chronological slice of reviews.
pub fn render_extractor(records: &[&ReviewRecord]) -> String {
    let mut out = String::new();
    out.push_str(EXTRACT_HEADER);
    out.push('\n');
    for (i, r) in records.iter().enumerate() {
        out.push_str(&format!(
            "[{}{RECORD_ASIN}{}{RECORD_PRODUCT}{}{RECORD_RATING}{}/5\n",
            i + 1,
            one_line(&r.item_id),
            one_line(&r.title),
            r.rating
        ));
        let text = one_line(&r.text);
        if text.is_empty() {
            out.push_str(REVIEW_PREFIX);
        } else {
            out.push_str(&format!("{REVIEW_PREFIX} {text}"));
        }
        out.push('\n');
    }
    out.push_str(EXTRACT_INSTRUCTION);
    out.push_str("\n\n");
    out.push_str(&SchemaId::Extract.instruction());
    out
}

/// Updater prompt for one profile list; one entry per line, order kept.
pub fn render_updater(list: &[String], kind: ListKind) -> String {
    let mut out = format!(
        "The list below holds {}.\n{UPDATE_HEADER}\n",
        kind.describe()
    );
    if list.is_empty() {
        out.push_str(EMPTY_LIST);
        out.push('\n');
    }
    for entry in list {
        out.push_str("- ");
        out.push_str(&one_line(entry));
        out.push('\n');
    }
    out.push_str(UPDATE_INSTRUCTION);
    out.push_str("\n\n");
    out.push_str(&SchemaId::UpdateList.instruction());
    out
}

fn profile_line(prefix: &str, entries: &[String]) -> String {
    if entries.is_empty() {
        format!("{prefix}{NONE}")
    } else {
        let joined: Vec<String> = entries.iter().map(|e| one_line(e)).collect();
        format!("{prefix}{}", joined.join(ENTRY_SEP))
    }
}

fn push_item(out: &mut String, n: usize, rec: &ReviewRecord, with_review: bool) {
    out.push_str(&format!("{n}. {}\n", one_line(&rec.title)));
    if with_review {
        out.push_str(INLINE_REVIEW);
        out.push_str(&one_line(&rec.text));
        out.push('\n');
    }
}

fn render_ranking(
    family: Family,
    history: &[ReviewRecord],
    with_reviews: bool,
    profile: Option<&Profile>,
    candidates: &CandidateSet,
) -> Result<String, PromptError> {
    if candidates.items.len() != SLATE_SIZE {
        return Err(PromptError::SlateSize(candidates.items.len()));
    }
    let mut out = String::new();
    match family {
        Family::Sequential | Family::Recency => {
            out.push_str(HISTORY_HEADER);
            out.push('\n');
            for (i, rec) in history.iter().enumerate() {
                push_item(&mut out, i + 1, rec, with_reviews);
            }
            if family == Family::Recency {
                if let Some(recent) = history.last() {
                    out.push_str(&format!("{RECENCY_PREFIX}{}.\n", one_line(&recent.title)));
                }
            }
        }
        Family::Icl => {
            if history.len() < 2 {
                return Err(PromptError::IclHistoryTooShort(history.len()));
            }
            let (demo, recent) = history.split_at(history.len() - 1);
            let recent = &recent[0];
            out.push_str(ICL_HEADER);
            out.push('\n');
            for (i, rec) in demo.iter().enumerate() {
                push_item(&mut out, i + 1, rec, with_reviews);
            }
            let title = one_line(&recent.title);
            out.push_str(&format!("{ICL_RECOMMEND}{title}{ICL_BOUGHT}{title}.\n"));
            if with_reviews {
                out.push_str(INLINE_REVIEW);
                out.push_str(&one_line(&recent.text));
                out.push('\n');
            }
        }
    }
    if let Some(p) = profile {
        out.push_str(&profile_line(POSITIVE, &p.likes));
        out.push('\n');
        out.push_str(&profile_line(NEGATIVE, &p.dislikes));
        out.push('\n');
        out.push_str(&profile_line(FEATURES, &p.features));
        out.push('\n');
    }
    out.push_str(CANDIDATE_HEADER);
    out.push('\n');
    for (i, c) in candidates.items.iter().enumerate() {
        out.push_str(&format!("[{}] {}\n", i + 1, one_line(&c.title)));
    }
    out.push_str(RANK_INSTRUCTION);
    out.push_str("\n\n");
    out.push_str(&SchemaId::Rank20.instruction());
    Ok(out)
}

/// Profile-aware recommender prompt. `history` holds the observed
/// interactions in order; only their titles are shown.
pub fn render_recommender(
    family: Family,
    profile: &Profile,
    history: &[ReviewRecord],
    candidates: &CandidateSet,
) -> Result<String, PromptError> {
    render_ranking(family, history, false, Some(profile), candidates)
}

/// History-only baseline prompt. With `use_reviews` the raw review text is
/// inlined after each item.
pub fn render_baseline(
    spec: &MethodSpec,
    history: &[ReviewRecord],
    candidates: &CandidateSet,
) -> Result<String, PromptError> {
    if spec.use_extractor {
        return Err(PromptError::ExtractorInBaseline);
    }
    render_ranking(spec.family, history, spec.use_reviews, None, candidates)
}
