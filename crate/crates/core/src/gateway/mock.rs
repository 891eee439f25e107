//! Deterministic offline backend.
//!
//! The mock reads the structured content back out of a rendered prompt and
//! answers with fixed rules, so every pipeline stage has an exact expected
//! output:
//!
//! * extract: rating ≥ 4 puts the title in likes, rating ≤ 2 in dislikes;
//!   features are the lowercased alphabetic words of length ≥ 5 in the
//!   review, ordered by frequency then lexicographically, at most 8.
//! * update_list: case-insensitive dedup, first occurrence kept.
//! * rank20: candidates scored by word overlap with likes ∪ features minus
//!   overlap with dislikes; ties broken by title. Baseline prompts carry no
//!   profile, so the history titles and inlined reviews stand in for likes.

use std::collections::{BTreeMap, HashSet};

use crate::gateway::schema::{validate, SchemaId, SchemaValue};
use crate::gateway::{
    Backend, BackendReply, BackendRequest, ChatOutcome, ChatRequest, TransportError,
};
use crate::profile::dedup_entries;
use crate::prompts::{
    CANDIDATE_HEADER, EMPTY_LIST, FEATURES, ICL_BOUGHT, ICL_RECOMMEND, INLINE_REVIEW, NEGATIVE,
    NONE, POSITIVE, RANK_INSTRUCTION, RECENCY_PREFIX, RECORD_ASIN, RECORD_PRODUCT, RECORD_RATING,
    REVIEW_PREFIX, UPDATE_HEADER, UPDATE_INSTRUCTION,
};
use crate::ranking::overlap_order;
use crate::tokenize::{word_tokens, Tokenizer};

pub const MOCK_BACKEND_ID: &str = "mock";
pub const MOCK_MODEL_ID: &str = "mock-rules-v1";

const MAX_FEATURES_PER_REVIEW: usize = 8;
const MIN_FEATURE_LEN: usize = 5;

/// Stateless rule-based backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockBackend;

impl Backend for MockBackend {
    fn backend_id(&self) -> &str {
        MOCK_BACKEND_ID
    }

    fn model_id(&self) -> &str {
        MOCK_MODEL_ID
    }

    fn complete(&self, req: &BackendRequest<'_>) -> Result<BackendReply, TransportError> {
        Ok(BackendReply {
            text: mock_respond(req.schema, req.user_text),
            prompt_tokens: None,
            output_tokens: None,
        })
    }
}

/// Single-shot mock completion, bypassing the gateway.
pub fn mock_complete(request: &ChatRequest) -> ChatOutcome {
    let raw_text = mock_respond(request.schema, &request.user_text);
    let parsed_value = validate(request.schema, &raw_text).expect("mock output is schema-valid");
    let tok = Tokenizer::Whitespace;
    ChatOutcome {
        parsed_value,
        prompt_tokens: tok.count(&request.system_text) + tok.count(&request.user_text),
        output_tokens: tok.count(&raw_text),
        raw_text,
        attempts: 1,
    }
}

/// Raw reply text for `schema` given the rendered prompt.
pub fn mock_respond(schema: SchemaId, user_text: &str) -> String {
    let value = match schema {
        SchemaId::Extract => mock_extract(user_text),
        SchemaId::UpdateList => SchemaValue::UpdateList {
            items: dedup_entries(&parse_update_list(user_text)),
        },
        SchemaId::Rank20 => SchemaValue::Rank20 {
            ranking: mock_rank(user_text),
        },
        SchemaId::FreeRank => SchemaValue::FreeRank {
            ranking: mock_rank(user_text),
        },
    };
    value.to_wire()
}

/// Feature words of one review under the mock rule.
pub(crate) fn review_features(text: &str) -> Vec<String> {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for word in text
        .split(|c: char| !c.is_alphabetic())
        .filter(|w| w.chars().count() >= MIN_FEATURE_LEN)
    {
        *freq.entry(word.to_lowercase()).or_default() += 1;
    }
    let mut words: Vec<(String, usize)> = freq.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    words
        .into_iter()
        .take(MAX_FEATURES_PER_REVIEW)
        .map(|(w, _)| w)
        .collect()
}

struct PromptRecord {
    title: String,
    rating: u8,
    text: String,
}

fn parse_extract_records(prompt: &str) -> Vec<PromptRecord> {
    let mut out: Vec<PromptRecord> = Vec::new();
    for line in prompt.lines() {
        if line.starts_with('[') {
            if let Some(rest) = line.split_once(RECORD_ASIN).map(|(_, r)| r) {
                let Some((_, rest)) = rest.split_once(RECORD_PRODUCT) else {
                    continue;
                };
                let Some((title, rating)) = rest.rsplit_once(RECORD_RATING) else {
                    continue;
                };
                let rating = rating
                    .split('/')
                    .next()
                    .and_then(|r| r.trim().parse().ok())
                    .unwrap_or(3);
                out.push(PromptRecord {
                    title: title.trim().to_string(),
                    rating,
                    text: String::new(),
                });
                continue;
            }
        }
        if let Some(text) = line.strip_prefix(REVIEW_PREFIX) {
            if let Some(last) = out.last_mut() {
                last.text = text.trim().to_string();
            }
        }
    }
    out
}

fn mock_extract(prompt: &str) -> SchemaValue {
    let mut likes = Vec::new();
    let mut dislikes = Vec::new();
    let mut key_features = Vec::new();
    for rec in parse_extract_records(prompt) {
        if rec.rating >= 4 {
            likes.push(rec.title.clone());
        } else if rec.rating <= 2 {
            dislikes.push(rec.title.clone());
        }
        key_features.extend(review_features(&rec.text));
    }
    SchemaValue::Extract {
        likes,
        dislikes,
        key_features,
    }
}

fn parse_update_list(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .skip_while(|l| *l != UPDATE_HEADER)
        .skip(1)
        .take_while(|l| *l != UPDATE_INSTRUCTION)
        .filter(|l| *l != EMPTY_LIST)
        .filter_map(|l| l.strip_prefix("- "))
        .map(str::to_string)
        .collect()
}

fn section_tokens(value: &str, into: &mut HashSet<String>) {
    if value != NONE {
        into.extend(word_tokens(value));
    }
}

fn mock_rank(prompt: &str) -> Vec<String> {
    let mut positive = HashSet::new();
    let mut negative = HashSet::new();
    let mut history = HashSet::new();
    let mut has_profile = false;
    let mut candidates: Vec<(usize, String)> = Vec::new();
    let mut in_candidates = false;

    for line in prompt.lines() {
        if line == CANDIDATE_HEADER {
            in_candidates = true;
            continue;
        }
        if line == RANK_INSTRUCTION {
            in_candidates = false;
            continue;
        }
        if in_candidates {
            if let Some((label, title)) = line
                .strip_prefix('[')
                .and_then(|r| r.split_once("] "))
                .and_then(|(l, t)| Some((l.parse::<usize>().ok()?, t)))
            {
                candidates.push((label, title.to_string()));
            }
            continue;
        }
        if let Some(v) = line.strip_prefix(POSITIVE) {
            has_profile = true;
            section_tokens(v, &mut positive);
        } else if let Some(v) = line.strip_prefix(FEATURES) {
            has_profile = true;
            section_tokens(v, &mut positive);
        } else if let Some(v) = line.strip_prefix(NEGATIVE) {
            has_profile = true;
            section_tokens(v, &mut negative);
        } else if let Some(v) = line.strip_prefix(INLINE_REVIEW) {
            history.extend(word_tokens(v));
        } else if let Some(v) = line.strip_prefix(RECENCY_PREFIX) {
            history.extend(word_tokens(v));
        } else if let Some(v) = line.strip_prefix(ICL_RECOMMEND) {
            let title = v.split(ICL_BOUGHT).next().unwrap_or("");
            history.extend(word_tokens(title));
        } else if let Some((n, title)) = line.split_once(". ") {
            if !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()) {
                history.extend(word_tokens(title));
            }
        }
    }
    if !has_profile {
        positive = history;
    }

    overlap_order(&candidates, &positive, &negative)
        .into_iter()
        .map(|l| l.to_string())
        .collect()
}
