//! Sequential evaluation: one ranking session per target timestep, the
//! profile stepped forward between sessions, then two-level aggregation.

mod matrix;
mod metrics;

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GatewayError, HarnessError, StoreError};
use crate::gateway::schema::SchemaValue;
use crate::gateway::{ChatClient, ChatOutcome, ChatRequest, SchemaId};
use crate::ingest::{sample_candidates, ItemPool, UserHistory};
use crate::profile::{step, ExtractorScope, Profile, StepOptions, StepStats};
use crate::prompts::{render_baseline, render_recommender, Family, MethodSpec};
use crate::ranking::{ndcg_at_k, sanitize, Ranking, K_VALUES};

pub use matrix::{load_sessions, run_matrix, MatrixOutput, MatrixRun, RunStore};
pub use metrics::{
    aggregate, bucket_users, metrics_csv, render_tables, tradeoff_csv, tradeoff_rows, Bucket,
    BucketAssignment, MetricsRow, MetricsTable, TradeoffRow, METRICS_HEADER, TRADEOFF_HEADER,
};

/// Which targets a user contributes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every timestep from `first_target_index` to the end of the history.
    #[default]
    Continuous,
    /// Only the last interaction.
    Oneshot,
}

impl std::str::FromStr for Mode {
    type Err = crate::error::ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "continuous" => Ok(Mode::Continuous),
            "oneshot" => Ok(Mode::Oneshot),
            other => Err(crate::error::ConfigError::Field {
                field: "mode".into(),
                message: format!("expected `continuous` or `oneshot`, got `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub run_seed: u64,
    /// First 1-based timestep predicted in continuous mode.
    pub first_target_index: usize,
    pub mode: Mode,
    pub updater_stride: u32,
    pub extractor_scope: ExtractorScope,
    /// Worker threads for user-level parallelism; 0 means one per core.
    pub workers: usize,
    /// Cutoff used for the trade-off report.
    pub tradeoff_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            run_seed: 0,
            first_target_index: 4,
            mode: Mode::Continuous,
            updater_stride: 1,
            extractor_scope: ExtractorScope::Incremental,
            workers: 0,
            tradeoff_k: 10,
        }
    }
}

impl EvalConfig {
    pub fn step_options(&self, method: &MethodSpec) -> StepOptions {
        StepOptions {
            use_updater: method.use_updater,
            updater_stride: self.updater_stride,
            scope: self.extractor_scope,
        }
    }

    /// Targets evaluated for a history of length `len`, or `None` when the
    /// history is too short for this method.
    pub fn targets(&self, method: &MethodSpec, len: usize) -> Option<RangeInclusive<usize>> {
        let first = match self.mode {
            Mode::Continuous => self.first_target_index.max(min_target(method)),
            Mode::Oneshot => len.max(min_target(method)),
        };
        (len >= first).then_some(first..=len)
    }
}

/// Smallest target a method can be asked about: one observed interaction,
/// two for the in-context family (demonstrations plus a recent item).
pub fn min_target(method: &MethodSpec) -> usize {
    match method.family {
        Family::Icl => 3,
        Family::Sequential | Family::Recency => 2,
    }
}

/// Candidate seed for one session: replayable from `(run_seed, user, t)`.
pub fn session_seed(run_seed: u64, user_id: &str, target: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update((user_id.len() as u64).to_le_bytes());
    h.update(user_id.as_bytes());
    h.update((target as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// The slate a session ranked, kept for audit and replay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlateRecord {
    pub item_ids: Vec<String>,
    pub truth_index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub user_id: String,
    pub target: usize,
    pub method: MethodSpec,
    pub ranking: Ranking,
    pub ndcg: BTreeMap<usize, f64>,
    pub recommender_prompt_tokens: u64,
    /// Extractor and updater input tokens spent bringing the profile from
    /// the previous session's version to this one.
    pub extractor_tokens: u64,
    pub updater_tokens: u64,
    /// Calls of any component that never validated.
    pub parse_fallbacks: u32,
    /// The ranking itself fell back to slate order.
    pub rank_fallback: bool,
    pub recommender_attempts: u32,
    pub updater_violations: u32,
    pub profile_conflicts: u32,
    pub slate: SlateRecord,
}

/// Sees every request sent on behalf of a session (profile steps included).
pub trait PromptObserver: Sync {
    fn observe(&self, user_id: &str, target: usize, request: &ChatRequest);
}

struct Observed<'a> {
    inner: &'a dyn ChatClient,
    observer: &'a dyn PromptObserver,
    user_id: &'a str,
    target: usize,
}

impl ChatClient for Observed<'_> {
    fn request(&self, user_text: String, schema: SchemaId) -> ChatRequest {
        self.inner.request(user_text, schema)
    }

    fn complete_json(&self, request: &ChatRequest) -> Result<ChatOutcome, GatewayError> {
        self.observer.observe(self.user_id, self.target, request);
        self.inner.complete_json(request)
    }
}

/// Shared, read-only inputs for evaluating users.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub client: &'a dyn ChatClient,
    pub pool: &'a ItemPool,
    pub config: &'a EvalConfig,
    pub observer: Option<&'a dyn PromptObserver>,
}

impl<'a> EvalContext<'a> {
    pub fn new(client: &'a dyn ChatClient, pool: &'a ItemPool, config: &'a EvalConfig) -> Self {
        Self {
            client,
            pool,
            config,
            observer: None,
        }
    }

    pub fn with_observer(mut self, observer: &'a dyn PromptObserver) -> Self {
        self.observer = Some(observer);
        self
    }
}

/// Called after each session with the result and the profile it used.
pub type SessionSink<'s> = dyn FnMut(&SessionResult, &Profile) -> Result<(), StoreError> + 's;

/// Runs the sessions for `targets`, starting from `start` (a profile whose
/// version is at most `targets.start() - 1`).
pub fn run_targets(
    history: &UserHistory,
    method: MethodSpec,
    targets: RangeInclusive<usize>,
    start: Profile,
    ctx: &EvalContext<'_>,
    sink: &mut SessionSink<'_>,
) -> Result<Vec<SessionResult>, HarnessError> {
    let user_id = history.user_id.as_str();
    let backend_err = |source| HarnessError::Backend {
        user_id: user_id.to_string(),
        source,
    };
    let opts = ctx.config.step_options(&method);
    let mut profile = start;
    let mut out = Vec::new();

    for t in targets {
        let observed;
        let client: &dyn ChatClient = match ctx.observer {
            Some(observer) => {
                observed = Observed {
                    inner: ctx.client,
                    observer,
                    user_id,
                    target: t,
                };
                &observed
            }
            None => ctx.client,
        };

        let mut stats = StepStats::default();
        if method.use_extractor {
            while (profile.version as usize) < t - 1 {
                let upto = profile.version as usize + 1;
                let (next, s) =
                    step(&profile, &history.records[..upto], client, opts).map_err(backend_err)?;
                stats.absorb(s);
                profile = next;
            }
        }

        let seed = session_seed(ctx.config.run_seed, user_id, t);
        let slate = sample_candidates(history, t, ctx.pool, seed)?;
        let seen = &history.records[..t - 1];
        let prompt = if method.use_extractor {
            render_recommender(method.family, &profile, seen, &slate)?
        } else {
            render_baseline(&method, seen, &slate)?
        };
        let request = client.request(prompt, SchemaId::Rank20);
        let (ranking, prompt_tokens, attempts, rank_fallback) = match client.complete_json(&request)
        {
            Ok(outcome) => {
                let SchemaValue::Rank20 { ranking } = outcome.parsed_value else {
                    unreachable!("gateway validated the rank20 schema");
                };
                (
                    sanitize(&ranking, &slate),
                    outcome.prompt_tokens,
                    outcome.attempts,
                    false,
                )
            }
            Err(GatewayError::ParseExhausted {
                attempts,
                prompt_tokens,
                ..
            }) => (sanitize(&[], &slate), prompt_tokens, attempts, true),
            Err(e) => return Err(backend_err(e)),
        };

        let ndcg = K_VALUES
            .iter()
            .map(|&k| (k, ndcg_at_k(ranking.truth_rank, k)))
            .collect();
        let result = SessionResult {
            user_id: user_id.to_string(),
            target: t,
            method,
            ndcg,
            recommender_prompt_tokens: prompt_tokens,
            extractor_tokens: stats.extractor_tokens,
            updater_tokens: stats.updater_tokens,
            parse_fallbacks: stats.fallbacks + rank_fallback as u32,
            rank_fallback,
            recommender_attempts: attempts,
            updater_violations: stats.updater_violations,
            profile_conflicts: profile.conflicts() as u32,
            slate: SlateRecord {
                item_ids: slate.items.iter().map(|c| c.item_id.clone()).collect(),
                truth_index: slate.truth_index,
                seed,
            },
            ranking,
        };
        sink(&result, &profile)?;
        out.push(result);
    }
    Ok(out)
}

fn too_short(history: &UserHistory, method: &MethodSpec, config: &EvalConfig) -> HarnessError {
    let needed = match config.mode {
        Mode::Continuous => config.first_target_index.max(min_target(method)),
        Mode::Oneshot => min_target(method),
    };
    HarnessError::HistoryTooShort {
        user_id: history.user_id.clone(),
        len: history.len(),
        needed,
    }
}

/// Every target from `first_target_index` to the end of the history, with
/// the profile carried across targets.
pub fn run_user_continuous(
    history: &UserHistory,
    method: MethodSpec,
    ctx: &EvalContext<'_>,
) -> Result<Vec<SessionResult>, HarnessError> {
    let config = EvalConfig {
        mode: Mode::Continuous,
        ..ctx.config.clone()
    };
    let targets = config
        .targets(&method, history.len())
        .ok_or_else(|| too_short(history, &method, &config))?;
    let ctx = EvalContext {
        config: &config,
        ..*ctx
    };
    run_targets(
        history,
        method,
        targets,
        Profile::default(),
        &ctx,
        &mut |_, _| Ok(()),
    )
}

/// A single session predicting the last interaction from all earlier ones.
pub fn run_user_oneshot(
    history: &UserHistory,
    method: MethodSpec,
    ctx: &EvalContext<'_>,
) -> Result<SessionResult, HarnessError> {
    let config = EvalConfig {
        mode: Mode::Oneshot,
        ..ctx.config.clone()
    };
    let targets = config
        .targets(&method, history.len())
        .ok_or_else(|| too_short(history, &method, &config))?;
    let ctx = EvalContext {
        config: &config,
        ..*ctx
    };
    let mut results = run_targets(
        history,
        method,
        targets,
        Profile::default(),
        &ctx,
        &mut |_, _| Ok(()),
    )?;
    Ok(results
        .pop()
        .expect("one-shot mode yields exactly one target"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_seed_depends_on_every_input() {
        let base = session_seed(7, "U1", 4);
        assert_eq!(base, session_seed(7, "U1", 4));
        assert_ne!(base, session_seed(8, "U1", 4));
        assert_ne!(base, session_seed(7, "U2", 4));
        assert_ne!(base, session_seed(7, "U1", 5));
    }

    #[test]
    fn target_ranges() {
        let cfg = EvalConfig::default();
        let seq = MethodSpec::items_only(Family::Sequential);
        assert_eq!(cfg.targets(&seq, 4), Some(4..=4));
        assert_eq!(cfg.targets(&seq, 9).map(|r| r.count()), Some(6));
        assert_eq!(cfg.targets(&seq, 3), None);
        let one = EvalConfig {
            mode: Mode::Oneshot,
            ..EvalConfig::default()
        };
        assert_eq!(one.targets(&seq, 5), Some(5..=5));
        assert_eq!(one.targets(&seq, 2), Some(2..=2));
        assert_eq!(one.targets(&MethodSpec::items_only(Family::Icl), 2), None);
        let early = EvalConfig {
            first_target_index: 1,
            ..EvalConfig::default()
        };
        assert_eq!(
            early.targets(&MethodSpec::items_only(Family::Icl), 5),
            Some(3..=5)
        );
    }
}
