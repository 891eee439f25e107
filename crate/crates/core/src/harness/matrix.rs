//! The method × user matrix: parallel over users, resumable through the
//! run store.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use super::metrics::{aggregate, bucket_users, metrics_csv, tradeoff_csv, tradeoff_rows};
use super::{
    run_targets, BucketAssignment, EvalConfig, EvalContext, MetricsTable, PromptObserver,
    SessionResult, TradeoffRow,
};
use crate::error::{HarnessError, StoreError};
use crate::gateway::{ChatClient, GatewayStats};
use crate::ingest::{ItemPool, UserHistory};
use crate::par::map_ordered;
use crate::profile::Profile;
use crate::prompts::MethodSpec;
use crate::store::{
    now_unix, read_jsonl, write_atomic, CheckpointStore, JsonlWriter, RunCounters, RunManifest,
    RunPaths,
};
use crate::tokenize::Tokenizer;

type Done = BTreeMap<String, BTreeMap<usize, SessionResult>>;

/// Persistent state of one run: manifest, per-method session logs and
/// profile checkpoints.
#[derive(Debug)]
pub struct RunStore {
    paths: RunPaths,
    manifest: JsonlWriter,
    template: RunManifest,
    resumed: bool,
    sessions: BTreeMap<MethodSpec, JsonlWriter>,
    checkpoints: BTreeMap<MethodSpec, CheckpointStore>,
    done: BTreeMap<MethodSpec, Done>,
}

impl RunStore {
    /// Opens (or creates) the run directory. `template` supplies every
    /// manifest field except the event, timestamp and counters.
    pub fn open(
        paths: RunPaths,
        methods: &[MethodSpec],
        template: RunManifest,
    ) -> Result<Self, StoreError> {
        let resumed = paths.exists();
        let manifest = JsonlWriter::append(paths.manifest())?;
        let mut sessions = BTreeMap::new();
        let mut checkpoints = BTreeMap::new();
        let mut done = BTreeMap::new();
        for &m in methods {
            let key = m.key();
            let path = paths.sessions(&key);
            let mut by_user: Done = BTreeMap::new();
            for r in read_jsonl::<SessionResult>(&path)? {
                if r.method == m {
                    by_user
                        .entry(r.user_id.clone())
                        .or_default()
                        .insert(r.target, r);
                }
            }
            done.insert(m, by_user);
            sessions.insert(m, JsonlWriter::append(path)?);
            if m.use_extractor {
                checkpoints.insert(m, CheckpointStore::open(paths.checkpoints(&key))?);
            }
        }
        Ok(Self {
            paths,
            manifest,
            template,
            resumed,
            sessions,
            checkpoints,
            done,
        })
    }

    pub fn paths(&self) -> &RunPaths {
        &self.paths
    }

    /// True when the run directory already held a manifest when opened.
    pub fn is_resume(&self) -> bool {
        self.resumed
    }

    /// Sessions already on disk when the store was opened.
    pub fn stored_sessions(&self) -> usize {
        self.done
            .values()
            .flat_map(|u| u.values())
            .map(BTreeMap::len)
            .sum()
    }

    pub fn record(&self, event: &str, counters: RunCounters) -> Result<(), StoreError> {
        let rec = RunManifest {
            event: event.to_string(),
            timestamp_unix: now_unix(),
            counters,
            ..self.template.clone()
        };
        self.manifest.write(&rec)
    }

    fn done_for(
        &self,
        method: &MethodSpec,
        user_id: &str,
    ) -> Option<&BTreeMap<usize, SessionResult>> {
        self.done.get(method).and_then(|d| d.get(user_id))
    }
}

/// Every stored session of a run, last write winning per
/// (method, user, target), sorted.
pub fn load_sessions(paths: &RunPaths) -> Result<Vec<SessionResult>, StoreError> {
    let prefix = format!("sessions-{}-", paths.run_id);
    let entries = std::fs::read_dir(&paths.dir).map_err(|e| StoreError::Io {
        path: paths.dir.clone(),
        source: e,
    })?;
    let mut files: Vec<_> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(&prefix) && n.ends_with(".jsonl"))
        })
        .collect();
    files.sort();
    let mut latest: BTreeMap<(MethodSpec, String, usize), SessionResult> = BTreeMap::new();
    for f in files {
        for r in read_jsonl::<SessionResult>(&f)? {
            latest.insert((r.method, r.user_id.clone(), r.target), r);
        }
    }
    Ok(latest.into_values().collect())
}

/// Inputs of a matrix run.
#[derive(Clone, Copy)]
pub struct MatrixRun<'a> {
    pub histories: &'a [UserHistory],
    pub methods: &'a [MethodSpec],
    pub client: &'a dyn ChatClient,
    pub pool: &'a ItemPool,
    pub config: &'a EvalConfig,
    /// Used for review-length buckets.
    pub tokenizer: Tokenizer,
    pub store: Option<&'a RunStore>,
    pub observer: Option<&'a dyn PromptObserver>,
    /// Gateway counters copied into the manifest.
    pub stats: Option<&'a GatewayStats>,
}

impl<'a> MatrixRun<'a> {
    pub fn new(
        histories: &'a [UserHistory],
        methods: &'a [MethodSpec],
        client: &'a dyn ChatClient,
        pool: &'a ItemPool,
        config: &'a EvalConfig,
    ) -> Self {
        Self {
            histories,
            methods,
            client,
            pool,
            config,
            tokenizer: Tokenizer::default(),
            store: None,
            observer: None,
            stats: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatrixOutput {
    /// Sorted by (method, user, target).
    pub results: Vec<SessionResult>,
    pub table: MetricsTable,
    pub buckets: BucketAssignment,
    pub tradeoff: Vec<TradeoffRow>,
    /// (method, user) pairs whose history was too short.
    pub skipped: usize,
    /// Sessions taken from the store instead of recomputed.
    pub reused: usize,
}

enum UserRun {
    Done {
        results: Vec<SessionResult>,
        reused: usize,
    },
    Skipped,
    Cancelled,
}

fn counters(results: &[SessionResult], stats: Option<&GatewayStats>) -> RunCounters {
    let snap = stats.map(GatewayStats::snapshot).unwrap_or_default();
    RunCounters {
        sessions: results.len() as u64,
        fallbacks: results.iter().map(|r| r.parse_fallbacks as u64).sum(),
        hallucinations: results
            .iter()
            .map(|r| r.ranking.hallucinated_count as u64)
            .sum(),
        backend_calls: snap.backend_calls,
        cache_hits: snap.cache_hits,
        usage_reported: snap.usage_reported,
        usage_estimated: snap.usage_estimated,
        reported_prompt_tokens: snap.reported_prompt_tokens,
        estimated_prompt_tokens: snap.estimated_prompt_tokens,
    }
}

/// Evaluates every (method, user) pair and aggregates the results. With a
/// store, finished sessions are reused, new ones are appended as they
/// complete, and the CSV reports plus bucket assignment are written at the
/// end. The first fatal error stops scheduling new users; sessions already
/// written stay on disk for the next attempt.
pub fn run_matrix(run: &MatrixRun<'_>) -> Result<MatrixOutput, HarnessError> {
    if let Some(store) = run.store {
        let event = if store.is_resume() { "resume" } else { "start" };
        store.record(event, RunCounters::default())?;
    }
    let ctx = EvalContext {
        client: run.client,
        pool: run.pool,
        config: run.config,
        observer: run.observer,
    };
    let work: Vec<(MethodSpec, &UserHistory)> = run
        .methods
        .iter()
        .flat_map(|&m| run.histories.iter().map(move |h| (m, h)))
        .collect();
    let abort = AtomicBool::new(false);
    let outcomes = map_ordered(&work, run.config.workers, |(method, history)| {
        if abort.load(Ordering::Relaxed) {
            return Ok(UserRun::Cancelled);
        }
        let r = run_user(*method, history, &ctx, run.store);
        if r.is_err() {
            abort.store(true, Ordering::Relaxed);
        }
        r
    });

    let mut results = Vec::new();
    let mut skipped = 0;
    let mut reused = 0;
    let mut first_err = None;
    for o in outcomes {
        match o {
            Ok(UserRun::Done {
                results: r,
                reused: n,
            }) => {
                results.extend(r);
                reused += n;
            }
            Ok(UserRun::Skipped) => skipped += 1,
            Ok(UserRun::Cancelled) => {}
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        if let Some(store) = run.store {
            // Best effort: the error being reported matters more.
            let _ = store.record("abort", counters(&results, run.stats));
        }
        return Err(e);
    }

    results.sort_by(|a, b| (a.method, &a.user_id, a.target).cmp(&(b.method, &b.user_id, b.target)));
    let table = aggregate(&results);
    let buckets = bucket_users(run.histories, run.tokenizer);
    let tradeoff = tradeoff_rows(&results, &buckets, run.config.tradeoff_k);

    if let Some(store) = run.store {
        let paths = store.paths();
        write_atomic(&paths.metrics_csv(), metrics_csv(&table).as_bytes())?;
        write_atomic(&paths.tradeoff_csv(), tradeoff_csv(&tradeoff).as_bytes())?;
        write_atomic(
            &paths.buckets(),
            &serde_json::to_vec_pretty(&buckets).map_err(StoreError::from)?,
        )?;
        store.record("finish", counters(&results, run.stats))?;
    }
    Ok(MatrixOutput {
        results,
        table,
        buckets,
        tradeoff,
        skipped,
        reused,
    })
}

fn run_user(
    method: MethodSpec,
    history: &UserHistory,
    ctx: &EvalContext<'_>,
    store: Option<&RunStore>,
) -> Result<UserRun, HarnessError> {
    let Some(targets) = ctx.config.targets(&method, history.len()) else {
        return Ok(UserRun::Skipped);
    };
    let Some(store) = store else {
        let results = run_targets(
            history,
            method,
            targets,
            Profile::default(),
            ctx,
            &mut |_, _| Ok(()),
        )?;
        return Ok(UserRun::Done { results, reused: 0 });
    };

    let user_id = history.user_id.as_str();
    let (first, last) = (*targets.start(), *targets.end());
    let empty = BTreeMap::new();
    let done = store.done_for(&method, user_id).unwrap_or(&empty);
    let log = &store.sessions[&method];
    let mut results = Vec::new();
    let mut reused = 0;

    if !method.use_extractor {
        // Sessions are independent: recompute only the missing ones.
        for t in targets {
            if let Some(r) = done.get(&t) {
                results.push(r.clone());
                reused += 1;
            } else {
                let mut sink = |r: &SessionResult, _: &Profile| log.write(r);
                results.extend(run_targets(
                    history,
                    method,
                    t..=t,
                    Profile::default(),
                    ctx,
                    &mut sink,
                )?);
            }
        }
        return Ok(UserRun::Done { results, reused });
    }

    // A checkpoint at version v is written right after session v + 1, so
    // it is a valid resume point when that session and all before it are
    // on disk.
    let checkpoints = &store.checkpoints[&method];
    let resume = match checkpoints.load_checkpoint(user_id) {
        Ok(Some(p)) => {
            let covered = p.version as usize + 1;
            (covered >= first
                && covered <= last
                && (first..=covered).all(|t| done.contains_key(&t)))
            .then_some(p)
        }
        _ => None,
    };
    let (start, from) = match resume {
        Some(p) => {
            let from = p.version as usize + 2;
            for t in first..from {
                results.push(done[&t].clone());
                reused += 1;
            }
            (p, from)
        }
        None => {
            if checkpoints.has_user(user_id) {
                checkpoints.reset_user(user_id)?;
            }
            (Profile::default(), first)
        }
    };
    if from <= last {
        let mut sink = |r: &SessionResult, p: &Profile| {
            log.write(r)?;
            checkpoints.checkpoint_profile(user_id, p)
        };
        results.extend(run_targets(
            history,
            method,
            from..=last,
            start,
            ctx,
            &mut sink,
        )?);
    }
    Ok(UserRun::Done { results, reused })
}
