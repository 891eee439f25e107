use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use profile_rec::gateway::http::{HttpBackend, HttpConfig};
use profile_rec::gateway::mock::MockBackend;
use profile_rec::gateway::Backend;
use profile_rec::harness::{
    aggregate, load_sessions, metrics_csv, render_tables, run_matrix, tradeoff_csv, tradeoff_rows,
    BucketAssignment, MatrixRun, RunStore,
};
use profile_rec::ingest::{ingest_files, ItemPool, UserHistory};
use profile_rec::prompts::PROMPT_VERSION;
use profile_rec::store::{
    file_digest, read_jsonl, write_atomic, ResponseCache, RunManifest, RunPaths, CACHE_DIGEST,
};
use profile_rec::{Gateway, GatewayError, HarnessError};
use serde_json::json;

use crate::config::{BackendKind, Overrides, Resolved, RunConfig};
use crate::{IngestArgs, PlotArgs, ReportArgs, RunArgs, RunLocation};

/// An error plus the process exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

const IO: u8 = 1;
const CONFIG: u8 = 2;
const BACKEND: u8 = 3;

trait Code<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Code<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code,
            error: e.into(),
        })
    }
}

fn fail<T>(code: u8, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure {
        code,
        error: anyhow!(msg.into()),
    })
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<Resolved, Failure> {
    let mut cfg = RunConfig::load(path).code(CONFIG)?;
    cfg.apply(overrides);
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.validate(&path.display().to_string(), base).code(CONFIG)
}

/// `histories.jsonl` -> `histories.summary.json`.
pub fn summary_path(histories: &Path) -> PathBuf {
    histories.with_extension("summary.json")
}

pub fn ingest(args: &IngestArgs) -> Result<(), Failure> {
    let cfg = args
        .config
        .as_deref()
        .map(|p| load_config(p, &Overrides::default()))
        .transpose()?;
    let pick = |flag: &Option<PathBuf>, from_cfg: Option<&PathBuf>, name: &str| {
        flag.clone()
            .or_else(|| from_cfg.cloned())
            .ok_or_else(|| Failure {
                code: CONFIG,
                error: anyhow!("no {name} path: pass --{name} or set it in the [dataset] section"),
            })
    };
    let reviews = pick(
        &args.reviews,
        cfg.as_ref().and_then(|c| c.reviews.as_ref()),
        "reviews",
    )?;
    let metadata = pick(
        &args.metadata,
        cfg.as_ref().and_then(|c| c.metadata.as_ref()),
        "metadata",
    )?;
    let out = pick(&args.out, cfg.as_ref().map(|c| &c.histories), "out")?;
    let min_interactions = args
        .min_interactions
        .or(cfg.as_ref().map(|c| c.raw.dataset.min_interactions))
        .unwrap_or(4);
    if min_interactions == 0 {
        return fail(CONFIG, "--min-interactions must be at least 1");
    }
    let first_target = cfg.as_ref().map_or(4, |c| c.eval.first_target_index);

    let data = ingest_files(&reviews, &metadata, min_interactions, first_target).code(IO)?;
    let mut lines = Vec::new();
    for h in &data.histories {
        serde_json::to_writer(&mut lines, h).code(IO)?;
        lines.push(b'\n');
    }
    write_atomic(&out, &lines).code(IO)?;
    let summary = serde_json::to_string_pretty(&data.summary).code(IO)?;
    write_atomic(&summary_path(&out), format!("{summary}\n").as_bytes()).code(IO)?;

    println!("{summary}");
    if data.summary.users_kept == 0 {
        eprintln!(
            "warning: no users kept ({} seen, {} reviews dropped for missing titles, {} below {} interactions)",
            data.summary.users_seen, data.summary.dropped_no_title, data.summary.users_too_short, min_interactions
        );
    }
    eprintln!(
        "wrote {} and {}",
        out.display(),
        summary_path(&out).display()
    );
    Ok(())
}

fn read_histories(path: &Path) -> Result<Vec<UserHistory>, Failure> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return fail(
                CONFIG,
                format!(
                    "histories file {} not found; run `profile-rec ingest` first",
                    path.display()
                ),
            )
        }
        Err(e) => {
            return Err(e)
                .with_context(|| format!("reading {}", path.display()))
                .code(IO)
        }
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line
            .with_context(|| format!("reading {}", path.display()))
            .code(IO)?;
        if line.trim().is_empty() {
            continue;
        }
        let h: UserHistory = serde_json::from_str(&line)
            .with_context(|| format!("{}: line {}", path.display(), i + 1))
            .code(IO)?;
        out.push(h);
    }
    Ok(out)
}

fn build_gateway(cfg: &Resolved) -> Result<Gateway, Failure> {
    let b = &cfg.raw.backend;
    let backend: Arc<dyn Backend> = match b.kind {
        BackendKind::Mock => Arc::new(MockBackend),
        BackendKind::Http => Arc::new(HttpBackend::new(HttpConfig {
            base_url: b.base_url.clone().unwrap_or_default(),
            model: b.model.clone().unwrap_or_default(),
            api_key: std::env::var(&b.api_key_env).ok().filter(|k| !k.is_empty()),
            timeout_secs: b.timeout_secs,
            structured_output: b.structured_output,
        })),
    };
    let mut gw = Gateway::new(backend)
        .with_tokenizer(cfg.tokenizer)
        .with_retry(cfg.retry.clone())
        .with_decoding(b.temperature, b.max_output_tokens);
    if let Some(n) = b.max_in_flight {
        gw = gw.with_max_in_flight(n);
    }
    if let Some(dir) = &cfg.cache_dir {
        let cache = ResponseCache::open(dir).code(IO)?;
        gw = gw.with_cache(Arc::new(cache));
    }
    Ok(gw)
}

/// Everything that changes results. A run id may only be resumed with an
/// identical identity.
fn identity(cfg: &Resolved, gw: &Gateway) -> serde_json::Value {
    let e = &cfg.eval;
    let b = &cfg.raw.backend;
    json!({
        "methods": cfg.methods.iter().map(|m| m.key()).collect::<Vec<_>>(),
        "mode": e.mode,
        "first_target_index": e.first_target_index,
        "updater_stride": e.updater_stride,
        "extractor_scope": e.extractor_scope,
        "tradeoff_k": e.tradeoff_k,
        "max_users": cfg.raw.dataset.max_users,
        "schema_attempts": cfg.retry.schema_attempts,
        "backend": gw.backend_id(),
        "model": gw.model_id(),
        "temperature": b.temperature,
        "max_output_tokens": b.max_output_tokens,
        "structured_output": b.structured_output,
    })
}

fn harness_failure(e: HarnessError) -> Failure {
    let code = match &e {
        HarnessError::Backend {
            source: GatewayError::BackendUnavailable { .. } | GatewayError::ParseExhausted { .. },
            ..
        } => BACKEND,
        HarnessError::Store(_) => IO,
        HarnessError::Config(_)
        | HarnessError::Prompt(_)
        | HarnessError::HistoryTooShort { .. } => CONFIG,
    };
    Failure {
        code,
        error: e.into(),
    }
}

pub fn run(args: &RunArgs, overrides: &Overrides) -> Result<(), Failure> {
    let cfg = load_config(&args.config, overrides)?;
    let Some(run_id) = cfg.run_id.clone() else {
        return fail(CONFIG, "run_id: set it in the config or pass --run-id");
    };
    let mut histories = read_histories(&cfg.histories)?;
    // Negatives come from the whole dataset even when users are capped.
    let pool = ItemPool::from_histories(&histories);
    if let Some(n) = cfg.raw.dataset.max_users {
        histories.truncate(n);
    }
    let gw = build_gateway(&cfg)?;
    let dataset_digest = file_digest(&cfg.histories).code(IO)?;
    let snapshot = identity(&cfg, &gw);

    let paths = RunPaths::new(&cfg.runs_dir, &run_id);
    if paths.exists() {
        let previous: Vec<RunManifest> = read_jsonl(&paths.manifest()).code(IO)?;
        if let Some(first) = previous.first() {
            if first.config != snapshot
                || first.dataset_digest != dataset_digest
                || first.run_seed != cfg.eval.run_seed
            {
                return fail(
                    CONFIG,
                    format!(
                        "run `{run_id}` was started with a different dataset, seed or configuration; use a new --run-id"
                    ),
                );
            }
        }
    }
    let template = RunManifest {
        event: String::new(),
        run_id: run_id.clone(),
        dataset_digest,
        config: snapshot,
        run_seed: cfg.eval.run_seed,
        prompt_version: PROMPT_VERSION.into(),
        backend_id: gw.backend_id().into(),
        model_id: gw.model_id().into(),
        tokenizer_id: cfg.tokenizer.id().into(),
        cache_digest: CACHE_DIGEST.into(),
        timestamp_unix: 0,
        counters: Default::default(),
    };
    let store = RunStore::open(paths.clone(), &cfg.methods, template).code(IO)?;
    if store.is_resume() {
        eprintln!(
            "resuming run {run_id}: {} sessions already stored",
            store.stored_sessions()
        );
    }
    let mut m = MatrixRun::new(&histories, &cfg.methods, &gw, &pool, &cfg.eval);
    m.tokenizer = cfg.tokenizer;
    m.store = Some(&store);
    m.stats = Some(gw.stats());
    let out = run_matrix(&m).map_err(harness_failure)?;

    let s = gw.stats().snapshot();
    println!(
        "run {run_id} (prompt {PROMPT_VERSION}, backend {}, model {})",
        gw.backend_id(),
        gw.model_id()
    );
    println!(
        "sessions {} (reused {}), skipped user-method pairs {}",
        out.results.len(),
        out.reused,
        out.skipped
    );
    println!(
        "backend calls {}, cache hits {}, repairs {}, exhausted parses {}",
        s.backend_calls, s.cache_hits, s.repairs, s.parse_exhausted
    );
    println!("metrics  {}", paths.metrics_csv().display());
    println!("tradeoff {}", paths.tradeoff_csv().display());
    println!("manifest {}", paths.manifest().display());
    Ok(())
}

/// The run directory plus its first manifest record; a missing run is a
/// configuration error.
fn locate(loc: &RunLocation) -> Result<(RunPaths, RunManifest), Failure> {
    let runs_dir = match (&loc.config, &loc.runs_dir) {
        (Some(c), _) => load_config(c, &Overrides::default())?.runs_dir,
        (None, Some(d)) => d.clone(),
        (None, None) => PathBuf::from("runs"),
    };
    let paths = RunPaths::new(&runs_dir, &loc.run_id);
    if !paths.exists() {
        return fail(
            CONFIG,
            format!("no run `{}` under {}", loc.run_id, runs_dir.display()),
        );
    }
    let manifest: Vec<RunManifest> = read_jsonl(&paths.manifest()).code(IO)?;
    let Some(first) = manifest.into_iter().next() else {
        return fail(
            CONFIG,
            format!("run `{}` has an empty manifest", loc.run_id),
        );
    };
    Ok((paths, first))
}

pub fn report(args: &ReportArgs) -> Result<(), Failure> {
    let (paths, manifest) = locate(&args.run)?;
    let sessions = load_sessions(&paths).code(IO)?;
    let table = aggregate(&sessions);
    let text = if args.csv {
        metrics_csv(&table)
    } else {
        format!(
            "run {} | prompt {} | backend {} | model {} | seed {}\n\n{}",
            manifest.run_id,
            manifest.prompt_version,
            manifest.backend_id,
            manifest.model_id,
            manifest.run_seed,
            render_tables(&table)
        )
    };
    print!("{text}");
    Ok(())
}

pub fn plot_data(args: &PlotArgs) -> Result<(), Failure> {
    let (paths, manifest) = locate(&args.run)?;
    let k = args
        .k
        .or_else(|| {
            manifest
                .config
                .get("tradeoff_k")
                .and_then(|v| v.as_u64())
                .map(|k| k as usize)
        })
        .unwrap_or(10);
    if !(1..=20).contains(&k) {
        return fail(CONFIG, format!("--k must be within 1..=20, got {k}"));
    }
    let buckets_path = paths.buckets();
    let buckets: BucketAssignment = match fs::read(&buckets_path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing {}", buckets_path.display()))
            .code(IO)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return fail(
                CONFIG,
                format!(
                    "run `{}` has not finished: no bucket assignment yet",
                    manifest.run_id
                ),
            )
        }
        Err(e) => {
            return Err(e)
                .with_context(|| format!("reading {}", buckets_path.display()))
                .code(IO)
        }
    };
    let sessions = load_sessions(&paths).code(IO)?;
    let csv = tradeoff_csv(&tradeoff_rows(&sessions, &buckets, k));
    match &args.out {
        Some(out) => {
            if out.starts_with(&paths.dir) {
                return fail(CONFIG, "--out must point outside the run directory");
            }
            write_atomic(out, csv.as_bytes()).code(IO)?;
            eprintln!("wrote {}", out.display());
        }
        None => std::io::stdout().write_all(csv.as_bytes()).code(IO)?,
    }
    Ok(())
}
