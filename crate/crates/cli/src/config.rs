//! TOML run configuration: parsing, overrides and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use profile_rec::gateway::RetryPolicy;
use profile_rec::profile::ExtractorScope;
use profile_rec::tokenize::Tokenizer;
use profile_rec::{EvalConfig, MethodSpec, Mode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: Option<String>,
    /// Parent of every run directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub retry: RetrySection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub reviews: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    /// Normalized histories written by `ingest` and read by `run`.
    pub histories: PathBuf,
    #[serde(default = "default_min_interactions")]
    pub min_interactions: usize,
    /// Evaluate only the first N users (by user id).
    pub max_users: Option<usize>,
}

fn default_min_interactions() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seed: u64,
    pub mode: Mode,
    pub first_target_index: usize,
    /// Method keys such as `recency+ext+upd`, or `all` for the full grid.
    pub methods: Vec<String>,
    pub updater_stride: u32,
    pub extractor_scope: ExtractorScope,
    pub workers: usize,
    pub tradeoff_k: usize,
    pub tokenizer: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            seed: d.run_seed,
            mode: d.mode,
            first_target_index: d.first_target_index,
            methods: vec!["all".into()],
            updater_stride: d.updater_stride,
            extractor_scope: d.extractor_scope,
            workers: d.workers,
            tradeoff_k: d.tradeoff_k,
            tokenizer: Tokenizer::default().id().into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub structured_output: bool,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub max_in_flight: Option<usize>,
    /// Shared response cache; defaults to `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    pub use_cache: bool,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: None,
            model: None,
            api_key_env: "PROFILE_REC_API_KEY".into(),
            timeout_secs: 120,
            structured_output: false,
            temperature: 0.0,
            max_output_tokens: 512,
            max_in_flight: None,
            cache_dir: None,
            use_cache: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrySection {
    pub schema_attempts: u32,
    pub transport_retries: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetrySection {
    fn default() -> Self {
        let d = RetryPolicy::default();
        Self {
            schema_attempts: d.schema_attempts,
            transport_retries: d.transport_retries,
            base_backoff_ms: d.base_backoff_ms,
            max_backoff_ms: d.max_backoff_ms,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub run_id: Option<String>,
    pub backend: Option<BackendKind>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
}

/// One or more field-level problems, reported together.
#[derive(Debug)]
pub struct ConfigErrors {
    pub source: String,
    pub problems: Vec<(String, String)>,
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration in {}:", self.source)?;
        for (field, msg) in &self.problems {
            write!(f, "\n  {field}: {msg}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// A validated configuration with paths resolved against the config file.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub raw: RunConfig,
    pub run_id: Option<String>,
    pub runs_dir: PathBuf,
    pub reviews: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub histories: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub methods: Vec<MethodSpec>,
    pub eval: EvalConfig,
    pub tokenizer: Tokenizer,
    pub retry: RetryPolicy,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigErrors> {
        let fail = |field: &str, msg: String| ConfigErrors {
            source: path.display().to_string(),
            problems: vec![(field.to_string(), msg)],
        };
        let text = std::fs::read_to_string(path).map_err(|e| fail("file", e.to_string()))?;
        toml::from_str(&text)
            .map_err(|e| fail("syntax", e.to_string().trim_end().replace('\n', "\n    ")))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(id) = &o.run_id {
            self.run_id = Some(id.clone());
        }
        if let Some(kind) = o.backend {
            self.backend.kind = kind;
        }
        if let Some(seed) = o.seed {
            self.eval.seed = seed;
        }
        if let Some(mode) = o.mode {
            self.eval.mode = mode;
        }
    }

    /// Checks every field and resolves relative paths against `base`.
    pub fn validate(self, source: &str, base: &Path) -> Result<Resolved, ConfigErrors> {
        let mut problems = Vec::new();
        let mut bad = |field: &str, msg: String| problems.push((field.to_string(), msg));

        if let Some(id) = &self.run_id {
            let ok = !id.is_empty()
                && id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
                && !id.starts_with('.');
            if !ok {
                bad(
                    "run_id",
                    format!(
                        "`{id}` must be non-empty and use only letters, digits, `-`, `_` or `.`"
                    ),
                );
            }
        }
        if self.dataset.min_interactions == 0 {
            bad("dataset.min_interactions", "must be at least 1".into());
        }
        if self.eval.first_target_index < 2 {
            bad(
                "eval.first_target_index",
                "must be at least 2 (one observed interaction)".into(),
            );
        }
        if self.eval.updater_stride == 0 {
            bad("eval.updater_stride", "must be at least 1".into());
        }
        if !(1..=20).contains(&self.eval.tradeoff_k) {
            bad(
                "eval.tradeoff_k",
                format!("must be within 1..=20, got {}", self.eval.tradeoff_k),
            );
        }
        let tokenizer = Tokenizer::from_id(&self.eval.tokenizer).unwrap_or_else(|e| {
            bad("eval.tokenizer", e.to_string());
            Tokenizer::default()
        });

        let mut methods: Vec<MethodSpec> = Vec::new();
        if self.eval.methods.is_empty() {
            bad("eval.methods", "must name at least one method".into());
        }
        for (i, name) in self.eval.methods.iter().enumerate() {
            if name.trim().eq_ignore_ascii_case("all") {
                methods.extend(MethodSpec::grid());
                continue;
            }
            match name.parse::<MethodSpec>() {
                Ok(m) => methods.push(m),
                Err(e) => bad(&format!("eval.methods[{i}]"), e.to_string()),
            }
        }
        methods.sort();
        methods.dedup();

        if self.retry.schema_attempts == 0 {
            bad("retry.schema_attempts", "must be at least 1".into());
        }
        if self.retry.base_backoff_ms > self.retry.max_backoff_ms {
            bad(
                "retry.base_backoff_ms",
                "must not exceed retry.max_backoff_ms".into(),
            );
        }
        if self.backend.kind == BackendKind::Http {
            if self.backend.base_url.as_deref().is_none_or(str::is_empty) {
                bad(
                    "backend.base_url",
                    "required when backend.kind = \"http\"".into(),
                );
            }
            if self.backend.model.as_deref().is_none_or(str::is_empty) {
                bad(
                    "backend.model",
                    "required when backend.kind = \"http\"".into(),
                );
            }
        }
        if !(0.0..=2.0).contains(&self.backend.temperature) {
            bad("backend.temperature", "must be within 0..=2".into());
        }
        if self.backend.max_in_flight == Some(0) {
            bad(
                "backend.max_in_flight",
                "must be at least 1 when set".into(),
            );
        }

        if !problems.is_empty() {
            return Err(ConfigErrors {
                source: source.to_string(),
                problems,
            });
        }

        let at = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let runs_dir = at(&self.output_dir);
        let cache_dir = self.backend.use_cache.then(|| {
            self.backend
                .cache_dir
                .as_deref()
                .map_or_else(|| runs_dir.join("cache"), at)
        });
        let e = &self.eval;
        Ok(Resolved {
            run_id: self.run_id.clone(),
            reviews: self.dataset.reviews.as_deref().map(at),
            metadata: self.dataset.metadata.as_deref().map(at),
            histories: at(&self.dataset.histories),
            cache_dir,
            runs_dir,
            methods,
            eval: EvalConfig {
                run_seed: e.seed,
                first_target_index: e.first_target_index,
                mode: e.mode,
                updater_stride: e.updater_stride,
                extractor_scope: e.extractor_scope,
                workers: e.workers,
                tradeoff_k: e.tradeoff_k,
            },
            tokenizer,
            retry: RetryPolicy {
                schema_attempts: self.retry.schema_attempts,
                transport_retries: self.retry.transport_retries,
                base_backoff_ms: self.retry.base_backoff_ms,
                max_backoff_ms: self.retry.max_backoff_ms,
            },
            raw: self,
        })
    }
}
