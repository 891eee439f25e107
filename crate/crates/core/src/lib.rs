//! Train-free recommendation with review-derived user profiles.
//!
//! A user's reviews are distilled into a profile (likes, dislikes, key
//! features) one interaction at a time, compacted, and handed to an LLM
//! that reranks a 20-item candidate slate. The crate also carries the
//! baselines, a deterministic mock backend and a resumable evaluation
//! harness.
//!
//! ```
//! use profile_rec::prompts::{Family, MethodSpec};
//!
//! let m: MethodSpec = "recency+ext+upd".parse().unwrap();
//! assert_eq!(m, MethodSpec::full(Family::Recency));
//! assert_eq!(MethodSpec::grid().len(), 12);
//! ```

pub mod error;
pub mod gateway;
pub mod harness;
pub mod ingest;
pub mod par;
pub mod profile;
pub mod prompts;
pub mod ranking;
pub mod store;
pub mod tokenize;

pub use error::{ConfigError, GatewayError, HarnessError, IngestError, PromptError, StoreError};
pub use gateway::{ChatClient, ChatOutcome, ChatRequest, Gateway};
pub use harness::{EvalConfig, Mode, SessionResult};
pub use ingest::{CandidateSet, ItemPool, ReviewRecord, UserHistory};
pub use profile::Profile;
pub use prompts::{Family, MethodSpec};
pub use ranking::Ranking;
