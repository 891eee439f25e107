#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use profile_rec::gateway::mock::MockBackend;
use profile_rec::gateway::{
    Backend, BackendReply, BackendRequest, ChatRequest, SchemaId, TransportError,
};
use profile_rec::harness::PromptObserver;
use profile_rec::ingest::{Candidate, ItemPool, ReviewRecord, UserHistory};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn rec(user: &str, t: u64, item: &str, title: &str, rating: u8, text: &str) -> ReviewRecord {
    ReviewRecord {
        user_id: user.into(),
        item_id: item.into(),
        title: title.into(),
        text: text.into(),
        rating,
        timestamp: 1_000 + t,
    }
}

pub fn history(user: &str, rows: &[(&str, &str, u8, &str)]) -> UserHistory {
    UserHistory {
        user_id: user.into(),
        records: rows
            .iter()
            .enumerate()
            .map(|(i, (item, title, rating, text))| rec(user, i as u64, item, title, *rating, text))
            .collect(),
    }
}

/// Three users with six reviews each, small enough to trace by hand.
pub fn oracle_fixture() -> Vec<UserHistory> {
    vec![
        history(
            "A",
            &[
                (
                    "A1",
                    "Star Quest Saga",
                    5,
                    "Stunning graphics and brilliant music",
                ),
                ("A2", "Mud Racer", 1, "Clunky controls, clunky menus"),
                ("A3", "Quiet Garden", 3, ""),
                ("A4", "Star Quest Saga II", 4, "More brilliant music"),
                ("A5", "Puzzle Tower", 5, "BRILLIANT puzzles"),
                ("A6", "Dark Cellar", 2, ""),
            ],
        ),
        history(
            "B",
            &[
                ("B1", "Ocean Drift", 4, "Relaxing ocean sounds"),
                ("B2", "ocean drift", 5, ""),
                ("B3", "Battle Arena", 1, "Toxic players everywhere"),
                ("B4", "Sky Pilot", 5, "Smooth flight"),
                ("B5", "Battle Arena Deluxe", 2, "Toxic again"),
                ("B6", "Sky Pilot Two", 5, ""),
            ],
        ),
        history(
            "C",
            &[
                ("C1", "Farm Story", 3, "Pleasant enough"),
                ("C2", "Farm Story Deluxe", 5, "Pleasant farming"),
                ("C3", "Haunted Manor", 1, ""),
                ("C4", "Cozy Village", 4, "Pleasant pleasant villagers"),
                ("C5", "Haunted Manor Remix", 2, "Cheap scares"),
                ("C6", "Cozy Village Winter", 5, "Snowy"),
            ],
        ),
    ]
}

/// Catalogue filler with titles that share no words with the fixtures.
pub fn fillers(n: usize) -> Vec<Candidate> {
    (0..n)
        .map(|i| Candidate {
            item_id: format!("F{i:04}"),
            title: format!("Filler Product {i:04}"),
        })
        .collect()
}

pub fn pool_with_fillers(histories: &[UserHistory], n_fillers: usize) -> ItemPool {
    let mut items: Vec<Candidate> = histories
        .iter()
        .flat_map(|h| &h.records)
        .map(|r| Candidate {
            item_id: r.item_id.clone(),
            title: r.title.clone(),
        })
        .collect();
    items.extend(fillers(n_fillers));
    ItemPool::from_candidates(items)
}

const WORDS: &[&str] = &[
    "adventure",
    "arcade",
    "battle",
    "castle",
    "dragon",
    "empire",
    "forest",
    "galaxy",
    "harbor",
    "island",
    "jungle",
    "knight",
    "legend",
    "meadow",
    "nebula",
    "orbit",
    "planet",
    "quest",
    "racing",
    "shadow",
    "temple",
    "urban",
    "valley",
    "wizard",
    "yonder",
    "zephyr",
];

/// Deterministic synthetic users: titles drawn from a small vocabulary so
/// profiles and candidates overlap, reviews of `review_words` words.
pub fn synthetic_users(
    n_users: usize,
    len: std::ops::RangeInclusive<usize>,
    review_words: usize,
    seed: u64,
) -> Vec<UserHistory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut item = 0usize;
    (0..n_users)
        .map(|u| {
            let user_id = format!("U{u:03}");
            let k = rng.random_range(len.clone());
            let records = (0..k)
                .map(|t| {
                    item += 1;
                    let title = format!(
                        "{} {} {item}",
                        capitalize(WORDS[rng.random_range(0..WORDS.len())]),
                        capitalize(WORDS[rng.random_range(0..WORDS.len())])
                    );
                    let text: Vec<&str> = (0..review_words)
                        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
                        .collect();
                    rec(
                        &user_id,
                        t as u64,
                        &format!("I{item:05}"),
                        &title,
                        rng.random_range(1..=5),
                        &text.join(" "),
                    )
                })
                .collect();
            UserHistory { user_id, records }
        })
        .collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

/// Records every request along with the session it served.
#[derive(Default)]
pub struct Recorder {
    pub seen: Mutex<Vec<(String, usize, SchemaId, String)>>,
}

impl PromptObserver for Recorder {
    fn observe(&self, user_id: &str, target: usize, request: &ChatRequest) {
        self.seen.lock().unwrap().push((
            user_id.to_string(),
            target,
            request.schema,
            request.user_text.clone(),
        ));
    }
}

impl Recorder {
    pub fn counts(&self) -> BTreeMap<SchemaId, usize> {
        let mut out = BTreeMap::new();
        for (_, _, s, _) in self.seen.lock().unwrap().iter() {
            *out.entry(*s).or_default() += 1;
        }
        out
    }
}

/// Mock backend that fails fatally once `budget` calls have been served.
pub struct FailAfter {
    pub budget: u64,
    pub calls: AtomicU64,
}

impl FailAfter {
    pub fn new(budget: u64) -> Self {
        Self {
            budget,
            calls: AtomicU64::new(0),
        }
    }
}

impl Backend for FailAfter {
    fn backend_id(&self) -> &str {
        MockBackend.backend_id()
    }

    fn model_id(&self) -> &str {
        MockBackend.model_id()
    }

    fn complete(&self, req: &BackendRequest<'_>) -> Result<BackendReply, TransportError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(TransportError::fatal("simulated outage"));
        }
        MockBackend.complete(req)
    }
}

/// Answers rank requests with a uniformly random permutation of the 20
/// labels, seeded from the prompt so replies do not depend on scheduling;
/// other schemas go to the mock.
pub struct RandomRanker {
    pub seed: u64,
}

impl RandomRanker {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl Backend for RandomRanker {
    fn backend_id(&self) -> &str {
        "random"
    }

    fn model_id(&self) -> &str {
        "uniform-permutation"
    }

    fn complete(&self, req: &BackendRequest<'_>) -> Result<BackendReply, TransportError> {
        if req.schema != SchemaId::Rank20 {
            return MockBackend.complete(req);
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(req.user_text.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut labels: Vec<String> = (1..=20).map(|i| i.to_string()).collect();
        labels.shuffle(&mut ChaCha8Rng::from_seed(digest));
        Ok(BackendReply {
            text: serde_json::json!({ "ranking": labels }).to_string(),
            prompt_tokens: None,
            output_tokens: None,
        })
    }
}

const SHORT: &[&str] = &[
    "the", "game", "was", "fun", "and", "a", "bit", "too", "long", "but", "ok", "play", "it",
    "for", "hours", "my", "kid", "love", "so", "much", "not", "bad", "at", "all", "good", "buy",
];

/// Users whose purchases come in pairs: a title and its upper-case variant
/// (a separate item with the same rating). Half of every liked or disliked
/// title list is therefore a case-insensitive duplicate. Reviews hold
/// `review_words` words, mostly short filler plus two longer words.
pub fn redundant_long_reviews(
    n_users: usize,
    pairs: usize,
    review_words: usize,
    seed: u64,
) -> Vec<UserHistory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut item = 0usize;
    (0..n_users)
        .map(|u| {
            let user_id = format!("L{u:03}");
            let mut records = Vec::with_capacity(2 * pairs);
            for p in 0..pairs {
                let title: Vec<String> = (0..6)
                    .map(|_| capitalize(WORDS[rng.random_range(0..WORDS.len())]))
                    .collect();
                let title = format!("{} {}", title.join(" "), item + 1);
                let rating = [1u8, 2, 4, 5][rng.random_range(0..4)];
                for (j, t) in [title.clone(), title.to_uppercase()]
                    .into_iter()
                    .enumerate()
                {
                    item += 1;
                    let mut text: Vec<&str> = (0..review_words)
                        .map(|_| SHORT[rng.random_range(0..SHORT.len())])
                        .collect();
                    for _ in 0..2 {
                        let at = rng.random_range(0..text.len().max(1));
                        text.insert(at, WORDS[rng.random_range(0..WORDS.len())]);
                    }
                    let t_idx = (2 * p + j) as u64;
                    records.push(rec(
                        &user_id,
                        t_idx,
                        &format!("L{item:06}"),
                        &t,
                        rating,
                        &text.join(" "),
                    ));
                }
            }
            UserHistory { user_id, records }
        })
        .collect()
}
