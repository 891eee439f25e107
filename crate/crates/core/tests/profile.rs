mod common;

use common::rec;
use profile_rec::gateway::Gateway;
use profile_rec::ingest::ReviewRecord;
use profile_rec::profile::{
    dedup_entries, step, update, ExtractorScope, Profile, RawProfile, StepOptions,
};
use profile_rec::store::CheckpointStore;
use proptest::prelude::*;

const VOCAB: &[&str] = &[
    "Racing",
    "racing",
    "puzzles",
    "PUZZLES",
    "soundtrack",
    "stunning",
    "clunky",
    "music",
    "story",
    "great",
];

fn arb_history() -> impl Strategy<Value = Vec<ReviewRecord>> {
    let one = (
        0..8usize,
        1..=5u8,
        prop::collection::vec(0..VOCAB.len(), 0..12),
    );
    prop::collection::vec(one, 1..10).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(t, (title, rating, words))| {
                // Titles repeat with case variants so the updater has work.
                let base = [
                    "Star Quest",
                    "star quest",
                    "Mud Racer",
                    "Ocean Drift",
                    "OCEAN DRIFT",
                    "Sky Pilot",
                    "Farm Story",
                    "Puzzle Tower",
                ];
                let text: Vec<&str> = words.iter().map(|&w| VOCAB[w]).collect();
                rec(
                    "P",
                    t as u64,
                    &format!("I{t}"),
                    base[title],
                    rating,
                    &text.join(" "),
                )
            })
            .collect()
    })
}

fn arb_options() -> impl Strategy<Value = StepOptions> {
    (any::<bool>(), 1..4u32, any::<bool>()).prop_map(|(use_updater, updater_stride, batch)| {
        StepOptions {
            use_updater,
            updater_stride,
            scope: if batch {
                ExtractorScope::Batch
            } else {
                ExtractorScope::Incremental
            },
        }
    })
}

fn run(history: &[ReviewRecord], from: Profile, opts: StepOptions, gw: &Gateway) -> Vec<Profile> {
    let mut p = from;
    let mut out = Vec::new();
    for t in p.version as usize + 1..=history.len() {
        p = step(&p, &history[..t], gw, opts).unwrap().0;
        out.push(p.clone());
    }
    out
}

fn rendered_len(p: &Profile) -> usize {
    p.likes
        .iter()
        .chain(&p.dislikes)
        .chain(&p.features)
        .map(|e| e.split_whitespace().count())
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn incremental_equals_recompute(history in arb_history(), opts in arb_options(), future in arb_history()) {
        let gw = Gateway::mock();
        let incremental = run(&history, Profile::default(), opts, &gw);
        // Appending later interactions cannot change any earlier snapshot.
        let mut extended = history.clone();
        extended.extend(future);
        for t in 1..=history.len() {
            let fresh = run(&extended[..t], Profile::default(), opts, &gw);
            prop_assert_eq!(fresh.last().unwrap(), &incremental[t - 1]);
            prop_assert_eq!(incremental[t - 1].version as usize, t);
        }
    }

    #[test]
    fn resuming_from_a_checkpoint_is_seamless(history in arb_history(), opts in arb_options(), cut in 0usize..10) {
        let gw = Gateway::mock();
        let straight = run(&history, Profile::default(), opts, &gw);
        let cut = cut.min(history.len());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.jsonl");
        {
            let store = CheckpointStore::open(&path).unwrap();
            for p in &straight[..cut] {
                store.checkpoint_profile("P", p).unwrap();
            }
        }
        let start = CheckpointStore::open(&path).unwrap().load_checkpoint("P").unwrap().unwrap_or_default();
        prop_assert_eq!(start.version as usize, cut);
        let resumed = run(&history, start, opts, &gw);
        prop_assert_eq!(&resumed[..], &straight[cut..]);
    }

    #[test]
    fn updater_keeps_lists_deduped_and_shorter(history in arb_history()) {
        let gw = Gateway::mock();
        let on = run(&history, Profile::default(), StepOptions::default(), &gw);
        let off = run(&history, Profile::default(), StepOptions { use_updater: false, ..StepOptions::default() }, &gw);
        for (a, b) in on.iter().zip(&off) {
            prop_assert!(a.is_deduped());
            prop_assert!(a.likes.len() <= b.likes.len());
            prop_assert!(a.dislikes.len() <= b.dislikes.len());
            prop_assert!(a.features.len() <= b.features.len());
            prop_assert!(rendered_len(a) <= rendered_len(b));
        }
    }

    #[test]
    fn mock_update_is_idempotent(lists in prop::collection::vec(prop::collection::vec(0..VOCAB.len(), 0..15), 3)) {
        let gw = Gateway::mock();
        let pick = |v: &Vec<usize>| v.iter().map(|&i| format!(" {} ", VOCAB[i])).collect::<Vec<_>>();
        let raw = RawProfile { likes: pick(&lists[0]), dislikes: pick(&lists[1]), features: pick(&lists[2]) };
        let (once, _) = update(&raw, &gw).unwrap();
        let (twice, _) = update(&once, &gw).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(&once.likes, &dedup_entries(&raw.likes));
        prop_assert!(once.features.len() <= raw.features.len());
    }
}

#[test]
fn fifty_percent_duplicates_compact_by_a_third() {
    // Every entry appears twice, once in a different case.
    let base: Vec<String> = (0..20).map(|i| format!("feature phrase {i}")).collect();
    let doubled: Vec<String> = base
        .iter()
        .flat_map(|e| [e.clone(), e.to_uppercase()])
        .collect();
    let raw = RawProfile {
        likes: doubled.clone(),
        dislikes: doubled.clone(),
        features: doubled,
    };
    let before: usize = [&raw.likes, &raw.dislikes, &raw.features]
        .iter()
        .map(|l| l.join("; ").split_whitespace().count())
        .sum();
    let (out, _) = update(&raw, &Gateway::mock()).unwrap();
    let after: usize = [&out.likes, &out.dislikes, &out.features]
        .iter()
        .map(|l| l.join("; ").split_whitespace().count())
        .sum();
    assert_eq!(out.likes, base);
    assert!(after as f64 <= 0.7 * before as f64, "{after} vs {before}");
}
