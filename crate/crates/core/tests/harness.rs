mod common;

use std::collections::HashSet;

use common::oracle::*;
use common::*;
use profile_rec::gateway::{Gateway, SchemaId};
use profile_rec::harness::{
    bucket_users, metrics_csv, run_matrix, run_user_continuous, run_user_oneshot, Bucket,
    EvalConfig, EvalContext, MatrixRun, Mode,
};
use profile_rec::ingest::{sample_candidates, UserHistory};
use profile_rec::profile::{step, Profile, StepOptions};
use profile_rec::prompts::{Family, MethodSpec};
use profile_rec::tokenize::Tokenizer;

#[test]
fn profile_steps_match_hand_composition() {
    let gw = Gateway::mock();
    for h in oracle_fixture() {
        let mut p = Profile::default();
        let mut snaps = Vec::new();
        for t in 1..=5 {
            p = step(&p, &h.records[..t], &gw, StepOptions::default())
                .unwrap()
                .0;
            assert!(p.is_deduped());
            snaps.push(p.clone());
        }
        for (i, p) in snaps.iter().enumerate() {
            assert_eq!(
                p,
                &hand_snapshot(&h.user_id, i as u32 + 1, true),
                "user {} v{}",
                h.user_id,
                i + 1
            );
        }
    }
}

#[test]
fn updater_off_keeps_case_variants() {
    let gw = Gateway::mock();
    let h = &oracle_fixture()[1];
    let opts = StepOptions {
        use_updater: false,
        ..StepOptions::default()
    };
    let mut p = Profile::default();
    for t in 1..=5 {
        p = step(&p, &h.records[..t], &gw, opts).unwrap().0;
    }
    assert_eq!(p.likes, s(&["Ocean Drift", "ocean drift", "Sky Pilot"]));
    assert_eq!(p.dislikes, s(&["Battle Arena", "Battle Arena Deluxe"]));
    assert_eq!(p.features, hand_profiles("B")[2].features);
}

#[test]
fn sessions_match_hand_oracle_for_every_method() {
    let histories = oracle_fixture();
    let pool = pool_with_fillers(&histories, 60);
    let gw = Gateway::mock();
    let config = EvalConfig {
        run_seed: 11,
        ..EvalConfig::default()
    };
    let ctx = EvalContext::new(&gw, &pool, &config);
    for method in MethodSpec::grid() {
        for h in &histories {
            let results = run_user_continuous(h, method, &ctx).unwrap();
            assert_eq!(
                results.iter().map(|r| r.target).collect::<Vec<_>>(),
                vec![4, 5, 6]
            );
            for (i, r) in results.iter().enumerate() {
                let t = r.target;
                let slate = sample_candidates(h, t, &pool, r.slate.seed).unwrap();
                let titles: Vec<String> = slate.items.iter().map(|c| c.title.clone()).collect();
                let (pos, neg) = if method.use_extractor {
                    let p = hand_snapshot(&h.user_id, i as u32 + 3, method.use_updater);
                    let mut pos = HashSet::new();
                    for e in p.likes.iter().chain(&p.features) {
                        pos.extend(words(e));
                    }
                    let neg = p.dislikes.iter().flat_map(|e| words(e)).collect();
                    (pos, neg)
                } else {
                    (
                        baseline_positive(&method, &h.records[..t - 1]),
                        HashSet::new(),
                    )
                };
                let order = expected_order(&titles, &pos, &neg);
                assert_eq!(r.ranking.order, order, "{method} user {} t={t}", h.user_id);
                assert_eq!(
                    r.ranking.truth_rank,
                    1 + order.iter().position(|&i| i == slate.truth_index).unwrap()
                );
                assert!(!r.ranking.repaired);
            }
        }
    }
}

#[test]
fn session_counts_follow_history_length() {
    let gw = Gateway::mock();
    let config = EvalConfig::default();
    let users = synthetic_users(2, 4..=4, 5, 1);
    let long = synthetic_users(1, 9..=9, 5, 2);
    let pool = pool_with_fillers(&[users.clone(), long.clone()].concat(), 40);
    let ctx = EvalContext::new(&gw, &pool, &config);
    let m = MethodSpec::items_only(Family::Sequential);
    assert_eq!(run_user_continuous(&users[0], m, &ctx).unwrap().len(), 1);
    let r = run_user_continuous(&long[0], m, &ctx).unwrap();
    assert_eq!(
        r.iter().map(|s| s.target).collect::<Vec<_>>(),
        (4..=9).collect::<Vec<_>>()
    );
    let short = UserHistory {
        user_id: "S".into(),
        records: users[0].records[..3].to_vec(),
    };
    assert!(run_user_continuous(&short, m, &ctx).is_err());
}

#[test]
fn oneshot_equals_last_continuous_session() {
    let histories = oracle_fixture();
    let pool = pool_with_fillers(&histories, 60);
    let gw = Gateway::mock();
    for method in MethodSpec::grid() {
        let h = &histories[2];
        let one_cfg = EvalConfig {
            mode: Mode::Oneshot,
            ..EvalConfig::default()
        };
        let one = run_user_oneshot(h, method, &EvalContext::new(&gw, &pool, &one_cfg)).unwrap();
        assert_eq!(one.target, 6);
        let cont_cfg = EvalConfig {
            first_target_index: 6,
            ..EvalConfig::default()
        };
        let cont =
            run_user_continuous(h, method, &EvalContext::new(&gw, &pool, &cont_cfg)).unwrap();
        assert_eq!(cont.len(), 1);
        assert_eq!(one, cont[0]);
    }
}

#[test]
fn item_only_baselines_never_call_profile_components() {
    let histories = synthetic_users(5, 5..=8, 12, 3);
    let pool = pool_with_fillers(&histories, 40);
    let gw = Gateway::mock();
    let config = EvalConfig::default();
    for method in MethodSpec::grid().into_iter().filter(|m| !m.use_extractor) {
        let rec = Recorder::default();
        let ctx = EvalContext::new(&gw, &pool, &config).with_observer(&rec);
        for h in &histories {
            run_user_continuous(h, method, &ctx).unwrap();
        }
        let counts = rec.counts();
        assert_eq!(counts.get(&SchemaId::Extract), None, "{method}");
        assert_eq!(counts.get(&SchemaId::UpdateList), None, "{method}");
        assert!(counts[&SchemaId::Rank20] > 0);
    }
}

#[test]
fn full_grid_yields_twelve_methods() {
    let histories = synthetic_users(10, 4..=9, 20, 4);
    let pool = pool_with_fillers(&histories, 50);
    let gw = Gateway::mock();
    let config = EvalConfig::default();
    let methods = MethodSpec::grid();
    let out = run_matrix(&MatrixRun::new(&histories, &methods, &gw, &pool, &config)).unwrap();
    assert_eq!(out.table.methods().len(), 12);
    assert_eq!(out.table.rows.len(), 48);
    for row in &out.table.rows {
        assert!((0.0..=100.0).contains(&row.ndcg_x100));
        assert_eq!(row.n_users, 10);
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let histories = synthetic_users(12, 4..=10, 15, 5);
    let pool = pool_with_fillers(&histories, 50);
    let gw = Gateway::mock();
    let methods = MethodSpec::grid();
    let csv = |workers| {
        let config = EvalConfig {
            workers,
            ..EvalConfig::default()
        };
        metrics_csv(
            &run_matrix(&MatrixRun::new(&histories, &methods, &gw, &pool, &config))
                .unwrap()
                .table,
        )
    };
    let one = csv(1);
    assert_eq!(one, csv(4));
    assert_eq!(one, csv(0));
}

#[test]
fn buckets_land_three_per_band() {
    // 100, 300, 499 | 500, 700, 999 | 1000, 1500, 1999 review tokens;
    // one more user at 2000 is excluded.
    let sizes = [100usize, 300, 499, 500, 700, 999, 1000, 1500, 1999, 2000];
    let histories: Vec<UserHistory> = sizes
        .iter()
        .enumerate()
        .map(|(u, &n)| {
            let half = n / 2;
            history(
                &format!("U{u}"),
                &[
                    ("x1", "T1", 5, &"word ".repeat(half)),
                    ("x2", "T2", 5, &"word ".repeat(n - half)),
                ],
            )
        })
        .collect();
    let b = bucket_users(&histories, Tokenizer::Whitespace);
    assert_eq!(b.sizes(), [3, 3, 3]);
    assert_eq!(b.excluded.len(), 1);
    assert_eq!(b.bucket_of("U3"), Some(Bucket::Middle));
    let empty = history("Z", &[("z", "Zero", 5, "")]);
    assert_eq!(
        bucket_users(&[empty], Tokenizer::Whitespace).bucket_of("Z"),
        Some(Bucket::Short)
    );
}
