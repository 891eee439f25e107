//! Independent restatement of the mock rules for the three-user fixture.

use std::collections::HashSet;

use profile_rec::ingest::ReviewRecord;
use profile_rec::profile::Profile;
use profile_rec::prompts::MethodSpec;

pub fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

pub fn words(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Independent restatement of the overlap rule: returns the expected
/// 0-based slate order.
pub fn expected_order(
    titles: &[String],
    positive: &HashSet<String>,
    negative: &HashSet<String>,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..titles.len()).collect();
    let score = |i: usize| {
        let w = words(&titles[i]);
        w.intersection(positive).count() as i64 - w.intersection(negative).count() as i64
    };
    idx.sort_by(|&a, &b| {
        score(b)
            .cmp(&score(a))
            .then(titles[a].cmp(&titles[b]))
            .then(a.cmp(&b))
    });
    idx
}

pub fn profile(likes: &[&str], dislikes: &[&str], features: &[&str], version: u32) -> Profile {
    Profile {
        likes: s(likes),
        dislikes: s(dislikes),
        features: s(features),
        version,
    }
}

/// Profiles with the updater on, at versions 3, 4 and 5, composed by hand
/// from the extract gate, the feature rule and case-insensitive dedup.
pub fn hand_profiles(user: &str) -> [Profile; 3] {
    match user {
        "A" => {
            let f3 = [
                "brilliant",
                "graphics",
                "music",
                "stunning",
                "clunky",
                "controls",
                "menus",
            ];
            let mut f5 = f3.to_vec();
            f5.push("puzzles");
            [
                profile(&["Star Quest Saga"], &["Mud Racer"], &f3, 3),
                profile(
                    &["Star Quest Saga", "Star Quest Saga II"],
                    &["Mud Racer"],
                    &f3,
                    4,
                ),
                profile(
                    &["Star Quest Saga", "Star Quest Saga II", "Puzzle Tower"],
                    &["Mud Racer"],
                    &f5,
                    5,
                ),
            ]
        }
        "B" => {
            let f3 = [
                "ocean",
                "relaxing",
                "sounds",
                "everywhere",
                "players",
                "toxic",
            ];
            let f4 = [
                "ocean",
                "relaxing",
                "sounds",
                "everywhere",
                "players",
                "toxic",
                "flight",
                "smooth",
            ];
            let mut f5 = f4.to_vec();
            f5.push("again");
            [
                profile(&["Ocean Drift"], &["Battle Arena"], &f3, 3),
                profile(&["Ocean Drift", "Sky Pilot"], &["Battle Arena"], &f4, 4),
                profile(
                    &["Ocean Drift", "Sky Pilot"],
                    &["Battle Arena", "Battle Arena Deluxe"],
                    &f5,
                    5,
                ),
            ]
        }
        "C" => {
            let f3 = ["enough", "pleasant", "farming"];
            let f4 = ["enough", "pleasant", "farming", "villagers"];
            let f5 = [
                "enough",
                "pleasant",
                "farming",
                "villagers",
                "cheap",
                "scares",
            ];
            [
                profile(&["Farm Story Deluxe"], &["Haunted Manor"], &f3, 3),
                profile(
                    &["Farm Story Deluxe", "Cozy Village"],
                    &["Haunted Manor"],
                    &f4,
                    4,
                ),
                profile(
                    &["Farm Story Deluxe", "Cozy Village"],
                    &["Haunted Manor", "Haunted Manor Remix"],
                    &f5,
                    5,
                ),
            ]
        }
        _ => unreachable!(),
    }
}

pub fn baseline_positive(method: &MethodSpec, seen: &[ReviewRecord]) -> HashSet<String> {
    let mut pos = HashSet::new();
    for r in seen {
        pos.extend(words(&r.title));
        if method.use_reviews {
            pos.extend(words(&r.text));
        }
    }
    pos
}

/// Versions 1 and 2 with the updater on.
pub fn early_profiles(user: &str) -> [Profile; 2] {
    match user {
        "A" => [
            profile(
                &["Star Quest Saga"],
                &[],
                &["brilliant", "graphics", "music", "stunning"],
                1,
            ),
            profile(
                &["Star Quest Saga"],
                &["Mud Racer"],
                &[
                    "brilliant",
                    "graphics",
                    "music",
                    "stunning",
                    "clunky",
                    "controls",
                    "menus",
                ],
                2,
            ),
        ],
        "B" => [
            profile(&["Ocean Drift"], &[], &["ocean", "relaxing", "sounds"], 1),
            profile(&["Ocean Drift"], &[], &["ocean", "relaxing", "sounds"], 2),
        ],
        "C" => [
            profile(&[], &[], &["enough", "pleasant"], 1),
            profile(
                &["Farm Story Deluxe"],
                &[],
                &["enough", "pleasant", "farming"],
                2,
            ),
        ],
        _ => unreachable!(),
    }
}

/// Expected profile at `version` (1..=5). With the updater off only exact
/// duplicates collapse, which in this fixture matters for user B alone.
pub fn hand_snapshot(user: &str, version: u32, use_updater: bool) -> Profile {
    let mut p = match version {
        1 | 2 => early_profiles(user)[version as usize - 1].clone(),
        3..=5 => hand_profiles(user)[version as usize - 3].clone(),
        _ => unreachable!(),
    };
    if !use_updater && user == "B" && version >= 2 {
        p.likes.insert(1, "ocean drift".into());
    }
    p
}
