//! Schema-compatible synthetic corpora.
//!
//! The licensed sources are not redistributable, so tests and the bundled
//! fixtures use generated records that follow each adapter's field layout and
//! the published timeline shapes (timelines, posts per timeline, tokens per
//! post, event frequency).

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use super::{group_and_sort, DatasetAdapter, DatasetId, GlobalLabelSpace, Timeline, TimelineItem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthShape {
    pub timelines: usize,
    pub mean_posts: f64,
    pub mean_tokens_per_post: f64,
    /// Fraction of non-default ("event") labels.
    pub event_frequency: f64,
}

impl SynthShape {
    /// Timeline shapes of the full-size corpora.
    pub fn paper(dataset: DatasetId) -> Self {
        let (timelines, mean_posts, mean_tokens_per_post, event_frequency) = match dataset {
            DatasetId::Annomi => (44, 10.0, 15.52, 0.367),
            DatasetId::Lrs => (274, 15.5, 14.0, 0.50),
            DatasetId::Talklife => (500, 37.40, 22.2, 0.34),
            DatasetId::Reddit => (255, 24.29, 106.3, 0.33),
            DatasetId::Cmv => (9456, 5.14, 153.0, 0.15),
        };
        Self {
            timelines,
            mean_posts,
            mean_tokens_per_post,
            event_frequency,
        }
    }

    /// Same proportions, scaled down so a full pipeline runs in seconds.
    pub fn desk(dataset: DatasetId) -> Self {
        let paper = Self::paper(dataset);
        let (timelines, posts_scale, token_scale) = match dataset {
            DatasetId::Annomi => (10, 1.0, 0.5),
            DatasetId::Lrs => (10, 0.6, 0.5),
            DatasetId::Talklife => (10, 0.4, 0.3),
            DatasetId::Reddit => (6, 0.3, 0.1),
            DatasetId::Cmv => (12, 1.0, 0.08),
        };
        Self {
            timelines,
            mean_posts: (paper.mean_posts * posts_scale).max(3.0),
            mean_tokens_per_post: (paper.mean_tokens_per_post * token_scale).max(4.0),
            event_frequency: paper.event_frequency,
        }
    }
}

const WORDS: &[&str] = &[
    "today", "again", "really", "feel", "think", "maybe", "never", "always", "work", "home",
    "friends", "family", "tired", "sleep", "better", "worse", "talk", "people", "time", "week",
    "night", "morning", "still", "just", "about", "because", "want", "need", "know", "said",
    "claim", "source", "report", "true", "false", "news", "police", "video", "heard", "believe",
    "doctor", "drink", "smoke", "quit", "health", "exercise", "money", "change", "view",
    "argument",
];

/// Split `total` into `n` positive parts that vary around the mean.
fn partition(total: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mean = total as f64 / n as f64;
    let mut parts: Vec<usize> = (0..n)
        .map(|_| ((mean * rng.random_range(0.5..1.5)).round() as usize).max(1))
        .collect();
    let mut sum: usize = parts.iter().sum();
    let mut i = 0;
    while sum != total {
        let j = i % n;
        if sum < total {
            parts[j] += 1;
            sum += 1;
        } else if parts[j] > 1 {
            parts[j] -= 1;
            sum -= 1;
        }
        i += 1;
    }
    parts
}

fn sentence(rng: &mut ChaCha8Rng, mean_tokens: f64) -> String {
    let n = ((mean_tokens * rng.random_range(0.6..1.4)).round() as usize).max(1);
    (0..n)
        .map(|_| *WORDS.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generate raw records (adapter field layout) for `dataset`.
///
/// The total post count is exactly `round(timelines * mean_posts)`, so corpus
/// statistics reproduce the requested mean.
pub fn generate_records(
    dataset: DatasetId,
    shape: SynthShape,
    seed: u64,
) -> Vec<Map<String, Value>> {
    let labels = GlobalLabelSpace::standard();
    let adapter = DatasetAdapter::for_dataset(dataset);
    generate_items(dataset, shape, seed, &labels)
        .iter()
        .map(|it| adapter.to_raw(it))
        .collect()
}

pub fn generate_items(
    dataset: DatasetId,
    shape: SynthShape,
    seed: u64,
    labels: &GlobalLabelSpace,
) -> Vec<TimelineItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (dataset as u64).wrapping_mul(0x9E37_79B9));
    let total = (shape.timelines as f64 * shape.mean_posts).round() as usize;
    let lengths = partition(total, shape.timelines, &mut rng);
    let declared = dataset.declared_labels();
    let default_label = match dataset {
        DatasetId::Annomi => "NEUTRAL",
        DatasetId::Lrs => "N-Sw",
        DatasetId::Talklife | DatasetId::Reddit => "O",
        DatasetId::Cmv => "0",
    };
    let events: Vec<&str> = declared
        .iter()
        .copied()
        .filter(|l| *l != default_label)
        .collect();
    let topics = ["politics", "health", "science", "culture"];
    let authors: Vec<String> = (0..(shape.timelines / 3).max(2))
        .map(|i| format!("author{i}"))
        .collect();

    let mut items = Vec::with_capacity(total);
    for (t, &len) in lengths.iter().enumerate() {
        let key = match dataset {
            DatasetId::Annomi => format!("topic{t:03}"),
            DatasetId::Cmv => format!("thread{t:05}"),
            _ => format!("{}{t:04}", dataset.as_str()),
        };
        let base_time = 1_600_000_000 + (t as i64) * 86_400;
        let op = authors.choose(&mut rng).expect("authors").clone();
        let topic = topics[rng.random_range(0..topics.len())];
        for p in 0..len {
            let therapist = dataset == DatasetId::Annomi && p % 2 == 0;
            let label = if therapist {
                ""
            } else if p == 0 || !rng.random_bool(shape.event_frequency) {
                default_label
            } else {
                *events.choose(&mut rng).expect("events")
            };
            let author = match dataset {
                DatasetId::Cmv if p == 0 => Some(op.clone()),
                DatasetId::Cmv => Some(authors.choose(&mut rng).expect("authors").clone()),
                _ => None,
            };
            items.push(TimelineItem {
                dataset_id: dataset,
                sequence_key: key.clone(),
                timestamp: base_time + (p as i64) * 600 + rng.random_range(0..300),
                index_in_timeline: p,
                text: sentence(&mut rng, shape.mean_tokens_per_post),
                local_label: label.to_string(),
                global_label_id: if label.is_empty() {
                    super::NULL_LABEL
                } else {
                    labels.id_of(dataset, label).expect("declared")
                },
                speaker_role: (dataset == DatasetId::Annomi)
                    .then(|| if therapist { "therapist" } else { "client" }.to_string()),
                topic: match dataset {
                    DatasetId::Annomi => Some(key.clone()),
                    DatasetId::Cmv => Some(topic.to_string()),
                    _ => None,
                },
                author,
            });
        }
    }
    items
}

pub fn generate_timelines(dataset: DatasetId, shape: SynthShape, seed: u64) -> Vec<Timeline> {
    group_and_sort(generate_items(
        dataset,
        shape,
        seed,
        &GlobalLabelSpace::standard(),
    ))
}

/// Mood words of the history-dependent task.
pub const MOODS: [&str; 2] = ["calm", "upset"];

/// A binary longitudinal task whose label depends on history only: a post is
/// `Sw` exactly when its mood word differs from the previous post's mood word.
/// The first post of a timeline is always `N-Sw`. Filler words carry no signal.
pub fn history_task(timelines: usize, posts: usize, seed: u64) -> Vec<Timeline> {
    let labels = GlobalLabelSpace::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fillers = [
        "the", "day", "was", "long", "and", "then", "we", "went", "out", "again",
    ];
    let mut items = Vec::new();
    for t in 0..timelines {
        let mut prev: Option<usize> = None;
        for p in 0..posts {
            let mood = rng.random_range(0..MOODS.len());
            let mut words: Vec<&str> = (0..3)
                .map(|_| *fillers.choose(&mut rng).expect("f"))
                .collect();
            words.insert(rng.random_range(0..=words.len()), MOODS[mood]);
            let label = match prev {
                Some(m) if m != mood => "Sw",
                _ => "N-Sw",
            };
            prev = Some(mood);
            items.push(TimelineItem {
                dataset_id: DatasetId::Lrs,
                sequence_key: format!("synth{t:04}"),
                timestamp: p as i64,
                index_in_timeline: p,
                text: words.join(" "),
                local_label: label.to_string(),
                global_label_id: labels.id_of(DatasetId::Lrs, label).expect("declared"),
                speaker_role: None,
                topic: None,
                author: None,
            });
        }
    }
    group_and_sort(items)
}
