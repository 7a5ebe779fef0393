//! Ingestion of heterogeneous longitudinal datasets into one timeline schema.

mod adapters;
mod labels;
pub mod synth;

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use adapters::{parse_timestamp, standardize, DatasetAdapter, IngestOptions};
pub use labels::{GlobalLabelSpace, LabelEntry, NULL_LABEL};

use crate::error::{LiftError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Annomi,
    Lrs,
    Talklife,
    Reddit,
    Cmv,
}

impl DatasetId {
    pub const ALL: [DatasetId; 5] = [
        DatasetId::Annomi,
        DatasetId::Lrs,
        DatasetId::Talklife,
        DatasetId::Reddit,
        DatasetId::Cmv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Annomi => "annomi",
            DatasetId::Lrs => "lrs",
            DatasetId::Talklife => "talklife",
            DatasetId::Reddit => "reddit",
            DatasetId::Cmv => "cmv",
        }
    }

    /// Canonical local label strings (also the response text the model emits).
    pub fn declared_labels(self) -> &'static [&'static str] {
        match self {
            DatasetId::Annomi => &["CHANGE", "NEUTRAL", "SUSTAIN"],
            DatasetId::Lrs => &["N-Sw", "Sw"],
            DatasetId::Talklife | DatasetId::Reddit => &["IE", "IS", "O"],
            DatasetId::Cmv => &["0", "1"],
        }
    }

    /// Datasets seen in training; reddit and cmv are test-only.
    pub fn is_training(self) -> bool {
        matches!(
            self,
            DatasetId::Annomi | DatasetId::Lrs | DatasetId::Talklife
        )
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = LiftError;

    fn from_str(s: &str) -> Result<Self> {
        DatasetId::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| LiftError::Config(format!("unknown dataset {s:?}")))
    }
}

/// One timestamped observation in a user/topic/thread sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineItem {
    pub dataset_id: DatasetId,
    pub sequence_key: String,
    /// Seconds since the epoch, or the ordinal position when the source had no time.
    pub timestamp: i64,
    pub index_in_timeline: usize,
    pub text: String,
    /// Empty for unlabeled turns (AnnoMI therapist utterances).
    pub local_label: String,
    pub global_label_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author: Option<String>,
}

impl TimelineItem {
    pub fn is_labeled(&self) -> bool {
        self.global_label_id != NULL_LABEL
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    pub dataset_id: DatasetId,
    pub sequence_key: String,
    pub items: Vec<TimelineItem>,
}

impl Timeline {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Partition by sequence key (first-appearance order) and stable-sort each
/// group by timestamp, then assign `index_in_timeline`.
pub fn group_and_sort(items: Vec<TimelineItem>) -> Vec<Timeline> {
    let mut order: Vec<(DatasetId, String)> = Vec::new();
    let mut groups: HashMap<(DatasetId, String), Vec<TimelineItem>> = HashMap::new();
    for item in items {
        let key = (item.dataset_id, item.sequence_key.clone());
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(item);
    }
    order
        .into_iter()
        .map(|key| {
            let mut items = groups.remove(&key).expect("group exists");
            // Vec::sort_by_key is stable, so equal timestamps keep input order.
            items.sort_by_key(|it| it.timestamp);
            for (i, it) in items.iter_mut().enumerate() {
                it.index_in_timeline = i;
            }
            Timeline {
                dataset_id: key.0,
                sequence_key: key.1,
                items,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dataset: Option<DatasetId>,
    pub timelines: usize,
    pub items: usize,
    pub labeled_items: usize,
    pub mean_posts_per_timeline: f64,
    pub mean_tokens_per_post: f64,
    pub mean_tokens_per_timeline: f64,
    pub label_counts: Vec<(String, usize)>,
}

impl CorpusStats {
    /// Token counts here are whitespace words, independent of any model tokenizer.
    pub fn compute(timelines: &[Timeline]) -> Self {
        let dataset = timelines.first().map(|t| t.dataset_id);
        let items: usize = timelines.iter().map(Timeline::len).sum();
        let tokens: usize = timelines
            .iter()
            .flat_map(|t| &t.items)
            .map(|it| it.text.split_whitespace().count())
            .sum();
        let mut counts: Vec<(String, usize)> = Vec::new();
        let mut labeled = 0;
        for it in timelines.iter().flat_map(|t| &t.items) {
            if !it.is_labeled() {
                continue;
            }
            labeled += 1;
            match counts.iter_mut().find(|(l, _)| *l == it.local_label) {
                Some((_, c)) => *c += 1,
                None => counts.push((it.local_label.clone(), 1)),
            }
        }
        counts.sort();
        let n_t = timelines.len().max(1) as f64;
        Self {
            dataset,
            timelines: timelines.len(),
            items,
            labeled_items: labeled,
            mean_posts_per_timeline: items as f64 / n_t,
            mean_tokens_per_post: tokens as f64 / items.max(1) as f64,
            mean_tokens_per_timeline: tokens as f64 / n_t,
            label_counts: counts,
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| LiftError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| LiftError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    rows: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| LiftError::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| LiftError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| LiftError::io(path, e))?;
    }
    w.flush().map_err(|e| LiftError::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| LiftError::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| LiftError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| LiftError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(key: &str, ts: i64, text: &str) -> TimelineItem {
        TimelineItem {
            dataset_id: DatasetId::Talklife,
            sequence_key: key.into(),
            timestamp: ts,
            index_in_timeline: 0,
            text: text.into(),
            local_label: "O".into(),
            global_label_id: 8,
            speaker_role: None,
            topic: None,
            author: None,
        }
    }

    #[test]
    fn equal_timestamps_keep_input_order() {
        let tls = group_and_sort(vec![item("A", 5, "first"), item("A", 5, "second")]);
        assert_eq!(tls.len(), 1);
        assert_eq!(tls[0].items[0].text, "first");
        assert_eq!(tls[0].items[1].index_in_timeline, 1);
    }

    #[test]
    fn two_keys_two_timelines() {
        let tls = group_and_sort(vec![
            item("A", 3, "a3"),
            item("B", 1, "b1"),
            item("A", 1, "a1"),
        ]);
        assert_eq!(tls.len(), 2);
        assert_eq!(tls[0].sequence_key, "A");
        let texts: Vec<_> = tls[0].items.iter().map(|i| i.text.as_str()).collect();
        assert_eq!(texts, ["a1", "a3"]);
    }

    #[test]
    fn dataset_id_parses_case_insensitively() {
        assert_eq!(
            "TalkLife".parse::<DatasetId>().unwrap(),
            DatasetId::Talklife
        );
        assert!("twitter".parse::<DatasetId>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn index_is_rank_of_timestamp_then_input_order(
            stamps in proptest::collection::vec((0u8..3, 0i64..6), 1..40)
        ) {
            let items: Vec<TimelineItem> = stamps
                .iter()
                .enumerate()
                .map(|(i, (k, ts))| item(&format!("k{k}"), *ts, &i.to_string()))
                .collect();
            for tl in group_and_sort(items) {
                let mut expected: Vec<(i64, usize)> = tl
                    .items
                    .iter()
                    .map(|it| (it.timestamp, it.text.parse::<usize>().unwrap()))
                    .collect();
                expected.sort();
                for (rank, it) in tl.items.iter().enumerate() {
                    proptest::prop_assert_eq!(it.index_in_timeline, rank);
                    proptest::prop_assert_eq!(it.text.parse::<usize>().unwrap(), expected[rank].1);
                }
            }
        }
    }
}
