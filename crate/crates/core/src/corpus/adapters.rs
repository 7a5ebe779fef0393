use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde_json::{Map, Value};

use super::{group_and_sort, read_jsonl, DatasetId, GlobalLabelSpace, Timeline, TimelineItem};
use crate::error::{LiftError, Result};

/// Field names and label vocabulary of one source dataset.
#[derive(Debug, Clone)]
pub struct DatasetAdapter {
    pub dataset: DatasetId,
    pub key_field: &'static str,
    pub text_field: &'static str,
    pub label_field: &'static str,
    pub timestamp_field: &'static str,
    pub role_field: Option<&'static str>,
    pub topic_field: Option<&'static str>,
    pub author_field: Option<&'static str>,
    /// Raw label spellings (matched case-insensitively) onto canonical labels.
    pub label_aliases: &'static [(&'static str, &'static str)],
    /// Only these speaker roles carry labels; other turns are history-only.
    pub labeled_role: Option<&'static str>,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Keep AnnoMI therapist turns as unlabeled history lines.
    pub keep_unlabeled_roles: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            keep_unlabeled_roles: true,
        }
    }
}

impl DatasetAdapter {
    pub fn for_dataset(dataset: DatasetId) -> Self {
        match dataset {
            DatasetId::Annomi => Self {
                dataset,
                key_field: "topic",
                text_field: "utterance_text",
                label_field: "client_talk_type",
                timestamp_field: "timestamp",
                role_field: Some("interlocutor"),
                topic_field: Some("topic"),
                author_field: None,
                label_aliases: &[
                    ("change", "CHANGE"),
                    ("neutral", "NEUTRAL"),
                    ("sustain", "SUSTAIN"),
                ],
                labeled_role: Some("client"),
            },
            DatasetId::Lrs => Self {
                dataset,
                key_field: "timeline_id",
                text_field: "text",
                label_field: "label",
                timestamp_field: "created_at",
                role_field: None,
                topic_field: None,
                author_field: None,
                label_aliases: &[("sw", "Sw"), ("n-sw", "N-Sw"), ("1", "Sw"), ("0", "N-Sw")],
                labeled_role: None,
            },
            DatasetId::Talklife => Self {
                dataset,
                key_field: "timeline_id",
                text_field: "text",
                label_field: "label",
                timestamp_field: "date",
                role_field: None,
                topic_field: None,
                author_field: None,
                label_aliases: &[("is", "IS"), ("ie", "IE"), ("o", "O")],
                labeled_role: None,
            },
            DatasetId::Reddit => Self {
                dataset,
                key_field: "user_id",
                text_field: "text",
                label_field: "label",
                timestamp_field: "created_utc",
                role_field: None,
                topic_field: None,
                author_field: None,
                label_aliases: &[
                    ("is", "IS"),
                    ("ie", "IE"),
                    ("o", "O"),
                    ("s", "IS"),
                    ("e", "IE"),
                ],
                labeled_role: None,
            },
            DatasetId::Cmv => Self {
                dataset,
                key_field: "thread_id",
                text_field: "text",
                label_field: "delta",
                timestamp_field: "created_utc",
                role_field: None,
                topic_field: Some("topic"),
                author_field: Some("author"),
                label_aliases: &[("0", "0"), ("1", "1"), ("false", "0"), ("true", "1")],
                labeled_role: None,
            },
        }
    }

    fn canonical_label(&self, raw: &str) -> Option<&'static str> {
        let raw = raw.trim();
        self.dataset
            .declared_labels()
            .iter()
            .copied()
            .find(|l| *l == raw)
            .or_else(|| {
                self.label_aliases
                    .iter()
                    .find(|(from, _)| from.eq_ignore_ascii_case(raw))
                    .map(|(_, to)| *to)
            })
    }

    /// Map one raw record onto the shared schema. `ordinal` is the record's
    /// position within its sequence in input order and replaces a missing
    /// timestamp.
    pub fn standardize(
        &self,
        raw: &Map<String, Value>,
        labels: &GlobalLabelSpace,
        ordinal: usize,
    ) -> Result<TimelineItem> {
        let text = field_string(raw, self.text_field)
            .ok_or_else(|| LiftError::MissingField(self.text_field.into()))?;
        if text.trim().is_empty() {
            return Err(LiftError::EmptyText);
        }
        let sequence_key = field_string(raw, self.key_field)
            .ok_or_else(|| LiftError::MissingField(self.key_field.into()))?;
        let timestamp = match raw.get(self.timestamp_field) {
            None | Some(Value::Null) => ordinal as i64,
            Some(v) => parse_timestamp(v)?,
        };
        let speaker_role = self.role_field.and_then(|f| field_string(raw, f));
        let labeled = match (self.labeled_role, &speaker_role) {
            (Some(role), Some(actual)) => actual.eq_ignore_ascii_case(role),
            _ => true,
        };
        let (local_label, global_label_id) = if labeled {
            let raw_label = field_string(raw, self.label_field)
                .ok_or_else(|| LiftError::MissingField(self.label_field.into()))?;
            let label =
                self.canonical_label(&raw_label)
                    .ok_or_else(|| LiftError::UnknownLabel {
                        dataset: self.dataset,
                        label: raw_label.clone(),
                    })?;
            (label.to_string(), labels.id_of(self.dataset, label)?)
        } else {
            (String::new(), super::NULL_LABEL)
        };
        Ok(TimelineItem {
            dataset_id: self.dataset,
            sequence_key,
            timestamp,
            index_in_timeline: ordinal,
            text,
            local_label,
            global_label_id,
            speaker_role,
            topic: self.topic_field.and_then(|f| field_string(raw, f)),
            author: self.author_field.and_then(|f| field_string(raw, f)),
        })
    }

    /// Inverse of [`standardize`](Self::standardize): export an item as a raw
    /// record of this dataset's schema (timestamp as integer seconds).
    pub fn to_raw(&self, item: &TimelineItem) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert(self.key_field.into(), item.sequence_key.clone().into());
        m.insert(self.text_field.into(), item.text.clone().into());
        m.insert(self.timestamp_field.into(), item.timestamp.into());
        if item.is_labeled() {
            m.insert(self.label_field.into(), item.local_label.clone().into());
        }
        if let (Some(f), Some(v)) = (self.role_field, &item.speaker_role) {
            m.insert(f.into(), v.clone().into());
        }
        if let (Some(f), Some(v)) = (self.topic_field, &item.topic) {
            // AnnoMI keys on topic; the key field already holds it.
            m.entry(f).or_insert_with(|| v.clone().into());
        }
        if let (Some(f), Some(v)) = (self.author_field, &item.author) {
            m.insert(f.into(), v.clone().into());
        }
        m
    }

    /// Read a JSONL file of raw records into sorted timelines.
    pub fn ingest(
        &self,
        path: &Path,
        labels: &GlobalLabelSpace,
        opts: &IngestOptions,
    ) -> Result<Vec<Timeline>> {
        let records: Vec<Map<String, Value>> = read_jsonl(path)?;
        let items = self.standardize_all(&records, labels, opts)?;
        Ok(group_and_sort(items))
    }

    pub fn standardize_all(
        &self,
        records: &[Map<String, Value>],
        labels: &GlobalLabelSpace,
        opts: &IngestOptions,
    ) -> Result<Vec<TimelineItem>> {
        let mut ordinals: HashMap<String, usize> = HashMap::new();
        let mut items = Vec::with_capacity(records.len());
        for raw in records {
            let key = field_string(raw, self.key_field).unwrap_or_default();
            let slot = ordinals.entry(key).or_insert(0);
            let item = self.standardize(raw, labels, *slot)?;
            *slot += 1;
            if !item.is_labeled() && !opts.keep_unlabeled_roles {
                continue;
            }
            items.push(item);
        }
        Ok(items)
    }
}

/// Standardize with the default adapter for `dataset`.
pub fn standardize(
    raw: &Map<String, Value>,
    dataset: DatasetId,
    labels: &GlobalLabelSpace,
    ordinal: usize,
) -> Result<TimelineItem> {
    DatasetAdapter::for_dataset(dataset).standardize(raw, labels, ordinal)
}

fn field_string(raw: &Map<String, Value>, field: &str) -> Option<String> {
    match raw.get(field)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Integer seconds, RFC 3339, `YYYY-MM-DD[ HH:MM:SS]`, or `HH:MM:SS` offsets.
pub fn parse_timestamp(v: &Value) -> Result<i64> {
    let bad = || LiftError::BadTimestamp(v.to_string());
    match v {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().map(|f| f.floor() as i64))
            .ok_or_else(bad),
        Value::String(s) => {
            let s = s.trim();
            if let Ok(n) = s.parse::<i64>() {
                return Ok(n);
            }
            if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
                return Ok(dt.timestamp());
            }
            for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
                if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
                    return Ok(dt.and_utc().timestamp());
                }
            }
            if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
                return Ok(d
                    .and_hms_opt(0, 0, 0)
                    .ok_or_else(bad)?
                    .and_utc()
                    .timestamp());
            }
            let parts: Vec<&str> = s.split(':').collect();
            if parts.len() == 3 {
                let nums: Option<Vec<i64>> = parts.iter().map(|p| p.parse().ok()).collect();
                if let Some(n) = nums {
                    return Ok(n[0] * 3600 + n[1] * 60 + n[2]);
                }
            }
            Err(bad())
        }
        _ => Err(bad()),
    }
}
