use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DatasetId;
use crate::error::{LiftError, Result};

/// Reserved id for "no label". Stamped on every non-output token.
pub const NULL_LABEL: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub id: u32,
    pub dataset: Option<DatasetId>,
    pub label: String,
}

/// One id space spanning every dataset's labels.
///
/// Ordering is fixed: `NULL` first, then datasets in curriculum order
/// (annomi, lrs, talklife, reddit, cmv), each dataset's labels sorted
/// alphabetically. Ids are assigned per `(dataset, label)` pair, so Reddit
/// and TalkLife labels that share a name still get distinct ids unless the
/// alias table collapses them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalLabelSpace {
    pub version: u32,
    entries: Vec<LabelEntry>,
    /// `(from_dataset, to_dataset)`: labels of `from` resolve to ids of `to`.
    #[serde(default)]
    aliases: Vec<(DatasetId, DatasetId)>,
}

impl GlobalLabelSpace {
    pub fn standard() -> Self {
        let mut entries = vec![LabelEntry {
            id: NULL_LABEL,
            dataset: None,
            label: "NULL".to_string(),
        }];
        for dataset in DatasetId::ALL {
            let mut labels: Vec<&str> = dataset.declared_labels().to_vec();
            labels.sort_unstable();
            for label in labels {
                entries.push(LabelEntry {
                    id: entries.len() as u32,
                    dataset: Some(dataset),
                    label: label.to_string(),
                });
            }
        }
        Self {
            version: 1,
            entries,
            aliases: Vec::new(),
        }
    }

    /// Standard space with Reddit labels folded onto the TalkLife ids.
    pub fn with_reddit_alias() -> Self {
        let std = Self::standard();
        let mut entries: Vec<LabelEntry> = std
            .entries
            .into_iter()
            .filter(|e| e.dataset != Some(DatasetId::Reddit))
            .collect();
        for (i, e) in entries.iter_mut().enumerate() {
            e.id = i as u32;
        }
        Self {
            version: 1,
            entries,
            aliases: vec![(DatasetId::Reddit, DatasetId::Talklife)],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    fn resolve_dataset(&self, dataset: DatasetId) -> DatasetId {
        self.aliases
            .iter()
            .find(|(from, _)| *from == dataset)
            .map(|(_, to)| *to)
            .unwrap_or(dataset)
    }

    pub fn id_of(&self, dataset: DatasetId, label: &str) -> Result<u32> {
        let target = self.resolve_dataset(dataset);
        self.entries
            .iter()
            .find(|e| e.dataset == Some(target) && e.label == label)
            .map(|e| e.id)
            .ok_or_else(|| LiftError::UnknownLabel {
                dataset,
                label: label.to_string(),
            })
    }

    pub fn entry(&self, id: u32) -> Option<&LabelEntry> {
        self.entries.get(id as usize)
    }

    /// Declared labels of `dataset` in id order.
    pub fn labels_for(&self, dataset: DatasetId) -> Vec<&LabelEntry> {
        let target = self.resolve_dataset(dataset);
        self.entries
            .iter()
            .filter(|e| e.dataset == Some(target))
            .collect()
    }

    /// Content hash persisted with every artifact that depends on label ids.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("label space serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_is_zero_and_ordering_follows_curriculum() {
        let space = GlobalLabelSpace::standard();
        assert_eq!(space.entry(0).unwrap().label, "NULL");
        let order: Vec<(Option<DatasetId>, &str)> = space
            .entries()
            .iter()
            .map(|e| (e.dataset, e.label.as_str()))
            .collect();
        assert_eq!(order[1], (Some(DatasetId::Annomi), "CHANGE"));
        assert_eq!(order[4], (Some(DatasetId::Lrs), "N-Sw"));
        assert_eq!(order[6], (Some(DatasetId::Talklife), "IE"));
        assert_eq!(order[9], (Some(DatasetId::Reddit), "IE"));
        assert_eq!(order[13], (Some(DatasetId::Cmv), "1"));
        assert_eq!(space.len(), 14);
    }

    #[test]
    fn bijective_over_declared_labels() {
        let space = GlobalLabelSpace::standard();
        for e in space.entries().iter().skip(1) {
            let ds = e.dataset.unwrap();
            assert_eq!(space.id_of(ds, &e.label).unwrap(), e.id);
        }
        assert_ne!(
            space.id_of(DatasetId::Reddit, "IS").unwrap(),
            space.id_of(DatasetId::Talklife, "IS").unwrap()
        );
    }

    #[test]
    fn alias_collapses_reddit_onto_talklife() {
        let space = GlobalLabelSpace::with_reddit_alias();
        assert_eq!(space.len(), 11);
        assert_eq!(
            space.id_of(DatasetId::Reddit, "IS").unwrap(),
            space.id_of(DatasetId::Talklife, "IS").unwrap()
        );
        assert_ne!(space.hash(), GlobalLabelSpace::standard().hash());
    }

    #[test]
    fn hash_is_stable_across_serde() {
        let space = GlobalLabelSpace::standard();
        let back: GlobalLabelSpace =
            serde_json::from_str(&serde_json::to_string(&space).unwrap()).unwrap();
        assert_eq!(back.hash(), space.hash());
    }
}
