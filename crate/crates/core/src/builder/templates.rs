use crate::corpus::DatasetId;

pub const TEMPLATE_VERSION: &str = "v1";

/// Task instruction for a dataset (template version [`TEMPLATE_VERSION`]).
pub fn instruction(dataset: DatasetId) -> &'static str {
    match dataset {
        DatasetId::Annomi => include_str!("../../templates/annomi.v1.txt"),
        DatasetId::Lrs => include_str!("../../templates/lrs.v1.txt"),
        DatasetId::Talklife => include_str!("../../templates/talklife.v1.txt"),
        DatasetId::Reddit => include_str!("../../templates/reddit.v1.txt"),
        DatasetId::Cmv => include_str!("../../templates/cmv.v1.txt"),
    }
}

/// Noun used for one timeline entry in demonstrations.
pub fn entry_noun(dataset: DatasetId) -> &'static str {
    match dataset {
        DatasetId::Annomi => "Utterance",
        DatasetId::Cmv => "Conversation",
        _ => "Post",
    }
}
