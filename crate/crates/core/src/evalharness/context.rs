use serde::{Deserialize, Serialize};

use crate::corpus::{Timeline, TimelineItem};

/// Where CMV demonstrations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Earlier turns of the query's own thread.
    Conversation,
    /// Earlier turns of every thread the query author opened.
    AuthorAll,
    /// As `AuthorAll`, restricted to threads on the query's topic.
    AuthorTopic,
}

impl std::str::FromStr for ContextMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "conversation" => Ok(Self::Conversation),
            "author_all" => Ok(Self::AuthorAll),
            "author_topic" => Ok(Self::AuthorTopic),
            other => Err(format!("unknown context mode {other}")),
        }
    }
}

/// Position of an item: `(timeline index, item index)`.
pub type ItemRef = (usize, usize);

/// Labeled items strictly earlier than `query` that the mode allows.
pub fn context_source_select(
    corpus: &[Timeline],
    query: &TimelineItem,
    mode: ContextMode,
) -> Vec<ItemRef> {
    let mut out = Vec::new();
    for (ti, tl) in corpus.iter().enumerate() {
        let op = tl.items.first().and_then(|i| i.author.as_deref());
        let topic = tl.items.first().and_then(|i| i.topic.as_deref());
        let allowed = match mode {
            ContextMode::Conversation => tl.sequence_key == query.sequence_key,
            ContextMode::AuthorAll => op.is_some() && op == query.author.as_deref(),
            ContextMode::AuthorTopic => {
                op.is_some() && op == query.author.as_deref() && topic == query.topic.as_deref()
            }
        };
        if !allowed {
            continue;
        }
        for (ii, it) in tl.items.iter().enumerate() {
            if it.timestamp < query.timestamp && it.is_labeled() {
                out.push((ti, ii));
            }
        }
    }
    out
}
