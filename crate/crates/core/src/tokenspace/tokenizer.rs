use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};

pub const EOS_TOKEN: &str = "<|endoftext|>";
pub const PAD_TOKEN: &str = "<|pad|>";

/// Structural tags added to every tokenizer as single atomic ids.
pub const CONTROL_TOKENS: [&str; 12] = [
    "<instruction>",
    "</instruction>",
    "<few-shot>",
    "</few-shot>",
    "<query>",
    "</query>",
    "<output>",
    "</output>",
    "<hist>",
    "</hist>",
    "<curr>",
    "</curr>",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

impl Token {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// What the pipeline needs from a tokenizer. Any external tokenizer that can
/// report byte offsets can be wrapped behind this.
pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<Token>;
    fn decode(&self, ids: &[u32]) -> String;
    fn is_special(&self, id: u32) -> bool;
    fn vocab_size(&self) -> usize;
    fn token_id(&self, piece: &str) -> Option<u32>;
    /// Register `piece` as an atomic special token; returns the existing id if present.
    fn add_special(&mut self, piece: &str) -> u32;
    fn pad_id(&self) -> Option<u32>;
    fn eos_id(&self) -> u32;

    fn count(&self, text: &str) -> usize {
        self.encode(text).len()
    }
}

/// Add the control tokens and, when missing, a pad token. Idempotent.
pub fn extend_vocab<T: Tokenizer>(mut tok: T) -> T {
    for piece in CONTROL_TOKENS {
        tok.add_special(piece);
    }
    if tok.pad_id().is_none() {
        tok.add_special(PAD_TOKEN);
    }
    tok
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum PieceKind {
    Special,
    Word,
    ByteInitial,
    ByteContinuation,
}

/// Whitespace word tokenizer with byte fallback.
///
/// Layout: id 0 is end-of-text, ids 1..=256 are word-initial bytes, ids
/// 257..=512 are continuation bytes, then the fitted word list, then any
/// specials registered later. Words never span whitespace, so token counts are
/// additive over whitespace-joined strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordTokenizer {
    pieces: Vec<String>,
    kinds: Vec<PieceKind>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    #[serde(skip)]
    specials: Vec<(String, u32)>,
}

const BYTE_BASE: u32 = 1;
const CONT_BASE: u32 = 257;

impl WordTokenizer {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut pieces = vec![EOS_TOKEN.to_string()];
        let mut kinds = vec![PieceKind::Special];
        for b in 0..=255u8 {
            pieces.push(format!("<0x{b:02X}>"));
            kinds.push(PieceKind::ByteInitial);
        }
        for b in 0..=255u8 {
            pieces.push(format!("<+0x{b:02X}>"));
            kinds.push(PieceKind::ByteContinuation);
        }
        let mut tok = Self {
            pieces,
            kinds,
            index: HashMap::new(),
            specials: Vec::new(),
        };
        tok.rebuild_index();
        for w in words {
            if !w.is_empty() && !tok.index.contains_key(&w) {
                tok.push(w, PieceKind::Word);
            }
        }
        tok
    }

    /// Build a word list from a corpus: every word with at least `min_count`
    /// occurrences, most frequent first (ties alphabetical), capped at `max_words`.
    pub fn fit<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_count: usize,
        max_words: usize,
    ) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::new(
            words
                .into_iter()
                .take(max_words)
                .map(|(w, _)| w.to_string()),
        )
    }

    fn push(&mut self, piece: String, kind: PieceKind) -> u32 {
        let id = self.pieces.len() as u32;
        self.index.insert(piece.clone(), id);
        if kind == PieceKind::Special {
            self.specials.push((piece.clone(), id));
            // Longest match first when specials share a prefix.
            self.specials.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        }
        self.pieces.push(piece);
        self.kinds.push(kind);
        id
    }

    fn rebuild_index(&mut self) {
        self.index.clear();
        self.specials.clear();
        for (i, (p, k)) in self.pieces.iter().zip(&self.kinds).enumerate() {
            match k {
                PieceKind::Word | PieceKind::Special => {
                    self.index.insert(p.clone(), i as u32);
                }
                _ => {}
            }
            if *k == PieceKind::Special {
                self.specials.push((p.clone(), i as u32));
            }
        }
        self.specials.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
    }

    fn special_at(&self, text: &str, pos: usize) -> Option<(u32, usize)> {
        let rest = &text[pos..];
        self.specials
            .iter()
            .find(|(s, _)| rest.starts_with(s.as_str()))
            .map(|(s, id)| (*id, s.len()))
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut tok: Self = crate::corpus::read_json(path)?;
        if tok.pieces.len() != tok.kinds.len() {
            return Err(LiftError::Config(format!(
                "{}: pieces and kinds differ in length",
                path.display()
            )));
        }
        tok.rebuild_index();
        Ok(tok)
    }
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Vec<Token> {
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let c = text[pos..].chars().next().expect("in bounds");
            if c.is_whitespace() {
                pos += c.len_utf8();
                continue;
            }
            if let Some((id, len)) = self.special_at(text, pos) {
                out.push(Token {
                    id,
                    start: pos,
                    end: pos + len,
                });
                pos += len;
                continue;
            }
            let mut end = pos;
            while end < text.len() {
                let c = text[end..].chars().next().expect("in bounds");
                if c.is_whitespace()
                    || (end > pos && c == '<' && self.special_at(text, end).is_some())
                {
                    break;
                }
                end += c.len_utf8();
            }
            let word = &text[pos..end];
            match self.index.get(word) {
                Some(&id) if self.kinds[id as usize] == PieceKind::Word => out.push(Token {
                    id,
                    start: pos,
                    end,
                }),
                _ => {
                    for (i, &b) in bytes[pos..end].iter().enumerate() {
                        let base = if i == 0 { BYTE_BASE } else { CONT_BASE };
                        out.push(Token {
                            id: base + b as u32,
                            start: pos + i,
                            end: pos + i + 1,
                        });
                    }
                }
            }
            pos = end;
        }
        out
    }

    fn decode(&self, ids: &[u32]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut pending: Vec<u8> = Vec::new();
        let flush = |pending: &mut Vec<u8>, words: &mut Vec<String>| {
            if !pending.is_empty() {
                words.push(String::from_utf8_lossy(pending).into_owned());
                pending.clear();
            }
        };
        for &id in ids {
            match self.kinds.get(id as usize) {
                Some(PieceKind::ByteInitial) => {
                    flush(&mut pending, &mut words);
                    pending.push((id - BYTE_BASE) as u8);
                }
                Some(PieceKind::ByteContinuation) => pending.push((id - CONT_BASE) as u8),
                Some(_) => {
                    flush(&mut pending, &mut words);
                    words.push(self.pieces[id as usize].clone());
                }
                None => {}
            }
        }
        flush(&mut pending, &mut words);
        words.join(" ")
    }

    fn is_special(&self, id: u32) -> bool {
        self.kinds.get(id as usize) == Some(&PieceKind::Special)
    }

    fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    fn token_id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    fn add_special(&mut self, piece: &str) -> u32 {
        if let Some(&id) = self.index.get(piece) {
            if self.kinds[id as usize] == PieceKind::Special {
                return id;
            }
            // A fitted word that collides with a control string becomes special.
            self.kinds[id as usize] = PieceKind::Special;
            self.rebuild_index();
            return id;
        }
        self.push(piece.to_string(), PieceKind::Special)
    }

    fn pad_id(&self) -> Option<u32> {
        self.token_id(PAD_TOKEN)
    }

    fn eos_id(&self) -> u32 {
        0
    }
}
