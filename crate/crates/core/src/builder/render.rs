use serde::{Deserialize, Serialize};

use super::templates::entry_noun;
use crate::corpus::{DatasetId, TimelineItem};
use crate::tokenspace::CONTROL_TOKENS;

/// Byte range `[start, end)` into the full text `prompt ⊕ " " ⊕ response`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.start <= pos && pos < self.end
    }
}

/// Content spans of the five prompt regions (tags excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spans {
    pub instruction: Span,
    pub fewshot: Span,
    pub hist: Span,
    pub curr: Span,
    pub output: Span,
}

impl Spans {
    pub fn in_order(&self) -> [Span; 5] {
        [
            self.instruction,
            self.fewshot,
            self.hist,
            self.curr,
            self.output,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryLine {
    /// Relative index: 1 for the item just before the current one.
    pub rel: usize,
    pub text: String,
    pub label: Option<String>,
    pub role: Option<String>,
}

impl HistoryLine {
    pub fn render(&self, with_label: bool) -> String {
        let mut s = format!("t-{}:", self.rel);
        if let Some(role) = &self.role {
            s.push(' ');
            s.push_str(role);
            s.push(':');
        }
        s.push(' ');
        s.push_str(&neutralize(&self.text));
        if let (true, Some(label)) = (with_label, &self.label) {
            s.push_str(" → ");
            s.push_str(label);
        }
        s
    }
}

/// A compact labeled mini-timeline shown as a demonstration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub sequence_key: String,
    pub global_label_id: u32,
    /// `(role, text, label)` in time order; the last entry is the labeled target.
    pub entries: Vec<(Option<String>, String, Option<String>)>,
}

impl Demo {
    /// Window of up to `context + 1` items ending at `items[index]`.
    pub fn from_window(items: &[TimelineItem], index: usize, context: usize) -> Self {
        let start = index.saturating_sub(context);
        let entries = items[start..=index]
            .iter()
            .map(|it| {
                (
                    it.speaker_role.clone(),
                    it.text.clone(),
                    it.is_labeled().then(|| it.local_label.clone()),
                )
            })
            .collect();
        Self {
            sequence_key: items[index].sequence_key.clone(),
            global_label_id: items[index].global_label_id,
            entries,
        }
    }

    pub fn render(&self, dataset: DatasetId, heading: &str, nested_hist: bool) -> String {
        let noun = entry_noun(dataset);
        let mut lines = vec![heading.to_string()];
        if nested_hist {
            lines.push("<hist>".into());
        }
        for (i, (role, text, label)) in self.entries.iter().enumerate() {
            let mut l = format!("{noun} {}:", i + 1);
            if let Some(role) = role {
                l.push(' ');
                l.push_str(role);
                l.push(':');
            }
            l.push(' ');
            l.push_str(&neutralize(text));
            if let Some(label) = label {
                l.push_str(" → ");
                l.push_str(label);
            }
            lines.push(l);
        }
        if nested_hist {
            lines.push("</hist>".into());
        }
        lines.join("\n")
    }
}

/// Replace literal control-token strings in user text so they cannot be read
/// as structure.
pub fn neutralize(text: &str) -> String {
    let mut out = text.to_string();
    for tag in CONTROL_TOKENS {
        if out.contains(tag) {
            out = out.replace(tag, &tag.replace('<', "‹").replace('>', "›"));
        }
    }
    out.replace("<|", "‹|")
}

/// The pieces a prompt is assembled from.
pub struct PromptParts<'a> {
    pub instruction: &'a str,
    pub demos: &'a [String],
    pub history: &'a [String],
    pub current: &'a str,
    pub response: &'a str,
}

pub struct Rendered {
    pub prompt: String,
    pub spans: Spans,
    /// `(rel, span)` for each history line.
    pub hist_lines: Vec<(usize, Span)>,
}

/// Assemble
/// `<instruction> I </instruction> <few-shot> D </few-shot> <query> <hist> H </hist> <curr> x </curr> </query> <output>`
/// and record the byte span of every region's content.
pub fn render(parts: &PromptParts<'_>, rels: &[usize]) -> Rendered {
    let mut s = String::new();
    let open = |s: &mut String, tag: &str| {
        s.push_str(tag);
        s.push(' ');
        s.len()
    };
    let instr_start = open(&mut s, "<instruction>");
    s.push_str(parts.instruction.trim());
    let instruction = Span {
        start: instr_start,
        end: s.len(),
    };
    s.push_str(" </instruction>\n");

    let fs_start = open(&mut s, "<few-shot>");
    s.push_str(&parts.demos.join("\n\n"));
    let fewshot = Span {
        start: fs_start,
        end: s.len(),
    };
    s.push_str(" </few-shot>\n<query>\n");

    let hist_start = open(&mut s, "<hist>");
    let mut hist_lines = Vec::with_capacity(parts.history.len());
    for (i, (line, rel)) in parts.history.iter().zip(rels).enumerate() {
        if i > 0 {
            s.push('\n');
        }
        let start = s.len();
        s.push_str(line);
        hist_lines.push((
            *rel,
            Span {
                start,
                end: s.len(),
            },
        ));
    }
    let hist = Span {
        start: hist_start,
        end: s.len(),
    };
    s.push_str(" </hist>\n");

    let curr_start = open(&mut s, "<curr>");
    s.push_str(&neutralize(parts.current));
    let curr = Span {
        start: curr_start,
        end: s.len(),
    };
    s.push_str(" </curr>\n</query>\n<output>");

    let out_start = s.len() + 1;
    let output = Span {
        start: out_start,
        end: out_start + parts.response.len(),
    };
    Rendered {
        prompt: s,
        spans: Spans {
            instruction,
            fewshot,
            hist,
            curr,
            output,
        },
        hist_lines,
    }
}

/// Bytes of `text` not covered by any span and not whitespace must belong to
/// structural tags. Returns the first uncovered non-tag token, if any.
pub fn uncovered_residue(full_text: &str, spans: &Spans) -> Option<String> {
    let mut covered = vec![false; full_text.len()];
    for sp in spans.in_order() {
        covered[sp.start..sp.end].iter_mut().for_each(|c| *c = true);
    }
    let residue: String = full_text
        .char_indices()
        .map(|(i, c)| if covered[i] { ' ' } else { c })
        .collect();
    residue
        .split_whitespace()
        .find(|w| !CONTROL_TOKENS.contains(w))
        .map(str::to_string)
}
