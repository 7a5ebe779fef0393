use serde::{Deserialize, Serialize};

use super::Tokenizer;
use crate::builder::{PromptExample, Span};
use crate::corpus::{DatasetId, NULL_LABEL};
use crate::error::{LiftError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Region {
    Instruction = 0,
    Fewshot = 1,
    Hist = 2,
    Curr = 3,
    Output = 4,
    Other = 5,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::Instruction,
        Region::Fewshot,
        Region::Hist,
        Region::Curr,
        Region::Output,
        Region::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Instruction => "instruction",
            Region::Fewshot => "fewshot",
            Region::Hist => "hist",
            Region::Curr => "curr",
            Region::Output => "output",
            Region::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeOptions {
    /// Include few-shot demonstration tokens in the prompt CE mask.
    pub fewshot_in_prompt_ce: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            fewshot_in_prompt_ce: true,
        }
    }
}

/// Token ids of `prompt ⊕ response ⊕ [eos]` with per-token supervision masks
/// and conditioning inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub stage: u8,
    pub dataset: DatasetId,
    pub sequence_key: String,
    pub input_ids: Vec<u32>,
    /// Number of prompt tokens; response tokens start here.
    pub prompt_len: usize,
    pub prompt_ce_mask: Vec<bool>,
    pub output_mask: Vec<bool>,
    pub hist_mask: Vec<bool>,
    pub region_id: Vec<Region>,
    /// Global label id on output positions, NULL elsewhere.
    pub label_stamp: Vec<u32>,
    /// Relative index of the history line a token belongs to, 0 outside history.
    pub hist_rel: Vec<u32>,
    pub global_label_id: u32,
    pub timestep_id: usize,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Position of the last prompt token (the one that predicts the response).
    pub fn prediction_position(&self) -> usize {
        self.prompt_len - 1
    }

    pub fn positions(&self, region: Region) -> Vec<usize> {
        self.region_id
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == region)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_region(&self, region: Region) -> bool {
        self.region_id.contains(&region)
    }

    /// The prompt part only, as used at inference time: no response, no stamp.
    pub fn prompt_only(&self) -> EncodedExample {
        let n = self.prompt_len;
        EncodedExample {
            input_ids: self.input_ids[..n].to_vec(),
            prompt_ce_mask: self.prompt_ce_mask[..n].to_vec(),
            output_mask: vec![false; n],
            hist_mask: self.hist_mask[..n].to_vec(),
            region_id: self.region_id[..n].to_vec(),
            label_stamp: vec![NULL_LABEL; n],
            hist_rel: self.hist_rel[..n].to_vec(),
            ..self.clone()
        }
    }
}

fn region_of(spans: &[(Region, Span)], start: usize, end: usize) -> Result<Region> {
    for (region, sp) in spans {
        if sp.contains(start) {
            if end > sp.end {
                return Err(LiftError::SpanAlignment { start, end });
            }
            return Ok(*region);
        }
        if start < sp.start && end > sp.start {
            return Err(LiftError::SpanAlignment { start, end });
        }
    }
    Ok(Region::Other)
}

/// Tokenize a rendered example and derive masks from its character spans.
/// A token belongs to the region containing its first byte.
pub fn encode_with_spans(
    example: &PromptExample,
    tok: &impl Tokenizer,
    opts: EncodeOptions,
) -> Result<EncodedExample> {
    let spans = [
        (Region::Instruction, example.spans.instruction),
        (Region::Fewshot, example.spans.fewshot),
        (Region::Hist, example.spans.hist),
        (Region::Curr, example.spans.curr),
        (Region::Output, example.spans.output),
    ];
    let prompt_tokens = tok.encode(&example.prompt);
    let offset = example.prompt.len() + 1;
    let response_tokens = tok.encode(&example.response_text);

    let n = prompt_tokens.len() + response_tokens.len() + 1;
    let mut enc = EncodedExample {
        stage: example.stage,
        dataset: example.dataset,
        sequence_key: example.sequence_key.clone(),
        input_ids: Vec::with_capacity(n),
        prompt_len: prompt_tokens.len(),
        prompt_ce_mask: Vec::with_capacity(n),
        output_mask: Vec::with_capacity(n),
        hist_mask: Vec::with_capacity(n),
        region_id: Vec::with_capacity(n),
        label_stamp: Vec::with_capacity(n),
        hist_rel: Vec::with_capacity(n),
        global_label_id: example.global_label_id,
        timestep_id: example.timestep_id,
    };
    for t in &prompt_tokens {
        let region = region_of(&spans, t.start, t.end)?;
        let rel = example
            .hist_line_spans
            .iter()
            .find(|(_, sp)| sp.contains(t.start))
            .map(|(rel, _)| *rel as u32)
            .unwrap_or(0);
        enc.input_ids.push(t.id);
        enc.region_id.push(region);
        enc.hist_mask.push(region == Region::Hist);
        enc.prompt_ce_mask.push(match region {
            Region::Hist => false,
            Region::Fewshot => opts.fewshot_in_prompt_ce,
            _ => true,
        });
        enc.output_mask.push(false);
        enc.label_stamp.push(NULL_LABEL);
        enc.hist_rel.push(rel);
    }
    for t in &response_tokens {
        let region = region_of(&spans, t.start + offset, t.end + offset)?;
        if region != Region::Output {
            return Err(LiftError::SpanAlignment {
                start: t.start + offset,
                end: t.end + offset,
            });
        }
        enc.input_ids.push(t.id);
        enc.region_id.push(Region::Output);
    }
    enc.input_ids.push(tok.eos_id());
    enc.region_id.push(Region::Output);
    let n_out = response_tokens.len() + 1;
    enc.hist_mask.extend(std::iter::repeat_n(false, n_out));
    enc.prompt_ce_mask.extend(std::iter::repeat_n(false, n_out));
    enc.output_mask.extend(std::iter::repeat_n(true, n_out));
    enc.label_stamp
        .extend(std::iter::repeat_n(example.global_label_id, n_out));
    enc.hist_rel.extend(std::iter::repeat_n(0, n_out));
    Ok(enc)
}
