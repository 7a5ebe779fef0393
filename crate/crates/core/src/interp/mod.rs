//! Mechanistic analyses: linear probes on region representations, attention
//! routing at the prediction position, and history activation patching.

mod patch;
mod probe;

use serde::{Deserialize, Serialize};

pub use patch::{
    activation_patch, shuffle_history, stratified_indices, LayerPatch, PatchReport, PatchSource,
};
pub use probe::{probe, probe_deltas, stratified_folds, ProbeCell, ProbeDelta, ProbeReport};

use crate::error::{LiftError, Result};
use crate::model::{LiftModel, RunOptions};
use crate::tensors::to_f64_rows;
use crate::tokenspace::{EncodedExample, Region};
use crate::toylm::{head_average, LanguageModel};

/// Pooled representation kinds the probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepRegion {
    HistMean,
    FewshotMean,
    CurrMean,
    LastCurr,
}

impl RepRegion {
    pub const ALL: [RepRegion; 4] = [
        Self::HistMean,
        Self::FewshotMean,
        Self::CurrMean,
        Self::LastCurr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::HistMean => "hist_mean",
            Self::FewshotMean => "fewshot_mean",
            Self::CurrMean => "curr_mean",
            Self::LastCurr => "last_curr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReps {
    pub layer: usize,
    pub hist_mean: Vec<f64>,
    pub fewshot_mean: Vec<f64>,
    pub curr_mean: Vec<f64>,
    pub last_curr: Vec<f64>,
}

impl LayerReps {
    pub fn get(&self, r: RepRegion) -> &[f64] {
        match r {
            RepRegion::HistMean => &self.hist_mean,
            RepRegion::FewshotMean => &self.fewshot_mean,
            RepRegion::CurrMean => &self.curr_mean,
            RepRegion::LastCurr => &self.last_curr,
        }
    }
}

/// Region summaries of one example at the requested layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReps {
    pub has_hist: bool,
    pub has_fewshot: bool,
    pub has_curr: bool,
    pub layers: Vec<LayerReps>,
}

fn check_layers(layers: &[usize], n: usize) -> Result<()> {
    match layers.iter().find(|&&l| l >= n) {
        Some(&layer) => Err(LiftError::LayerOutOfRange { layer, layers: n }),
        None => Ok(()),
    }
}

fn mean_rows(rows: &[Vec<f64>], idx: &[usize], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    if idx.is_empty() {
        return m;
    }
    for &i in idx {
        for (a, b) in m.iter_mut().zip(&rows[i]) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|a| *a /= idx.len() as f64);
    m
}

/// Pool per-layer hidden rows `(L, d)` by region. Absent regions give zero
/// vectors with the presence flag off.
pub fn reps_from_hidden(
    hidden: &[Vec<Vec<f64>>],
    regions: &[Region],
    layers: &[usize],
) -> Result<RegionReps> {
    check_layers(layers, hidden.len())?;
    let at =
        |r: Region| -> Vec<usize> { (0..regions.len()).filter(|&i| regions[i] == r).collect() };
    let (hist, few, curr) = (at(Region::Hist), at(Region::Fewshot), at(Region::Curr));
    let mut out = Vec::with_capacity(layers.len());
    for &l in layers {
        let rows = &hidden[l];
        let d = rows.first().map_or(0, |r| r.len());
        out.push(LayerReps {
            layer: l,
            hist_mean: mean_rows(rows, &hist, d),
            fewshot_mean: mean_rows(rows, &few, d),
            curr_mean: mean_rows(rows, &curr, d),
            last_curr: curr
                .last()
                .map_or_else(|| vec![0.0; d], |&i| rows[i].clone()),
        });
    }
    Ok(RegionReps {
        has_hist: !hist.is_empty(),
        has_fewshot: !few.is_empty(),
        has_curr: !curr.is_empty(),
        layers: out,
    })
}

/// Run the prompt (NULL stamps) and pool block outputs by region.
pub fn extract_region_reps<M: LanguageModel>(
    model: &LiftModel<M>,
    enc: &EncodedExample,
    layers: &[usize],
) -> Result<RegionReps> {
    check_layers(layers, model.base.n_layers())?;
    let prompt = enc.prompt_only();
    let run = model.run(
        &prompt,
        RunOptions {
            capture_hidden: true,
            ..Default::default()
        },
    )?;
    let hidden = run
        .out
        .hidden
        .iter()
        .map(to_f64_rows)
        .collect::<Result<Vec<_>>>()?;
    reps_from_hidden(&hidden, &prompt.region_id, layers)
}

/// Number of recency bins: one per history item up to 8, then a tail bin.
pub const RECENCY_BINS: usize = 9;

/// Attention of the prediction position at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRouting {
    pub layer: usize,
    pub instruction: f64,
    pub fewshot: f64,
    pub hist: f64,
    pub curr: f64,
    pub other: f64,
    /// History mass over relative-index bins `t-1 … t-8, t-9+`, renormalized;
    /// empty when the prompt has no history.
    pub recency: Vec<f64>,
}

/// Split one head-averaged attention row into region masses and a recency profile.
pub fn route_row(row: &[f64], regions: &[Region], hist_rel: &[u32], layer: usize) -> LayerRouting {
    let mut r = LayerRouting {
        layer,
        instruction: 0.0,
        fewshot: 0.0,
        hist: 0.0,
        curr: 0.0,
        other: 0.0,
        recency: Vec::new(),
    };
    let mut bins = vec![0.0; RECENCY_BINS];
    let mut binned = 0.0;
    for (j, &a) in row.iter().enumerate() {
        match regions[j] {
            Region::Instruction => r.instruction += a,
            Region::Fewshot => r.fewshot += a,
            Region::Hist => {
                r.hist += a;
                if hist_rel[j] >= 1 {
                    bins[(hist_rel[j] as usize).min(RECENCY_BINS) - 1] += a;
                    binned += a;
                }
            }
            Region::Curr => r.curr += a,
            Region::Output | Region::Other => r.other += a,
        }
    }
    if regions.contains(&Region::Hist) && binned > 0.0 {
        r.recency = bins.iter().map(|b| b / binned).collect();
    }
    r
}

/// Per-layer routing of the prediction position (last prompt token), heads averaged.
pub fn attention_routing<M: LanguageModel>(
    model: &LiftModel<M>,
    enc: &EncodedExample,
) -> Result<Vec<LayerRouting>> {
    let prompt = enc.prompt_only();
    let run = model.run(
        &prompt,
        RunOptions {
            capture_attention: true,
            ..Default::default()
        },
    )?;
    if run.out.attention.is_empty() {
        return Err(LiftError::NoAttentionCapture);
    }
    let pos = prompt.prediction_position();
    run.out
        .attention
        .iter()
        .enumerate()
        .map(|(l, a)| {
            let avg = head_average(a)?;
            let row = crate::tensors::to_f64_vec(&avg.get(pos)?)?;
            Ok(route_row(&row, &prompt.region_id, &prompt.hist_rel, l))
        })
        .collect()
}

/// Element-wise mean of routing over examples (recency averaged over examples that have one).
pub fn mean_routing(all: &[Vec<LayerRouting>]) -> Vec<LayerRouting> {
    let Some(first) = all.first() else {
        return Vec::new();
    };
    let n = all.len() as f64;
    (0..first.len())
        .map(|l| {
            let col: Vec<&LayerRouting> = all.iter().map(|r| &r[l]).collect();
            let avg = |f: fn(&LayerRouting) -> f64| col.iter().map(|r| f(r)).sum::<f64>() / n;
            let with_rec: Vec<&&LayerRouting> =
                col.iter().filter(|r| !r.recency.is_empty()).collect();
            let recency = if with_rec.is_empty() {
                Vec::new()
            } else {
                (0..RECENCY_BINS)
                    .map(|b| {
                        with_rec.iter().map(|r| r.recency[b]).sum::<f64>() / with_rec.len() as f64
                    })
                    .collect()
            };
            LayerRouting {
                layer: first[l].layer,
                instruction: avg(|r| r.instruction),
                fewshot: avg(|r| r.fewshot),
                hist: avg(|r| r.hist),
                curr: avg(|r| r.curr),
                other: avg(|r| r.other),
                recency,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
