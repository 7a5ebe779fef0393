use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
}

/// Which classes enter the macro average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelConvention {
    /// Classes seen in gold or predictions.
    Union,
    /// Every declared class, zero-support ones scoring F1 = 0.
    Full,
}

pub type Confusion = BTreeMap<String, BTreeMap<String, usize>>;

pub fn confusion(gold: &[String], pred: &[Option<String>]) -> Confusion {
    let mut c: Confusion = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let p = p.clone().unwrap_or_else(|| INVALID.to_string());
        *c.entry(g.clone()).or_default().entry(p).or_default() += 1;
    }
    c
}

/// Prediction slot for unparseable generations; never a class of its own.
pub const INVALID: &str = "<invalid>";

/// Per-class precision/recall/F1 and their unweighted mean.
///
/// `None` predictions count as misses for their gold class.
pub fn per_class_f1(
    gold: &[String],
    pred: &[Option<String>],
    declared: &[String],
    convention: LabelConvention,
) -> (Vec<ClassMetrics>, f64) {
    let classes: BTreeSet<String> = match convention {
        LabelConvention::Union => gold
            .iter()
            .cloned()
            .chain(pred.iter().flatten().cloned())
            .collect(),
        LabelConvention::Full => declared
            .iter()
            .cloned()
            .chain(gold.iter().cloned())
            .chain(pred.iter().flatten().cloned())
            .collect(),
    };
    let mut out = Vec::new();
    for c in &classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (g, p) in gold.iter().zip(pred) {
            let hit = p.as_deref() == Some(c.as_str());
            match (g == c, hit) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        out.push(ClassMetrics {
            label: c.clone(),
            precision,
            recall,
            f1,
            support: tp + fn_,
            predicted: tp + fp,
        });
    }
    let macro_f1 = if out.is_empty() {
        0.0
    } else {
        out.iter().map(|m| m.f1).sum::<f64>() / out.len() as f64
    };
    (out, macro_f1)
}

pub fn macro_f1(gold: &[String], pred: &[Option<String>]) -> f64 {
    per_class_f1(gold, pred, &[], LabelConvention::Union).1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn p(v: &[&str]) -> Vec<Option<String>> {
        v.iter().map(|x| Some(x.to_string())).collect()
    }

    #[test]
    fn perfect_predictions() {
        assert_eq!(macro_f1(&s(&["A", "B"]), &p(&["A", "B"])), 1.0);
    }

    #[test]
    fn worked_example() {
        let (cls, m) = per_class_f1(
            &s(&["A", "A", "B"]),
            &p(&["A", "B", "B"]),
            &[],
            LabelConvention::Union,
        );
        assert!((cls[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((cls[1].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn full_convention_counts_absent_classes_as_zero() {
        let declared = s(&["A", "B", "C"]);
        let (_, union) = per_class_f1(
            &s(&["A", "B"]),
            &p(&["A", "B"]),
            &declared,
            LabelConvention::Union,
        );
        let (cls, full) = per_class_f1(
            &s(&["A", "B"]),
            &p(&["A", "B"]),
            &declared,
            LabelConvention::Full,
        );
        assert_eq!(union, 1.0);
        assert!((full - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(cls.len(), 3);
    }

    #[test]
    fn invalid_predictions_are_misses_not_classes() {
        let (cls, m) = per_class_f1(
            &s(&["A", "A"]),
            &[Some("A".into()), None],
            &[],
            LabelConvention::Union,
        );
        assert_eq!(cls.len(), 1);
        assert!((m - 2.0 / 3.0).abs() < 1e-12);
        let c = confusion(&s(&["A", "A"]), &[Some("A".into()), None]);
        assert_eq!(c["A"][INVALID], 1);
    }
}
