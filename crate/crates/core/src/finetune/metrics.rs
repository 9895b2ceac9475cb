use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        // Nothing to find and nothing predicted counts as perfect.
        if tp + fp + fn_ == 0 {
            return Prf { precision: 1.0, recall: 1.0, f1: 1.0 };
        }
        Prf { precision: p, recall: r, f1 }
    }
}

/// An entity mention: `(example index, start, end, label)`.
pub type Entity = (usize, usize, usize, String);

/// Micro-averaged exact-match entity scores.
pub fn ner_f1(gold: &[Entity], predicted: &[Entity]) -> Prf {
    let g: BTreeSet<&Entity> = gold.iter().collect();
    let p: BTreeSet<&Entity> = predicted.iter().collect();
    let tp = g.intersection(&p).count();
    Prf::from_counts(tp, p.len() - tp, g.len() - tp)
}

/// Lowercase, drop punctuation and English articles, collapse whitespace.
pub fn normalize_answer(s: &str) -> Vec<String> {
    let lowered: String = s.to_lowercase().chars().map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' }).collect();
    lowered.split_whitespace().filter(|w| !matches!(*w, "a" | "an" | "the")).map(str::to_string).collect()
}

fn overlap_prf(gold: &str, pred: &str) -> Prf {
    let g = normalize_answer(gold);
    let p = normalize_answer(pred);
    if g.is_empty() || p.is_empty() {
        let same = g.is_empty() && p.is_empty();
        let v = if same { 1.0 } else { 0.0 };
        return Prf { precision: v, recall: v, f1: v };
    }
    let mut counts: BTreeMap<&str, isize> = BTreeMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return Prf::default();
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    Prf { precision, recall, f1: 2.0 * precision * recall / (precision + recall) }
}

/// Bag-of-tokens overlap, taking the gold answer with the best F1.
pub fn qa_f1(gold_answers: &[String], predicted: &str) -> Prf {
    gold_answers.iter().map(|g| overlap_prf(g, predicted)).fold(Prf::default(), |best, x| if x.f1 > best.f1 { x } else { best })
}

/// Micro-F1 over every label except `negative`.
pub fn re_f1(gold: &[String], predicted: &[String], negative: &str) -> Prf {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(predicted) {
        if g == p {
            if g != negative {
                tp += 1;
            }
            continue;
        }
        if p != negative {
            fp += 1;
        }
        if g != negative {
            fn_ += 1;
        }
    }
    Prf::from_counts(tp, fp, fn_)
}
