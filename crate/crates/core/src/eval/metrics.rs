//! Answer parsing, classification scores, BLEU-4 and ROUGE-L.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{LaughterType, TaskKind, CLASSIFICATION_PREFIX, DETECTION_NO, DETECTION_YES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Yes,
    No,
    Type(LaughterType),
    Text(String),
    Unparseable,
}

impl Prediction {
    /// Class index for scoring: detection yes = 0, no = 1; types by
    /// [`LaughterType::index`]. `None` for text and unparseable output.
    pub fn class(&self) -> Option<usize> {
        match self {
            Prediction::Yes => Some(0),
            Prediction::No => Some(1),
            Prediction::Type(t) => Some(t.index()),
            _ => None,
        }
    }
}

fn type_from_name(s: &str) -> Option<LaughterType> {
    LaughterType::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(s))
}

pub fn parse_prediction(task: TaskKind, text: &str) -> Prediction {
    let t = text.trim();
    match task {
        TaskKind::Detection => {
            let lower = t.to_ascii_lowercase();
            if t == DETECTION_YES || lower.starts_with("yes") {
                Prediction::Yes
            } else if t == DETECTION_NO || lower.starts_with("no") {
                Prediction::No
            } else {
                Prediction::Unparseable
            }
        }
        TaskKind::Classification => {
            let lower = t.to_ascii_lowercase();
            let prefix = CLASSIFICATION_PREFIX.to_ascii_lowercase();
            if let Some(rest) = lower.strip_prefix(&prefix) {
                let word = rest.trim().trim_end_matches(['.', '!']);
                if let Some(ty) = type_from_name(word) {
                    return Prediction::Type(ty);
                }
            }
            let found: Vec<LaughterType> = LaughterType::ALL
                .into_iter()
                .filter(|ty| lower.contains(&ty.name().to_ascii_lowercase()))
                .collect();
            match found[..] {
                [ty] => Prediction::Type(ty),
                _ => Prediction::Unparseable,
            }
        }
        TaskKind::Reasoning | TaskKind::SelfInstruct => Prediction::Text(t.to_string()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Scores of the given positive class only.
    BinaryPositive { positive: usize },
    /// Unweighted mean of per-class precision and recall.
    Macro,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub averaging: Averaging,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Scores over class indices in `0..num_classes`. A `None` prediction
/// (unparseable) is wrong for every class. `f1` is the harmonic mean of the
/// reported precision and recall.
pub fn classification_metrics(
    preds: &[Option<usize>],
    golds: &[usize],
    num_classes: usize,
    averaging: Averaging,
) -> Result<ClassificationScores> {
    if preds.len() != golds.len() || golds.is_empty() {
        return Err(Error::shape(
            "classification_metrics",
            format!("{} predictions", preds.len()),
            format!("{} golds", golds.len()),
        ));
    }
    if let Some(&g) = golds.iter().find(|&&g| g >= num_classes) {
        return Err(Error::Range(format!("gold class {g} >= {num_classes}")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut gold_count = vec![0usize; num_classes];
    let mut correct = 0;
    for (&p, &g) in preds.iter().zip(golds) {
        gold_count[g] += 1;
        if let Some(p) = p.filter(|&p| p < num_classes) {
            pred_count[p] += 1;
            if p == g {
                tp[g] += 1;
                correct += 1;
            }
        }
    }
    let (precision, recall) = match averaging {
        Averaging::BinaryPositive { positive } => {
            if positive >= num_classes {
                return Err(Error::Range(format!("positive class {positive} >= {num_classes}")));
            }
            (ratio(tp[positive], pred_count[positive]), ratio(tp[positive], gold_count[positive]))
        }
        Averaging::Macro => {
            let p: f64 = (0..num_classes).map(|c| ratio(tp[c], pred_count[c])).sum();
            let r: f64 = (0..num_classes).map(|c| ratio(tp[c], gold_count[c])).sum();
            (p / num_classes as f64, r / num_classes as f64)
        }
    };
    Ok(ClassificationScores {
        precision,
        recall,
        f1: harmonic(precision, recall),
        accuracy: ratio(correct, golds.len()),
        averaging,
    })
}

/// Case-folded whitespace tokens.
pub fn metric_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BleuMode {
    /// Add-one smoothing for 2- to 4-gram precisions with no matches.
    #[default]
    Smoothed,
    /// Unsmoothed: any zero precision gives 0.
    Exact,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU-4 with uniform weights, clipped counts and the brevity
/// penalty.
pub fn bleu4(hypothesis: &str, reference: &str, mode: BleuMode) -> f64 {
    let h = metric_tokens(hypothesis);
    let r = metric_tokens(reference);
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let hc = ngram_counts(&h, n);
        let rc = ngram_counts(&r, n);
        let matches: usize = hc.iter().map(|(g, &c)| c.min(*rc.get(g).unwrap_or(&0))).sum();
        let total = h.len().saturating_sub(n - 1);
        let p = if matches > 0 {
            matches as f64 / total as f64
        } else if n > 1 && mode == BleuMode::Smoothed {
            1.0 / (total as f64 + 1.0)
        } else {
            return 0.0;
        };
        log_sum += p.ln();
    }
    let (c, rl) = (h.len() as f64, r.len() as f64);
    let bp = if c > rl { 1.0 } else { (1.0 - rl / c).exp() };
    (bp * (log_sum / 4.0).exp()).clamp(0.0, 1.0)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Default recall weight for ROUGE-L.
pub const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure `(1+β²)PR / (R + β²P)`.
pub fn rouge_l_beta(hypothesis: &str, reference: &str, beta: f64) -> f64 {
    let h = metric_tokens(hypothesis);
    let r = metric_tokens(reference);
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&h, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rc) = (l / h.len() as f64, l / r.len() as f64);
    let b2 = beta * beta;
    (1.0 + b2) * p * rc / (rc + b2 * p)
}

pub fn rouge_l(hypothesis: &str, reference: &str) -> f64 {
    rouge_l_beta(hypothesis, reference, ROUGE_BETA)
}
