//! Greedy-generation evaluation, modality ablation, router statistics and
//! latency benchmarking.

mod latency;
mod metrics;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use latency::{latency_bench, LatencyConfig, LatencyRow, LatencyTable, Variant};
pub use metrics::{
    bleu4, classification_metrics, lcs_len, metric_tokens, parse_prediction, rouge_l, rouge_l_beta, Averaging,
    BleuMode, ClassificationScores, Prediction, ROUGE_BETA,
};

use crate::data::{assemble_prompt, CueMask, LaughterType, QARecord, Split, TaskKind, DETECTION_YES};
use crate::error::{Error, Result};
use crate::model::{detokenize, encode_prompt, TinyLM, EOS};
use crate::mole::mean_router_weights;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    /// Fraction of generations equal to the reference after trimming.
    pub exact_match: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub max_new_tokens: usize,
    pub bleu_mode: BleuMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 128,
            bleu_mode: BleuMode::Smoothed,
        }
    }
}

/// Metrics for one task. Classification-style tasks fill `classification`,
/// reasoning fills `generation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: TaskKind,
    pub n: usize,
    /// Records whose generation failed (e.g. an overlong prompt).
    pub failures: usize,
    pub unparseable: usize,
    pub classification: Option<ClassificationScores>,
    pub generation: Option<GenerationScores>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mask: CueMask,
    pub tasks: Vec<TaskMetrics>,
}

/// Flat CSV row of an [`EvalReport`].
#[derive(Debug, Serialize, Deserialize)]
struct EvalRow {
    task: TaskKind,
    n: usize,
    failures: usize,
    unparseable: usize,
    averaging: Option<String>,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: Option<f64>,
    accuracy: Option<f64>,
    bleu4: Option<f64>,
    rouge_l: Option<f64>,
    exact_match: Option<f64>,
}

fn averaging_name(a: Averaging) -> String {
    match a {
        Averaging::BinaryPositive { positive } => format!("binary:{positive}"),
        Averaging::Macro => "macro".into(),
    }
}

fn parse_averaging(s: &str) -> Result<Averaging> {
    if s == "macro" {
        return Ok(Averaging::Macro);
    }
    s.strip_prefix("binary:")
        .and_then(|p| p.parse().ok())
        .map(|positive| Averaging::BinaryPositive { positive })
        .ok_or_else(|| Error::Format(format!("unknown averaging {s:?}")))
}

impl EvalReport {
    pub fn task(&self, task: TaskKind) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == task)
    }

    pub fn accuracy(&self, task: TaskKind) -> Option<f64> {
        self.task(task)?.classification.map(|c| c.accuracy)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for t in &self.tasks {
            let c = t.classification;
            let g = t.generation;
            w.serialize(EvalRow {
                task: t.task,
                n: t.n,
                failures: t.failures,
                unparseable: t.unparseable,
                averaging: c.map(|c| averaging_name(c.averaging)),
                precision: c.map(|c| c.precision),
                recall: c.map(|c| c.recall),
                f1: c.map(|c| c.f1),
                accuracy: c.map(|c| c.accuracy),
                bleu4: g.map(|g| g.bleu4),
                rouge_l: g.map(|g| g.rouge_l),
                exact_match: g.map(|g| g.exact_match),
            })
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(mask: CueMask, text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut tasks = Vec::new();
        for row in r.deserialize::<EvalRow>() {
            let row = row.map_err(|e| Error::Format(e.to_string()))?;
            let classification = match (row.averaging, row.precision, row.recall, row.f1, row.accuracy) {
                (Some(a), Some(precision), Some(recall), Some(f1), Some(accuracy)) => Some(ClassificationScores {
                    precision,
                    recall,
                    f1,
                    accuracy,
                    averaging: parse_averaging(&a)?,
                }),
                (None, None, None, None, None) => None,
                _ => return Err(Error::Format(format!("partial classification scores for {}", row.task))),
            };
            let generation = match (row.bleu4, row.rouge_l, row.exact_match) {
                (Some(bleu4), Some(rouge_l), Some(exact_match)) => Some(GenerationScores {
                    bleu4,
                    rouge_l,
                    exact_match,
                }),
                (None, None, None) => None,
                _ => return Err(Error::Format(format!("partial generation scores for {}", row.task))),
            };
            tasks.push(TaskMetrics {
                task: row.task,
                n: row.n,
                failures: row.failures,
                unparseable: row.unparseable,
                classification,
                generation,
            });
        }
        Ok(Self { mask, tasks })
    }

    pub fn summary(&self) -> String {
        let mut s = format!("cue mask {}\n", self.mask);
        for t in &self.tasks {
            let _ = write!(s, "{:<16} n={:<5}", t.task.as_str(), t.n);
            if let Some(c) = t.classification {
                let _ = write!(
                    s,
                    " P={:.4} R={:.4} F1={:.4} Acc={:.4}",
                    c.precision, c.recall, c.f1, c.accuracy
                );
            }
            if let Some(g) = t.generation {
                let _ = write!(s, " BLEU4={:.4} ROUGE-L={:.4} exact={:.4}", g.bleu4, g.rouge_l, g.exact_match);
            }
            let _ = writeln!(s, " unparseable={} failures={}", t.unparseable, t.failures);
        }
        s
    }
}

/// The generated answer text for `record`, or `None` if generation failed.
pub fn generate_answer(model: &TinyLM, record: &QARecord, mask: CueMask, max_new_tokens: usize) -> Result<String> {
    let prompt = encode_prompt(&assemble_prompt(record, mask)?);
    let out = model.generate(&prompt, max_new_tokens)?;
    let mut answer = &out[prompt.len()..];
    if answer.last() == Some(&EOS) {
        answer = &answer[..answer.len() - 1];
    }
    detokenize(answer)
}

/// Greedy-generate every core-task record of `split` and score per task.
/// Self-instruct records are ignored.
pub fn evaluate(model: &TinyLM, records: &[QARecord], split: Split, mask: CueMask, opts: &EvalOptions) -> Result<EvalReport> {
    let selected: Vec<&QARecord> = records
        .iter()
        .filter(|r| r.split == split && r.task != TaskKind::SelfInstruct)
        .collect();
    if selected.is_empty() {
        return Err(Error::Degenerate(format!("no core-task records in the {} split", split.as_str())));
    }
    let mut tasks = Vec::new();
    for task in TaskKind::CORE {
        let group: Vec<&QARecord> = selected.iter().copied().filter(|r| r.task == task).collect();
        if group.is_empty() {
            continue;
        }
        let mut failures = 0;
        let mut preds = Vec::with_capacity(group.len());
        for r in &group {
            match generate_answer(model, r, mask, opts.max_new_tokens) {
                Ok(text) => preds.push(parse_prediction(task, &text)),
                Err(e) => {
                    log::warn!("generation failed for {}: {e}", r.id);
                    failures += 1;
                    preds.push(Prediction::Unparseable);
                }
            }
        }
        let unparseable = preds.iter().filter(|p| **p == Prediction::Unparseable).count() - failures;
        let (classification, generation) = match task {
            TaskKind::Detection => {
                let golds: Vec<usize> = group.iter().map(|r| usize::from(r.answer != DETECTION_YES)).collect();
                let p: Vec<Option<usize>> = preds.iter().map(Prediction::class).collect();
                (
                    Some(classification_metrics(&p, &golds, 2, Averaging::BinaryPositive { positive: 0 })?),
                    None,
                )
            }
            TaskKind::Classification => {
                let golds = group
                    .iter()
                    .map(|r| {
                        r.laughter_type
                            .map(LaughterType::index)
                            .ok_or_else(|| Error::validation("laughter_type", format!("missing on {}", r.id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let p: Vec<Option<usize>> = preds.iter().map(Prediction::class).collect();
                (Some(classification_metrics(&p, &golds, 3, Averaging::Macro)?), None)
            }
            _ => {
                let n = group.len() as f64;
                let (mut b, mut rl, mut em) = (0.0, 0.0, 0.0);
                for (p, r) in preds.iter().zip(&group) {
                    let text = match p {
                        Prediction::Text(t) => t.as_str(),
                        _ => "",
                    };
                    b += bleu4(text, &r.answer, opts.bleu_mode);
                    rl += rouge_l(text, &r.answer);
                    em += f64::from(u8::from(text == r.answer.trim()));
                }
                (
                    None,
                    Some(GenerationScores {
                        bleu4: b / n,
                        rouge_l: rl / n,
                        exact_match: em / n,
                    }),
                )
            }
        };
        tasks.push(TaskMetrics {
            task,
            n: group.len(),
            failures,
            unparseable,
            classification,
            generation,
        });
    }
    Ok(EvalReport { mask, tasks })
}

/// Reports of one checkpoint under several cue masks.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub reports: Vec<EvalReport>,
}

impl AblationTable {
    pub fn run(model: &TinyLM, records: &[QARecord], split: Split, masks: &[CueMask], opts: &EvalOptions) -> Result<Self> {
        let reports = masks
            .iter()
            .map(|&m| evaluate(model, records, split, m, opts))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { reports })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "mask,detection_accuracy,detection_f1,classification_accuracy,classification_f1,reasoning_bleu4,reasoning_rouge_l,reasoning_exact_match\n",
        );
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
        for r in &self.reports {
            let c = |t| r.task(t).and_then(|m| m.classification);
            let g = r.task(TaskKind::Reasoning).and_then(|m| m.generation);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.mask,
                cell(c(TaskKind::Detection).map(|c| c.accuracy)),
                cell(c(TaskKind::Detection).map(|c| c.f1)),
                cell(c(TaskKind::Classification).map(|c| c.accuracy)),
                cell(c(TaskKind::Classification).map(|c| c.f1)),
                cell(g.map(|g| g.bleu4)),
                cell(g.map(|g| g.rouge_l)),
                cell(g.map(|g| g.exact_match)),
            );
        }
        s
    }
}

/// Per-task mean router weights, averaged over the tokens of each record's
/// prompt, then over every MoLE layer, then over records.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterTable {
    pub rows: Vec<(TaskKind, Vec<f64>)>,
}

impl RouterTable {
    pub fn to_csv(&self) -> String {
        let t = self.rows.first().map_or(0, |r| r.1.len());
        let mut s = String::from("task");
        for i in 1..=t {
            let _ = write!(s, ",expert_{i}");
        }
        s.push('\n');
        for (task, w) in &self.rows {
            s.push_str(task.as_str());
            for v in w {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// Largest L1 distance between any two rows.
    pub fn max_pairwise_l1(&self) -> f64 {
        let mut best: f64 = 0.0;
        for (i, a) in self.rows.iter().enumerate() {
            for b in &self.rows[i + 1..] {
                best = best.max(a.1.iter().zip(&b.1).map(|(x, y)| (x - y).abs()).sum());
            }
        }
        best
    }
}

pub fn router_analysis(model: &TinyLM, records: &[QARecord], split: Split, mask: CueMask) -> Result<RouterTable> {
    let groups: Vec<(TaskKind, Vec<&QARecord>)> = TaskKind::CORE
        .into_iter()
        .map(|t| (t, records.iter().filter(|r| r.split == split && r.task == t).collect::<Vec<_>>()))
        .filter(|(_, g)| !g.is_empty())
        .collect();
    if groups.is_empty() {
        return Err(Error::Degenerate(format!("no core-task records in the {} split", split.as_str())));
    }
    let layers = model.mole_layers();
    let rows = mean_router_weights(&layers, &groups, |r: &&QARecord| {
        model.projection_inputs(&encode_prompt(&assemble_prompt(r, mask)?))
    })?;
    Ok(RouterTable { rows })
}
