//! Single-expert versus MoLE wall-clock latency.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{assemble_prompt, CueMask, QARecord, TaskKind};
use crate::error::{Error, Result};
use crate::model::{encode_prompt, TinyLM, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SingleExpert,
    Mole,
}

/// Mean per-sample latency of one variant on one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub task: TaskKind,
    pub ms: f64,
    pub variant: Variant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    /// Untimed generations per sample and variant before timing.
    pub warmup: usize,
    /// Timed generations per sample and variant.
    pub repetitions: usize,
    /// New tokens generated per sample; EOS does not stop generation.
    pub budget: usize,
    /// Samples taken per task.
    pub samples_per_task: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            warmup: 3,
            repetitions: 5,
            budget: 32,
            samples_per_task: 8,
        }
    }
}

/// Table with one column per task plus an `All` column.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyTable {
    pub columns: Vec<String>,
    pub single_ms: Vec<f64>,
    pub mole_ms: Vec<f64>,
}

fn column_label(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Detection => "Detect.",
        TaskKind::Classification => "Cls.",
        TaskKind::Reasoning => "Reasoning",
        TaskKind::SelfInstruct => "Self-instruct",
    }
}

impl LatencyTable {
    pub fn new(columns: Vec<String>, single_ms: Vec<f64>, mole_ms: Vec<f64>) -> Result<Self> {
        if single_ms.len() != columns.len() || mole_ms.len() != columns.len() {
            return Err(Error::shape(
                "LatencyTable",
                format!("{} / {} values", single_ms.len(), mole_ms.len()),
                format!("{} columns", columns.len()),
            ));
        }
        Ok(Self {
            columns,
            single_ms,
            mole_ms,
        })
    }

    /// Per-task rows, excluding the `All` column.
    pub fn rows(&self, tasks: &[TaskKind]) -> Vec<LatencyRow> {
        let mut rows = Vec::new();
        for (i, &task) in tasks.iter().enumerate().take(self.columns.len().saturating_sub(1)) {
            rows.push(LatencyRow {
                task,
                ms: self.single_ms[i],
                variant: Variant::SingleExpert,
            });
            rows.push(LatencyRow {
                task,
                ms: self.mole_ms[i],
                variant: Variant::Mole,
            });
        }
        rows
    }

    /// True if MoLE is no faster than the single expert in every column.
    pub fn overhead_non_negative(&self) -> bool {
        self.single_ms.iter().zip(&self.mole_ms).all(|(s, m)| m >= s)
    }

    /// CSV with rows for the single expert, MoLE and their difference.
    pub fn render(&self, decimals: usize) -> String {
        let mut s = String::new();
        for c in &self.columns {
            let _ = write!(s, ",{c} (ms)");
        }
        s.push('\n');
        let mut row = |label: &str, vals: &mut dyn Iterator<Item = String>| {
            s.push_str(label);
            for v in vals {
                s.push(',');
                s.push_str(&v);
            }
            s.push('\n');
        };
        row("Single expert", &mut self.single_ms.iter().map(|v| format!("{v:.decimals$}")));
        row("Multi-experts(MoLE)", &mut self.mole_ms.iter().map(|v| format!("{v:.decimals$}")));
        row(
            "Difference",
            &mut self.single_ms.iter().zip(&self.mole_ms).map(|(a, b)| {
                let d = b - a;
                let text = format!("{:.decimals$}", d.abs());
                if d < 0.0 && text.chars().any(|c| c.is_ascii_digit() && c != '0') {
                    format!("-{text}")
                } else {
                    format!("+{text}")
                }
            }),
        );
        s
    }
}

fn time_ms(model: &TinyLM, prompt: &[Token], budget: usize) -> Result<f64> {
    let start = Instant::now();
    let out = model.generate_fixed(prompt, budget)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(out);
    Ok(ms)
}

/// Time greedy generation of a fixed token budget for `model` and its
/// single-expert variant on the same prompts. Runs on the calling thread;
/// the two variants alternate so drift affects both equally.
pub fn latency_bench(model: &TinyLM, records: &[QARecord], mask: CueMask, config: &LatencyConfig) -> Result<LatencyTable> {
    if config.repetitions == 0 || config.samples_per_task == 0 || config.budget == 0 {
        return Err(Error::validation("LatencyConfig", "repetitions, samples_per_task and budget must be positive"));
    }
    let single = model.single_expert_variant()?;
    let max_prompt = model.config().max_seq_len.saturating_sub(config.budget);
    let mut columns = Vec::new();
    let (mut single_ms, mut mole_ms) = (Vec::new(), Vec::new());
    let (mut all_s, mut all_m, mut all_n) = (0.0, 0.0, 0usize);
    for task in TaskKind::CORE {
        let mut prompts = Vec::new();
        for r in records.iter().filter(|r| r.task == task) {
            if prompts.len() == config.samples_per_task {
                break;
            }
            let p = encode_prompt(&assemble_prompt(r, mask)?);
            if p.len() <= max_prompt {
                prompts.push(p);
            }
        }
        if prompts.is_empty() {
            continue;
        }
        let (mut s_sum, mut m_sum) = (0.0, 0.0);
        for p in &prompts {
            for _ in 0..config.warmup {
                time_ms(&single, p, config.budget)?;
                time_ms(model, p, config.budget)?;
            }
            let (mut s, mut m) = (0.0, 0.0);
            for rep in 0..config.repetitions {
                if rep % 2 == 0 {
                    s += time_ms(&single, p, config.budget)?;
                    m += time_ms(model, p, config.budget)?;
                } else {
                    m += time_ms(model, p, config.budget)?;
                    s += time_ms(&single, p, config.budget)?;
                }
            }
            s_sum += s / config.repetitions as f64;
            m_sum += m / config.repetitions as f64;
        }
        let n = prompts.len() as f64;
        columns.push(column_label(task).to_string());
        single_ms.push(s_sum / n);
        mole_ms.push(m_sum / n);
        all_s += s_sum;
        all_m += m_sum;
        all_n += prompts.len();
    }
    if all_n == 0 {
        return Err(Error::Degenerate("no prompts fit the latency budget".into()));
    }
    columns.push("All".into());
    single_ms.push(all_s / all_n as f64);
    mole_ms.push(all_m / all_n as f64);
    LatencyTable::new(columns, single_ms, mole_ms)
}
