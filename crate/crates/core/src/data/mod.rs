//! QA records with textualized multimodal cues, prompt assembly under a
//! cue mask, line-delimited JSON corpora, and split bookkeeping.

mod synthetic;

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use synthetic::{generate_synthetic_corpus, CorpusCounts, TaskCounts, RELATIONS, SYNTH_MAX_TOKENS};

use crate::error::{Error, Result};

pub const DETECTION_QUESTION: &str =
    "Detection task: You are a laugh detector. Find out if there is laugh in this clip.";
pub const CLASSIFICATION_QUESTION: &str = "Type Classification task: you are to answer the class of laugh type. \
There are three types: Polite, Satirical, Mirthful.";
pub const REASONING_QUESTION: &str = "Reasoning task: you are to answer why the person laughed at most 30 words, \
starting with 'The audience/person laughed because'.";

pub const DETECTION_YES: &str = "Yes, there is laugh in this video.";
pub const DETECTION_NO: &str = "No, there is no laugh in this video.";
pub const CLASSIFICATION_PREFIX: &str = "The laugh type is ";
pub const REASONING_PREFIXES: [&str; 3] = [
    "The audience laughed because",
    "The person laughed because",
    "The audience/person laughed because",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceDomain {
    Ted,
    Sitcom,
    YoutubeDyadic,
    TalkShow,
    Movie,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Detection,
    Classification,
    Reasoning,
    SelfInstruct,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Detection,
        TaskKind::Classification,
        TaskKind::Reasoning,
        TaskKind::SelfInstruct,
    ];
    pub const CORE: [TaskKind; 3] = [TaskKind::Detection, TaskKind::Classification, TaskKind::Reasoning];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Detection => "detection",
            TaskKind::Classification => "classification",
            TaskKind::Reasoning => "reasoning",
            TaskKind::SelfInstruct => "self_instruct",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::validation("task", format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaughterType {
    Mirthful,
    Polite,
    Satirical,
}

impl LaughterType {
    pub const ALL: [LaughterType; 3] = [LaughterType::Mirthful, LaughterType::Polite, LaughterType::Satirical];

    /// Capitalized name as it appears in answers.
    pub fn name(self) -> &'static str {
        match self {
            LaughterType::Mirthful => "Mirthful",
            LaughterType::Polite => "Polite",
            LaughterType::Satirical => "Satirical",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn answer(self) -> String {
        format!("{CLASSIFICATION_PREFIX}{}", self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::validation("split", format!("unknown split {s:?}")))
    }
}

/// Ten prosodic statistics of one utterance, serialized as a plain array
/// in this order.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct AcousticFeatures {
    pub f0_mean: f64,
    pub f0_var: f64,
    pub energy_mean: f64,
    pub voiced_dur_mean: f64,
    pub unvoiced_dur_mean: f64,
    pub energy_var: f64,
    pub f0_d1: f64,
    pub f0_d2: f64,
    pub jitter: f64,
    pub shimmer: f64,
}

impl AcousticFeatures {
    pub fn to_array(&self) -> [f64; 10] {
        [
            self.f0_mean,
            self.f0_var,
            self.energy_mean,
            self.voiced_dur_mean,
            self.unvoiced_dur_mean,
            self.energy_var,
            self.f0_d1,
            self.f0_d2,
            self.jitter,
            self.shimmer,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let [f0_mean, f0_var, energy_mean, voiced_dur_mean, unvoiced_dur_mean, energy_var, f0_d1, f0_d2, jitter, shimmer] =
            <[f64; 10]>::try_from(v).map_err(|_| {
                Error::validation("AcousticFeatures", format!("expected exactly 10 values, got {}", v.len()))
            })?;
        Ok(Self {
            f0_mean,
            f0_var,
            energy_mean,
            voiced_dur_mean,
            unvoiced_dur_mean,
            energy_var,
            f0_d1,
            f0_d2,
            jitter,
            shimmer,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("AcousticFeatures", "values must be finite"));
        }
        if self.jitter < 0.0 || self.shimmer < 0.0 {
            return Err(Error::validation("AcousticFeatures", "jitter and shimmer must be non-negative"));
        }
        Ok(())
    }
}

impl Serialize for AcousticFeatures {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AcousticFeatures {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        AcousticFeatures::from_slice(&v).map_err(|e| D::Error::custom(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceCue {
    pub speaker: String,
    pub transcript: String,
    pub acoustic: AcousticFeatures,
    /// Facial action units, one list (at most 3 entries) per visible person.
    pub action_units: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CueBundle {
    pub utterances: Vec<UtteranceCue>,
    pub video_caption: String,
    pub relation: String,
    pub clip_description: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QARecord {
    pub id: String,
    pub source_domain: SourceDomain,
    pub task: TaskKind,
    pub cues: CueBundle,
    pub question: String,
    pub answer: String,
    pub laughter_type: Option<LaughterType>,
    pub split: Split,
}

impl QARecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::validation(field, msg));
        if self.id.trim().is_empty() {
            return bad("id", "must be nonempty");
        }
        if self.question.trim().is_empty() {
            return bad("question", "must be nonempty");
        }
        if self.answer.trim().is_empty() {
            return bad("answer", "must be nonempty");
        }
        if self.task != TaskKind::SelfInstruct && self.cues.utterances.is_empty() {
            return bad("cues.utterances", "at least one utterance is required");
        }
        for (i, u) in self.cues.utterances.iter().enumerate() {
            if u.transcript.trim().is_empty() {
                return bad(&format!("cues.utterances[{i}].transcript"), "must be nonempty");
            }
            if u.action_units.iter().any(|p| p.len() > 3) {
                return bad(&format!("cues.utterances[{i}].action_units"), "at most 3 per person");
            }
            u.acoustic.validate()?;
        }
        match self.task {
            TaskKind::Detection => {
                if self.answer != DETECTION_YES && self.answer != DETECTION_NO {
                    return bad("answer", "detection answer must be one of the two fixed sentences");
                }
            }
            TaskKind::Classification => match self.laughter_type {
                None => return bad("laughter_type", "required for classification"),
                Some(t) if self.answer != t.answer() => {
                    return bad("answer", "must be \"The laugh type is \" followed by the laughter type")
                }
                _ => {}
            },
            TaskKind::Reasoning => {
                if !REASONING_PREFIXES.iter().any(|p| self.answer.starts_with(p)) {
                    return bad("answer", "reasoning answer must start with \"The audience/person laughed because\"");
                }
            }
            TaskKind::SelfInstruct => {}
        }
        Ok(())
    }
}

/// Which cue families are serialized into the prompt. The transcript is
/// always included.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CueMask {
    pub include_transcript: bool,
    pub include_acoustic: bool,
    pub include_visual: bool,
    pub include_relation: bool,
}

impl CueMask {
    pub const FULL: CueMask = CueMask {
        include_transcript: true,
        include_acoustic: true,
        include_visual: true,
        include_relation: true,
    };
    pub const TRANSCRIPT_ONLY: CueMask = CueMask {
        include_transcript: true,
        include_acoustic: false,
        include_visual: false,
        include_relation: false,
    };
}

impl Default for CueMask {
    fn default() -> Self {
        CueMask::FULL
    }
}

impl fmt::Display for CueMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_char('T')?;
        for (on, c) in [(self.include_acoustic, 'A'), (self.include_visual, 'V'), (self.include_relation, 'R')] {
            if on {
                f.write_char(c)?;
            }
        }
        Ok(())
    }
}

impl FromStr for CueMask {
    type Err = Error;

    /// Letters from `TAVR`, e.g. `"T"`, `"TAV"`, `"TAVR"`. `T` is required.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = CueMask::TRANSCRIPT_ONLY;
        let mut seen_t = false;
        for c in s.chars() {
            match c.to_ascii_uppercase() {
                'T' => seen_t = true,
                'A' => m.include_acoustic = true,
                'V' => m.include_visual = true,
                'R' => m.include_relation = true,
                _ => return Err(Error::validation("mask", format!("unknown cue letter {c:?} in {s:?}"))),
            }
        }
        if !seen_t {
            return Err(Error::validation("mask", "the transcript (T) cannot be masked out"));
        }
        Ok(m)
    }
}

/// Round to 4 significant digits and print without exponent.
pub fn format_sig4(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return "0".into();
    }
    let e = v.abs().log10().floor() as i32;
    let scale = 10f64.powi(3 - e);
    let rounded = (v * scale).round() / scale;
    let decimals = (3 - e).max(0) as usize;
    format!("{rounded:.decimals$}")
}

/// Deterministic prompt text: the question, one block per utterance, then
/// clip-level cues, each family only when `mask` includes it.
pub fn assemble_prompt(record: &QARecord, mask: CueMask) -> Result<String> {
    record.validate()?;
    let mut s = String::with_capacity(512);
    s.push_str(&record.question);
    let cues = &record.cues;
    for u in &cues.utterances {
        let _ = write!(s, "\n{}: {}", u.speaker, u.transcript);
        if mask.include_acoustic {
            s.push_str("\n ac");
            for v in u.acoustic.to_array() {
                s.push(' ');
                s.push_str(&format_sig4(v));
            }
        }
        if mask.include_visual && !u.action_units.is_empty() {
            let people: Vec<String> = u.action_units.iter().map(|p| p.join(", ")).collect();
            let _ = write!(s, "\n au {}", people.join(" | "));
        }
    }
    if mask.include_visual {
        let _ = write!(s, "\ncaption: {}", cues.video_caption);
        if let Some(d) = &cues.clip_description {
            let _ = write!(s, "\ndescription: {d}");
        }
    }
    if mask.include_relation {
        let _ = write!(s, "\nrelation: {}", cues.relation);
    }
    Ok(s)
}

/// Parse line-delimited JSON records. Blank lines are skipped; every other
/// line must be a valid record, and ids must be unique.
pub fn load_corpus(path: &Path) -> Result<Vec<QARecord>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let corpus_err = |message: String| Error::Corpus {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: QARecord = serde_json::from_str(&line).map_err(|e| corpus_err(e.to_string()))?;
        rec.validate().map_err(|e| corpus_err(e.to_string()))?;
        if !ids.insert(rec.id.clone()) {
            return Err(corpus_err(format!("duplicate id {:?}", rec.id)));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn save_corpus(records: &[QARecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Record counts per task and split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitStats {
    /// Indexed by `TaskKind as usize`, then `Split as usize`.
    pub counts: [[usize; 3]; 4],
}

pub fn split_stats(records: &[QARecord]) -> SplitStats {
    let mut st = SplitStats::default();
    for r in records {
        st.counts[r.task as usize][r.split as usize] += 1;
    }
    st
}

impl SplitStats {
    pub fn get(&self, task: TaskKind, split: Split) -> usize {
        self.counts[task as usize][split as usize]
    }

    pub fn task_total(&self, task: TaskKind) -> usize {
        self.counts[task as usize].iter().sum()
    }

    pub fn split_total(&self, split: Split) -> usize {
        self.counts.iter().map(|row| row[split as usize]).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// The three core tasks always; self_instruct only when present.
    fn rows(&self) -> Vec<(String, [usize; 3], usize)> {
        let mut rows: Vec<_> = TaskKind::ALL
            .into_iter()
            .filter(|&t| t != TaskKind::SelfInstruct || self.task_total(t) > 0)
            .map(|t| (t.to_string(), self.counts[t as usize], self.task_total(t)))
            .collect();
        rows.push((
            "total".into(),
            Split::ALL.map(|s| self.split_total(s)),
            self.total(),
        ));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,train,val,test,total\n");
        for (name, c, t) in self.rows() {
            let _ = writeln!(s, "{name},{},{},{},{t}", c[0], c[1], c[2]);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<16}{:>8}{:>8}{:>8}{:>8}\n", "task", "train", "val", "test", "total");
        for (name, c, t) in self.rows() {
            let _ = writeln!(s, "{name:<16}{:>8}{:>8}{:>8}{t:>8}", c[0], c[1], c[2]);
        }
        s
    }
}
