//! Seeded synthetic clips whose labels are deterministic functions of the
//! cues:
//!
//! * detection: positive iff some transcript contains a `(laughs)` marker;
//! * laughter type: the laughing utterance carries a type-specific acoustic
//!   template and action unit (`cheek raiser` → mirthful, `lip presser` →
//!   polite, `smirk` → satirical), neither of which reaches the transcript;
//! * reasoning: a fixed sentence per (type, audience-or-person), where the
//!   relation decides between audience and person.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    assemble_prompt, AcousticFeatures, CueBundle, CueMask, LaughterType, QARecord, SourceDomain, Split, TaskKind, UtteranceCue,
    CLASSIFICATION_QUESTION, DETECTION_NO, DETECTION_QUESTION, DETECTION_YES, REASONING_QUESTION,
};
use crate::model::encode_example;
use crate::numerics::{seeded_rng, Rng};

/// Every generated record encodes (full cue mask) to at most this many
/// tokens, the default model context.
pub const SYNTH_MAX_TOKENS: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl TaskCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub detection: TaskCounts,
    pub classification: TaskCounts,
    pub reasoning: TaskCounts,
}

impl CorpusCounts {
    pub fn uniform(train: usize, val: usize, test: usize) -> Self {
        let c = TaskCounts { train, val, test };
        Self {
            detection: c,
            classification: c,
            reasoning: c,
        }
    }

    pub fn get(&self, task: TaskKind) -> TaskCounts {
        match task {
            TaskKind::Detection => self.detection,
            TaskKind::Classification => self.classification,
            TaskKind::Reasoning => self.reasoning,
            TaskKind::SelfInstruct => TaskCounts::default(),
        }
    }

    pub fn total(&self) -> usize {
        self.detection.total() + self.classification.total() + self.reasoning.total()
    }
}

impl Default for CorpusCounts {
    fn default() -> Self {
        Self::uniform(700, 50, 150)
    }
}

/// `(relation, speakers, an audience is present)`.
pub const RELATIONS: [(&str, [&str; 2], bool); 8] = [
    ("host and guest", ["Host", "Guest"], true),
    ("comedian and audience", ["Comedian", "Fan"], true),
    ("speaker and audience", ["Speaker", "Listener"], true),
    ("boss and employee", ["Boss", "Employee"], false),
    ("friends", ["Sam", "Alex"], false),
    ("coworkers", ["Dana", "Lee"], false),
    ("teacher and student", ["Teacher", "Student"], false),
    ("siblings", ["Mia", "Leo"], false),
];

const SENTENCES: [&str; 40] = [
    "I tried to cook dinner last night.",
    "The printer jammed again this morning.",
    "We should probably start the meeting.",
    "My cat decided to sit on my keyboard.",
    "Did you see the score of the game?",
    "I forgot my umbrella on the train.",
    "That is the third time this week.",
    "Let me tell you about my weekend.",
    "The coffee machine is broken again.",
    "I think the deadline is tomorrow.",
    "You will never guess who called me.",
    "My neighbor bought a drum kit.",
    "The report is due on Friday.",
    "I ran into my old teacher today.",
    "We got lost on the way here.",
    "The new phone has too many buttons.",
    "I signed up for a dance class.",
    "Our flight was delayed for six hours.",
    "The elevator stopped between floors.",
    "I wore two different shoes to work.",
    "The soup was colder than the ice cream.",
    "He brought a cake to the interview.",
    "I locked my keys in the car.",
    "She parked in the wrong lot again.",
    "The plant in the office finally died.",
    "My brother thinks he can sing.",
    "We painted the kitchen bright green.",
    "The dog ate my homework, really.",
    "I only slept for four hours.",
    "The projector would not turn on.",
    "My mom joined a social network.",
    "I tried running a marathon once.",
    "Nobody told me the party was formal.",
    "The spreadsheet crashed before I saved.",
    "I waved at someone who was not waving at me.",
    "The recipe said it would take ten minutes.",
    "We ordered pizza for the whole floor.",
    "My alarm went off during the exam.",
    "The bus driver knew my name.",
    "I finally fixed the leaking sink.",
];

const CAPTIONS: [&str; 8] = [
    "two people sitting on a stage",
    "a person talking at a desk",
    "people standing in an office",
    "two friends on a couch",
    "a classroom with a teacher",
    "a small studio with lights",
    "a kitchen with two people",
    "a crowd facing a speaker",
];

const DESCRIPTIONS: [&str; 6] = [
    "a late night talk show clip",
    "an office conversation",
    "a casual chat at home",
    "a stand up comedy set",
    "a lecture with questions",
    "a video call between two people",
];

const NEUTRAL_AUS: [&str; 9] = [
    "brow lowerer",
    "inner brow raiser",
    "outer brow raiser",
    "upper lid raiser",
    "jaw drop",
    "lid tightener",
    "nose wrinkler",
    "chin raiser",
    "blink",
];

fn type_keyword(t: LaughterType) -> &'static str {
    match t {
        LaughterType::Mirthful => "cheek raiser [+]",
        LaughterType::Polite => "lip presser [=]",
        LaughterType::Satirical => "smirk [~]",
    }
}

fn reasoning_answer(t: LaughterType, audience: bool) -> String {
    let who = if audience { "audience" } else { "person" };
    let why = match t {
        LaughterType::Mirthful => "the joke was really funny, shown by a cheek raiser and a lively pitch.",
        LaughterType::Polite => "they wanted to be polite, shown by a lip presser and a quiet voice.",
        LaughterType::Satirical => "the remark was sarcastic, shown by a smirk and a flat tone.",
    };
    format!("The {who} laughed because {why}")
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Acoustic template: `None` is ordinary speech. Units: Hz, Hz², dB, ms,
/// ms, dB², Hz/frame, Hz/frame², %, %.
fn acoustic(rng: &mut Rng, t: Option<LaughterType>) -> AcousticFeatures {
    let (f0, f0_var, energy, d1) = match t {
        None => ((120.0, 220.0), (300.0, 900.0), (55.0, 65.0), (-20.0, 20.0)),
        Some(LaughterType::Mirthful) => ((230.0, 320.0), (1800.0, 3000.0), (70.0, 80.0), (-40.0, 40.0)),
        Some(LaughterType::Polite) => ((140.0, 200.0), (300.0, 700.0), (38.0, 47.0), (-15.0, 15.0)),
        Some(LaughterType::Satirical) => ((110.0, 170.0), (40.0, 150.0), (55.0, 62.0), (-3.0, 3.0)),
    };
    AcousticFeatures {
        f0_mean: uniform(rng, f0.0, f0.1),
        f0_var: uniform(rng, f0_var.0, f0_var.1),
        energy_mean: uniform(rng, energy.0, energy.1),
        voiced_dur_mean: uniform(rng, 150.0, 350.0),
        unvoiced_dur_mean: uniform(rng, 80.0, 200.0),
        energy_var: uniform(rng, 5.0, 30.0),
        f0_d1: uniform(rng, d1.0, d1.1),
        f0_d2: uniform(rng, d1.0 / 2.0, d1.1 / 2.0),
        jitter: uniform(rng, 0.5, 2.0),
        shimmer: uniform(rng, 3.0, 8.0),
    }
}

fn neutral_aus(rng: &mut Rng, n: usize) -> Vec<String> {
    NEUTRAL_AUS.choose_multiple(rng, n).map(|s| s.to_string()).collect()
}

struct Clip {
    cues: CueBundle,
    laughter_type: LaughterType,
    audience: bool,
    has_laugh: bool,
    /// Index of the utterance carrying the laugh cues.
    laughing: usize,
}

fn clip(rng: &mut Rng, has_laugh: bool) -> Clip {
    let &(relation, speakers, audience) = RELATIONS.choose(rng).expect("nonempty");
    let laughter_type = *LaughterType::ALL.choose(rng).expect("nonempty");
    let laughing = rng.random_range(0..2);
    let mut utterances = Vec::with_capacity(2);
    for (i, speaker) in speakers.iter().enumerate() {
        let mut transcript = SENTENCES.choose(rng).expect("nonempty").to_string();
        let (acoustic, action_units) = if i == laughing {
            if has_laugh {
                transcript = if rng.random_bool(0.5) {
                    format!("(laughs) {transcript}")
                } else {
                    format!("{transcript} (laughs)")
                };
            }
            let n = rng.random_range(0..3);
            let mut aus = neutral_aus(rng, n);
            let at = rng.random_range(0..=aus.len());
            aus.insert(at, type_keyword(laughter_type).to_string());
            (acoustic(rng, Some(laughter_type)), vec![aus])
        } else {
            let n = rng.random_range(1..3);
            (acoustic(rng, None), vec![neutral_aus(rng, n)])
        };
        utterances.push(UtteranceCue {
            speaker: speaker.to_string(),
            transcript,
            acoustic,
            action_units,
        });
    }
    let mut laughing = laughing;
    if rng.random_bool(0.5) {
        utterances.remove(1 - laughing);
        laughing = 0;
    }
    let clip_description = rng
        .random_bool(0.4)
        .then(|| DESCRIPTIONS.choose(rng).expect("nonempty").to_string());
    Clip {
        cues: CueBundle {
            utterances,
            video_caption: CAPTIONS.choose(rng).expect("nonempty").to_string(),
            relation: relation.to_string(),
            clip_description,
        },
        laughter_type,
        audience,
        has_laugh,
        laughing,
    }
}

fn encoded_len(r: &QARecord) -> usize {
    let prompt = assemble_prompt(r, CueMask::FULL).expect("generated records are valid");
    encode_example(&prompt, &r.answer).0.len()
}

/// Drop optional context until the record fits: first the clip
/// description, then the utterance without the laugh.
fn fit(r: &mut QARecord, laughing: usize) {
    if encoded_len(r) > SYNTH_MAX_TOKENS {
        r.cues.clip_description = None;
    }
    if encoded_len(r) > SYNTH_MAX_TOKENS && r.cues.utterances.len() > 1 {
        r.cues.utterances.remove(1 - laughing);
    }
    debug_assert!(encoded_len(r) <= SYNTH_MAX_TOKENS);
}

/// Reproducible corpus with exactly the requested number of records per
/// task and split.
pub fn generate_synthetic_corpus(seed: u64, counts: &CorpusCounts) -> Vec<QARecord> {
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(counts.total());
    for task in TaskKind::CORE {
        for split in Split::ALL {
            for i in 0..counts.get(task).get(split) {
                let has_laugh = task != TaskKind::Detection || rng.random_bool(0.5);
                let c = clip(&mut rng, has_laugh);
                let (question, answer, laughter_type) = match task {
                    TaskKind::Detection => (
                        DETECTION_QUESTION,
                        if c.has_laugh { DETECTION_YES } else { DETECTION_NO }.to_string(),
                        None,
                    ),
                    TaskKind::Classification => {
                        (CLASSIFICATION_QUESTION, c.laughter_type.answer(), Some(c.laughter_type))
                    }
                    _ => (
                        REASONING_QUESTION,
                        reasoning_answer(c.laughter_type, c.audience),
                        Some(c.laughter_type),
                    ),
                };
                let laughing = c.laughing;
                let mut record = QARecord {
                    id: format!("syn-{}-{}-{i:05}", task.as_str(), split.as_str()),
                    source_domain: SourceDomain::Synthetic,
                    task,
                    cues: c.cues,
                    question: question.to_string(),
                    answer,
                    laughter_type,
                    split,
                };
                fit(&mut record, laughing);
                out.push(record);
            }
        }
    }
    out
}
