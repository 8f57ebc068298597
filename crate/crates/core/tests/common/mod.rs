#![allow(dead_code)]

use laugh_mole::data::{
    AcousticFeatures, CueBundle, LaughterType, QARecord, SourceDomain, Split, TaskKind, UtteranceCue, DETECTION_NO,
    DETECTION_YES,
};
use rand::seq::IndexedRandom;
use rand::Rng;

const WORDS: [&str; 12] = [
    "haha", "well", "the", "printer", "ça", "naïve", "boss", "\"quoted\"", "tab\there", "emoji 😂", "line", "ok",
];

fn text(rng: &mut impl Rng, max: usize) -> String {
    let n = rng.random_range(1..=max);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn value(rng: &mut impl Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => rng.random_range(-1e-6..1e-6),
        1 => rng.random_range(-1e4..1e4),
        2 => f64::from(rng.random_range(-50i32..50)),
        _ => rng.random::<f64>(),
    }
}

/// A random record that passes validation, exercising every optional
/// field, unicode and awkward floats.
pub fn random_record(rng: &mut impl Rng, i: usize) -> QARecord {
    let task = *[TaskKind::Detection, TaskKind::Classification, TaskKind::Reasoning, TaskKind::SelfInstruct]
        .choose(rng)
        .unwrap();
    let ty = *LaughterType::ALL.choose(rng).unwrap();
    let n_utt = if task == TaskKind::SelfInstruct { rng.random_range(0..2) } else { rng.random_range(1..4) };
    let utterances = (0..n_utt)
        .map(|_| UtteranceCue {
            speaker: text(rng, 2),
            transcript: text(rng, 8),
            acoustic: AcousticFeatures::from_slice(&(0..10).map(|k| if k >= 8 { value(rng).abs() } else { value(rng) }).collect::<Vec<_>>()).unwrap(),
            action_units: (0..rng.random_range(0..3)).map(|_| (0..rng.random_range(0..4)).map(|_| text(rng, 2)).collect()).collect(),
        })
        .collect();
    let (answer, laughter_type) = match task {
        TaskKind::Detection => ((if rng.random_bool(0.5) { DETECTION_YES } else { DETECTION_NO }).to_string(), None),
        TaskKind::Classification => (ty.answer(), Some(ty)),
        TaskKind::Reasoning => (format!("The person laughed because {}", text(rng, 6)), Some(ty)),
        TaskKind::SelfInstruct => (text(rng, 6), None),
    };
    QARecord {
        id: format!("rec-{i}"),
        source_domain: *[SourceDomain::Synthetic, SourceDomain::TalkShow, SourceDomain::Sitcom].choose(rng).unwrap(),
        task,
        cues: CueBundle {
            utterances,
            video_caption: text(rng, 4),
            relation: text(rng, 2),
            clip_description: rng.random_bool(0.5).then(|| text(rng, 5)),
        },
        question: text(rng, 10),
        answer,
        laughter_type,
        split: *Split::ALL.choose(rng).unwrap(),
    }
}
