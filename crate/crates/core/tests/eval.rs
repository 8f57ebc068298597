use laugh_mole::data::{generate_synthetic_corpus, CorpusCounts, CueMask, Split, TaskKind};
use laugh_mole::eval::{
    bleu4, classification_metrics, evaluate, latency_bench, rouge_l, router_analysis, Averaging, BleuMode, EvalOptions,
    EvalReport, LatencyConfig,
};
use laugh_mole::model::{ModelConfig, TinyLM};
use proptest::prelude::*;

fn tiny_model() -> TinyLM {
    TinyLM::new(ModelConfig {
        embed_dim: 16,
        num_layers: 1,
        num_heads: 2,
        rank: 2,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["the", "a", "laugh", "Laugh", "boss", "joke", "smirk", "ha"]), 0..12)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn scores_bounded(h in words(), r in words()) {
        for s in [bleu4(&h, &r, BleuMode::Smoothed), bleu4(&h, &r, BleuMode::Exact), rouge_l(&h, &r)] {
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn identity_scores_one(h in words()) {
        let n = h.split_whitespace().count();
        if n > 0 {
            prop_assert!((rouge_l(&h, &h) - 1.0).abs() < 1e-12);
        }
        if n >= 4 {
            prop_assert!((bleu4(&h, &h, BleuMode::Exact) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_scores_bounded(labels in prop::collection::vec((prop::option::of(0usize..3), 0usize..3), 1..40)) {
        let (p, g): (Vec<_>, Vec<_>) = labels.into_iter().unzip();
        let s = classification_metrics(&p, &g, 3, Averaging::Macro).unwrap();
        for v in [s.precision, s.recall, s.f1, s.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn half_right_binary_example() {
    let s = classification_metrics(&[Some(0), Some(0), Some(1), Some(1)], &[0, 1, 0, 1], 2, Averaging::BinaryPositive {
        positive: 0,
    })
    .unwrap();
    assert_eq!((s.precision, s.recall, s.f1, s.accuracy), (0.5, 0.5, 0.5, 0.5));
    assert!(classification_metrics(&[Some(0)], &[0, 1], 2, Averaging::Macro).is_err());
}

#[test]
fn worked_rouge_example() {
    // LCS("the cat sat", "the cat ran") = 2, P = R = 2/3.
    assert!((rouge_l("the cat sat", "the cat ran") - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(rouge_l("a b", ""), 0.0);
    assert_eq!(bleu4("", "a b c d", BleuMode::Smoothed), 0.0);
}

#[test]
fn evaluation_is_deterministic_and_round_trips() {
    let corpus = generate_synthetic_corpus(5, &CorpusCounts::uniform(0, 0, 3));
    let model = tiny_model();
    let opts = EvalOptions {
        max_new_tokens: 8,
        ..Default::default()
    };
    let a = evaluate(&model, &corpus, Split::Test, CueMask::FULL, &opts).unwrap();
    let b = evaluate(&model, &corpus, Split::Test, CueMask::FULL, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.tasks.len(), 3);
    assert_eq!(a.task(TaskKind::Detection).unwrap().n, 3);
    let back = EvalReport::from_csv(a.mask, &a.to_csv().unwrap()).unwrap();
    assert_eq!(back, a);
    assert!(evaluate(&model, &corpus, Split::Train, CueMask::FULL, &opts).is_err());
}

#[test]
fn untrained_router_rows_are_uniform() {
    let corpus = generate_synthetic_corpus(5, &CorpusCounts::uniform(0, 0, 2));
    let model = tiny_model();
    let t = router_analysis(&model, &corpus, Split::Test, CueMask::FULL).unwrap();
    assert_eq!(t.rows.len(), 3);
    for (_, w) in &t.rows {
        for v in w {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }
    assert!(t.to_csv().starts_with("task,expert_1,expert_2,expert_3\n"));
    let single = router_analysis(&model.single_expert_variant().unwrap(), &corpus, Split::Test, CueMask::FULL).unwrap();
    assert!(single.rows.iter().all(|(_, w)| w == &vec![1.0]));
}

#[test]
fn latency_schema_independent_of_repetitions() {
    let corpus = generate_synthetic_corpus(5, &CorpusCounts::uniform(0, 0, 1));
    let model = tiny_model();
    let run = |repetitions| {
        let cfg = LatencyConfig {
            warmup: 0,
            repetitions,
            budget: 2,
            samples_per_task: 1,
        };
        latency_bench(&model, &corpus, CueMask::FULL, &cfg).unwrap()
    };
    let (one, ten) = (run(1), run(10));
    assert_eq!(one.columns, ten.columns);
    assert_eq!(one.columns, ["Detect.", "Cls.", "Reasoning", "All"]);
    let header = |s: String| s.lines().next().unwrap().to_string();
    assert_eq!(header(one.render(3)), header(ten.render(3)));
    assert!(one.single_ms.iter().chain(&one.mole_ms).all(|&v| v > 0.0));
}
