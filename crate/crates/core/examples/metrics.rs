//! Answer parsing and the classification and generation metrics.

use laugh_mole::data::TaskKind;
use laugh_mole::eval::{bleu4, classification_metrics, parse_prediction, rouge_l, Averaging, BleuMode};

fn main() -> laugh_mole::Result<()> {
    for (task, text) in [
        (TaskKind::Detection, "Yes, there is laugh in this video."),
        (TaskKind::Classification, "The laugh type is Polite"),
        (TaskKind::Detection, "banana"),
    ] {
        println!("{task} {text:?} -> {:?}", parse_prediction(task, text));
    }

    let preds = [Some(0), Some(0), Some(1), Some(1)];
    let golds = [0, 1, 0, 1];
    let s = classification_metrics(&preds, &golds, 2, Averaging::BinaryPositive { positive: 0 })?;
    println!("binary: P={} R={} F1={} Acc={}", s.precision, s.recall, s.f1, s.accuracy);

    let reference = "The person laughed because the remark was sarcastic, shown by a smirk and a flat tone.";
    let hypothesis = "The person laughed because the remark was sarcastic and a flat tone.";
    println!("BLEU-4 smoothed {:.4}", bleu4(hypothesis, reference, BleuMode::Smoothed));
    println!("BLEU-4 exact    {:.4}", bleu4(hypothesis, reference, BleuMode::Exact));
    println!("ROUGE-L         {:.4}", rouge_l(hypothesis, reference));
    Ok(())
}
