//! Fine-tune a small model on a synthetic corpus, then evaluate it, run the
//! cue-mask ablation and the router analysis.
//!
//! `cargo run --release --example train_eval -- [train-per-task] [epochs]`

use laugh_mole::data::{generate_synthetic_corpus, CorpusCounts, CueMask, Split};
use laugh_mole::eval::{evaluate, router_analysis, AblationTable, EvalOptions};
use laugh_mole::model::{ModelConfig, TinyLM};
use laugh_mole::train::{TrainConfig, Trainer};

fn main() -> laugh_mole::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().ok());
    let per_task = args.next().flatten().unwrap_or(60);
    let epochs = args.next().flatten().unwrap_or(2);
    let corpus = generate_synthetic_corpus(42, &CorpusCounts::uniform(per_task, 0, 10));
    let config = TrainConfig {
        learning_rate: 3e-3,
        epochs,
        ..Default::default()
    };
    let mut trainer = Trainer::new(TinyLM::new(ModelConfig::default())?, config)?;
    let log = trainer.train(&corpus, CueMask::FULL, |epoch, _| {
        println!("finished epoch {epoch}");
        Ok(())
    })?;
    print!("{}", log.summary());
    let model = trainer.into_model();

    let opts = EvalOptions::default();
    print!("{}", evaluate(&model, &corpus, Split::Test, CueMask::FULL, &opts)?.summary());
    let table = AblationTable::run(&model, &corpus, Split::Test, &[CueMask::TRANSCRIPT_ONLY, CueMask::FULL], &opts)?;
    print!("{}", table.to_csv());
    print!("{}", router_analysis(&model, &corpus, Split::Test, CueMask::FULL)?.to_csv());
    Ok(())
}
