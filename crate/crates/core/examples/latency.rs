//! Compare greedy-generation latency of a model with three experts against
//! its single-expert variant.

use laugh_mole::data::{generate_synthetic_corpus, CorpusCounts, CueMask};
use laugh_mole::eval::{latency_bench, LatencyConfig};
use laugh_mole::model::{ModelConfig, TinyLM};

fn main() -> laugh_mole::Result<()> {
    let corpus = generate_synthetic_corpus(3, &CorpusCounts::uniform(0, 0, 4));
    let model = TinyLM::new(ModelConfig::default())?;
    let cfg = LatencyConfig {
        samples_per_task: 4,
        ..Default::default()
    };
    let table = latency_bench(&model, &corpus, CueMask::FULL, &cfg)?;
    print!("{}", table.render(2));
    println!("MoLE overhead non-negative everywhere: {}", table.overhead_non_negative());
    Ok(())
}
