//! Generate a seeded synthetic corpus, write it as JSON lines and print its
//! split statistics and one prompt per cue mask.

use laugh_mole::data::{
    assemble_prompt, generate_synthetic_corpus, load_corpus, save_corpus, split_stats, CorpusCounts, CueMask,
};

fn main() -> laugh_mole::Result<()> {
    let corpus = generate_synthetic_corpus(42, &CorpusCounts::uniform(20, 5, 5));
    let path = std::env::temp_dir().join("mole-synth-example.jsonl");
    save_corpus(&corpus, &path)?;
    let reloaded = load_corpus(&path)?;
    println!("{} records written to {}, reload identical: {}", corpus.len(), path.display(), reloaded == corpus);
    print!("{}", split_stats(&corpus).to_text());

    let r = &corpus[corpus.len() / 2];
    for mask in [CueMask::TRANSCRIPT_ONLY, CueMask::FULL] {
        println!("\n[{mask}]\n{}\n=> {}", assemble_prompt(r, mask)?, r.answer);
    }
    Ok(())
}
