//! Byte-level tokenization, the prompt encoding and greedy decoding with an
//! untrained model.

use laugh_mole::model::{detokenize, encode_example, encode_prompt, tokenize, ModelConfig, TinyLM};

fn main() -> laugh_mole::Result<()> {
    let text = "haha, ça marche";
    let tokens = tokenize(text);
    println!("{text:?} -> {tokens:?} -> {:?}", detokenize(&tokens)?);

    let (tokens, mask) = encode_example("Is there a laugh?", "Yes");
    println!("{} tokens, {} scored", tokens.len(), mask.iter().filter(|&&m| m).count());

    let model = TinyLM::new(ModelConfig::default())?;
    println!(
        "{} trainable and {} frozen parameters, checksum {}",
        model.trainable_count(),
        model.frozen_count(),
        &model.checksum()[..16]
    );
    let prompt = encode_prompt("Detection task: is there laugh?");
    let out = model.generate(&prompt, 16)?;
    println!("untrained continuation: {:?}", detokenize(&out[prompt.len()..])?);
    Ok(())
}
