//! Run the self-instruct pipeline against the deterministic mock backend
//! and print the top generated task families.

use laugh_mole::data::split_stats;
use laugh_mole::selfinstruct::{run_pipeline, to_qarecords, MockBackend, SelfInstructConfig};

fn main() -> laugh_mole::Result<()> {
    let target = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = SelfInstructConfig {
        target,
        ..Default::default()
    };
    let out = run_pipeline(&MockBackend, &cfg)?;
    println!(
        "{} tasks, {} instances, {} task and {} instance duplicates rejected, {} malformed",
        out.tasks.len(),
        out.instances.len(),
        out.task_rejected,
        out.instance_rejected,
        out.malformed
    );
    print!("{}", out.report.top_k_text(5));
    let sample = &out.instances[0];
    println!("\nInput: {}\nAnswer: {}", sample.input, sample.answer);
    let records = to_qarecords(&out.instances, "si")?;
    print!("{}", split_stats(&records).to_text());
    Ok(())
}
