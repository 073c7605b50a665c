//! Builds the synthetic accent benchmark and shows what a source/target pair
//! looks like, as tokens and as codec frames.

use convert_speak::synthcorpus::{transition_tv, Benchmark, BenchmarkConfig};

fn main() -> anyhow::Result<()> {
    let b = Benchmark::build(&BenchmarkConfig::default())?;
    println!(
        "{} target utterances, {} training pairs, {} test pairs",
        b.target_corpus.len(),
        b.train_pairs.len(),
        b.test_pairs.len()
    );
    println!("corpus vs table total variation {:.4}", transition_tv(&b.target_corpus, &b.table));
    println!("source vs reference LCSR (do-nothing baseline) {:.4}", b.baseline_lcsr()?);
    println!(
        "accent: {} substitutions, repeat-count weights {:?}, {} fillers",
        b.rules.substitutions.len(),
        b.rules.repeat_counts,
        b.rules.insertions.len()
    );

    let pair = &b.test_pairs[0];
    println!("\nsource    {:?}", pair.source.tokens);
    println!("reference {:?}", pair.target.tokens);

    let frames = b.codec.encode(&pair.target, b.test_styles[0])?;
    println!("\nfirst frames of the reference in style {}:", b.test_styles[0]);
    for f in frames.frames().take(4) {
        println!("  {f:?}");
    }
    let (back, votes) = b.codec.decode(&frames);
    assert_eq!(back, pair.target);
    println!("style votes {votes:?}");
    Ok(())
}
