//! Pre-trains the converter on target-accent text, fine-tunes it on a few
//! parallel pairs and converts held-out source utterances.
//!
//! ```text
//! cargo run --release --example accent_conversion -- [pretrain_steps] [finetune_steps]
//! ```
//!
//! The defaults are short; the desk configuration uses 3000 and 600.

use convert_speak::harness::run::{convert_core, finetune_core, mean_output_lcsr, pretrain_core};
use convert_speak::harness::RunConfig;
use convert_speak::synthcorpus::Benchmark;
use convert_speak::tokens::TokenSequence;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let mut cfg = RunConfig::default();
    cfg.pretrain.steps = args.next().transpose()?.unwrap_or(800);
    cfg.finetune.steps = args.next().transpose()?.unwrap_or(300);

    let b = Benchmark::build(&cfg.benchmark)?;
    let refs: Vec<TokenSequence> = b.test_pairs.iter().map(|p| p.target.clone()).collect();
    let sources: Vec<TokenSequence> = b.test_pairs.iter().map(|p| p.source.clone()).collect();

    let (pretrained, pre) = pretrain_core(&cfg, &b.target_corpus, Some(&refs))?;
    println!("pre-training: {}", pre["heldout_reduction"]);
    let (converter, _) = finetune_core(&cfg, &pretrained, &b.train_pairs, Some(&b.test_pairs))?;

    let conversions = convert_core(&cfg, &converter, &sources, Some(&refs))?;
    let outputs: Vec<TokenSequence> = conversions.iter().map(|c| c.output.clone()).collect();
    println!("source LCSR    {:.4}", mean_output_lcsr(&sources, &refs)?);
    println!("converted LCSR {:.4}", mean_output_lcsr(&outputs, &refs)?);
    for (c, r) in conversions.iter().zip(&refs).take(3) {
        println!("\n{}\n  out {:?}\n  ref {:?}", c.output.utt_id, c.output.tokens, r.tokens);
    }
    Ok(())
}
