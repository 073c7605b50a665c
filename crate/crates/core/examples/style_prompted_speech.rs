//! Trains a small single-stage speaker on codec frames, then speaks the same
//! content behind prompts in two different styles.

use convert_speak::neural::{ModelConfig, OptimConfig, TrainOpts};
use convert_speak::speaker::{generate, train_generative, GenerateOpts, SpeakingExample};
use convert_speak::synthcorpus::{gen_target_corpus, LengthDist, MarkovTable, SyntheticCodec};
use convert_speak::tokens::lcsr;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let codec = SyntheticCodec::new(64, 4, 32, 8, 3)?;
    let table = MarkovTable::sparse(64, 36, 3, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let corpus: Vec<SpeakingExample> = gen_target_corpus(&table, 600, LengthDist { min: 15, max: 25 }, 1, "s")?
        .into_iter()
        .map(|y| {
            let frames = codec.encode(&y, rng.random_range(0..codec.styles))?;
            Ok(SpeakingExample::new(y, frames))
        })
        .collect::<convert_speak::Result<_>>()?;

    let opts = TrainOpts {
        steps: 800,
        batch_size: 16,
        optim: OptimConfig { peak_lr: 3e-3, warmup_steps: 50, decay_half_life: 400.0, ..OptimConfig::default() },
        seed: 2,
    };
    let (params, report) = train_generative(&corpus, &ModelConfig::speaker(64, 4, 32), &opts)?;
    println!("training loss {:.3} -> {:.3}", report.initial_loss().unwrap_or(f64::NAN), report.tail_loss(50).unwrap_or(f64::NAN));

    let content = gen_target_corpus(&table, 1, LengthDist { min: 20, max: 20 }, 77, "say")?.remove(0);
    let prompt_text = &corpus[0].semantic;
    for style in [2, 6] {
        let prompt = codec.encode(prompt_text, style)?.prefix(5);
        let g = generate(&params, &content, &prompt, Some(prompt_text), &GenerateOpts::default(), &mut rng)?;
        let (spoken, votes) = codec.decode(&g.frames);
        println!(
            "prompt style {style}: {} frames in {} passes, content LCSR {:.3}, style votes {votes:?}",
            g.frames.n_frames(),
            g.forward_passes,
            lcsr(&spoken, &content)?
        );
    }
    Ok(())
}
