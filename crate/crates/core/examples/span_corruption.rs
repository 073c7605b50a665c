//! Masks Poisson-length spans of a sequence for denoising pre-training and
//! checks the coverage statistics over many draws.

use convert_speak::corruptor::{corrupt_detailed, CorruptionSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MASK: u32 = 99;

fn main() -> anyhow::Result<()> {
    let spec = CorruptionSpec::infilling(MASK, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let tokens: Vec<u32> = (0..40).collect();
    let c = corrupt_detailed(&tokens, &spec, &mut rng)?;
    println!("original  {tokens:?}");
    println!("spans     {:?}", c.spans);
    println!("corrupted {:?}", c.tokens);

    let n = 2000;
    let (mut covered, mut spans) = (0usize, 0usize);
    for _ in 0..n {
        let t: Vec<u32> = (0..200).map(|_| rng.random_range(0..64)).collect();
        let c = corrupt_detailed(&t, &spec, &mut rng)?;
        covered += c.covered();
        spans += c.spans.len();
    }
    println!(
        "over {n} sequences of 200: covered fraction {:.3}, mean span {:.2}",
        covered as f64 / (200 * n) as f64,
        covered as f64 / spans as f64
    );
    Ok(())
}
