//! Scores hypotheses against references with the run-collapsed LCS ratio.
//!
//! ```text
//! cargo run --example lcsr_metric
//! ```

use convert_speak::tokens::{dedup_runs, lcs_length, lcsr, mean_lcsr, TokenSequence};

fn main() -> anyhow::Result<()> {
    let cases = [
        (vec![1, 1, 2, 3], vec![1, 2, 2, 3]),
        (vec![1, 2], vec![3, 4]),
        (vec![1, 1, 2, 3, 4], vec![1, 3, 3, 4, 5]),
        (vec![7, 7, 7, 8, 9, 9, 4], vec![7, 8, 4, 9]),
    ];
    let pairs: Vec<(TokenSequence, TokenSequence)> = cases
        .iter()
        .enumerate()
        .map(|(i, (h, r))| (TokenSequence::new(format!("h{i}"), h.clone()), TokenSequence::new(format!("r{i}"), r.clone())))
        .collect();

    for (h, r) in &pairs {
        let (dh, dr) = (dedup_runs(&h.tokens), dedup_runs(&r.tokens));
        println!(
            "{:?} vs {:?}: collapsed {:?} / {:?}, lcs {}, lcsr {:.3}",
            h.tokens,
            r.tokens,
            dh,
            dr,
            lcs_length(&dh, &dr),
            lcsr(h, r)?
        );
    }
    println!("corpus mean {:.3}", mean_lcsr(pairs.iter().map(|(h, r)| (h, r)))?);
    Ok(())
}
