//! Counts sequential decoding work for single-stage grouped decoding versus a
//! two-stage residual-quantizer decoder.

use convert_speak::speaker::{count_decoding_steps, DecodingScheme};

fn main() -> anyhow::Result<()> {
    println!("{:>8} {:>18} {:>22}", "seconds", "single-stage AR", "two-stage AR + NAR");
    for d in [1.0, 2.5, 5.0, 10.0] {
        let single = count_decoding_steps(d, DecodingScheme::SingleStage)?;
        let rvq = count_decoding_steps(d, DecodingScheme::RvqTwoStage)?;
        println!("{d:>8} {:>18} {:>17} + {}", single.ar_steps, rvq.ar_steps, rvq.nar_passes);
    }
    Ok(())
}
