//! Runs every stage end to end and prints the evaluation, writing artifacts
//! and a report to the output directory.
//!
//! ```text
//! cargo run --release --example run_pipeline -- [config] [output_dir]
//! ```

use convert_speak::harness::{pipeline, Report, RunConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut cfg = match args.next() {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = args.next() {
        cfg.output_dir = out.into();
    }
    cfg.validate(false)?;

    let (results, art) = pipeline(&cfg)?;
    for (stage, secs) in &art.seconds {
        println!("{stage:>14}: {secs:.1} s");
    }
    println!("{}", serde_json::to_string_pretty(&results["evaluation"])?);
    Report::new("pipeline", &cfg, Ok(results)).write(&cfg.output_dir)?;
    Ok(())
}
