//! Compares analytic gradients of the transformer loss with central finite
//! differences in f64, over every parameter of a 2-layer toy model.

use convert_speak::neural::gradcheck;

fn main() -> anyhow::Result<()> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let report = gradcheck::run_default(seed)?;
    println!(
        "{} coordinates, max relative error {:.2e} in {} (tolerance {:e}): {}",
        report.coordinates,
        report.max_rel_error,
        report.worst_tensor,
        report.tolerance,
        if report.passed { "ok" } else { "FAILED" }
    );
    Ok(())
}
