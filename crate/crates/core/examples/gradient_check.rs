//! Finite-difference check of every layer and of the full training loss.

use hctmg::verify::{gradient_checks, ABS_FLOOR, REL_TOL};

fn main() -> hctmg::Result<()> {
    let start = std::time::Instant::now();
    let checks = gradient_checks()?;
    println!("{:<26} {:>7} {:>12} {:>12}", "check", "coords", "worst rel", "max abs");
    for c in &checks {
        println!(
            "{:<26} {:>7} {:>12.3e} {:>12.3e}  {}",
            c.name,
            c.report.coords.len(),
            c.worst_rel(),
            c.report.max_abs_error,
            if c.passes() { "ok" } else { "FAIL" }
        );
    }
    println!("tolerance: rel < {REL_TOL:e} or abs < {ABS_FLOOR:e}; {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}
