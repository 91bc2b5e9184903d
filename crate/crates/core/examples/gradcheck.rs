//! Finite-difference check of every loss term and network block.
//!
//! ```text
//! cargo run --release --example gradcheck -- [seed]
//! ```

use sgseg::gradsuite::{self, TOLERANCE};

fn main() -> sgseg::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut failed = 0;
    for e in gradsuite::run(seed)? {
        let verdict = if e.passes() { "ok" } else { "FAIL" };
        failed += usize::from(!e.passes());
        println!(
            "{:<26} {:>6} entries  rel {:.2e}  abs {:.2e}  {verdict}",
            e.name, e.report.checked, e.report.max_rel_error, e.report.max_abs_error
        );
    }
    println!("tolerance {TOLERANCE:e}, {failed} failing");
    std::process::exit(i32::from(failed > 0));
}
