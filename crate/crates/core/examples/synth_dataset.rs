//! Writes a synthetic band dataset and reports its class balance.
//!
//! ```text
//! cargo run --release --example synth_dataset -- [out_dir] [n] [size] [classes]
//! ```

use std::path::PathBuf;

use sgseg::io::{generate_synthetic, write_dataset};

fn main() -> sgseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("synthetic", String::as_str));
    let num = |i: usize, default: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let (n, size, classes) = (num(1, 64), num(2, 32), num(3, 3));

    let ds = generate_synthetic(n, size, classes, 7)?;
    write_dataset(&out, &ds)?;

    let mut counts = vec![0usize; classes];
    for l in ds.labels.iter().flatten().flatten() {
        counts[*l as usize] += 1;
    }
    let total: usize = counts.iter().sum();
    println!("wrote {} images of {size}x{size} to {}", ds.len(), out.display());
    for (c, k) in counts.iter().enumerate() {
        println!("class {c}: {:5.1}% of pixels", 100.0 * *k as f64 / total as f64);
    }
    Ok(())
}
