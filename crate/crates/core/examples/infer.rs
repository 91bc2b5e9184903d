//! Segments one image with a saved checkpoint and writes the class map,
//! an overlay and the superpixel boundaries.
//!
//! ```text
//! cargo run --release --example infer -- <checkpoint> <image> [out_dir]
//! ```

use std::path::PathBuf;

use sgseg::checkpoint::Checkpoint;
use sgseg::io::{boundary_image, labels_to_u8, load_image, overlay, resize_image, save_image, save_indexed_png};

fn main() -> sgseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        eprintln!("usage: infer <checkpoint> <image> [out_dir]");
        std::process::exit(1);
    }
    let out = PathBuf::from(args.get(2).map_or("infer_out", String::as_str));
    std::fs::create_dir_all(&out)?;

    let trainer = Checkpoint::load(args[0].as_ref())?.to_trainer()?;
    let size = trainer.config.resize;
    let image = resize_image(&load_image(args[1].as_ref())?, size, size);
    let pred = trainer.model.predict(&trainer.store, &image)?;

    save_indexed_png(&out.join("seg.png"), size, size, &labels_to_u8(&pred.labels)?)?;
    save_image(&out.join("overlay.png"), &overlay(&image, &pred.labels, 0.5)?)?;
    if let Some(p) = &pred.assignment {
        save_image(&out.join("boundaries.png"), &boundary_image(&image, &p.hard_labels())?)?;
    }
    let mut counts = vec![0usize; trainer.config.classes];
    for &l in &pred.labels {
        counts[l] += 1;
    }
    println!("pixels per cluster: {counts:?}");
    println!("outputs written to {}", out.display());
    Ok(())
}
