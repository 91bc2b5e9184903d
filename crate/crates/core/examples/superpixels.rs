//! Hard and soft superpixel pooling of a synthetic image over a regular grid
//! assignment, and the clustering loss of sharp versus blurred assignments.
//!
//! ```text
//! cargo run --release --example superpixels -- [out_dir]
//! ```

use std::path::PathBuf;

use sgseg::io::{boundary_image, generate_synthetic, save_image};
use sgseg::superpixel::{clustering_loss, hard_superpixelate, soft_superpixelate, AssignmentMap};
use sgseg_tensor::{Graph, Tensor};

const SIZE: usize = 32;
const CELL: usize = 8;

fn grid_labels() -> Vec<usize> {
    let per_row = SIZE / CELL;
    (0..SIZE * SIZE).map(|p| (p / SIZE / CELL) * per_row + (p % SIZE) / CELL).collect()
}

fn blurred(labels: &[usize], n: usize, sharpness: f64) -> sgseg::Result<AssignmentMap> {
    let data = labels
        .iter()
        .flat_map(|&l| {
            let z = (n - 1) as f64 * (-sharpness).exp() + 1.0;
            (0..n).map(move |s| if s == l { 1.0 / z } else { (-sharpness).exp() / z })
        })
        .collect();
    AssignmentMap::new(Tensor::new(&[SIZE, SIZE, n], data)?)
}

fn main() -> sgseg::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "superpixels_out".into()));
    std::fs::create_dir_all(&out)?;
    let image = generate_synthetic(1, SIZE, 3, 3)?.images.remove(0);
    let labels = grid_labels();
    let n = (SIZE / CELL) * (SIZE / CELL);

    let one_hot = AssignmentMap::one_hot(SIZE, SIZE, n, &labels)?;
    let hard = hard_superpixelate(&image, &one_hot)?;
    save_image(&out.join("input.png"), &image)?;
    save_image(&out.join("hard.png"), &hard)?;
    save_image(&out.join("boundaries.png"), &boundary_image(&image, &labels)?)?;

    for sharpness in [0.5, 2.0, 8.0] {
        let p = blurred(&labels, n, sharpness)?;
        let mut g = Graph::new();
        let img = g.constant(image.clone());
        let pv = g.constant(p.into_tensor());
        let soft = soft_superpixelate(&mut g, img, pv)?;
        let loss = clustering_loss(&mut g, pv, 2.0)?;
        let gap = g.value(soft).max_abs_diff(&hard);
        println!(
            "sharpness {sharpness:>4}: clustering loss {:+.4}, max |soft - hard| {gap:.4}",
            g.value(loss).item()
        );
    }
    println!("images written to {}", out.display());
    Ok(())
}
