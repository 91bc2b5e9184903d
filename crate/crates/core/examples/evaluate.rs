//! Hungarian matching of predicted clusters to ground-truth classes on a
//! hand-made confusion matrix, then matched pixel accuracy.
//!
//! ```text
//! cargo run --release --example evaluate
//! ```

use sgseg::eval::{pixel_accuracy, ConfusionMatrix, EvalReport};

fn main() -> sgseg::Result<()> {
    // rows are predicted clusters, columns ground-truth classes
    let cm = ConfusionMatrix::from_rows(&[vec![2, 40, 1], vec![1, 3, 35], vec![50, 2, 4]])?;
    let report = EvalReport::from_confusion(cm);
    print!("{}", report.to_text());
    println!("{}", report.to_json());

    let pred = [2, 2, 0, 1, 1, 0];
    let labels = [0, 0, 1, 2, 255, 2];
    let acc = pixel_accuracy(&pred, &labels, &report.permutation)?;
    println!("pixel accuracy with one ignored pixel: {acc:?}");
    Ok(())
}
