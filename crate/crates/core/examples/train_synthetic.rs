//! Trains the full pipeline on the synthetic preset, prints the per-epoch
//! loss trace and the matched test accuracy, and saves a checkpoint.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [total_epochs] [checkpoint]
//! ```

use std::path::PathBuf;

use sgseg::checkpoint::Checkpoint;
use sgseg::config::TrainConfig;
use sgseg::eval::evaluate;
use sgseg::io::generate_synthetic;
use sgseg::train::Trainer;

fn main() -> sgseg::Result<()> {
    env_logger::init();
    let mut config = TrainConfig::preset("synthetic")?;
    if let Some(total) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        config.total_epochs = total;
        config.pretrain_epochs = config.pretrain_epochs.min(total);
    }
    let out = PathBuf::from(std::env::args().nth(2).unwrap_or_else(|| "synthetic.ckpt".into()));

    let data = generate_synthetic(80, config.resize, config.classes, 2024)?;
    let (train, test) = data.split_tail(16)?;
    let mut trainer = Trainer::new(config)?;
    trainer.fit(&train.images)?;
    for (epoch, loss) in trainer.loss_trace().iter().enumerate() {
        println!("epoch {:>3}  loss {loss:+.5}", epoch + 1);
    }

    let report = evaluate(&trainer.model, &trainer.store, &test.images, test.labels.as_ref().unwrap())?;
    print!("{}", report.to_text());
    Checkpoint::from_trainer(&trainer).save(&out)?;
    println!("checkpoint saved to {}", out.display());
    Ok(())
}
