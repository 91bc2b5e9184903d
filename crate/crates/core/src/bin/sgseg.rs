use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::{error, info, warn};

use sgseg::checkpoint::Checkpoint;
use sgseg::config::TrainConfig;
use sgseg::eval::evaluate;
use sgseg::io::{
    boundary_image, generate_synthetic, labels_to_u8, load_dataset, load_image, overlay, resize_image,
    save_image, save_indexed_png, write_dataset,
};
use sgseg::superpixel::hard_superpixelate;
use sgseg::train::Trainer;
use sgseg::{gradsuite, Error, Result};

/// Unsupervised semantic segmentation with superpixel graphs.
#[derive(Parser)]
#[command(name = "sgseg", version)]
struct Cli {
    /// Print wall-clock time per stage.
    #[arg(long, global = true)]
    time: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(clap::Args)]
struct ModelSource {
    /// Trained checkpoint. Without one a freshly initialized model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Config for the untrained model used when no checkpoint is given.
    #[arg(long, conflicts_with = "checkpoint")]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the labeled synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output root; receives images/ and labels/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Config file (`key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Dataset root with an images/ directory.
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long, conflicts_with_all = ["config", "overrides"])]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the hard-superpixelated image and a boundary overlay.
    Superpixels {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Segment an image: indexed PNG plus a color overlay.
    Infer {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Resize the input to this square side before segmenting.
        #[arg(long)]
        resize: Option<usize>,
    },
    /// Hungarian-matched pixel accuracy on a labeled dataset.
    Eval {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write the superpixel k-nn graph of an image as an edge list.
    ExportGraph {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

struct Timer {
    enabled: bool,
    last: Instant,
}

impl Timer {
    fn new(enabled: bool) -> Self {
        Self {
            enabled,
            last: Instant::now(),
        }
    }

    fn stage(&mut self, name: &str) {
        if self.enabled {
            eprintln!("[time] {name}: {:.3}s", self.last.elapsed().as_secs_f64());
        }
        self.last = Instant::now();
    }
}

fn load_trainer(src: &ModelSource) -> Result<Trainer> {
    match (&src.checkpoint, &src.config) {
        (Some(p), _) => Checkpoint::load(p)?.to_trainer(),
        (None, cfg) => {
            warn!("no checkpoint given; using an untrained model");
            let config = match cfg {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::preset("synthetic")?,
            };
            Trainer::new(config)
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn run(cli: Cli) -> Result<()> {
    let mut timer = Timer::new(cli.time);
    match cli.cmd {
        Command::Synth {
            n,
            size,
            classes,
            seed,
            out,
        } => {
            let ds = generate_synthetic(n, size, classes, seed)?;
            timer.stage("generate");
            write_dataset(&out, &ds)?;
            timer.stage("write");
            println!("wrote {n} labeled images to {}", out.display());
        }
        Command::Train {
            config,
            overrides,
            data,
            resume,
            out,
        } => {
            let mut trainer = match resume {
                Some(p) => Checkpoint::load(&p)?.to_trainer()?,
                None => {
                    let mut text = match config {
                        Some(p) => std::fs::read_to_string(p)?,
                        None => String::new(),
                    };
                    for o in overrides {
                        text.push('\n');
                        text.push_str(&o);
                    }
                    Trainer::new(TrainConfig::parse(&text)?)?
                }
            };
            let ds = load_dataset(&data, Some(trainer.config.resize))?;
            timer.stage("load dataset");
            info!("training on {} images", ds.len());
            let result = trainer.fit(&ds.images);
            timer.stage("train");
            Checkpoint::from_trainer(&trainer).save(&out)?;
            timer.stage("save");
            if let Err(e) = result {
                error!("last good checkpoint (epoch {}) saved to {}", trainer.epoch, out.display());
                return Err(e);
            }
            for r in &trainer.trace {
                println!("epoch {:>4} {:<12} loss {:.6}", r.epoch, format!("{:?}", r.phase), r.mean.total);
            }
            println!("checkpoint written to {}", out.display());
        }
        Command::Superpixels { model, image, out_dir } => {
            let t = load_trainer(&model)?;
            let img = load_image(&image)?;
            timer.stage("load");
            let p = t.model.superpixels(&t.store, &img)?;
            timer.stage("superpixels");
            std::fs::create_dir_all(&out_dir)?;
            let name = stem(&image);
            save_image(&out_dir.join(format!("{name}_superpixels.png")), &hard_superpixelate(&img, &p)?)?;
            save_image(
                &out_dir.join(format!("{name}_boundaries.png")),
                &boundary_image(&img, &p.hard_labels())?,
            )?;
            timer.stage("write");
        }
        Command::Infer {
            model,
            image,
            out_dir,
            resize,
        } => {
            let t = load_trainer(&model)?;
            let mut img = load_image(&image)?;
            if let Some(s) = resize {
                img = resize_image(&img, s, s);
            }
            timer.stage("load");
            let pred = t.model.predict(&t.store, &img)?;
            timer.stage("predict");
            let (h, w) = (img.shape()[0], img.shape()[1]);
            std::fs::create_dir_all(&out_dir)?;
            let name = stem(&image);
            save_indexed_png(&out_dir.join(format!("{name}_seg.png")), h, w, &labels_to_u8(&pred.labels)?)?;
            save_image(&out_dir.join(format!("{name}_overlay.png")), &overlay(&img, &pred.labels, 0.5)?)?;
            timer.stage("write");
        }
        Command::Eval { model, data, json } => {
            let t = load_trainer(&model)?;
            let ds = load_dataset(&data, Some(t.config.resize))?;
            let labels = ds
                .labels
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("{} has no labels/ directory", data.display())))?;
            timer.stage("load");
            let report = evaluate(&t.model, &t.store, &ds.images, labels)?;
            timer.stage("evaluate");
            println!("{}", if json { report.to_json() } else { report.to_text() });
        }
        Command::ExportGraph { model, image, out } => {
            let t = load_trainer(&model)?;
            let img = load_image(&image)?;
            timer.stage("load");
            let pred = t.model.predict(&t.store, &img)?;
            let graph = pred
                .graph
                .ok_or_else(|| Error::Invalid("this model variant builds no superpixel graph".into()))?;
            timer.stage("build graph");
            std::fs::write(&out, graph.to_edge_list())?;
            timer.stage("write");
        }
        Command::Gradcheck { seed } => {
            let entries = gradsuite::run(seed)?;
            timer.stage("gradcheck");
            let mut failed = Vec::new();
            for e in &entries {
                println!(
                    "{:<26} rel {:.2e} {}",
                    e.name,
                    e.report.max_rel_error,
                    if e.passes() { "ok" } else { "FAIL" }
                );
                if !e.passes() {
                    failed.push(e.name);
                }
            }
            if !failed.is_empty() {
                return Err(Error::Invalid(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
