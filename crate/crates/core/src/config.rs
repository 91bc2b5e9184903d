//! Training configuration as line-oriented `key = value` text.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use log::warn;

use crate::error::{invalid, Error, Result};
use crate::model::{ModelArch, Variant};
use crate::sp_graph::{Backbone, KnnFeatures};
use crate::superpixel::SpnnLossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// Train the superpixel network to completion, freeze it, then train the
    /// rest.
    Disjoint,
    EndToEnd,
    /// Pre-train the superpixel network, then train everything jointly.
    PretrainThenE2e,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Self::Disjoint => "disjoint",
            Self::EndToEnd => "end_to_end",
            Self::PretrainThenE2e => "pretrain_then_e2e",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(Self::Disjoint),
            "end_to_end" => Ok(Self::EndToEnd),
            "pretrain_then_e2e" => Ok(Self::PretrainThenE2e),
            _ => Err(invalid(format!("unknown scheme `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: String,
    pub scheme: Scheme,
    pub lr_spnn: f64,
    pub lr_gnn: f64,
    pub lr_cnn: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub n_superpixels: usize,
    pub knn_k: usize,
    pub knn_features: KnnFeatures,
    pub backbone: Backbone,
    pub pretrain_epochs: usize,
    pub total_epochs: usize,
    pub seed: u64,
    pub image_channels: usize,
    pub classes: usize,
    pub resize: usize,
    pub width_divisor: usize,
    pub variant: Variant,
    pub hflip: bool,
}

pub const PRESETS: [&str; 5] = ["coco-stuff", "coco-stuff3", "potsdam", "potsdam3", "synthetic"];

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset("coco-stuff").unwrap()
    }
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let coco = Self {
            preset: name.to_string(),
            scheme: Scheme::PretrainThenE2e,
            lr_spnn: 1e-5,
            lr_gnn: 5e-4,
            lr_cnn: 5e-6,
            batch_size: 64,
            alpha: 2.0,
            beta: 5.0,
            eta: 1.0,
            n_superpixels: 200,
            knn_k: 20,
            knn_features: KnnFeatures::Full,
            backbone: Backbone::DiffGcn,
            pretrain_epochs: 10,
            total_epochs: 50,
            seed: 0,
            image_channels: 3,
            classes: 15,
            resize: 128,
            width_divisor: 1,
            variant: Variant::Full,
            hflip: false,
        };
        let c = match name {
            "coco-stuff" => coco,
            "coco-stuff3" => Self {
                lr_cnn: 5e-5,
                classes: 4,
                n_superpixels: 100,
                ..coco
            },
            "potsdam" => Self {
                lr_spnn: 5e-5,
                lr_gnn: 1e-4,
                lr_cnn: 1e-6,
                batch_size: 32,
                alpha: 1.0,
                eta: 0.5,
                n_superpixels: 100,
                image_channels: 4,
                classes: 6,
                ..coco
            },
            "potsdam3" => Self {
                lr_spnn: 5e-5,
                lr_gnn: 5e-4,
                lr_cnn: 5e-6,
                batch_size: 32,
                alpha: 1.0,
                eta: 0.5,
                n_superpixels: 100,
                image_channels: 4,
                classes: 3,
                ..coco
            },
            "synthetic" => Self {
                lr_spnn: 5e-3,
                lr_gnn: 5e-3,
                lr_cnn: 1e-2,
                batch_size: 2,
                n_superpixels: 16,
                knn_k: 5,
                classes: 3,
                resize: 32,
                width_divisor: 16,
                ..coco
            },
            _ => return Err(invalid(format!("unknown preset `{name}`"))),
        };
        Ok(Self {
            preset: name.to_string(),
            ..c
        })
    }

    pub fn arch(&self) -> ModelArch {
        ModelArch {
            image_channels: self.image_channels,
            classes: self.classes,
            n_superpixels: self.n_superpixels,
            knn_k: self.knn_k,
            knn_features: self.knn_features,
            backbone: self.backbone,
            width_divisor: self.width_divisor,
            variant: self.variant,
            weights: SpnnLossWeights {
                alpha: self.alpha,
                beta: self.beta,
                eta: self.eta,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::parse(&text)
    }

    /// Parses config text. A `preset` line selects the base values and must
    /// precede every other key; without one the coco-stuff preset is used.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = Self::parse_silent(text)?;
        for w in cfg.search_space_warnings() {
            warn!("{w}");
        }
        Ok(cfg)
    }

    /// `parse` without logging search-space warnings.
    pub fn parse_silent(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen_other = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line, msg };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if seen_other {
                    return Err(err("`preset` must come before other keys".into()));
                }
                cfg = Self::preset(value).map_err(|e| err(e.to_string()))?;
                continue;
            }
            seen_other = true;
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
        }
        fn positive(key: &str, v: &str) -> std::result::Result<f64, String> {
            let x: f64 = num(key, v)?;
            if x.is_finite() && x > 0.0 {
                Ok(x)
            } else {
                Err(format!("`{key}` must be positive, got {v}"))
            }
        }
        fn nonneg(key: &str, v: &str) -> std::result::Result<f64, String> {
            let x: f64 = num(key, v)?;
            if x.is_finite() && x >= 0.0 {
                Ok(x)
            } else {
                Err(format!("`{key}` must be nonnegative, got {v}"))
            }
        }
        fn at_least(key: &str, v: &str, min: usize) -> std::result::Result<usize, String> {
            let x: usize = num(key, v)?;
            if x >= min {
                Ok(x)
            } else {
                Err(format!("`{key}` must be at least {min}, got {v}"))
            }
        }
        fn parsed<T: FromStr<Err = Error>>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|e: Error| e.to_string())
        }
        match key {
            "scheme" => self.scheme = parsed(value)?,
            "lr_spnn" => self.lr_spnn = positive(key, value)?,
            "lr_gnn" => self.lr_gnn = positive(key, value)?,
            "lr_cnn" => self.lr_cnn = positive(key, value)?,
            "batch_size" => self.batch_size = at_least(key, value, 1)?,
            "alpha" => self.alpha = nonneg(key, value)?,
            "beta" => self.beta = nonneg(key, value)?,
            "eta" | "gamma" => self.eta = nonneg(key, value)?,
            "n_superpixels" => self.n_superpixels = at_least(key, value, 2)?,
            "knn_k" => self.knn_k = at_least(key, value, 1)?,
            "knn_features" => self.knn_features = parsed(value)?,
            "backbone" => self.backbone = parsed(value)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, value)?,
            "total_epochs" => self.total_epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "image_channels" => self.image_channels = at_least(key, value, 1)?,
            "classes" => self.classes = at_least(key, value, 2)?,
            "resize" => self.resize = at_least(key, value, 8)?,
            "width_divisor" => self.width_divisor = at_least(key, value, 1)?,
            "variant" => self.variant = parsed(value)?,
            "hflip" => self.hflip = num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.pretrain_epochs > self.total_epochs {
            return Err(invalid(format!(
                "pretrain_epochs ({}) exceeds total_epochs ({})",
                self.pretrain_epochs, self.total_epochs
            )));
        }
        if self.resize % 2 != 0 {
            return Err(invalid(format!("resize must be even, got {}", self.resize)));
        }
        Ok(())
    }

    /// Values outside the documented search space, one message each.
    pub fn search_space_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, lr) in [("lr_spnn", self.lr_spnn), ("lr_gnn", self.lr_gnn), ("lr_cnn", self.lr_cnn)] {
            if !(1e-6..=1e-4).contains(&lr) {
                out.push(format!("{name} = {lr} is outside [1e-6, 1e-4]"));
            }
        }
        if ![16, 32, 64].contains(&self.batch_size) {
            out.push(format!("batch_size = {} is not one of 16, 32, 64", self.batch_size));
        }
        out
    }

    /// Serializes every key; `parse(emit())` reproduces the config.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("preset", self.preset.clone());
        kv("scheme", self.scheme.name().into());
        kv("lr_spnn", format!("{:e}", self.lr_spnn));
        kv("lr_gnn", format!("{:e}", self.lr_gnn));
        kv("lr_cnn", format!("{:e}", self.lr_cnn));
        kv("batch_size", self.batch_size.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("eta", self.eta.to_string());
        kv("n_superpixels", self.n_superpixels.to_string());
        kv("knn_k", self.knn_k.to_string());
        kv("knn_features", self.knn_features.name().into());
        kv("backbone", self.backbone.name().into());
        kv("pretrain_epochs", self.pretrain_epochs.to_string());
        kv("total_epochs", self.total_epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("image_channels", self.image_channels.to_string());
        kv("classes", self.classes.to_string());
        kv("resize", self.resize.to_string());
        kv("width_divisor", self.width_divisor.to_string());
        kv("variant", self.variant.name().into());
        kv("hflip", self.hflip.to_string());
        s
    }
}
