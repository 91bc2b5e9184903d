//! Adam and the training loop for the three schemes.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sgseg_tensor::Tensor;

use crate::config::{Scheme, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::model::{LossParts, Model, Phase, Variant};
use crate::nn::{BnId, Group, Mode, ParamId, ParamStore, Session};
use sgseg_tensor::BatchStats;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update of `theta` in place; `t` is the 1-based
/// step number.
pub fn adam_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        theta[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

/// Adam moments for every parameter and a step counter per group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: [u64; 3],
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: [0; 3],
        }
    }

    /// Applies one step with per-group learning rates. Fails without touching
    /// anything if a gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: [f64; 3]) -> Result<()> {
        if let Some((id, _)) = grads.iter().find(|(_, g)| g.has_non_finite()) {
            return Err(invalid(format!(
                "non-finite gradient for `{}`",
                store.params()[id.index()].name
            )));
        }
        let mut touched = [false; 3];
        for (id, _) in grads {
            touched[store.params()[id.index()].group.index()] = true;
        }
        for g in 0..3 {
            if touched[g] {
                self.steps[g] += 1;
            }
        }
        for (id, grad) in grads {
            let i = id.index();
            let p = &mut store.params_mut()[i];
            let gi = p.group.index();
            adam_update(
                p.value.data_mut(),
                grad.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.steps[gi],
                lr[gi],
            );
        }
        Ok(())
    }
}

/// Mean loss components of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub mean: LossParts,
}

pub fn phase_for_epoch(cfg: &TrainConfig, epoch: usize) -> Phase {
    if cfg.variant == Variant::CnnOnly {
        return Phase::Joint;
    }
    match cfg.scheme {
        Scheme::EndToEnd => Phase::Joint,
        Scheme::Disjoint if epoch < cfg.pretrain_epochs => Phase::Spnn,
        Scheme::Disjoint => Phase::Segmentation,
        Scheme::PretrainThenE2e if epoch < cfg.pretrain_epochs => Phase::Spnn,
        Scheme::PretrainThenE2e => Phase::Joint,
    }
}

/// Worker lanes: `SGSEG_THREADS` if set, otherwise rayon's default.
pub fn worker_threads() -> usize {
    std::env::var("SGSEG_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

struct ElementResult {
    grads: Vec<(ParamId, Tensor)>,
    bn: Vec<(BnId, BatchStats)>,
    parts: LossParts,
}

fn hflip(image: &Tensor) -> Tensor {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    Tensor::from_fn(image.shape(), |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        image.data()[(y * w + (w - 1 - x)) * c + ch]
    })
    .reshaped(&[h, w, c])
    .unwrap()
}

/// Model, parameters, optimizer state and loss trace of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
    pub trace: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, config.arch(), config.seed)?;
        let adam = Adam::new(&store);
        Ok(Self {
            config,
            model,
            store,
            adam,
            epoch: 0,
            trace: Vec::new(),
        })
    }

    fn learning_rates(&self) -> [f64; 3] {
        let mut lr = [0.0; 3];
        lr[Group::Spnn.index()] = self.config.lr_spnn;
        lr[Group::Gnn.index()] = self.config.lr_gnn;
        lr[Group::Cnn.index()] = self.config.lr_cnn;
        lr
    }

    fn run_element(&self, image: &Tensor, phase: Phase) -> Result<ElementResult> {
        let mut s = Session::new(&self.store, Mode::Train);
        for &g in Model::frozen_groups(phase) {
            s = s.freeze(g);
        }
        let out = self.model.forward(&mut s, image, phase)?;
        if !out.parts.total.is_finite() {
            return Err(invalid(format!("loss is {}", out.parts.total)));
        }
        s.graph.backward_scalar(out.total)?;
        Ok(ElementResult {
            grads: s.param_grads(),
            bn: s.take_bn_updates(),
            parts: out.parts,
        })
    }

    /// One optimizer step on a batch. Gradients are averaged over the batch,
    /// summing in element order.
    fn train_batch(&mut self, pool: &rayon::ThreadPool, batch: &[Tensor], phase: Phase) -> Result<LossParts> {
        let results: Vec<Result<ElementResult>> =
            pool.install(|| batch.par_iter().map(|img| self.run_element(img, phase)).collect());
        let mut sum: Vec<Option<Tensor>> = vec![None; self.store.len()];
        let mut parts = LossParts::default();
        let mut bn = Vec::new();
        for r in results {
            let r = r?;
            for (id, g) in r.grads {
                match &mut sum[id.index()] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
            bn.extend(r.bn);
            parts.accumulate(&r.parts);
        }
        let scale = 1.0 / batch.len() as f64;
        let grads: Vec<(ParamId, Tensor)> = sum
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (ParamId::from_index(i), g.map(|x| x * scale))))
            .collect();
        let lr = self.learning_rates();
        self.adam.step(&mut self.store, &grads, lr)?;
        self.store.apply_bn_updates(&bn);
        Ok(parts)
    }

    /// Runs one epoch over `images` in a seeded shuffled order.
    pub fn run_epoch(&mut self, pool: &rayon::ThreadPool, images: &[Tensor]) -> Result<EpochRecord> {
        if images.is_empty() {
            return Err(invalid("training set is empty"));
        }
        let epoch = self.epoch;
        let phase = phase_for_epoch(&self.config, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        let mut total = LossParts::default();
        let bs = self.config.batch_size.max(1);
        for (step, chunk) in order.chunks(bs).enumerate() {
            let batch: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    if self.config.hflip && rng.gen_bool(0.5) {
                        hflip(&images[i])
                    } else {
                        images[i].clone()
                    }
                })
                .collect();
            let parts = self.train_batch(pool, &batch, phase).map_err(|e| Error::Diverged {
                epoch,
                step,
                what: e.to_string(),
            })?;
            debug!("epoch {epoch} step {step}: loss {:.6}", parts.total / chunk.len() as f64);
            total.accumulate(&parts);
        }
        let record = EpochRecord {
            epoch,
            phase,
            mean: total.scaled(1.0 / images.len() as f64),
        };
        info!(
            "epoch {epoch} ({:?}): total {:.6} spnn {:.6} tv {:.6} cnn {:.6}",
            phase, record.mean.total, record.mean.spnn, record.mean.tv, record.mean.cnn
        );
        self.trace.push(record);
        self.epoch += 1;
        Ok(record)
    }

    /// Trains up to `total_epochs`. On divergence the trainer is rolled back
    /// to the end of the last completed epoch and the error is returned.
    pub fn fit(&mut self, images: &[Tensor]) -> Result<()> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(worker_threads())
            .build()
            .map_err(|e| invalid(e.to_string()))?;
        while self.epoch < self.config.total_epochs {
            let good = (self.store.clone(), self.adam.clone());
            if let Err(e) = self.run_epoch(&pool, images) {
                (self.store, self.adam) = good;
                return Err(e);
            }
        }
        Ok(())
    }

    /// Per-epoch mean total losses.
    pub fn loss_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.mean.total).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let (mut t, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adam_update(&mut t, &[1.0], &mut m, &mut v, 1, 0.01);
        assert!((1.0 - t[0] - 0.01 / (1.0 + ADAM_EPS)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut t, mut m, mut v) = ([0.3, -2.0], [0.0; 2], [0.0; 2]);
        for s in 1..=10 {
            adam_update(&mut t, &[0.0, 0.0], &mut m, &mut v, s, 0.1);
        }
        assert_eq!(t, [0.3, -2.0]);
    }

    #[test]
    fn phases_follow_the_scheme() {
        let mut c = TrainConfig::preset("synthetic").unwrap();
        c.pretrain_epochs = 2;
        c.scheme = Scheme::Disjoint;
        assert_eq!(phase_for_epoch(&c, 1), Phase::Spnn);
        assert_eq!(phase_for_epoch(&c, 2), Phase::Segmentation);
        c.scheme = Scheme::PretrainThenE2e;
        assert_eq!(phase_for_epoch(&c, 2), Phase::Joint);
        c.scheme = Scheme::EndToEnd;
        assert_eq!(phase_for_epoch(&c, 0), Phase::Joint);
    }

    #[test]
    fn non_finite_gradients_abort_the_step() {
        let mut store = ParamStore::new();
        let id = store.add("w", Group::Cnn, Tensor::ones(&[2]));
        let mut adam = Adam::new(&store);
        let g = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(adam.step(&mut store, &[(id, g)], [0.1; 3]).is_err());
        assert_eq!(store.get(id).data(), &[1.0, 1.0]);
        assert_eq!(adam.steps, [0; 3]);
    }

    #[test]
    fn hflip_mirrors_columns() {
        let t = Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(hflip(&t).data(), &[3.0, 2.0, 1.0]);
    }
}
