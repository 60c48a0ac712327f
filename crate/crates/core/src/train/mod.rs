//! Supervised training: target encoding, the focal + regression objective and
//! an Adam loop that keeps the snapshot with the lowest validation loss.

pub mod loss;
pub mod optim;
pub mod targets;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{batch_loss, confidence_loss, regression_loss, total_loss, BatchLoss, LossWeights};
pub use optim::{Adam, AdamConfig};
pub use targets::{encode_targets, TargetMaps};

use crate::catalog::PointRecord;
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, R_NEAR_DEFAULT};
use crate::image::Image;
use crate::net::model::Model;
use crate::net::tensor::Scalar;
use crate::skysim::{patchify, simulate, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Grid units.
    pub r_near: f64,
    /// Grid units; defaults to `r_near` (no ignored band).
    pub r_far: Option<f64>,
    pub batch_size: usize,
    /// Defaults to `1 / batch_size`.
    pub n_c: Option<f64>,
    /// Defaults to `1 / batch_size`.
    pub n_r: Option<f64>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            alpha: 0.5,
            gamma: 0.0,
            r_near: R_NEAR_DEFAULT,
            r_far: None,
            batch_size: 128,
            n_c: None,
            n_r: None,
            epochs: 30,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn r_far(&self) -> f64 {
        self.r_far.unwrap_or(self.r_near)
    }

    pub fn weights(&self) -> LossWeights {
        let inv = 1.0 / self.batch_size as f64;
        LossWeights {
            alpha: self.alpha,
            gamma: self.gamma,
            n_c: self.n_c.unwrap_or(inv),
            n_r: self.n_r.unwrap_or(inv),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("gamma", "must be non-negative"));
        }
        if !(self.r_near > 0.0) {
            return Err(Error::config("r_near", "must be positive"));
        }
        if !(self.r_far() >= self.r_near) {
            return Err(Error::config("r_far", "must be >= r_near"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// A normalised patch with its truth catalog in the patch frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patch: Image,
    pub truth: Vec<PointRecord>,
}

/// Cuts simulated images into patches until `count` samples exist. Image `k`
/// is simulated with seed `seed + k`.
pub fn simulated_samples(sim: &SimConfig, count: usize, patch_size: usize, overlap: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(count);
    let mut k = 0u64;
    while out.len() < count {
        let cfg = SimConfig {
            seed: seed.wrapping_add(k),
            ..sim.clone()
        };
        let (image, truth) = simulate(&cfg)?;
        for p in patchify(&image, patch_size, overlap)? {
            if out.len() == count {
                break;
            }
            let (x0, y0) = p.origin;
            let truth = truth.window(x0 as f64, y0 as f64, patch_size as f64, patch_size as f64);
            out.push(Sample { patch: p.image, truth });
        }
        k += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    /// Snapshot with the lowest validation loss.
    pub model: Model<S>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl<S> TrainOutcome<S> {
    pub fn best_val_loss(&self) -> f64 {
        self.history[self.best_epoch - 1].val_loss
    }
}

fn encode_all(samples: &[Sample], grid: &GridSpec, config: &TrainConfig) -> Result<Vec<TargetMaps>> {
    samples
        .iter()
        .map(|s| encode_targets(&s.truth, grid, config.r_near, config.r_far()))
        .collect()
}

/// Per-sample mean of the objective over `samples` in evaluation mode.
pub fn evaluate_loss<S: Scalar>(model: &Model<S>, samples: &[Sample], config: &TrainConfig) -> Result<f64> {
    let targets = encode_all(samples, &model.grid(), config)?;
    let w = config.weights();
    let mut sum = 0.0;
    for (chunk, tchunk) in samples.chunks(config.batch_size).zip(targets.chunks(config.batch_size)) {
        let patches: Vec<&Image> = chunk.iter().map(|s| &s.patch).collect();
        let raw = model.forward_raw(&model.batch_input(&patches)?)?;
        let t: Vec<&TargetMaps> = tchunk.iter().collect();
        sum += batch_loss(&raw, &t, &w)?.total;
    }
    Ok(sum * config.batch_size as f64 / samples.len() as f64)
}

/// Minimises the objective with Adam, shuffling each epoch, and returns the
/// parameter snapshot with minimum validation loss.
pub fn train<S: Scalar>(mut model: Model<S>, train: &[Sample], val: &[Sample], config: &TrainConfig) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::arg("train_set", "training set is empty"));
    }
    if val.is_empty() {
        return Err(Error::arg("val_set", "validation set is empty"));
    }
    if config.epochs == 0 {
        return Err(Error::arg("epochs", "must be at least 1"));
    }
    let grid = model.grid();
    let targets = encode_all(train, &grid, config)?;
    let w = config.weights();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model<S>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let patches: Vec<&Image> = idx.iter().map(|&i| &train[i].patch).collect();
            let t: Vec<&TargetMaps> = idx.iter().map(|&i| &targets[i]).collect();
            let x = model.batch_input(&patches)?;
            let (raw, tape) = model.forward_train(&x, &mut rng)?;
            let loss = batch_loss(&raw, &t, &w)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}, batch {b}: loss {}", loss.total)));
            }
            sum += loss.total;
            model.zero_grad();
            model.backward(tape, &loss.d_logits, &loss.d_offsets);
            adam.step(&mut model);
        }
        let train_loss = sum * config.batch_size as f64 / train.len() as f64;
        let val_loss = evaluate_loss(&model, val, config)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}, validation loss {val_loss}")));
        }
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(v, _, _)| val_loss < *v) {
            best = Some((val_loss, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        out.push_str(&format!("{},{:.9},{:.9}\n", r.epoch, r.train_loss, r.val_loss));
    }
    out
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::NetConfig;
    use crate::net::tensor::Tensor;

    fn toy(dropout_rate: f64) -> NetConfig {
        NetConfig {
            base_depth: 3,
            input_size: 8,
            grid: GridSpec::new(8, 2, 2).unwrap(),
            feature_channels: vec![3, 4],
            stage_blocks: vec![1],
            head_channels: 4,
            pi: 0.1,
            dropout_rate,
        }
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<Sample> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let sx: f64 = rng.random_range(0.0..8.0);
                let sy: f64 = rng.random_range(0.0..8.0);
                let patch = Image::from_fn(8, 8, |x, y| {
                    let d2 = (x as f64 - sx).powi(2) + (y as f64 - sy).powi(2);
                    (-d2 / 2.0).exp() as f32
                })
                .unwrap();
                Sample {
                    patch,
                    truth: vec![PointRecord::new(sx, sy, 1.0)],
                }
            })
            .collect()
    }

    fn flat(model: &Model<f64>) -> Vec<(String, usize, f64, f64)> {
        let mut out = Vec::new();
        model.clone().visit_params(&mut |name, p| {
            for k in 0..p.value.len() {
                out.push((name.to_string(), k, p.value[k], p.grad[k]));
            }
        });
        out
    }

    /// Largest relative error between analytic and central-difference
    /// gradients over parameters whose name starts with `prefix`.
    fn gradient_error(prefix: &str, h: f64) -> f64 {
        let samples = toy_samples(3, 4);
        let config = TrainConfig {
            gamma: 2.0,
            alpha: 0.25,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let grid = toy(0.2).grid;
        let targets = encode_all(&samples, &grid, &config).unwrap();
        let t: Vec<&TargetMaps> = targets.iter().collect();
        let w = config.weights();
        let patches: Vec<&Image> = samples.iter().map(|s| &s.patch).collect();
        let base = Model::<f64>::build(&toy(0.2), 2).unwrap();
        let x: Tensor<f64> = base.batch_input(&patches).unwrap();
        let loss_at = |m: &Model<f64>| {
            let mut m = m.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let (raw, _) = m.forward_train(&x, &mut rng).unwrap();
            batch_loss(&raw, &t, &w).unwrap().total
        };

        let mut model = base.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (raw, tape) = model.forward_train(&x, &mut rng).unwrap();
        let l = batch_loss(&raw, &t, &w).unwrap();
        model.zero_grad();
        model.backward(tape, &l.d_logits, &l.d_offsets);

        let mut worst = 0.0f64;
        let mut checked = 0;
        for (name, k, _, g) in flat(&model).into_iter().filter(|p| p.0.starts_with(prefix)) {
            let shift = |delta: f64| {
                let mut m = base.clone();
                m.visit_params(&mut |n, p| {
                    if n == name {
                        p.value[k] += delta;
                    }
                });
                loss_at(&m)
            };
            let num = (shift(h) - shift(-h)) / (2.0 * h);
            worst = worst.max((num - g).abs() / num.abs().max(g.abs()).max(1e-4));
            checked += 1;
        }
        assert!(checked > 0);
        worst
    }

    #[test]
    fn head_gradients_match_central_differences() {
        let err = gradient_error("head.", 1e-3);
        assert!(err < 1e-2, "worst relative error {err}");
    }

    #[test]
    fn all_gradients_match_at_fine_step() {
        let err = gradient_error("", 1e-5);
        assert!(err < 1e-2, "worst relative error {err}");
    }

    #[test]
    fn history_bookkeeping_and_best_snapshot() {
        let samples = toy_samples(4, 1);
        let config = TrainConfig {
            batch_size: 4,
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train(Model::<f32>::build(&toy(0.2), 0).unwrap(), &samples, &samples, &config).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].epoch, 1);

        let config = TrainConfig {
            epochs: 6,
            learning_rate: 0.05,
            ..config
        };
        let out = train(Model::<f32>::build(&toy(0.2), 0).unwrap(), &samples, &samples[..2], &config).unwrap();
        let min = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss(), min);
        let again = evaluate_loss(&out.model, &samples[..2], &config).unwrap();
        assert!((again - min).abs() < 1e-9);
    }

    #[test]
    fn overfits_a_handful_of_patches() {
        let samples = toy_samples(8, 7);
        let config = TrainConfig {
            batch_size: 8,
            epochs: 200,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let out = train(Model::<f32>::build(&toy(0.0), 3).unwrap(), &samples, &samples, &config).unwrap();
        let first = out.history[0].train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(last < 0.1 * first, "first {first} last {last}");
    }

    #[test]
    fn empty_sets_and_bad_config_are_rejected() {
        let model = Model::<f32>::build(&toy(0.0), 0).unwrap();
        let s = toy_samples(1, 0);
        assert!(matches!(train(model.clone(), &[], &s, &TrainConfig::default()), Err(Error::InvalidArgument { .. })));
        let bad = TrainConfig {
            r_far: Some(0.1),
            ..TrainConfig::default()
        };
        assert!(matches!(train(model, &s, &s, &bad), Err(Error::Config { .. })));
    }

    #[test]
    fn simulated_samples_are_windowed() {
        let sim = SimConfig {
            image_size: 64,
            n_sources: 10,
            ..SimConfig::default()
        };
        let s = simulated_samples(&sim, 10, 32, 0, 5).unwrap();
        assert_eq!(s.len(), 10);
        for sample in &s {
            assert!(sample.truth.iter().all(|p| p.x >= 0.0 && p.x < 32.0 && p.y >= 0.0 && p.y < 32.0));
        }
        assert_eq!(s, simulated_samples(&sim, 10, 32, 0, 5).unwrap());
    }

    #[test]
    fn history_csv_layout() {
        let csv = history_csv(&[EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.25,
        }]);
        assert_eq!(csv, "epoch,train_loss,val_loss\n1,0.500000000,0.250000000\n");
    }
}
