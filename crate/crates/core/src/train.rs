//! Training loop: per-sample tapes, gradients summed in sample order, Adam
//! with cosine annealing.

use std::time::Instant;

use picat_tensor::{Adam, AdamConfig, ParamGrads, Scalar, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Pair, PairedDataset};
use crate::error::{Error, Result};
use crate::eval::{self, Aggregate};
use crate::image::{PatchSpec, SrgbImage};
use crate::model::PiCat;
use crate::perturb::{perturb, PerturbKind, PerturbSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr: f64,
    pub seed: u64,
    /// Validation interval in steps (0 disables intermediate validation).
    pub val_every: u64,
    pub smoothing_window: usize,
    /// Spatial noise (0–255 scale) added to training inputs.
    pub train_noise: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            batch_size: 8,
            total_steps: 500,
            lr: 2e-4,
            seed: 1,
            val_every: 100,
            smoothing_window: 50,
            train_noise: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.batch_size == 0 || self.smoothing_window == 0 {
            return Err(Error::Config(format!("patch, batch and window sizes must be positive: {self:?}")));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if let Some(s) = self.train_noise {
            if !(s >= 0.0) {
                return Err(Error::Config(format!("train noise must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: u64,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub smoothed_start: f64,
    pub smoothed_end: f64,
    pub validation: Vec<ValPoint>,
    /// Degraded input vs target on the validation set.
    pub input: Option<Aggregate>,
    /// Enhanced output vs target on the validation set after training.
    pub output: Option<Aggregate>,
    pub elapsed_secs: f64,
}

impl TrainReport {
    pub fn psnr_gain_db(&self) -> Option<f64> {
        Some(self.output.as_ref()?.mean_psnr_db - self.input.as_ref()?.mean_psnr_db)
    }
}

/// Mean of the first and of the last `window` values.
pub fn smoothed_ends(losses: &[f64], window: usize) -> (f64, f64) {
    if losses.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let w = window.clamp(1, losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..w]), mean(&losses[losses.len() - w..]))
}

struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
        }
    }

    /// Next index of a sequence of shuffled epochs.
    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Crop (same patch for both images) and optional input noise.
fn prepare<T: Scalar>(pair: &Pair<T>, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(SrgbImage<T>, SrgbImage<T>)> {
    let (h, w) = pair.low.dims();
    let (mut low, high) = if (h, w) == (cfg.patch_size, cfg.patch_size) {
        (pair.low.clone(), pair.high.clone())
    } else {
        let patch = PatchSpec::random(h, w, cfg.patch_size, rng)?;
        (pair.low.crop(&patch)?, pair.high.crop(&patch)?)
    };
    if let Some(sigma) = cfg.train_noise {
        let spec = PerturbSpec {
            kind: PerturbKind::Spatial,
            sigma,
            seed: rng.gen(),
        };
        low = perturb(&low, &spec)?;
    }
    Ok((low, high))
}

fn sample_grads<T: Scalar>(
    model: &PiCat<T>,
    low: &SrgbImage<T>,
    high: &SrgbImage<T>,
    step: u64,
) -> Result<(f64, ParamGrads<T>)> {
    let run = || -> Result<(f64, ParamGrads<T>)> {
        let mut s = model.session();
        let loss = model.loss(&mut s, low, high)?;
        let value = s.value(loss).item().widen();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        Ok((value, s.backward(loss)?))
    };
    run().map_err(|e| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss { step },
        other => other,
    })
}

/// Trains `model` in place. `on_step` sees every step's loss. The result is
/// bit-identical for a fixed seed whatever the worker count: samples are
/// drawn sequentially and per-sample gradients are summed in batch order.
pub fn train<T: Scalar>(
    model: &mut PiCat<T>,
    data: &PairedDataset<T>,
    val: Option<&PairedDataset<T>>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    if cfg.patch_size > data.min_side() {
        return Err(Error::Config(format!(
            "patch size {} exceeds the smallest training image side {}",
            cfg.patch_size,
            data.min_side()
        )));
    }
    let start = Instant::now();
    let mut adam = Adam::new(AdamConfig::new(cfg.lr, cfg.total_steps), &model.params);
    let mut sampler = Sampler::new(data.len(), cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7a11));
    let mut losses = Vec::with_capacity(cfg.total_steps as usize);
    let mut validation = Vec::new();
    let input = val.map(|v| eval::input_aggregate(v)).transpose()?;

    for step in 0..cfg.total_steps {
        let batch = (0..cfg.batch_size)
            .map(|_| prepare(&data.pairs()[sampler.next()], cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let m: &PiCat<T> = model;
        let results = batch
            .par_iter()
            .map(|(low, high)| sample_grads(m, low, high, step))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = ParamGrads::zeros_like(&model.params);
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grads.add(g);
        }
        let inv = 1.0 / cfg.batch_size as f64;
        grads.scale(inv);
        loss *= inv;
        let log = StepLog {
            step,
            loss,
            lr: adam.current_lr(),
        };
        model.params.accumulate(&grads)?;
        adam.step(&mut model.params)?;
        losses.push(loss);
        on_step(&log);

        if let Some(v) = val {
            if cfg.val_every > 0 && (step + 1) % cfg.val_every == 0 && step + 1 < cfg.total_steps {
                let agg = eval::enhance_aggregate(model, v)?;
                validation.push(ValPoint {
                    step: step + 1,
                    psnr_db: agg.mean_psnr_db,
                    ssim: agg.mean_ssim,
                });
            }
        }
    }
    let output = val.map(|v| eval::enhance_aggregate(model, v)).transpose()?;
    if let Some(o) = &output {
        validation.push(ValPoint {
            step: cfg.total_steps,
            psnr_db: o.mean_psnr_db,
            ssim: o.mean_ssim,
        });
    }
    let (smoothed_start, smoothed_end) = smoothed_ends(&losses, cfg.smoothing_window);
    Ok(TrainReport {
        losses,
        smoothed_start,
        smoothed_end,
        validation,
        input,
        output,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_windows() {
        let l: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(smoothed_ends(&l, 3), (1.0, 8.0));
        assert_eq!(smoothed_ends(&l, 50), (4.5, 4.5));
    }

    #[test]
    fn sampler_visits_every_index_per_epoch() {
        let mut s = Sampler::new(5, 9);
        let mut seen: Vec<usize> = (0..5).map(|_| s.next()).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }
}
