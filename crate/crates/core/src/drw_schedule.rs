//! Two-stage deferred re-weighting (DRW) training.
//!
//! Stage 1 (`epoch < switch_epoch`) minimizes the plain mean loss over each
//! mini-batch. Stage 2 multiplies every example's loss by a per-class weight
//! derived from the inverse class count, usually at a smaller learning rate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, sgd_update, Network, OptimizerState};
use crate::error::{Error, Result};
use crate::imbalance_data::LabeledDataset;
use crate::margin_losses::{
    cross_entropy, focal_loss, ldam_loss, mm_loss, ClassCounts, LossResult, MarginParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNormMode {
    /// `w_y = 1 / n_y`.
    RawInverse,
    /// `1 / n_y` rescaled so the mean weight over the mini-batch is 1.
    #[default]
    BatchMeanOne,
    /// Inverse effective number `(1 - β) / (1 - β^{n_y})`, batch-mean normalized.
    CbEffective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Every example once per epoch, in a seeded random order.
    #[default]
    Shuffle,
    /// Examples drawn with probability proportional to `1 / n_y` for the whole run.
    ClassBalanced,
    /// `Shuffle` before the switch epoch, `ClassBalanced` after it.
    DeferredClassBalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// First epoch of the re-weighted stage; `epochs` disables it.
    pub switch_epoch: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// `(epoch, factor)`: from `epoch` on, the rate is multiplied by `factor`.
    pub decay_points: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_norm_mode: WeightNormMode,
    pub cb_beta: f64,
    pub sampler: Sampler,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            switch_epoch: 160,
            base_lr: 0.1,
            warmup_epochs: 5,
            decay_points: vec![(160, 0.01), (180, 0.01)],
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 128,
            seed: 0,
            weight_norm_mode: WeightNormMode::BatchMeanOne,
            cb_beta: 0.9999,
            sampler: Sampler::Shuffle,
        }
    }
}

impl TrainConfig {
    /// Short-run variant: switch at `0.8·T`, decays ×0.1 at `0.8·T` and `0.9·T`,
    /// one warm-up epoch.
    pub fn desk(epochs: usize) -> Self {
        let switch = (0.8 * epochs as f64).round() as usize;
        let second = (0.9 * epochs as f64).round() as usize;
        Self {
            epochs,
            switch_epoch: switch,
            warmup_epochs: 1.min(switch.saturating_sub(1)),
            decay_points: vec![(switch, 0.1), (second, 0.1)],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.switch_epoch > self.epochs {
            return bad(format!(
                "switch_epoch {} exceeds epochs {}",
                self.switch_epoch, self.epochs
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad(format!("base_lr must be >= 0, got {}", self.base_lr));
        }
        if let Some(&(first, _)) = self.decay_points.iter().min_by_key(|p| p.0) {
            if self.warmup_epochs >= first && self.warmup_epochs > 0 {
                return bad(format!(
                    "warmup_epochs {} must end before the first decay at {first}",
                    self.warmup_epochs
                ));
            }
        }
        if let Some(&(e, f)) = self
            .decay_points
            .iter()
            .find(|(_, f)| !(*f > 0.0 && *f <= 1.0))
        {
            return bad(format!(
                "decay factor at epoch {e} must lie in (0, 1], got {f}"
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.cb_beta) {
            return bad(format!("cb_beta must lie in [0, 1), got {}", self.cb_beta));
        }
        Ok(())
    }

    pub fn stage(&self, epoch: usize) -> u8 {
        if epoch < self.switch_epoch {
            1
        } else {
            2
        }
    }
}

/// Linear warm-up `base·(e+1)/warmup`, then `base` times every decay factor
/// whose epoch has been reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    cfg.decay_points
        .iter()
        .filter(|(at, _)| epoch >= *at)
        .fold(cfg.base_lr, |lr, (_, factor)| lr * factor)
}

/// Per-class loss multipliers for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochWeights {
    pub per_class: Vec<f64>,
}

impl EpochWeights {
    pub fn get(&self, class: usize) -> f64 {
        self.per_class[class]
    }
}

pub fn class_weights(
    epoch: usize,
    cfg: &TrainConfig,
    counts: &ClassCounts,
    batch_labels: &[usize],
) -> Result<EpochWeights> {
    let k = counts.num_classes();
    if cfg.stage(epoch) == 1 {
        return Ok(EpochWeights {
            per_class: vec![1.0; k],
        });
    }
    let raw: Vec<f64> = match cfg.weight_norm_mode {
        WeightNormMode::RawInverse | WeightNormMode::BatchMeanOne => {
            counts.as_slice().iter().map(|&n| 1.0 / n as f64).collect()
        }
        WeightNormMode::CbEffective => counts
            .as_slice()
            .iter()
            .map(|&n| (1.0 - cfg.cb_beta) / (1.0 - cfg.cb_beta.powi(n as i32)))
            .collect(),
    };
    if cfg.weight_norm_mode == WeightNormMode::RawInverse {
        return Ok(EpochWeights { per_class: raw });
    }
    if batch_labels.is_empty() {
        return Err(Error::Config(
            "batch-normalized class weights need a non-empty batch".to_string(),
        ));
    }
    if let Some(&y) = batch_labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidInput(format!(
            "batch label {y} out of range for {k} classes"
        )));
    }
    let mean = batch_labels.iter().map(|&y| raw[y]).sum::<f64>() / batch_labels.len() as f64;
    Ok(EpochWeights {
        per_class: raw.iter().map(|w| w / mean).collect(),
    })
}

/// The per-example loss optimized by [`train`].
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    CrossEntropy,
    Focal { gamma: f64 },
    Ldam { constant: Option<f64> },
    MaxMargin(MarginParams),
}

impl LossSpec {
    pub fn evaluate(&self, z: &[f64], y: usize, counts: &ClassCounts) -> Result<LossResult> {
        match self {
            LossSpec::CrossEntropy => cross_entropy(z, y),
            LossSpec::Focal { gamma } => focal_loss(z, y, *gamma),
            LossSpec::Ldam { constant } => ldam_loss(z, y, counts, *constant),
            LossSpec::MaxMargin(params) => mm_loss(z, y, params, Some(counts)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub stage: u8,
    /// Mean of `w_y · loss` over the examples seen this epoch.
    pub mean_loss: f64,
    /// Fraction of examples misclassified at the time they were visited.
    pub train_error: f64,
}

fn epoch_order(
    data: &LabeledDataset,
    by_class: &[Vec<usize>],
    balanced: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    if balanced {
        (0..data.len())
            .map(|_| {
                let members = &by_class[rng.random_range(0..by_class.len())];
                members[rng.random_range(0..members.len())]
            })
            .collect()
    } else {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        order
    }
}

/// Mini-batch SGD over `cfg.epochs` epochs with the two-stage weighting.
pub fn train(
    data: &LabeledDataset,
    mut model: Network,
    loss: &LossSpec,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochLog>)> {
    cfg.validate()?;
    if data.num_classes != model.num_classes {
        return Err(Error::InvalidInput(format!(
            "dataset has {} classes, model has {}",
            data.num_classes, model.num_classes
        )));
    }
    if data.dim != model.input_dim() {
        return Err(Error::InvalidInput(format!(
            "dataset dimension {} does not match model input {}",
            data.dim,
            model.input_dim()
        )));
    }
    if cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let counts = data.per_class_counts()?;
    if let LossSpec::MaxMargin(params) = loss {
        params.validate()?;
        let negative = params.negative_delta_classes(&counts);
        if !negative.is_empty() {
            log::warn!("effective delta is negative for classes {negative:?}; margins exceed 1");
        }
    }
    let mut by_class = vec![Vec::new(); data.num_classes];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(&model, cfg.momentum, cfg.weight_decay);
    let mut grads = model.zeros_like();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let balanced = match cfg.sampler {
            Sampler::Shuffle => false,
            Sampler::ClassBalanced => true,
            Sampler::DeferredClassBalanced => cfg.stage(epoch) == 2,
        };
        let order = epoch_order(data, &by_class, balanced, &mut rng);
        let mut loss_sum = 0.0;
        let mut mistakes = 0usize;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let weights = class_weights(epoch, cfg, &counts, &labels)?;
            let inv_m = 1.0 / batch.len() as f64;
            grads.tensors_mut().into_iter().for_each(|t| t.fill(0.0));

            for &i in batch {
                let (x, y) = data.example(i);
                let (z, cache) = model.forward(x)?;
                let result = loss.evaluate(&z, y, &counts).map_err(|e| Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    message: e.to_string(),
                })?;
                if !result.value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_idx,
                        message: format!("loss is {}", result.value),
                    });
                }
                if argmax(&z) != y {
                    mistakes += 1;
                }
                let w = weights.get(y);
                loss_sum += w * result.value;
                let upstream: Vec<f64> = result.grad.iter().map(|g| g * w * inv_m).collect();
                model.accumulate_backward(&cache, &upstream, &mut grads)?;
            }

            sgd_update(&mut model, &grads, &mut state, lr).map_err(|e| Error::Diverged {
                epoch,
                batch: batch_idx,
                message: e.to_string(),
            })?;
        }

        logs.push(EpochLog {
            epoch,
            lr,
            stage: cfg.stage(epoch),
            mean_loss: loss_sum / order.len() as f64,
            train_error: mistakes as f64 / order.len() as f64,
        });
    }
    Ok((model, logs))
}
