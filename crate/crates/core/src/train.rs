//! RMSprop training loop with slice-segment batching.
//!
//! Each optimizer step samples a batch of fixed-length slice segments from
//! the training cases, runs the model on the stacked segments, and minimizes
//! voxelwise binary cross-entropy. The learning rate is constant for a
//! warmup span of epochs and then decays linearly to zero at the final
//! epoch. After every epoch the model is scored on the validation split and
//! the highest-DSC weights (earliest epoch on ties) are kept.

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::autodiff::{backward, Tape};
use crate::error::{Error, Result};
use crate::metrics;
use crate::rng;
use crate::synth::VolumeCase;
use crate::tensor::DenseTensor;
use crate::unet::{forward_unet, UNetModel};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// epochs at the full learning rate before linear decay begins
    pub warmup_epochs: usize,
    pub lr: f64,
    /// segments per optimizer step
    pub batch_segments: usize,
    /// slices per segment
    pub segment_slices: usize,
    /// optimizer steps per epoch; 0 means one step per `batch_segments`
    /// training cases, rounded up
    pub steps_per_epoch: usize,
    /// RMSprop decay
    pub rho: f64,
    pub eps: f64,
    /// positive-class weight for the BCE loss; 1 is unweighted
    pub pos_weight: f64,
    pub seed: u64,
    /// stop once validation DSC reaches this value
    pub stop_at_val_dsc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            warmup_epochs: 20,
            lr: 1e-4,
            batch_segments: 12,
            segment_slices: 8,
            steps_per_epoch: 0,
            rho: 0.9,
            eps: 1e-8,
            pos_weight: 1.0,
            seed: 0,
            stop_at_val_dsc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(Error::config(format!(
                "warmup ({}) exceeds total epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_segments == 0 || self.segment_slices == 0 {
            return Err(Error::config("batch_segments and segment_slices must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.rho) || self.eps <= 0.0 {
            return Err(Error::config("need 0 <= rho < 1 and eps > 0"));
        }
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return Err(Error::config("pos_weight must be positive and finite"));
        }
        Ok(())
    }

    /// Constant through the warmup, then linear to zero at `epochs`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.lr
        } else {
            let span = (self.epochs - self.warmup_epochs) as f64;
            if span == 0.0 {
                0.0
            } else {
                self.lr * (self.epochs - epoch) as f64 / span
            }
        }
    }
}

/// One RMSprop update in place: `s <- rho*s + (1-rho)*g^2`,
/// `p <- p - lr * g / (sqrt(s) + eps)`.
pub fn rmsprop_step(
    param: &mut DenseTensor,
    state: &mut DenseTensor,
    grad: &DenseTensor,
    lr: f64,
    rho: f64,
    eps: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.shape() {
        return Err(Error::dim(format!(
            "rmsprop shapes differ: param {:?}, state {:?}, grad {:?}",
            param.shape(),
            state.shape(),
            grad.shape()
        )));
    }
    grad.assert_finite("gradient")?;
    let s = state.data_mut();
    let p = param.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        s[i] = rho * s[i] + (1.0 - rho) * g * g;
        p[i] -= lr * g / (s[i].sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_dsc: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub model: UNetModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
}

/// Stack `batch_segments` sampled segments into an input batch
/// `(b, S, h, w, c)` and a label batch `(b, S, h, w)`. Cases shorter than
/// the segment length are padded by repeating the final slice.
fn sample_batch(
    cases: &[VolumeCase],
    cfg: &TrainConfig,
    r: &mut impl Rng,
    warned_short: &mut bool,
) -> (DenseTensor, DenseTensor) {
    let (h, w, c) = {
        let s = cases[0].input.shape();
        (s[1], s[2], s[3])
    };
    let b = cfg.batch_segments;
    let s_len = cfg.segment_slices;
    let mut input = DenseTensor::zeros(&[b, s_len, h, w, c]);
    let mut labels = DenseTensor::zeros(&[b, s_len, h, w]);
    for bi in 0..b {
        let case = &cases[r.gen_range(0..cases.len())];
        let t = case.input.shape()[0];
        if t < s_len && !*warned_short {
            eprintln!(
                "warning: case '{}' has {t} slices, shorter than segment length {s_len}; padding by repeating the last slice",
                case.id
            );
            *warned_short = true;
        }
        let start = if t > s_len { r.gen_range(0..=t - s_len) } else { 0 };
        for si in 0..s_len {
            let ti = (start + si).min(t - 1);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        input.set(&[bi, si, y, x, ch], case.input.at(&[ti, y, x, ch]));
                    }
                    labels.set(&[bi, si, y, x], case.truth.at(&[ti, y, x]));
                }
            }
        }
    }
    (input, labels)
}

/// Mean DSC of `model` over `cases`.
pub fn eval_dsc(model: &UNetModel, cases: &[VolumeCase]) -> Result<f64> {
    let mut scored = Vec::with_capacity(cases.len());
    for case in cases {
        let pred = model.predict_mask(&case.input)?;
        scored.push((case.id.clone(), metrics::score_case(&pred, &case.truth)?));
    }
    Ok(metrics::score_split(scored)?.mean_dsc)
}

/// Train `model`, returning the weights with the best validation DSC.
/// Emits one log line per epoch on stdout.
pub fn fit(
    mut model: UNetModel,
    train_cases: &[VolumeCase],
    val_cases: &[VolumeCase],
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_cases.is_empty() || val_cases.is_empty() {
        return Err(Error::usage("training needs nonempty train and val splits"));
    }
    let steps = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        train_cases.len().div_ceil(cfg.batch_segments)
    };
    let mut opt_state: Vec<DenseTensor> = model
        .params()
        .iter()
        .map(|(_, t)| DenseTensor::zeros(t.shape()))
        .collect();
    let mut r = rng::rng(cfg.seed, "fit");
    let mut warned_short = false;
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_dsc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            let (input, labels) = sample_batch(train_cases, cfg, &mut r, &mut warned_short);
            let tape = Tape::new();
            let vars = model.vars(&tape, true);
            let logits = forward_unet(tape.constant(input), &vars)?;
            let loss = logits.bce_with_logits_weighted(&labels, cfg.pos_weight)?;
            loss_sum += loss.value().item()?;
            let grads = backward(loss)?;
            for (pi, (_, var)) in vars.entries().iter().enumerate() {
                if let Some(g) = grads.get(*var) {
                    rmsprop_step(
                        &mut model.params_mut()[pi].1,
                        &mut opt_state[pi],
                        g,
                        lr,
                        cfg.rho,
                        cfg.eps,
                    )?;
                }
            }
        }
        let val_dsc = eval_dsc(&model, val_cases)?;
        let mean_loss = loss_sum / steps as f64;
        println!(
            "epoch {epoch:3}  lr {lr:.3e}  loss {mean_loss:.6}  val_dsc {val_dsc:.4}"
        );
        history.push(EpochStats {
            epoch,
            lr,
            mean_loss,
            val_dsc,
        });
        if val_dsc > best_dsc {
            best_dsc = val_dsc;
            best_epoch = epoch;
            best = model.clone();
        }
        if cfg.stop_at_val_dsc.is_some_and(|t| val_dsc >= t) {
            break;
        }
    }
    if history.is_empty() {
        // zero-epoch run: the initial model is the result
        best_dsc = eval_dsc(&model, val_cases)?;
        best = model;
    }
    Ok(TrainResult {
        model: best,
        history,
        best_epoch,
        best_val_dsc: best_dsc,
    })
}
