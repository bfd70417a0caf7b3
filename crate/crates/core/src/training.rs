//! Patch-based first-order training loop shared by the learned stages.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers::Module;
use crate::nn::ops::l1_loss;
use crate::nn::optim::{adam_step, AdamConfig};
use crate::nn::tensor::Tensor;
use crate::nn::unet::{Conditioning, SkipGate, UNet};

/// Optimization schedule of one training stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate is divided by `lr_decay_divisor` every
    /// `lr_decay_every` epochs.
    pub lr_decay_every: usize,
    pub lr_decay_divisor: f64,
    /// Side of the square random crops (rounded down to the network's size
    /// multiple and clamped to the image).
    pub patch_size: usize,
    /// Optimizer steps per epoch; `None` means one pass over the pairs.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 2,
            lr: 1e-3,
            lr_decay_every: 20,
            lr_decay_divisor: 10.0,
            patch_size: 64,
            steps_per_epoch: None,
            seed: 0,
        }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.patch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::param("batch size, patch size and decay period must be positive"));
        }
        if !(self.lr_decay_divisor >= 1.0) {
            return Err(Error::param("learning-rate decay divisor must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch / self.lr_decay_every) as i32;
        self.lr / self.lr_decay_divisor.powi(k)
    }
}

/// Logged training losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    /// Mean batch loss of every epoch.
    pub epochs: Vec<f64>,
    /// Loss of every optimizer step.
    pub steps: Vec<f64>,
}

impl LossCurve {
    /// Exponential moving average of the step losses.
    pub fn smoothed(&self, decay: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps.len());
        let mut acc = None;
        for &l in &self.steps {
            let v = match acc {
                None => l,
                Some(a) => decay * a + (1.0 - decay) * l,
            };
            acc = Some(v);
            out.push(v);
        }
        out
    }
}

/// One full-frame training example: network input, residual target and
/// conditioning.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: Tensor,
    pub target: Tensor,
    pub cond: Conditioning,
}

/// Copies the `size_h × size_w` window at `(row, col)` of a batch-1 tensor.
pub fn crop_tensor(t: &Tensor, row: usize, col: usize, size_h: usize, size_w: usize) -> Tensor {
    let c = t.channels();
    Tensor::from_fn([1, size_h, size_w, c], |_, y, x, k| t.at(0, row + y, col + x, k))
}

/// Draws random aligned crops of a batch of samples.
pub(crate) fn sample_batch(
    samples: &[TrainSample],
    indices: &[usize],
    patch: usize,
    multiple: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor, Vec<Conditioning>)> {
    // One patch size per batch so the crops stack.
    let min_h = indices.iter().map(|&i| samples[i].input.height()).min().unwrap_or(0);
    let min_w = indices.iter().map(|&i| samples[i].input.width()).min().unwrap_or(0);
    let ph = patch.min(min_h) / multiple * multiple;
    let pw = patch.min(min_w) / multiple * multiple;
    if ph == 0 || pw == 0 {
        return Err(Error::dim(format!("images too small for crops of multiple {multiple}")));
    }
    let mut xs = Vec::with_capacity(indices.len());
    let mut ys = Vec::with_capacity(indices.len());
    let mut conds = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &samples[i];
        let row = rng.random_range(0..=s.input.height() - ph);
        let col = rng.random_range(0..=s.input.width() - pw);
        xs.push(crop_tensor(&s.input, row, col, ph, pw));
        ys.push(crop_tensor(&s.target, row, col, ph, pw));
        conds.push(s.cond);
    }
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?, conds))
}

/// Trains `net` to map each sample's input to its residual target under the
/// exact L1 loss with Adam.
pub fn train_residual_net<G: SkipGate>(
    net: &mut UNet<G>,
    samples: &[TrainSample],
    schedule: &StageSchedule,
) -> Result<LossCurve> {
    schedule.validate()?;
    if samples.is_empty() {
        return Err(Error::degenerate("no training samples"));
    }
    let multiple = net.config().size_multiple();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut curve = LossCurve::default();
    let steps = schedule
        .steps_per_epoch
        .unwrap_or_else(|| samples.len().div_ceil(schedule.batch_size))
        .max(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    for epoch in 0..schedule.epochs {
        let cfg = AdamConfig {
            lr: schedule.lr_at(epoch),
            ..AdamConfig::default()
        };
        let mut epoch_loss = 0.0;
        for _ in 0..steps {
            let mut batch = Vec::with_capacity(schedule.batch_size);
            while batch.len() < schedule.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let (x, y, cond) = sample_batch(samples, &batch, schedule.patch_size, multiple, &mut rng)?;
            net.zero_grad();
            let pred = net.forward(&x, &cond)?;
            let (loss, grad) = l1_loss(&pred, &y, None)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss became {loss} in epoch {epoch}")));
            }
            net.backward(&grad)?;
            adam_step(&mut net.parameters_mut(), &cfg)?;
            curve.steps.push(loss);
            epoch_loss += loss;
        }
        let mean = epoch_loss / steps as f64;
        log::debug!("epoch {epoch}: lr {:.1e} loss {mean:.6}", cfg.lr);
        curve.epochs.push(mean);
    }
    Ok(curve)
}
