use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::net::{self, Mode};
use super::{ArchDescriptor, CaeError, CaeParams};
use crate::dsp::Label;

const BN_MOMENTUM: f64 = 0.1;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the cross-entropy term.
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Dropout probability on the latent vector.
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Additive noise std as a fraction of each channel's std.
    pub noise_scale: f64,
    pub channel_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr: 1e-3,
            weight_decay: 1e-4,
            dropout: 0.25,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            noise_scale: 0.05,
            channel_dropout: 0.1,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CaeError> {
        let bad = |m: &str| Err(CaeError::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.noise_scale >= 0.0) {
            return bad("weight decay and noise scale must be >= 0");
        }
        for p in [self.dropout, self.channel_dropout] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must be in [0, 1]");
            }
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Gaussian noise scaled per channel plus random whole-channel dropout.
pub fn augment<R: Rng + ?Sized>(window: ArrayView2<f64>, rng: &mut R, cfg: &TrainConfig) -> Array2<f64> {
    let mut out = window.to_owned();
    let n = window.ncols() as f64;
    for mut row in out.rows_mut() {
        if cfg.channel_dropout > 0.0 && rng.random::<f64>() < cfg.channel_dropout {
            row.fill(0.0);
            continue;
        }
        if cfg.noise_scale > 0.0 {
            let mean = row.sum() / n;
            let sd = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            let sigma = cfg.noise_scale * sd;
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += sigma * z;
            }
        }
    }
    out
}

fn stack(windows: &[Array2<f64>], idx: &[usize]) -> Array3<f64> {
    let views: Vec<_> = idx.iter().map(|&i| windows[i].view()).collect();
    ndarray::stack(Axis(0), &views).expect("windows share one shape")
}

/// Mean total loss and aux-head accuracy in inference mode.
fn evaluate(p: &CaeParams, windows: &[Array2<f64>], labels: &[Label], idx: &[usize], lambda: f64) -> Result<(f64, f64), CaeError> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = stack(windows, chunk);
        let out = net::forward(p, batch.view(), Mode::Infer, &mut rng)?;
        let ys: Vec<Label> = chunk.iter().map(|&i| labels[i]).collect();
        let l = net::loss(out.recon.view(), batch.view(), out.logits.view(), &ys, lambda);
        loss_sum += l.total * chunk.len() as f64;
        for (z, y) in out.logits.rows().into_iter().zip(&ys) {
            let pred = if z[1] > z[0] { Label::Move } else { Label::Rest };
            correct += (pred == *y) as usize;
        }
    }
    let n = idx.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

fn check_split(labels: &[Label], idx: &[usize], name: &str) -> Result<(), CaeError> {
    let moves = idx.iter().filter(|&&i| labels[i] == Label::Move).count();
    if moves == 0 || moves == idx.len() {
        return Err(CaeError::Degenerate(format!("{name} split has a single class")));
    }
    Ok(())
}

/// Adam with early stopping on validation loss. Returns the parameters of
/// the best validation epoch and the per-epoch history.
pub fn train(
    arch: &ArchDescriptor,
    windows: &[Array2<f64>],
    labels: &[Label],
    split: (&[usize], &[usize]),
    cfg: &TrainConfig,
) -> Result<(CaeParams, Vec<EpochRecord>), CaeError> {
    train_with(arch, windows, labels, split, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    arch: &ArchDescriptor,
    windows: &[Array2<f64>],
    labels: &[Label],
    split: (&[usize], &[usize]),
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(CaeParams, Vec<EpochRecord>), CaeError> {
    cfg.validate()?;
    if windows.len() != labels.len() {
        return Err(CaeError::Shape("windows and labels differ in length".into()));
    }
    let (train_idx, val_idx) = split;
    if train_idx.iter().chain(val_idx).any(|&i| i >= windows.len()) {
        return Err(CaeError::Shape("split index out of range".into()));
    }
    check_split(labels, train_idx, "train")?;
    check_split(labels, val_idx, "validation")?;

    let mut params = CaeParams::init(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_cafe);
    let trainable: Vec<bool> = params.slots().iter().map(|s| s.role.trainable()).collect();
    let mut m = params.zeros_like();
    let mut v = params.zeros_like();
    let mut step = 0i32;

    let mut order = train_idx.to_vec();
    let mut best: Option<(f64, CaeParams)> = None;
    let mut history = Vec::new();
    let mut wait = 0usize;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let augmented: Vec<Array2<f64>> = chunk
                .iter()
                .map(|&i| augment(windows[i].view(), &mut rng, cfg))
                .collect();
            let views: Vec<_> = augmented.iter().map(|w| w.view()).collect();
            let batch = ndarray::stack(Axis(0), &views).expect("uniform windows");
            let ys: Vec<Label> = chunk.iter().map(|&i| labels[i]).collect();
            let out = net::grad(&params, batch.view(), &ys, cfg, &mut rng)?;
            loss_sum += out.loss.total * chunk.len() as f64;
            seen += chunk.len();

            step += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(step);
            let bc2 = 1.0 - ADAM_BETA2.powi(step);
            let grads = out.grads.tensors();
            let ms = m.tensors_mut();
            let vs = v.tensors_mut();
            for ((((w, g), mt), vt), &t) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs).zip(&trainable) {
                if !t {
                    continue;
                }
                for j in 0..w.len() {
                    mt[j] = ADAM_BETA1 * mt[j] + (1.0 - ADAM_BETA1) * g[j];
                    vt[j] = ADAM_BETA2 * vt[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                    w[j] -= cfg.lr * (mt[j] / bc1) / ((vt[j] / bc2).sqrt() + ADAM_EPS);
                }
            }
            // conv stage i runs at the length left by i poolings
            let mut stage_len = vec![params.arch.in_len];
            stage_len.extend(params.arch.pooled_lengths());
            for ((bn, (mean, var)), len) in params.bn.iter_mut().zip(&out.bn_stats).zip(stage_len) {
                let n_bn = (chunk.len() * len) as f64;
                for j in 0..mean.len() {
                    bn.running_mean[j] = (1.0 - BN_MOMENTUM) * bn.running_mean[j] + BN_MOMENTUM * mean[j];
                    let unbiased = var[j] * n_bn / (n_bn - 1.0);
                    bn.running_var[j] = (1.0 - BN_MOMENTUM) * bn.running_var[j] + BN_MOMENTUM * unbiased;
                }
            }
        }
        let (val_loss, val_accuracy) = evaluate(&params, windows, labels, val_idx, cfg.lambda)?;
        let rec = EpochRecord {
            epoch,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            val_loss,
            val_accuracy,
        };
        on_epoch(&rec);
        history.push(rec);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
            wait = 0;
        } else {
            wait += 1;
            if wait > cfg.patience {
                break;
            }
        }
    }
    let (_, best) = best.expect("at least one epoch");
    Ok((best, history))
}
