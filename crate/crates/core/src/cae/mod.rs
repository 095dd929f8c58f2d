//! Supervised convolutional autoencoder: a 1-D conv encoder compresses a
//! 12 x 250 window into a latent vector, a decoder reconstructs the window,
//! and a small auxiliary head classifies move vs rest from the latent during
//! training only.

mod file;
mod net;
pub mod ops;
pub mod quant;
mod train;

pub use file::{load_model, read_model, save_model, write_model, ModelFile, Tensor, TensorData};
pub use net::{activation_pattern, encode, forward, grad, loss, ForwardOutput, GradOutput, LossParts, Mode};
pub use quant::{forward_quantized, quantize, QuantMode, QuantTensor, QuantizedParams, MIN_CALIBRATION};
pub use train::{augment, train, train_with, EpochRecord, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaeError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("non-finite activation or parameter")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("train mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("degenerate training data: {0}")]
    Degenerate(String),
    #[error("calibration needs at least {required} windows, got {got}")]
    CalibrationTooSmall { got: usize, required: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub in_channels: usize,
    pub in_len: usize,
    pub filters: Vec<usize>,
    pub kernels: Vec<usize>,
    pub pool: usize,
    pub leaky_slope: f64,
    pub latent_dim: usize,
    /// Layer widths of the auxiliary head, starting at the latent.
    pub aux_widths: Vec<usize>,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            in_channels: 12,
            in_len: 250,
            filters: vec![32, 64, 128],
            kernels: vec![7, 5, 3],
            pool: 2,
            leaky_slope: 0.01,
            latent_dim: 64,
            aux_widths: vec![64, 32, 2],
        }
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<(), CaeError> {
        let bad = |m: &str| Err(CaeError::InvalidArch(m.to_string()));
        if self.in_channels == 0 || self.in_len == 0 {
            return bad("empty input shape");
        }
        if self.filters.is_empty() || self.filters.len() != self.kernels.len() {
            return bad("filters and kernels must be non-empty and equally long");
        }
        if self.filters.contains(&0) {
            return bad("zero filter count");
        }
        if self.kernels.iter().any(|k| k % 2 == 0) {
            return bad("kernel sizes must be odd");
        }
        if self.pool == 0 {
            return bad("pool factor must be positive");
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad("leaky slope must be in [0, 1)");
        }
        if self.pooled_lengths().last().copied().unwrap_or(0) == 0 {
            return bad("pooling reduces the sequence to nothing");
        }
        if self.decoded_len() < 2 {
            return bad("decoder output too short to interpolate");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if self.aux_widths.len() < 2
            || self.aux_widths[0] != self.latent_dim
            || *self.aux_widths.last().unwrap() != 2
            || self.aux_widths.contains(&0)
        {
            return bad("aux head must run from latent_dim to 2 classes");
        }
        Ok(())
    }

    /// Sequence length after each conv + pool stage.
    pub fn pooled_lengths(&self) -> Vec<usize> {
        let mut l = self.in_len;
        self.filters
            .iter()
            .map(|_| {
                l /= self.pool;
                l
            })
            .collect()
    }

    pub fn bottleneck_len(&self) -> usize {
        *self.pooled_lengths().last().unwrap()
    }

    pub fn flatten_dim(&self) -> usize {
        self.filters.last().unwrap() * self.bottleneck_len()
    }

    /// Length produced by the upsampling stages before interpolation.
    pub fn decoded_len(&self) -> usize {
        self.bottleneck_len() * self.pool.pow(self.filters.len() as u32)
    }
}

/// Parameter class, used for weight decay and serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight,
    Bias,
    BnScale,
    BnShift,
    BnMean,
    BnVar,
}

impl Role {
    pub fn trainable(self) -> bool {
        !matches!(self, Role::BnMean | Role::BnVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `[cout x cin x k]`
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    /// `[n_out x n_in]`
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaeParams {
    pub arch: ArchDescriptor,
    pub seed: u64,
    pub enc: Vec<Conv>,
    pub bn: Vec<BatchNorm>,
    pub latent: Dense,
    pub dec_dense: Dense,
    pub dec: Vec<Conv>,
    pub aux: Vec<Dense>,
}

/// Name, shape and role of one tensor slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
}

fn conv_init(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Conv {
    let bound = (6.0 / (cin * k) as f64).sqrt();
    Conv {
        cin,
        cout,
        k,
        w: (0..cout * cin * k).map(|_| rng.random_range(-bound..bound)).collect(),
        b: vec![0.0; cout],
    }
}

fn dense_init(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Dense {
    let bound = (6.0 / n_in as f64).sqrt();
    Dense {
        n_in,
        n_out,
        w: (0..n_out * n_in).map(|_| rng.random_range(-bound..bound)).collect(),
        b: vec![0.0; n_out],
    }
}

impl CaeParams {
    pub fn init(arch: &ArchDescriptor, seed: u64) -> Result<Self, CaeError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = Vec::new();
        let mut bn = Vec::new();
        let mut cin = arch.in_channels;
        for (&f, &k) in arch.filters.iter().zip(&arch.kernels) {
            enc.push(conv_init(cin, f, k, &mut rng));
            bn.push(BatchNorm {
                gamma: vec![1.0; f],
                beta: vec![0.0; f],
                running_mean: vec![0.0; f],
                running_var: vec![1.0; f],
            });
            cin = f;
        }
        let flat = arch.flatten_dim();
        let latent = dense_init(flat, arch.latent_dim, &mut rng);
        let dec_dense = dense_init(arch.latent_dim, flat, &mut rng);
        // Decoder mirrors the encoder: stage i maps filters[n-1-i] to the
        // previous filter count, the last stage back to input channels.
        let n = arch.filters.len();
        let dec = (0..n)
            .map(|i| {
                let from = arch.filters[n - 1 - i];
                let to = if i + 1 < n {
                    arch.filters[n - 2 - i]
                } else {
                    arch.in_channels
                };
                conv_init(from, to, arch.kernels[n - 1 - i], &mut rng)
            })
            .collect();
        let aux = arch
            .aux_widths
            .windows(2)
            .map(|w| dense_init(w[0], w[1], &mut rng))
            .collect();
        Ok(Self {
            arch: arch.clone(),
            seed,
            enc,
            bn,
            latent,
            dec_dense,
            dec,
            aux,
        })
    }

    /// All tensor slots in canonical order.
    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, role: Role| out.push(Slot { name, shape, role });
        for (i, (c, _)) in self.enc.iter().zip(&self.bn).enumerate() {
            push(format!("enc.{i}.weight"), vec![c.cout, c.cin, c.k], Role::Weight);
            push(format!("enc.{i}.bias"), vec![c.cout], Role::Bias);
            push(format!("enc.{i}.bn.gamma"), vec![c.cout], Role::BnScale);
            push(format!("enc.{i}.bn.beta"), vec![c.cout], Role::BnShift);
            push(format!("enc.{i}.bn.mean"), vec![c.cout], Role::BnMean);
            push(format!("enc.{i}.bn.var"), vec![c.cout], Role::BnVar);
        }
        for (name, d) in [("latent", &self.latent), ("dec.dense", &self.dec_dense)] {
            push(format!("{name}.weight"), vec![d.n_out, d.n_in], Role::Weight);
            push(format!("{name}.bias"), vec![d.n_out], Role::Bias);
        }
        for (i, c) in self.dec.iter().enumerate() {
            push(format!("dec.{i}.weight"), vec![c.cout, c.cin, c.k], Role::Weight);
            push(format!("dec.{i}.bias"), vec![c.cout], Role::Bias);
        }
        for (i, d) in self.aux.iter().enumerate() {
            push(format!("aux.{i}.weight"), vec![d.n_out, d.n_in], Role::Weight);
            push(format!("aux.{i}.bias"), vec![d.n_out], Role::Bias);
        }
        out
    }

    /// Tensor storage in the same order as [`CaeParams::slots`].
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for (c, b) in self.enc.iter().zip(&self.bn) {
            out.extend([&c.w, &c.b, &b.gamma, &b.beta, &b.running_mean, &b.running_var]);
        }
        for d in [&self.latent, &self.dec_dense] {
            out.extend([&d.w, &d.b]);
        }
        for c in &self.dec {
            out.extend([&c.w, &c.b]);
        }
        for d in &self.aux {
            out.extend([&d.w, &d.b]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for (c, b) in self.enc.iter_mut().zip(self.bn.iter_mut()) {
            out.extend([
                &mut c.w,
                &mut c.b,
                &mut b.gamma,
                &mut b.beta,
                &mut b.running_mean,
                &mut b.running_var,
            ]);
        }
        for d in [&mut self.latent, &mut self.dec_dense] {
            out.extend([&mut d.w, &mut d.b]);
        }
        for c in &mut self.dec {
            out.extend([&mut c.w, &mut c.b]);
        }
        for d in &mut self.aux {
            out.extend([&mut d.w, &mut d.b]);
        }
        out
    }

    /// Same structure with every tensor zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn n_trainable(&self) -> usize {
        self.slots()
            .iter()
            .zip(self.tensors())
            .filter(|(s, _)| s.role.trainable())
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Checks finiteness, positive running variances and shapes.
    pub fn validate(&self) -> Result<(), CaeError> {
        self.arch.validate()?;
        let reference = Self::init(&self.arch, 0)?;
        let ours = self.slots();
        if ours != reference.slots() {
            return Err(CaeError::Shape("parameter layout does not match arch".into()));
        }
        for (slot, t) in ours.iter().zip(self.tensors()) {
            if t.len() != slot.shape.iter().product::<usize>() {
                return Err(CaeError::Shape(format!("{} has {} values", slot.name, t.len())));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(CaeError::NonFinite);
            }
            if slot.role == Role::BnVar && t.iter().any(|v| *v <= 0.0) {
                return Err(CaeError::Shape(format!("{} has non-positive variance", slot.name)));
            }
        }
        Ok(())
    }
}
