//! Reduced-precision export of the encoder.
//!
//! INT8 folds batch norm into the encoder convolutions, stores every weight
//! tensor as symmetric per-tensor int8 and quantizes layer inputs to u8 with
//! affine parameters taken from calibration min/max. Products are
//! accumulated as integers (emulated exactly in f64, all partial sums stay
//! far below 2^53) and rescaled once per output.

use half::f16;
use ndarray::{Array1, ArrayView2};

use super::ops::{self, Act, BN_EPS};
use super::{ArchDescriptor, CaeError, CaeParams};

pub const MIN_CALIBRATION: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Int8,
    Fp16,
}

impl QuantMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantMode::Int8 => "int8",
            QuantMode::Fp16 => "fp16",
        }
    }
}

impl std::str::FromStr for QuantMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "int8" => Ok(QuantMode::Int8),
            "fp16" => Ok(QuantMode::Fp16),
            other => Err(format!("unknown precision {other:?}, expected int8 or fp16")),
        }
    }
}

/// Symmetric int8 tensor, `w ~= scale * (q - zero_point)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantTensor {
    pub fn symmetric(values: &[f64], shape: Vec<usize>) -> Self {
        let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if max > 0.0 { (max / 127.0) as f32 } else { 1.0 };
        let s = scale as f64;
        let data = values
            .iter()
            .map(|v| (v / s).round().clamp(-127.0, 127.0) as i8)
            .collect();
        Self { shape, data, scale, zero_point: 0 }
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let s = self.scale as f64;
        self.data.iter().map(|&q| s * (q as i32 - self.zero_point) as f64).collect()
    }
}

/// Affine u8 quantization of a layer input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActQuant {
    pub min: f32,
    pub max: f32,
    pub scale: f32,
    pub zero_point: i32,
}

impl ActQuant {
    pub fn from_range(min: f64, max: f64) -> Self {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let scale = if hi > lo { ((hi - lo) / 255.0) as f32 } else { 1.0 };
        let zero_point = (-lo / scale as f64).round().clamp(0.0, 255.0) as i32;
        Self { min: lo as f32, max: hi as f32, scale, zero_point }
    }

    /// Integer offset `q - zero_point` of one value.
    #[inline]
    fn code(&self, v: f64) -> f64 {
        let q = (v / self.scale as f64).round() + self.zero_point as f64;
        q.clamp(0.0, 255.0) - self.zero_point as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub weight: QuantTensor,
    /// Folded bias, stored at f32 precision.
    pub bias: Vec<f64>,
    pub input: ActQuant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Int8Encoder {
    /// Encoder convolutions with batch norm folded in.
    pub convs: Vec<QuantLayer>,
    pub latent: QuantLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedParams {
    pub mode: QuantMode,
    pub arch: ArchDescriptor,
    pub int8: Option<Int8Encoder>,
    /// Every tensor rounded through half precision.
    pub fp16: Option<CaeParams>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Float conv weights and biases with inference batch norm folded in.
fn folded(p: &CaeParams) -> Vec<(Vec<f64>, Vec<f64>)> {
    p.enc
        .iter()
        .zip(&p.bn)
        .map(|(c, bn)| {
            let per = c.cin * c.k;
            let mut w = c.w.clone();
            let mut b = c.b.clone();
            for o in 0..c.cout {
                let s = bn.gamma[o] / (bn.running_var[o] + BN_EPS).sqrt();
                for v in &mut w[o * per..(o + 1) * per] {
                    *v *= s;
                }
                b[o] = (b[o] - bn.running_mean[o]) * s + bn.beta[o];
            }
            (w, b)
        })
        .collect()
}

fn window_act(window: ArrayView2<f64>) -> Act {
    let (c, l) = window.dim();
    let mut a = Act::zeros(c, 1, l);
    for (dst, v) in a.data.iter_mut().zip(window.iter()) {
        *dst = *v;
    }
    a
}

/// Float encoder on folded weights, reporting every quantized layer input.
fn folded_encode(p: &CaeParams, layers: &[(Vec<f64>, Vec<f64>)], window: ArrayView2<f64>, mut probe: impl FnMut(usize, &[f64])) {
    let mut h = window_act(window);
    for (i, ((w, b), c)) in layers.iter().zip(&p.enc).enumerate() {
        probe(i, &h.data);
        let (mut y, _) = ops::conv_forward(&h, w, b, c.cout, c.k);
        ops::leaky_inplace(&mut y.data, p.arch.leaky_slope);
        h = ops::maxpool(&y, p.arch.pool).0;
    }
    // with B = 1 the channel-major layout is already the flatten order
    probe(layers.len(), &h.data);
}

pub fn quantize(p: &CaeParams, calibration: &[ArrayView2<f64>], mode: QuantMode) -> Result<QuantizedParams, CaeError> {
    p.validate()?;
    match mode {
        QuantMode::Fp16 => {
            let mut q = p.clone();
            for t in q.tensors_mut() {
                for v in t.iter_mut() {
                    *v = f16::from_f64(*v).to_f64();
                }
            }
            Ok(QuantizedParams { mode, arch: p.arch.clone(), int8: None, fp16: Some(q) })
        }
        QuantMode::Int8 => {
            if calibration.len() < MIN_CALIBRATION {
                return Err(CaeError::CalibrationTooSmall { got: calibration.len(), required: MIN_CALIBRATION });
            }
            let layers = folded(p);
            let n = layers.len();
            let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); n + 1];
            for w in calibration {
                if w.dim() != (p.arch.in_channels, p.arch.in_len) || w.iter().any(|v| !v.is_finite()) {
                    return Err(CaeError::Shape("calibration window shape or values invalid".into()));
                }
                folded_encode(p, &layers, *w, |i, data| {
                    for &v in data {
                        ranges[i].0 = ranges[i].0.min(v);
                        ranges[i].1 = ranges[i].1.max(v);
                    }
                });
            }
            let convs = layers
                .iter()
                .zip(&p.enc)
                .zip(&ranges)
                .map(|(((w, b), c), &(lo, hi))| QuantLayer {
                    weight: QuantTensor::symmetric(w, vec![c.cout, c.cin, c.k]),
                    bias: b.iter().map(|&v| round_f32(v)).collect(),
                    input: ActQuant::from_range(lo, hi),
                })
                .collect();
            let (lo, hi) = ranges[n];
            let latent = QuantLayer {
                weight: QuantTensor::symmetric(&p.latent.w, vec![p.latent.n_out, p.latent.n_in]),
                bias: p.latent.b.iter().map(|&v| round_f32(v)).collect(),
                input: ActQuant::from_range(lo, hi),
            };
            Ok(QuantizedParams {
                mode,
                arch: p.arch.clone(),
                int8: Some(Int8Encoder { convs, latent }),
                fp16: None,
            })
        }
    }
}

fn quantize_act(h: &Act, q: &ActQuant) -> Act {
    Act {
        c: h.c,
        b: h.b,
        l: h.l,
        data: h.data.iter().map(|&v| q.code(v)).collect(),
    }
}

/// Latent vector of one window through the reduced-precision encoder.
pub fn forward_quantized(q: &QuantizedParams, window: ArrayView2<f64>) -> Result<Array1<f64>, CaeError> {
    let arch = &q.arch;
    if window.dim() != (arch.in_channels, arch.in_len) {
        return Err(CaeError::Shape(format!("expected {}x{} window", arch.in_channels, arch.in_len)));
    }
    if window.iter().any(|v| !v.is_finite()) {
        return Err(CaeError::NonFinite);
    }
    match q.mode {
        QuantMode::Fp16 => super::encode(q.fp16.as_ref().expect("fp16 tensors"), window),
        QuantMode::Int8 => {
            let net = q.int8.as_ref().expect("int8 tensors");
            let mut h = window_act(window);
            for (layer, &k) in net.convs.iter().zip(&arch.kernels) {
                let x = quantize_act(&h, &layer.input);
                let wq: Vec<f64> = layer.weight.data.iter().map(|&v| v as f64).collect();
                let cout = layer.weight.shape[0];
                let (mut y, _) = ops::conv_forward(&x, &wq, &vec![0.0; cout], cout, k);
                let s = layer.weight.scale as f64 * layer.input.scale as f64;
                for o in 0..cout {
                    for v in &mut y.data[o * y.l..(o + 1) * y.l] {
                        *v = *v * s + layer.bias[o];
                    }
                }
                ops::leaky_inplace(&mut y.data, arch.leaky_slope);
                h = ops::maxpool(&y, arch.pool).0;
            }
            let layer = &net.latent;
            let x = quantize_act(&h, &layer.input);
            let s = layer.weight.scale as f64 * layer.input.scale as f64;
            let n_in = layer.weight.shape[1];
            let out: Vec<f64> = layer
                .weight
                .data
                .chunks(n_in)
                .zip(&layer.bias)
                .map(|(row, b)| {
                    let acc: i64 = row.iter().zip(&x.data).map(|(&w, &a)| w as i64 * a as i64).sum();
                    acc as f64 * s + b
                })
                .collect();
            if out.iter().any(|v| !v.is_finite()) {
                return Err(CaeError::NonFinite);
            }
            Ok(Array1::from(out))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn windows(n: usize, seed: u64) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Array2::from_shape_fn((12, 250), |_| rng.random_range(-2.0..2.0)))
            .collect()
    }

    #[test]
    fn int8_step_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..1000).map(|_| rng.random_range(-0.7..0.7)).collect();
        let q = QuantTensor::symmetric(&w, vec![1000]);
        let back = q.dequantize();
        let s = q.scale as f64;
        for (a, b) in w.iter().zip(&back) {
            assert!((a - b).abs() <= s / 2.0 * (1.0 + 1e-6));
        }
    }

    #[test]
    fn fp16_ulp_bound() {
        let p = CaeParams::init(&ArchDescriptor::default(), 1).unwrap();
        let q = quantize(&p, &[], QuantMode::Fp16).unwrap();
        for (a, b) in p.tensors().into_iter().zip(q.fp16.as_ref().unwrap().tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= x.abs() * 2f64.powi(-10) + 2f64.powi(-24));
            }
        }
    }

    #[test]
    fn calibration_minimum() {
        let p = CaeParams::init(&ArchDescriptor::default(), 1).unwrap();
        let ws = windows(10, 0);
        let views: Vec<_> = ws.iter().map(|w| w.view()).collect();
        assert!(matches!(
            quantize(&p, &views, QuantMode::Int8),
            Err(CaeError::CalibrationTooSmall { got: 10, required: 128 })
        ));
    }

    #[test]
    fn folded_float_matches_encode() {
        let mut p = CaeParams::init(&ArchDescriptor::default(), 9).unwrap();
        for (i, bn) in p.bn.iter_mut().enumerate() {
            for (j, v) in bn.running_var.iter_mut().enumerate() {
                *v = 0.5 + 0.1 * ((i + j) % 5) as f64;
            }
            for (j, m) in bn.running_mean.iter_mut().enumerate() {
                *m = 0.05 * (j % 3) as f64;
            }
        }
        let w = windows(1, 4).pop().unwrap();
        let layers = folded(&p);
        let mut flat = Vec::new();
        folded_encode(&p, &layers, w.view(), |i, d| {
            if i == layers.len() {
                flat = d.to_vec();
            }
        });
        let mut z = p.latent.b.clone();
        for (o, zo) in z.iter_mut().enumerate() {
            *zo += p.latent.w[o * flat.len()..(o + 1) * flat.len()].iter().zip(&flat).map(|(a, b)| a * b).sum::<f64>();
        }
        let reference = super::super::encode(&p, w.view()).unwrap();
        for (a, b) in z.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn int8_latent_tracks_float() {
        let p = CaeParams::init(&ArchDescriptor::default(), 5).unwrap();
        let ws = windows(130, 6);
        let views: Vec<_> = ws.iter().map(|w| w.view()).collect();
        let q = quantize(&p, &views, QuantMode::Int8).unwrap();
        let w = &ws[0];
        let f = super::super::encode(&p, w.view()).unwrap();
        let i = forward_quantized(&q, w.view()).unwrap();
        assert_eq!(i.len(), 64);
        let num: f64 = f.iter().zip(i.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = f.iter().map(|a| a * a).sum();
        assert!((num / den).sqrt() < 0.1, "relative error {}", (num / den).sqrt());
    }
}
