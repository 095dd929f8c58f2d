use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;

use super::ops::{self, Act, BnCache};
use super::{CaeError, CaeParams, Dense, Role, TrainConfig};
use crate::dsp::Label;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Batch statistics in BN, inverted dropout on the latent.
    Train { dropout: f64 },
    /// Running BN statistics, no dropout.
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub latent: Array2<f64>,
    pub recon: Array3<f64>,
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub recon_mse: f64,
    pub class_ce: f64,
}

#[derive(Debug, Clone)]
pub struct GradOutput {
    pub grads: CaeParams,
    pub loss: LossParts,
    /// Per encoder layer batch mean and biased variance.
    pub bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

struct EncLayer {
    cols: Vec<f64>,
    bn: Option<BnCache>,
    /// Activation output before pooling.
    act: Act,
    arg: Vec<u32>,
}

struct DecLayer {
    cols: Vec<f64>,
    /// Conv output (after leaky ReLU when not the last stage).
    out: Act,
}

struct Tape {
    enc: Vec<EncLayer>,
    flat: Vec<f64>,
    mask: Option<Vec<f64>>,
    zd: Vec<f64>,
    dense_out: Vec<f64>,
    dec: Vec<DecLayer>,
    aux_in: Vec<Vec<f64>>,
}

struct Outputs {
    latent: Vec<f64>,
    recon: Option<Act>,
    logits: Option<Vec<f64>>,
    tape: Option<Tape>,
}

fn to_act(batch: ArrayView3<f64>) -> Act {
    let (b, c, l) = batch.dim();
    let mut a = Act::zeros(c, b, l);
    for bi in 0..b {
        for ci in 0..c {
            let base = a.idx(ci, bi, 0);
            for (li, v) in batch.slice(ndarray::s![bi, ci, ..]).iter().enumerate() {
                a.data[base + li] = *v;
            }
        }
    }
    a
}

fn from_act(a: &Act) -> Array3<f64> {
    Array3::from_shape_fn((a.b, a.c, a.l), |(b, c, l)| a.data[a.idx(c, b, l)])
}

/// `y[B x out] = x[B x in] * W^T + b`
fn dense_forward(d: &Dense, x: &[f64], b: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(b * d.n_out);
    for _ in 0..b {
        y.extend_from_slice(&d.b);
    }
    ops::gemm(b, d.n_in, d.n_out, x, false, &d.w, true, &mut y, 1.0);
    y
}

/// Accumulates `dW`, `db` and returns `dx` when requested.
fn dense_backward(d: &Dense, g: &mut Dense, x: &[f64], dy: &[f64], b: usize, want_dx: bool) -> Option<Vec<f64>> {
    ops::gemm(d.n_out, b, d.n_in, dy, true, x, false, &mut g.w, 1.0);
    for row in dy.chunks(d.n_out) {
        for (gb, v) in g.b.iter_mut().zip(row) {
            *gb += v;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; b * d.n_in];
        ops::gemm(b, d.n_out, d.n_in, dy, false, &d.w, false, &mut dx, 0.0);
        dx
    })
}

fn check_finite(v: &[f64]) -> Result<(), CaeError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CaeError::NonFinite)
    }
}

fn check_batch(p: &CaeParams, batch: &ArrayView3<f64>) -> Result<(), CaeError> {
    let (_, c, l) = batch.dim();
    if c != p.arch.in_channels || l != p.arch.in_len {
        return Err(CaeError::Shape(format!(
            "expected windows {}x{}, got {c}x{l}",
            p.arch.in_channels, p.arch.in_len
        )));
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(CaeError::NonFinite);
    }
    Ok(())
}

fn run<R: Rng + ?Sized>(
    p: &CaeParams,
    x: Act,
    mode: Mode,
    rng: Option<&mut R>,
    full: bool,
    record: bool,
) -> Result<Outputs, CaeError> {
    let slope = p.arch.leaky_slope;
    let b = x.b;
    let mut h = x;
    let mut enc_tape = Vec::new();
    for (conv, bn) in p.enc.iter().zip(&p.bn) {
        let (mut y, cols) = ops::conv_forward(&h, &conv.w, &conv.b, conv.cout, conv.k);
        let cache = match mode {
            Mode::Train { .. } => {
                let (z, cache) = ops::bn_train(&y, &bn.gamma, &bn.beta);
                y = z;
                Some(cache)
            }
            Mode::Infer => {
                ops::bn_infer(&mut y, &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var);
                None
            }
        };
        ops::leaky_inplace(&mut y.data, slope);
        let (pooled, arg) = ops::maxpool(&y, p.arch.pool);
        if record {
            enc_tape.push(EncLayer { cols, bn: cache, act: y, arg });
        }
        h = pooled;
    }
    let (c, l) = (h.c, h.l);
    let mut flat = vec![0.0; b * c * l];
    for bi in 0..b {
        for ci in 0..c {
            let src = h.idx(ci, bi, 0);
            flat[bi * c * l + ci * l..bi * c * l + (ci + 1) * l].copy_from_slice(&h.data[src..src + l]);
        }
    }
    let latent = dense_forward(&p.latent, &flat, b);
    check_finite(&latent)?;
    if !full {
        return Ok(Outputs { latent, recon: None, logits: None, tape: None });
    }

    let mask = match (mode, rng) {
        (Mode::Train { dropout }, Some(rng)) if dropout > 0.0 => {
            let keep = 1.0 - dropout;
            Some(
                (0..latent.len())
                    .map(|_| if keep > 0.0 && rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect::<Vec<_>>(),
            )
        }
        _ => None,
    };
    let zd: Vec<f64> = match &mask {
        Some(m) => latent.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => latent.clone(),
    };

    let mut dense_out = dense_forward(&p.dec_dense, &zd, b);
    ops::leaky_inplace(&mut dense_out, slope);
    let mut d = Act::zeros(c, b, l);
    for bi in 0..b {
        for ci in 0..c {
            let dst = d.idx(ci, bi, 0);
            d.data[dst..dst + l].copy_from_slice(&dense_out[bi * c * l + ci * l..bi * c * l + (ci + 1) * l]);
        }
    }
    let mut dec_tape = Vec::new();
    let n_dec = p.dec.len();
    for (i, conv) in p.dec.iter().enumerate() {
        let u = ops::upsample(&d, p.arch.pool);
        let (mut y, cols) = ops::conv_forward(&u, &conv.w, &conv.b, conv.cout, conv.k);
        if i + 1 < n_dec {
            ops::leaky_inplace(&mut y.data, slope);
        }
        if record {
            dec_tape.push(DecLayer { cols, out: y.clone() });
        }
        d = y;
    }
    let plan = ops::interp_plan(d.l, p.arch.in_len);
    let recon = ops::interp(&d, &plan);
    check_finite(&recon.data)?;

    let mut aux_in = Vec::new();
    let mut a = zd.clone();
    let n_aux = p.aux.len();
    for (i, layer) in p.aux.iter().enumerate() {
        let mut y = dense_forward(layer, &a, b);
        if i + 1 < n_aux {
            ops::leaky_inplace(&mut y, slope);
        }
        if record {
            aux_in.push(std::mem::replace(&mut a, y));
        } else {
            a = y;
        }
    }
    check_finite(&a)?;

    let tape = record.then(|| Tape {
        enc: enc_tape,
        flat,
        mask,
        zd,
        dense_out,
        dec: dec_tape,
        aux_in,
    });
    Ok(Outputs { latent, recon: Some(recon), logits: Some(a), tape })
}

/// Full forward pass over a `[B x C x L]` batch.
pub fn forward<R: Rng + ?Sized>(
    p: &CaeParams,
    batch: ArrayView3<f64>,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOutput, CaeError> {
    check_batch(p, &batch)?;
    let b = batch.dim().0;
    if matches!(mode, Mode::Train { .. }) && b < 2 {
        return Err(CaeError::BatchTooSmall(b));
    }
    let out = run(p, to_act(batch), mode, Some(rng), true, false)?;
    Ok(ForwardOutput {
        latent: Array2::from_shape_vec((b, p.arch.latent_dim), out.latent).unwrap(),
        recon: from_act(&out.recon.unwrap()),
        logits: Array2::from_shape_vec((b, 2), out.logits.unwrap()).unwrap(),
    })
}

/// Latent vector of one window, inference semantics, encoder only.
pub fn encode(p: &CaeParams, window: ArrayView2<f64>) -> Result<Array1<f64>, CaeError> {
    let batch = window.insert_axis(ndarray::Axis(0));
    check_batch(p, &batch)?;
    let out = run::<rand_chacha::ChaCha8Rng>(p, to_act(batch), Mode::Infer, None, false, false)?;
    Ok(Array1::from(out.latent))
}

/// Piecewise-linear region of a train-mode forward pass: the sign of every
/// leaky-ReLU output and every max-pool route. Two parameter sets with equal
/// patterns lie on the same smooth piece of the loss.
#[doc(hidden)]
pub fn activation_pattern(p: &CaeParams, batch: ArrayView3<f64>) -> Result<Vec<u32>, CaeError> {
    check_batch(p, &batch)?;
    let out = run::<rand_chacha::ChaCha8Rng>(p, to_act(batch), Mode::Train { dropout: 0.0 }, None, true, true)?;
    let tape = out.tape.unwrap();
    let signs = |v: &[f64]| v.iter().map(|&x| (x > 0.0) as u32).collect::<Vec<_>>();
    let mut pat = Vec::new();
    for l in &tape.enc {
        pat.extend(signs(&l.act.data));
        pat.extend_from_slice(&l.arg);
    }
    pat.extend(signs(&tape.dense_out));
    for l in &tape.dec[..tape.dec.len() - 1] {
        pat.extend(signs(&l.out.data));
    }
    for a in &tape.aux_in[1..] {
        pat.extend(signs(a));
    }
    Ok(pat)
}

fn log_softmax2(z: &[f64]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    [z[0] - lse, z[1] - lse]
}

/// Reconstruction MSE plus `lambda` times mean cross-entropy.
pub fn loss(
    recon: ArrayView3<f64>,
    input: ArrayView3<f64>,
    logits: ArrayView2<f64>,
    labels: &[Label],
    lambda: f64,
) -> LossParts {
    assert_eq!(recon.dim(), input.dim(), "recon/input shape");
    assert_eq!(logits.nrows(), labels.len(), "logits/labels");
    let recon_mse = recon
        .iter()
        .zip(input.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / recon.len() as f64;
    let class_ce = if labels.is_empty() {
        0.0
    } else {
        logits
            .rows()
            .into_iter()
            .zip(labels)
            .map(|(z, y)| -log_softmax2(&[z[0], z[1]])[y.index()])
            .sum::<f64>()
            / labels.len() as f64
    };
    let total = if lambda == 0.0 { recon_mse } else { recon_mse + lambda * class_ce };
    LossParts { total, recon_mse, class_ce }
}

/// Train-mode forward and analytic backward pass. Dropout follows
/// `cfg.dropout`; the gradient includes `cfg.weight_decay * w` on weights.
pub fn grad<R: Rng + ?Sized>(
    p: &CaeParams,
    batch: ArrayView3<f64>,
    labels: &[Label],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<GradOutput, CaeError> {
    check_batch(p, &batch)?;
    let b = batch.dim().0;
    if b < 2 {
        return Err(CaeError::BatchTooSmall(b));
    }
    if labels.len() != b {
        return Err(CaeError::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    let slope = p.arch.leaky_slope;
    let x = to_act(batch);
    let out = run(p, x.clone(), Mode::Train { dropout: cfg.dropout }, Some(rng), true, true)?;
    let tape = out.tape.unwrap();
    let recon = out.recon.unwrap();
    let logits = out.logits.unwrap();

    let n_rec = recon.data.len() as f64;
    let recon_mse = recon.data.iter().zip(&x.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n_rec;
    let mut class_ce = 0.0;
    let mut dlogits = vec![0.0; b * 2];
    for (i, y) in labels.iter().enumerate() {
        let ls = log_softmax2(&logits[2 * i..2 * i + 2]);
        class_ce -= ls[y.index()];
        for k in 0..2 {
            let target = if k == y.index() { 1.0 } else { 0.0 };
            dlogits[2 * i + k] = cfg.lambda * (ls[k].exp() - target) / b as f64;
        }
    }
    class_ce /= b as f64;
    let total = if cfg.lambda == 0.0 { recon_mse } else { recon_mse + cfg.lambda * class_ce };

    let mut g = p.zeros_like();

    // auxiliary head
    let n_aux = p.aux.len();
    let mut dy = dlogits;
    for i in (0..n_aux).rev() {
        let dx = dense_backward(&p.aux[i], &mut g.aux[i], &tape.aux_in[i], &dy, b, true).unwrap();
        dy = dx;
        if i > 0 {
            // aux_in[i] is the leaky output of layer i-1
            ops::leaky_backward(&mut dy, &tape.aux_in[i], slope);
        }
    }
    let mut dzd = dy;

    // decoder
    let mut dr = Act {
        c: recon.c,
        b,
        l: recon.l,
        data: recon.data.iter().zip(&x.data).map(|(a, b)| 2.0 * (a - b) / n_rec).collect(),
    };
    let last = tape.dec.last().unwrap();
    let plan = ops::interp_plan(last.out.l, p.arch.in_len);
    dr = ops::interp_backward(&dr, &plan, last.out.l);
    let n_dec = p.dec.len();
    for i in (0..n_dec).rev() {
        let layer = &tape.dec[i];
        if i + 1 < n_dec {
            ops::leaky_backward(&mut dr.data, &layer.out.data, slope);
        }
        let conv = &p.dec[i];
        let gc = &mut g.dec[i];
        let du = ops::conv_backward(&dr, &layer.cols, &conv.w, conv.cin, conv.k, &mut gc.w, &mut gc.b, true).unwrap();
        dr = ops::upsample_backward(&du, p.arch.pool);
    }
    let (c, l) = (dr.c, dr.l);
    let mut dd = vec![0.0; b * c * l];
    for bi in 0..b {
        for ci in 0..c {
            let src = dr.idx(ci, bi, 0);
            dd[bi * c * l + ci * l..bi * c * l + (ci + 1) * l].copy_from_slice(&dr.data[src..src + l]);
        }
    }
    ops::leaky_backward(&mut dd, &tape.dense_out, slope);
    let dz_dec = dense_backward(&p.dec_dense, &mut g.dec_dense, &tape.zd, &dd, b, true).unwrap();
    for (a, v) in dzd.iter_mut().zip(&dz_dec) {
        *a += v;
    }
    if let Some(mask) = &tape.mask {
        for (a, m) in dzd.iter_mut().zip(mask) {
            *a *= m;
        }
    }

    // latent and encoder
    let dflat = dense_backward(&p.latent, &mut g.latent, &tape.flat, &dzd, b, true).unwrap();
    let mut dh = Act::zeros(c, b, l);
    for bi in 0..b {
        for ci in 0..c {
            let dst = dh.idx(ci, bi, 0);
            dh.data[dst..dst + l].copy_from_slice(&dflat[bi * c * l + ci * l..bi * c * l + (ci + 1) * l]);
        }
    }
    let mut bn_stats = Vec::with_capacity(p.enc.len());
    for i in (0..p.enc.len()).rev() {
        let layer = &tape.enc[i];
        let mut da = ops::maxpool_backward(&dh, &layer.arg, layer.act.l);
        ops::leaky_backward(&mut da.data, &layer.act.data, slope);
        let cache = layer.bn.as_ref().unwrap();
        let gb = &mut g.bn[i];
        let dconv = ops::bn_backward(&da, cache, &p.bn[i].gamma, &mut gb.gamma, &mut gb.beta);
        let conv = &p.enc[i];
        let gc = &mut g.enc[i];
        if let Some(dx) = ops::conv_backward(&dconv, &layer.cols, &conv.w, conv.cin, conv.k, &mut gc.w, &mut gc.b, i > 0) {
            dh = dx;
        }
        bn_stats.push((cache.mean.clone(), cache.var.clone()));
    }
    bn_stats.reverse();

    if cfg.weight_decay != 0.0 {
        let slots = p.slots();
        let params = p.tensors();
        for ((slot, w), gw) in slots.iter().zip(params).zip(g.tensors_mut()) {
            if slot.role == Role::Weight {
                for (gv, wv) in gw.iter_mut().zip(w) {
                    *gv += cfg.weight_decay * wv;
                }
            }
        }
    }
    for t in g.tensors() {
        check_finite(t)?;
    }
    Ok(GradOutput {
        grads: g,
        loss: LossParts { total, recon_mse, class_ce },
        bn_stats,
    })
}
