//! Layer primitives over channel-major batch activations.
//!
//! An [`Act`] stores `[channels x batch x length]` contiguously so that a 1-D
//! convolution over the whole batch is a single GEMM against an im2col
//! matrix whose columns are `(batch, position)` pairs.

/// Channel-major activation block.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub c: usize,
    pub b: usize,
    pub l: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(c: usize, b: usize, l: usize) -> Self {
        Self {
            c,
            b,
            l,
            data: vec![0.0; c * b * l],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, b: usize, l: usize) -> usize {
        (c * self.b + b) * self.l + l
    }

    /// Per-channel row of length `b * l`.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.b * self.l;
        &self.data[c * n..(c + 1) * n]
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` on row-major slices.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access by the slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// im2col for a stride-1 "same" convolution: rows `(cin, tap)`, columns
/// `(batch, position)`.
pub fn im2col(x: &Act, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let n = x.b * x.l;
    let mut cols = vec![0.0; x.c * k * n];
    for ci in 0..x.c {
        for tap in 0..k {
            let row = &mut cols[(ci * k + tap) * n..(ci * k + tap + 1) * n];
            for bi in 0..x.b {
                let src = &x.data[x.idx(ci, bi, 0)..x.idx(ci, bi, 0) + x.l];
                let dst = &mut row[bi * x.l..(bi + 1) * x.l];
                // dst[li] = src[li + tap - pad]
                let lo = pad.saturating_sub(tap);
                let hi = (x.l + pad).saturating_sub(tap).min(x.l);
                if lo < hi {
                    dst[lo..hi].copy_from_slice(&src[lo + tap - pad..hi + tap - pad]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates column gradients back into `dx`.
pub fn col2im(dcols: &[f64], dx: &mut Act, k: usize) {
    let pad = k / 2;
    let n = dx.b * dx.l;
    let l = dx.l;
    for ci in 0..dx.c {
        for tap in 0..k {
            let row = &dcols[(ci * k + tap) * n..(ci * k + tap + 1) * n];
            for bi in 0..dx.b {
                let base = dx.idx(ci, bi, 0);
                let src = &row[bi * l..(bi + 1) * l];
                let lo = pad.saturating_sub(tap);
                let hi = (l + pad).saturating_sub(tap).min(l);
                for li in lo..hi {
                    dx.data[base + li + tap - pad] += src[li];
                }
            }
        }
    }
}

/// Same-padded convolution; returns the output and the im2col buffer.
pub fn conv_forward(x: &Act, w: &[f64], bias: &[f64], cout: usize, k: usize) -> (Act, Vec<f64>) {
    let cols = im2col(x, k);
    let n = x.b * x.l;
    let mut y = Act::zeros(cout, x.b, x.l);
    for (co, &bv) in bias.iter().enumerate() {
        y.data[co * n..(co + 1) * n].fill(bv);
    }
    gemm(cout, x.c * k, n, w, false, &cols, false, &mut y.data, 1.0);
    (y, cols)
}

/// Returns `dx` (if requested) and accumulates into `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    dy: &Act,
    cols: &[f64],
    w: &[f64],
    cin: usize,
    k: usize,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Act> {
    let cout = dy.c;
    let n = dy.b * dy.l;
    gemm(cout, n, cin * k, &dy.data, false, cols, true, dw, 1.0);
    for (co, d) in db.iter_mut().enumerate() {
        *d += dy.channel(co).iter().sum::<f64>();
    }
    if !want_dx {
        return None;
    }
    let mut dcols = vec![0.0; cin * k * n];
    gemm(cin * k, cout, n, w, true, &dy.data, false, &mut dcols, 0.0);
    let mut dx = Act::zeros(cin, dy.b, dy.l);
    col2im(&dcols, &mut dx, k);
    Some(dx)
}

pub const BN_EPS: f64 = 1e-5;

/// Batch statistics retained for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn bn_train(x: &Act, gamma: &[f64], beta: &[f64]) -> (Act, BnCache) {
    let n = x.b * x.l;
    let mut y = Act::zeros(x.c, x.b, x.l);
    let mut xhat = vec![0.0; x.data.len()];
    let mut inv_std = vec![0.0; x.c];
    let mut means = vec![0.0; x.c];
    let mut vars = vec![0.0; x.c];
    for c in 0..x.c {
        let row = x.channel(c);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + BN_EPS).sqrt();
        for i in 0..n {
            let h = (row[i] - mean) * is;
            xhat[c * n + i] = h;
            y.data[c * n + i] = gamma[c] * h + beta[c];
        }
        inv_std[c] = is;
        means[c] = mean;
        vars[c] = var;
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean: means,
            var: vars,
        },
    )
}

pub fn bn_infer(x: &mut Act, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) {
    let n = x.b * x.l;
    for c in 0..x.c {
        let scale = gamma[c] / (var[c] + BN_EPS).sqrt();
        let shift = beta[c] - mean[c] * scale;
        for v in &mut x.data[c * n..(c + 1) * n] {
            *v = *v * scale + shift;
        }
    }
}

pub fn bn_backward(dy: &Act, cache: &BnCache, gamma: &[f64], dgamma: &mut [f64], dbeta: &mut [f64]) -> Act {
    let n = dy.b * dy.l;
    let nf = n as f64;
    let mut dx = Act::zeros(dy.c, dy.b, dy.l);
    for c in 0..dy.c {
        let d = dy.channel(c);
        let h = &cache.xhat[c * n..(c + 1) * n];
        let sum_d: f64 = d.iter().sum();
        let sum_dh: f64 = d.iter().zip(h).map(|(a, b)| a * b).sum();
        dgamma[c] += sum_dh;
        dbeta[c] += sum_d;
        let k = gamma[c] * cache.inv_std[c] / nf;
        for i in 0..n {
            dx.data[c * n + i] = k * (nf * d[i] - sum_d - h[i] * sum_dh);
        }
    }
    dx
}

#[inline]
pub fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

pub fn leaky_inplace(x: &mut [f64], slope: f64) {
    for v in x {
        *v = leaky(*v, slope);
    }
}

/// Gradient through leaky ReLU given its output (same sign as its input).
pub fn leaky_backward(dy: &mut [f64], y: &[f64], slope: f64) {
    for (d, &o) in dy.iter_mut().zip(y) {
        if o <= 0.0 {
            *d *= slope;
        }
    }
}

/// Non-overlapping max pooling with floor length; returns argmax offsets.
pub fn maxpool(x: &Act, p: usize) -> (Act, Vec<u32>) {
    let lo = x.l / p;
    let mut y = Act::zeros(x.c, x.b, lo);
    let mut arg = vec![0u32; x.c * x.b * lo];
    for c in 0..x.c {
        for b in 0..x.b {
            let src = x.idx(c, b, 0);
            let dst = y.idx(c, b, 0);
            for o in 0..lo {
                let mut best = x.data[src + o * p];
                let mut at = o * p;
                for j in 1..p {
                    let v = x.data[src + o * p + j];
                    if v > best {
                        best = v;
                        at = o * p + j;
                    }
                }
                y.data[dst + o] = best;
                arg[dst + o] = at as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(dy: &Act, arg: &[u32], in_len: usize) -> Act {
    let mut dx = Act::zeros(dy.c, dy.b, in_len);
    for c in 0..dy.c {
        for b in 0..dy.b {
            let src = dy.idx(c, b, 0);
            let dst = dx.idx(c, b, 0);
            for o in 0..dy.l {
                dx.data[dst + arg[src + o] as usize] += dy.data[src + o];
            }
        }
    }
    dx
}

pub fn upsample(x: &Act, p: usize) -> Act {
    let mut y = Act::zeros(x.c, x.b, x.l * p);
    for c in 0..x.c {
        for b in 0..x.b {
            let src = x.idx(c, b, 0);
            let dst = y.idx(c, b, 0);
            for i in 0..x.l {
                let v = x.data[src + i];
                y.data[dst + i * p..dst + (i + 1) * p].fill(v);
            }
        }
    }
    y
}

pub fn upsample_backward(dy: &Act, p: usize) -> Act {
    let mut dx = Act::zeros(dy.c, dy.b, dy.l / p);
    for c in 0..dy.c {
        for b in 0..dy.b {
            let src = dy.idx(c, b, 0);
            let dst = dx.idx(c, b, 0);
            for i in 0..dx.l {
                dx.data[dst + i] = dy.data[src + i * p..src + (i + 1) * p].iter().sum();
            }
        }
    }
    dx
}

/// Align-corners linear interpolation weights: `(left index, right weight)`.
pub fn interp_plan(lin: usize, lout: usize) -> Vec<(usize, f64)> {
    (0..lout)
        .map(|i| {
            if lin == 1 || lout == 1 {
                return (0, 0.0);
            }
            let pos = i as f64 * (lin - 1) as f64 / (lout - 1) as f64;
            let j = (pos.floor() as usize).min(lin - 2);
            (j, pos - j as f64)
        })
        .collect()
}

pub fn interp(x: &Act, plan: &[(usize, f64)]) -> Act {
    let mut y = Act::zeros(x.c, x.b, plan.len());
    for c in 0..x.c {
        for b in 0..x.b {
            let src = x.idx(c, b, 0);
            let dst = y.idx(c, b, 0);
            for (i, &(j, f)) in plan.iter().enumerate() {
                let right = if x.l > 1 { x.data[src + j + 1] } else { 0.0 };
                y.data[dst + i] = x.data[src + j] * (1.0 - f) + right * f;
            }
        }
    }
    y
}

pub fn interp_backward(dy: &Act, plan: &[(usize, f64)], lin: usize) -> Act {
    let mut dx = Act::zeros(dy.c, dy.b, lin);
    for c in 0..dy.c {
        for b in 0..dy.b {
            let src = dy.idx(c, b, 0);
            let dst = dx.idx(c, b, 0);
            for (i, &(j, f)) in plan.iter().enumerate() {
                let g = dy.data[src + i];
                dx.data[dst + j] += g * (1.0 - f);
                if lin > 1 {
                    dx.data[dst + j + 1] += g * f;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Act, w: &[f64], bias: &[f64], cout: usize, k: usize) -> Act {
        let pad = k as isize / 2;
        let mut y = Act::zeros(cout, x.b, x.l);
        for co in 0..cout {
            for b in 0..x.b {
                for l in 0..x.l {
                    let mut acc = bias[co];
                    for ci in 0..x.c {
                        for t in 0..k {
                            let src = l as isize + t as isize - pad;
                            if src >= 0 && (src as usize) < x.l {
                                acc += w[(co * x.c + ci) * k + t] * x.data[x.idx(ci, b, src as usize)];
                            }
                        }
                    }
                    let i = y.idx(co, b, l);
                    y.data[i] = acc;
                }
            }
        }
        y
    }

    fn filled(c: usize, b: usize, l: usize, seed: f64) -> Act {
        let mut a = Act::zeros(c, b, l);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = ((i as f64 + seed) * 0.7311).sin();
        }
        a
    }

    #[test]
    fn gemm_conv_matches_naive() {
        let x = filled(3, 2, 11, 0.3);
        let w: Vec<f64> = (0..4 * 3 * 5).map(|i| (i as f64 * 0.37).cos()).collect();
        let bias = vec![0.1, -0.2, 0.3, 0.0];
        let (y, _) = conv_forward(&x, &w, &bias, 4, 5);
        let z = naive_conv(&x, &w, &bias, 4, 5);
        for (a, b) in y.data.iter().zip(&z.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint() {
        // <im2col(x), g> == <x, col2im(g)>
        let x = filled(2, 3, 9, 1.1);
        let cols = im2col(&x, 3);
        let g: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.13).sin()).collect();
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut dx = Act::zeros(2, 3, 9);
        col2im(&g, &mut dx, 3);
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pooling_floor_and_routes() {
        let x = filled(1, 1, 7, 0.0);
        let (y, arg) = maxpool(&x, 2);
        assert_eq!(y.l, 3);
        let dy = Act { c: 1, b: 1, l: 3, data: vec![1.0, 2.0, 3.0] };
        let dx = maxpool_backward(&dy, &arg, 7);
        assert_eq!(dx.data.iter().sum::<f64>(), 6.0);
        assert_eq!(dx.data[6], 0.0);
    }

    #[test]
    fn interp_endpoints() {
        let x = Act { c: 1, b: 1, l: 4, data: vec![0.0, 1.0, 2.0, 3.0] };
        let plan = interp_plan(4, 7);
        let y = interp(&x, &plan);
        assert_eq!(y.data[0], 0.0);
        assert!((y.data[6] - 3.0).abs() < 1e-12);
        assert!((y.data[3] - 1.5).abs() < 1e-12);
    }
}
