//! Offline artifact removal with symmetric FastICA.
//!
//! The data path is `X -> (X - mean) -> whitener -> unmix -> sources`. Scores
//! flag components that look like blinks (slow, frontal) or muscle/cardiac
//! activity (spiky), and [`remove_components`] reconstructs the channels with
//! those sources zeroed.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::Recording;

pub const FRONTAL: [&str; 4] = ["F7", "F3", "F4", "F8"];

#[derive(Debug, Error, PartialEq)]
pub enum IcaError {
    #[error("covariance is rank deficient (eigenvalue ratio {ratio:e})")]
    RankDeficient { ratio: f64 },
    #[error("need at least {required} samples, got {got}")]
    TooFewSamples { got: usize, required: usize },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("requested {k} components from {channels} channels")]
    BadComponentCount { k: usize, channels: usize },
    #[error("FastICA did not converge within {max_iter} iterations")]
    NoConvergence { max_iter: usize },
    #[error("component index {index} out of range for {k} components")]
    BadIndex { index: usize, k: usize },
}

/// Zero-mean, identity-covariance data plus the transform that produced it.
#[derive(Debug, Clone)]
pub struct Whitened {
    pub data: Array2<f64>,
    pub mean: Array1<f64>,
    pub whitener: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmixingModel {
    pub mean: Vec<f64>,
    /// `c x c` symmetric whitening matrix.
    pub whitener: Vec<Vec<f64>>,
    /// `k x c` orthonormal rows applied to whitened data.
    pub unmix: Vec<Vec<f64>>,
    /// `c x k` pseudo-inverse of `unmix * whitener`.
    pub mixing: Vec<Vec<f64>>,
    pub k: usize,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Neural,
    Artifact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub index: usize,
    pub kurtosis: f64,
    pub low_freq_ratio: f64,
    pub spatial_frontal_ratio: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreThresholds {
    /// Excess kurtosis above which a component is treated as spiky artifact.
    pub kurtosis: f64,
    pub low_freq_hz: f64,
    pub low_freq_ratio: f64,
    pub frontal_ratio: f64,
}

impl Default for ScoreThresholds {
    fn default() -> Self {
        Self {
            kurtosis: 8.0,
            low_freq_hz: 4.0,
            low_freq_ratio: 0.6,
            frontal_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaConfig {
    pub k: Option<usize>,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub thresholds: ScoreThresholds,
    /// Explicit rejection list; replaces the automatic verdicts when set.
    pub reject: Option<Vec<usize>>,
    /// Fit on every `decim`-th sample; the unmixing is applied to all.
    #[serde(default = "one")]
    pub decim: usize,
}

fn one() -> usize {
    1
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self {
            k: None,
            tol: 1e-6,
            max_iter: 400,
            seed: 0,
            thresholds: ScoreThresholds::default(),
            reject: None,
            decim: 1,
        }
    }
}

fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn to_array(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let ncols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

/// Symmetric inverse square root via eigendecomposition.
fn inv_sqrt_sym(m: &DMatrix<f64>) -> (DMatrix<f64>, f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.max(f64::MIN_POSITIVE).sqrt()));
    (&eig.eigenvectors * d * eig.eigenvectors.transpose(), min, max)
}

/// Centres each row and applies the symmetric (ZCA) whitener
/// `E diag(1/sqrt(lambda)) E^T` of the sample covariance.
pub fn whiten(x: ArrayView2<f64>) -> Result<Whitened, IcaError> {
    let (c, n) = x.dim();
    if n < 10 * c {
        return Err(IcaError::TooFewSamples {
            got: n,
            required: 10 * c,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(IcaError::NonFinite);
    }
    let mean: Array1<f64> = x.rows().into_iter().map(|r| r.sum() / n as f64).collect();
    let mut centred = x.to_owned();
    for (mut row, m) in centred.rows_mut().into_iter().zip(mean.iter()) {
        row -= *m;
    }
    let cov = centred.dot(&centred.t()) / n as f64;
    let (w, min, max) = inv_sqrt_sym(&to_dmatrix(cov.view()));
    if max <= 0.0 || min < 1e-12 * max {
        return Err(IcaError::RankDeficient {
            ratio: if max > 0.0 { min / max } else { 0.0 },
        });
    }
    let whitener = to_array(&w);
    let data = whitener.dot(&centred);
    Ok(Whitened {
        data,
        mean,
        whitener,
    })
}

fn symmetric_decorrelate(w: &DMatrix<f64>) -> DMatrix<f64> {
    let (s, _, _) = inv_sqrt_sym(&(w * w.transpose()));
    s * w
}

/// Symmetric fixed-point FastICA with the log-cosh (tanh) contrast.
///
/// A run that hits `max_iter` still returns its best iterate with
/// `converged == false`; see [`UnmixingModel::require_converged`].
pub fn fast_ica(
    white: &Whitened,
    k: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<UnmixingModel, IcaError> {
    let (c, n) = white.data.dim();
    if k == 0 || k > c {
        return Err(IcaError::BadComponentCount { k, channels: c });
    }
    // With fewer components than channels the search runs in the top-k
    // principal subspace; the ZCA whitener's smallest eigenvalues mark it.
    let basis = (k < c).then(|| {
        let eig = SymmetricEigen::new(to_dmatrix(white.whitener.view()));
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        DMatrix::from_fn(k, c, |i, j| eig.eigenvectors[(j, order[i])])
    });
    let z = match &basis {
        Some(e) => e * to_dmatrix(white.data.view()),
        None => to_dmatrix(white.data.view()),
    };
    let zt = z.transpose();
    let c = z.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = DMatrix::from_fn(k, c, |_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelate(&init);

    let mut best = (f64::INFINITY, w.clone());
    let mut converged = false;
    let mut iterations = 0;
    let inv_n = 1.0 / n as f64;
    for it in 1..=max_iter {
        iterations = it;
        let y = &w * &z;
        let g = y.map(f64::tanh);
        let g_prime_mean: Vec<f64> = (0..k)
            .map(|i| g.row(i).iter().map(|v| 1.0 - v * v).sum::<f64>() * inv_n)
            .collect();
        let mut next = (&g * &zt) * inv_n;
        for i in 0..k {
            for j in 0..c {
                next[(i, j)] -= g_prime_mean[i] * w[(i, j)];
            }
        }
        let next = symmetric_decorrelate(&next);
        let lim = (0..k)
            .map(|i| (1.0 - next.row(i).dot(&w.row(i)).abs()).abs())
            .fold(0.0, f64::max);
        w = next;
        if lim < best.0 {
            best = (lim, w.clone());
        }
        if lim < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        w = best.1;
    }
    if let Some(e) = &basis {
        w = &w * e;
    }

    let whitener = to_dmatrix(white.whitener.view());
    let full = &w * &whitener;
    let gram = &full * full.transpose();
    let gram_inv = gram
        .clone()
        .cholesky()
        .map(|ch| ch.inverse())
        .unwrap_or_else(|| gram.pseudo_inverse(1e-14).expect("gram pseudo-inverse"));
    let mixing = full.transpose() * gram_inv;

    Ok(UnmixingModel {
        mean: white.mean.to_vec(),
        whitener: to_rows(&whitener),
        unmix: to_rows(&w),
        mixing: to_rows(&mixing),
        k,
        converged,
        iterations,
    })
}

impl UnmixingModel {
    pub fn require_converged(self, max_iter: usize) -> Result<Self, IcaError> {
        if self.converged {
            Ok(self)
        } else {
            Err(IcaError::NoConvergence { max_iter })
        }
    }

    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    /// `unmix * whitener`, mapping centred channels to sources.
    pub fn full_unmixing(&self) -> Array2<f64> {
        to_array(&(from_rows(&self.unmix) * from_rows(&self.whitener)))
    }

    pub fn mixing_matrix(&self) -> Array2<f64> {
        to_array(&from_rows(&self.mixing))
    }

    fn centred(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (mut row, m) in out.rows_mut().into_iter().zip(&self.mean) {
            row -= *m;
        }
        out
    }

    pub fn sources(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.full_unmixing().dot(&self.centred(x))
    }
}

fn excess_kurtosis(s: &[f64]) -> f64 {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let (m2, m4) = s.iter().fold((0.0, 0.0), |(a, b), v| {
        let d = (v - mean) * (v - mean);
        (a + d, b + d * d)
    });
    let (m2, m4) = (m2 / n, m4 / n);
    if m2 <= 0.0 {
        return 0.0;
    }
    m4 / (m2 * m2) - 3.0
}

fn low_freq_ratio(s: &[f64], fs: f64, cutoff_hz: f64, planner: &mut FftPlanner<f64>) -> f64 {
    let n = s.len();
    let mean = s.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex64> = s.iter().map(|v| Complex64::new(v - mean, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let (mut low, mut total) = (0.0, 0.0);
    for (bin, v) in buf.iter().enumerate().take(n / 2 + 1).skip(1) {
        let p = v.norm_sqr();
        total += p;
        if (bin as f64) * fs / (n as f64) < cutoff_hz {
            low += p;
        }
    }
    if total > 0.0 {
        low / total
    } else {
        0.0
    }
}

/// Scores every component of `model` on the channel data it was fitted to.
pub fn score_components<S: AsRef<str>>(
    model: &UnmixingModel,
    x: ArrayView2<f64>,
    fs: f64,
    channels: &[S],
    thresholds: &ScoreThresholds,
) -> Vec<ComponentScore> {
    let sources = model.sources(x);
    let mixing = model.mixing_matrix();
    let frontal_rows: Vec<usize> = channels
        .iter()
        .enumerate()
        .filter(|(_, c)| FRONTAL.contains(&c.as_ref()))
        .map(|(i, _)| i)
        .collect();
    let mut planner = FftPlanner::new();
    (0..model.k)
        .map(|j| {
            let s = sources.row(j).to_vec();
            let kurtosis = excess_kurtosis(&s);
            let lfr = low_freq_ratio(&s, fs, thresholds.low_freq_hz, &mut planner);
            let col = mixing.column(j);
            let total: f64 = col.iter().map(|v| v.abs()).sum();
            let frontal: f64 = frontal_rows.iter().map(|&r| col[r].abs()).sum();
            let sfr = if total > 0.0 { frontal / total } else { 0.0 };
            let artifact = kurtosis > thresholds.kurtosis
                || (lfr > thresholds.low_freq_ratio && sfr > thresholds.frontal_ratio);
            ComponentScore {
                index: j,
                kurtosis,
                low_freq_ratio: lfr,
                spatial_frontal_ratio: sfr,
                verdict: if artifact {
                    Verdict::Artifact
                } else {
                    Verdict::Neural
                },
            }
        })
        .collect()
}

/// Reconstructs `x` with the `rejected` sources zeroed.
pub fn remove_components(
    model: &UnmixingModel,
    x: ArrayView2<f64>,
    rejected: &[usize],
) -> Result<Array2<f64>, IcaError> {
    if let Some(&index) = rejected.iter().find(|&&i| i >= model.k) {
        return Err(IcaError::BadIndex { index, k: model.k });
    }
    let mut sources = model.sources(x);
    for &r in rejected {
        sources.row_mut(r).fill(0.0);
    }
    let mut out = model.mixing_matrix().dot(&sources);
    for (mut row, m) in out.rows_mut().into_iter().zip(&model.mean) {
        row += *m;
    }
    Ok(out)
}

/// Outcome of cleaning one recording.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanReport {
    pub scores: Vec<ComponentScore>,
    pub rejected: Vec<usize>,
    pub converged: bool,
}

/// Fit, score and remove in one step over a whole recording.
pub fn clean_recording(rec: &Recording, cfg: &IcaConfig) -> Result<(Recording, CleanReport), IcaError> {
    let mut white = whiten(rec.data.view())?;
    if cfg.decim > 1 {
        white.data = white.data.slice(ndarray::s![.., ..;cfg.decim]).to_owned();
    }
    let k = cfg.k.unwrap_or(rec.n_channels());
    let model = fast_ica(&white, k, cfg.tol, cfg.max_iter, cfg.seed)?;
    let scores = score_components(
        &model,
        rec.data.view(),
        rec.sample_rate,
        &rec.channels,
        &cfg.thresholds,
    );
    let rejected: Vec<usize> = match &cfg.reject {
        Some(list) => list.clone(),
        None => scores
            .iter()
            .filter(|s| s.verdict == Verdict::Artifact)
            .map(|s| s.index)
            .collect(),
    };
    let data = remove_components(&model, rec.data.view(), &rejected)?;
    let mut cleaned = rec.clone();
    cleaned.data = data;
    Ok((
        cleaned,
        CleanReport {
            scores,
            rejected,
            converged: model.converged,
        },
    ))
}

/// Amari distance between the global system `P = W A` and a scaled
/// permutation; 0 means perfect separation.
pub fn amari_index(p: ArrayView2<f64>) -> f64 {
    let k = p.nrows();
    assert_eq!(k, p.ncols(), "global system must be square");
    if k < 2 {
        return 0.0;
    }
    let a = p.mapv(f64::abs);
    let rows: f64 = a
        .rows()
        .into_iter()
        .map(|r| r.sum() / r.fold(0.0f64, |m, v| m.max(*v)) - 1.0)
        .sum();
    let cols: f64 = a
        .columns()
        .into_iter()
        .map(|c| c.sum() / c.fold(0.0f64, |m, v| m.max(*v)) - 1.0)
        .sum();
    (rows + cols) / (2.0 * k as f64 * (k as f64 - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use rand::Rng;
    use std::f64::consts::PI;

    fn cov(z: &Array2<f64>) -> Array2<f64> {
        let n = z.ncols() as f64;
        let mut c = z.to_owned();
        for mut row in c.rows_mut() {
            let m = row.sum() / n;
            row -= m;
        }
        c.dot(&c.t()) / n
    }

    fn frob_to_identity(m: &Array2<f64>) -> f64 {
        let eye = Array2::<f64>::eye(m.nrows());
        (m - &eye).mapv(|v| v * v).sum().sqrt()
    }

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, n), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn whiten_identity_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(&mut rng, 12, 4000);
        // force exact zero mean and identity covariance
        let pre = whiten(x.view()).unwrap().data;
        let again = whiten(pre.view()).unwrap();
        assert!(frob_to_identity(&again.whitener) < 1e-8);
        assert!(frob_to_identity(&cov(&again.data)) < 1e-8);
    }

    #[test]
    fn whiten_scaled_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = gaussian(&mut rng, 12, 3000);
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            row *= (i + 1) as f64;
        }
        let w = whiten(x.view()).unwrap();
        assert!(frob_to_identity(&cov(&w.data)) < 1e-8);
        for row in w.data.rows() {
            assert!(row.sum().abs() / 3000.0 < 1e-12);
        }
    }

    #[test]
    fn whiten_duplicate_row_is_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = gaussian(&mut rng, 12, 2000);
        let r0 = x.row(0).to_owned();
        x.row_mut(5).assign(&r0);
        assert!(matches!(whiten(x.view()), Err(IcaError::RankDeficient { .. })));
    }

    #[test]
    fn whiten_needs_samples() {
        let x = Array2::<f64>::zeros((12, 100));
        assert!(matches!(whiten(x.view()), Err(IcaError::TooFewSamples { .. })));
    }

    fn four_sources(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut s = Array2::zeros((4, n));
        for t in 0..n {
            let tt = t as f64 / 250.0;
            s[[0, t]] = 2.0 * ((tt * 3.1) % 1.0) - 1.0; // sawtooth
            s[[1, t]] = if (2.0 * PI * 1.7 * tt).sin() >= 0.0 { 1.0 } else { -1.0 };
            s[[2, t]] = (2.0 * PI * 5.3 * tt).sin();
            let u: f64 = rng.random_range(-0.5..0.5);
            s[[3, t]] = -u.signum() * (1.0 - 2.0 * u.abs()).ln(); // Laplacian
        }
        s
    }

    #[test]
    fn recovers_four_mixed_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 5000;
        let s = four_sources(n, &mut rng);
        let a = Array2::from_shape_fn((12, 4), |_| rng.random_range(-1.0..1.0));
        let noise = gaussian(&mut rng, 12, n) * 1e-2;
        let x = a.dot(&s) + noise;
        let white = whiten(x.view()).unwrap();
        let model = fast_ica(&white, 4, 1e-8, 500, 5).unwrap();
        assert!(model.converged);
        let p = model.full_unmixing().dot(&a);
        let amari = amari_index(p.view());
        assert!(amari < 0.05, "amari {amari}");
    }

    #[test]
    fn independent_unit_sources_give_signed_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = four_sources(6000, &mut rng);
        let white = whiten(s.view()).unwrap();
        let model = fast_ica(&white, 4, 1e-8, 500, 1).unwrap();
        let w = model.full_unmixing();
        // rows of unmix*whitener scaled by source std form a signed permutation
        let stds: Vec<f64> = s
            .rows()
            .into_iter()
            .map(|r| {
                let m = r.sum() / r.len() as f64;
                (r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / r.len() as f64).sqrt()
            })
            .collect();
        for row in model.unmix.iter() {
            assert_eq!(row.iter().filter(|v| v.abs() > 0.99).count(), 1, "{row:?}");
        }
        let p = Array2::from_shape_fn((4, 4), |(i, j)| w[[i, j]] * stds[j]);
        assert!(amari_index(p.view()) < 0.02);
    }

    #[test]
    fn iteration_cap_flags_non_convergence() {
        // Gaussian sources have no preferred rotation, so the fixed point
        // keeps wandering.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = gaussian(&mut rng, 4, 4000);
        let a = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
        let white = whiten(a.dot(&s).view()).unwrap();
        let model = fast_ica(&white, 4, 1e-6, 5, 3).unwrap();
        assert!(!model.converged);
        assert_eq!(model.iterations, 5);
        assert_eq!(
            model.require_converged(5).unwrap_err(),
            IcaError::NoConvergence { max_iter: 5 }
        );
    }

    #[test]
    fn deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = four_sources(3000, &mut rng);
        let white = whiten(x.view()).unwrap();
        let a = fast_ica(&white, 4, 1e-8, 200, 9).unwrap();
        let b = fast_ica(&white, 4, 1e-8, 200, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn components_are_unit_variance_and_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = four_sources(4000, &mut rng);
        let a = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
        let x = a.dot(&s);
        let model = fast_ica(&whiten(x.view()).unwrap(), 4, 1e-8, 300, 2).unwrap();
        let c = cov(&model.sources(x.view()));
        for i in 0..4 {
            assert!((c[[i, i]] - 1.0).abs() < 1e-6);
            for j in 0..4 {
                if i != j {
                    assert!(c[[i, j]].abs() < 1e-3);
                }
            }
        }
        let id = model.full_unmixing().dot(&model.mixing_matrix());
        assert!(frob_to_identity(&id) < 1e-6);
    }

    fn centre(mut x: Array2<f64>) -> Array2<f64> {
        for mut row in x.rows_mut() {
            let m = row.mean().unwrap();
            row -= m;
        }
        x
    }

    fn blink_scene(seed: u64) -> (Array2<f64>, Array2<f64>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels: Vec<String> = crate::dsp::MONTAGE.iter().map(|s| s.to_string()).collect();
        let n = 250 * 40;
        // eleven independent non-Gaussian sources mixed into twelve channels,
        // plus a little sensor noise
        let sources = Array2::from_shape_fn((11, n), |(k, _)| {
            let u: f64 = rng.random_range(-0.5..0.5);
            if k % 3 == 2 {
                -u.signum() * (1.0 - 2.0 * u.abs()).ln()
            } else {
                3.4 * u
            }
        });
        let a = Array2::from_shape_fn((12, 11), |_| rng.random_range(-1.0..1.0));
        let clean = a.dot(&sources) * 8.0 + gaussian(&mut rng, 12, n) * 0.5;
        let mut blink = Array2::zeros((12, n));
        let weights: Vec<f64> = channels
            .iter()
            .map(|c| match c.as_str() {
                "F7" | "F8" => 1.0,
                "F3" | "F4" => 0.9,
                "FC5" | "FC6" => 0.3,
                _ => 0.05,
            })
            .collect();
        for t in 0..n {
            // 1 Hz train of 200 ms positive half-sine deflections
            let phase = (t % 250) as f64 / 250.0;
            let v = if phase < 0.2 { (PI * phase / 0.2).sin() * 100.0 } else { 0.0 };
            for (c, w) in weights.iter().enumerate() {
                blink[[c, t]] = v * w;
            }
        }
        (clean, blink, channels)
    }

    #[test]
    fn blink_is_flagged_and_removed() {
        let (clean, blink, channels) = blink_scene(21);
        let x = &clean + &blink;
        let white = whiten(x.view()).unwrap();
        let model = fast_ica(&white, 12, 1e-7, 500, 4).unwrap();
        assert!(model.converged);
        let scores = score_components(&model, x.view(), 250.0, &channels, &ScoreThresholds::default());
        let artifacts: Vec<usize> = scores
            .iter()
            .filter(|s| s.verdict == Verdict::Artifact)
            .map(|s| s.index)
            .collect();
        assert_eq!(artifacts.len(), 1, "{scores:?}");
        // The blink's DC offset lives in the channel means, which ICA keeps,
        // so compare fluctuations only.
        let cleaned = centre(remove_components(&model, x.view(), &artifacts).unwrap());
        let err = (&cleaned - &centre(clean)).mapv(|v| v * v).mean().unwrap().sqrt();
        let blink_rms = centre(blink).mapv(|v| v * v).mean().unwrap().sqrt();
        assert!(err < 0.25 * blink_rms, "err {err} blink {blink_rms}");
        for s in &scores {
            assert!((0.0..=1.0).contains(&s.low_freq_ratio));
            assert!((0.0..=1.0).contains(&s.spatial_frontal_ratio));
        }
    }

    #[test]
    fn sinusoid_and_gaussian_components_are_neural() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = 250 * 30;
        let mut x = gaussian(&mut rng, 12, n);
        // a broad 10 Hz rhythm shared by all channels
        for t in 0..n {
            let v = 3.0 * (2.0 * PI * 10.0 * t as f64 / 250.0).sin();
            for c in 0..12 {
                x[[c, t]] += v * (0.5 + 0.05 * c as f64);
            }
        }
        let channels: Vec<String> = crate::dsp::MONTAGE.iter().map(|s| s.to_string()).collect();
        let model = fast_ica(&whiten(x.view()).unwrap(), 12, 1e-7, 500, 6).unwrap();
        let scores = score_components(&model, x.view(), 250.0, &channels, &ScoreThresholds::default());
        assert!(scores.iter().all(|s| s.verdict == Verdict::Neural), "{scores:?}");
        // the sinusoid has excess kurtosis -1.5, the Gaussian ones about 0
        let mut k: Vec<f64> = scores.iter().map(|s| s.kurtosis).collect();
        k.sort_by(f64::total_cmp);
        assert!((k[0] + 1.5).abs() < 0.2);
        assert!(k[1..].iter().all(|v| v.abs() < 0.3), "{k:?}");
    }

    #[test]
    fn removal_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut x = gaussian(&mut rng, 12, 3000);
        for (c, mut row) in x.rows_mut().into_iter().enumerate() {
            row += c as f64 * 3.0;
        }
        let model = fast_ica(&whiten(x.view()).unwrap(), 12, 1e-7, 300, 1).unwrap();
        let same = remove_components(&model, x.view(), &[]).unwrap();
        let rms = (&same - &x).mapv(|v| v * v).mean().unwrap().sqrt();
        assert!(rms < 1e-6);
        let all: Vec<usize> = (0..12).collect();
        let flat = remove_components(&model, x.view(), &all).unwrap();
        for (c, row) in flat.rows().into_iter().enumerate() {
            assert!(row.iter().all(|v| (v - model.mean[c]).abs() < 1e-9));
        }
        assert_eq!(
            remove_components(&model, x.view(), &[12]).unwrap_err(),
            IcaError::BadIndex { index: 12, k: 12 }
        );
        let _ = x.slice(s![.., 0..10]);
    }
}
