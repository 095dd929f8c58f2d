use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BoostError;
use crate::dsp::Label;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Window,
    Trial,
}

/// Counts with move as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(preds: &[Label], labels: &[Label]) -> Self {
        let mut c = Confusion::default();
        for (p, l) in preds.iter().zip(labels) {
            match (p, l) {
                (Label::Move, Label::Move) => c.tp += 1,
                (Label::Move, Label::Rest) => c.fp += 1,
                (Label::Rest, Label::Move) => c.fn_ += 1,
                (Label::Rest, Label::Rest) => c.tn += 1,
            }
        }
        c
    }

    pub fn n(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.n() as f64
    }

    /// F1 of one class; a class never predicted and never present scores 1.
    fn class_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
        let den = 2 * tp + fp + fn_;
        if den == 0 {
            1.0
        } else {
            2.0 * tp as f64 / den as f64
        }
    }

    pub fn f1(&self) -> f64 {
        Self::class_f1(self.tp, self.fp, self.fn_)
    }

    pub fn macro_f1(&self) -> f64 {
        0.5 * (self.f1() + Self::class_f1(self.tn, self.fn_, self.fp))
    }

    /// True-positive and false-positive rates, NaN-free (0 when undefined).
    pub fn rates(&self) -> (f64, f64) {
        let tpr = if self.tp + self.fn_ > 0 { self.tp as f64 / (self.tp + self.fn_) as f64 } else { 0.0 };
        let fpr = if self.fp + self.tn > 0 { self.fp as f64 / (self.fp + self.tn) as f64 } else { 0.0 };
        (tpr, fpr)
    }
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z95 * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0).min(p), (centre + half).min(1.0).max(p))
}

/// Latency and resource figures attached to a report by the runtime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n_decisions: usize,
    pub mean_ms: f64,
    /// Nearest-rank 95th percentile.
    pub p95_ms: f64,
    pub max_ms: f64,
    /// CPU time times the device power constant.
    pub energy_j_per_decision: f64,
    pub memory_peak_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub held_out: String,
    pub n: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub level: Level,
    pub n: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub macro_f1: f64,
    /// Wilson 95% interval for accuracy.
    pub ci95: (f64, f64),
    /// Bootstrap 95% intervals.
    pub f1_ci95: (f64, f64),
    pub macro_f1_ci95: (f64, f64),
    pub confusion: Confusion,
    pub folds: Vec<FoldReport>,
    pub latency: Option<LatencyStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_fold_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial_level: Option<TrialSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<Separation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baselines: Vec<BaselineScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantized: Option<QuantizedScore>,
}

/// Majority-vote scores over whole trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub n: usize,
    pub accuracy: f64,
    pub ci95: (f64, f64),
    pub tp_rate: f64,
    pub fp_rate: f64,
}

/// Class separation of encoder latents against the raw windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub latent_silhouette: f64,
    pub raw_silhouette: f64,
    /// Silhouette in the top-two principal plane of the latents.
    pub latent_pca2_silhouette: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    pub name: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedScore {
    pub mode: String,
    pub accuracy: f64,
    /// Float accuracy minus quantized accuracy.
    pub accuracy_drop: f64,
}

/// Majority vote per trial (ties go to rest) with the trial's true label.
pub fn trial_votes(preds: &[Label], labels: &[Label], trial_map: &[usize]) -> (Vec<Label>, Vec<Label>) {
    let mut trials: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for ((p, l), t) in preds.iter().zip(labels).zip(trial_map) {
        let e = trials.entry(*t).or_default();
        e.0 += 1;
        e.1 += (*p == Label::Move) as usize;
        e.2 += (*l == Label::Move) as usize;
    }
    trials
        .values()
        .map(|&(n, pm, lm)| {
            let vote = |m: usize| if 2 * m > n { Label::Move } else { Label::Rest };
            (vote(pm), vote(lm))
        })
        .unzip()
}

fn percentile_interval(mut v: Vec<f64>, point: f64) -> (f64, f64) {
    v.sort_by(f64::total_cmp);
    let at = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
    (at(0.025).min(point), at(0.975).max(point))
}

pub fn evaluate(preds: &[Label], labels: &[Label], level: Level, trial_map: Option<&[usize]>) -> Result<EvalReport, BoostError> {
    evaluate_seeded(preds, labels, level, trial_map, 0)
}

/// [`evaluate`] with an explicit bootstrap seed.
pub fn evaluate_seeded(
    preds: &[Label],
    labels: &[Label],
    level: Level,
    trial_map: Option<&[usize]>,
    seed: u64,
) -> Result<EvalReport, BoostError> {
    if preds.len() != labels.len() {
        return Err(BoostError::Shape("predictions and labels differ in length".into()));
    }
    if preds.is_empty() {
        return Err(BoostError::EmptyInput);
    }
    let (p, l) = match level {
        Level::Window => (preds.to_vec(), labels.to_vec()),
        Level::Trial => {
            let map = trial_map.ok_or_else(|| BoostError::Shape("trial level needs a trial map".into()))?;
            if map.len() != preds.len() {
                return Err(BoostError::Shape("trial map length".into()));
            }
            trial_votes(preds, labels, map)
        }
    };
    let c = Confusion::from_pairs(&p, &l);
    let n = c.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f1s = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut mf1s = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut bp = vec![Label::Rest; n];
    let mut bl = vec![Label::Rest; n];
    for _ in 0..BOOTSTRAP_RESAMPLES {
        for j in 0..n {
            let i = rng.random_range(0..n);
            bp[j] = p[i];
            bl[j] = l[i];
        }
        let bc = Confusion::from_pairs(&bp, &bl);
        f1s.push(bc.f1());
        mf1s.push(bc.macro_f1());
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        level,
        n,
        accuracy: c.accuracy(),
        f1: c.f1(),
        macro_f1: c.macro_f1(),
        ci95: wilson_interval(c.tp + c.tn, n),
        f1_ci95: percentile_interval(f1s, c.f1()),
        macro_f1_ci95: percentile_interval(mf1s, c.macro_f1()),
        confusion: c,
        folds: Vec::new(),
        latency: None,
        mean_fold_accuracy: None,
        trial_level: None,
        separation: None,
        baselines: Vec::new(),
        quantized: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub held_out: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per distinct subject id, in ascending id order.
pub fn loso_folds(subjects: &[usize]) -> Result<Vec<Fold>, BoostError> {
    let mut ids: Vec<usize> = subjects.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(BoostError::SingleSubject);
    }
    Ok(ids
        .into_iter()
        .map(|s| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..subjects.len()).partition(|&i| subjects[i] == s);
            Fold { held_out: s, train, test }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Array2<f64>,
    pub silhouette: f64,
}

/// Mean silhouette with Euclidean distance and the two labels as clusters.
pub fn silhouette(points: ArrayView2<f64>, labels: &[Label]) -> f64 {
    let n = points.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let (mut same, mut other) = ((0.0, 0usize), (0.0, 0usize));
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = points.row(i).iter().zip(points.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if labels[i] == labels[j] {
                same.0 += d;
                same.1 += 1;
            } else {
                other.0 += d;
                other.1 += 1;
            }
        }
        if same.1 == 0 || other.1 == 0 {
            continue;
        }
        let a = same.0 / same.1 as f64;
        let b = other.0 / other.1 as f64;
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Principal-component projection to two dimensions plus the silhouette of
/// the classes in that plane. Component signs are fixed so the largest
/// loading is positive.
pub fn project_latents_2d(points: ArrayView2<f64>, labels: &[Label]) -> Result<Projection, BoostError> {
    let (n, d) = points.dim();
    if n < 3 || labels.len() != n {
        return Err(BoostError::Shape("need at least 3 labelled points".into()));
    }
    let mean = points.mean_axis(ndarray::Axis(0)).unwrap();
    let centred = &points - &mean;
    let m = DMatrix::from_row_iterator(n, d, centred.iter().copied());
    let cov = m.transpose() * &m / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let k = d.min(2);
    let mut coords = Array2::zeros((n, 2));
    for (c, &ix) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(ix).clone_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v = -v;
        }
        for i in 0..n {
            coords[[i, c]] = (0..d).map(|j| centred[[i, j]] * v[j]).sum();
        }
    }
    let s = silhouette(coords.view(), labels);
    Ok(Projection { coords, silhouette: s })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(tp: usize, fp: usize, fn_: usize, tn: usize) -> (Vec<Label>, Vec<Label>) {
        let mut p = vec![];
        let mut l = vec![];
        for (n, a, b) in [(tp, Label::Move, Label::Move), (fp, Label::Move, Label::Rest), (fn_, Label::Rest, Label::Move), (tn, Label::Rest, Label::Rest)] {
            p.extend(std::iter::repeat_n(a, n));
            l.extend(std::iter::repeat_n(b, n));
        }
        (p, l)
    }

    #[test]
    fn counts_to_scores() {
        let (p, l) = pairs(43, 7, 7, 43);
        let r = evaluate(&p, &l, Level::Window, None).unwrap();
        assert!((r.accuracy - 0.86).abs() < 1e-12);
        assert!((r.f1 - 0.86).abs() < 1e-12);
        assert_eq!(r.confusion.n(), 100);
        assert!(r.ci95.0 <= r.accuracy && r.accuracy <= r.ci95.1);
        assert!(r.f1_ci95.0 <= r.f1 && r.f1 <= r.f1_ci95.1);
    }

    #[test]
    fn wilson_reference() {
        // p = 0.86, n = 100, z = 1.96: centre (0.86 + 0.019208) / 1.038415,
        // half 1.96 * sqrt(0.001204 + 0.000096040) / 1.038415
        let (lo, hi) = wilson_interval(86, 100);
        let z: f64 = 1.959_963_984_540_054;
        let n = 100.0;
        let p = 0.86;
        let c = (p + z * z / (2.0 * n)) / (1.0 + z * z / n);
        let h = z / (1.0 + z * z / n) * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
        assert!((lo - (c - h)).abs() < 1e-12 && (hi - (c + h)).abs() < 1e-12);
        assert!((lo - 0.7786).abs() < 5e-4 && (hi - 0.9148).abs() < 5e-4, "{lo} {hi}");
    }

    #[test]
    fn perfect_predictions() {
        let (p, l) = pairs(10, 0, 0, 12);
        let r = evaluate(&p, &l, Level::Window, None).unwrap();
        assert_eq!((r.accuracy, r.macro_f1, r.ci95.1), (1.0, 1.0, 1.0));
        assert!(evaluate(&[], &[], Level::Window, None).is_err());
    }

    #[test]
    fn trial_majority_ties_rest() {
        let p = [Label::Move, Label::Rest, Label::Move, Label::Move, Label::Rest];
        let l = [Label::Move, Label::Move, Label::Rest, Label::Rest, Label::Rest];
        let map = [0, 0, 1, 1, 1];
        let (tp, tl) = trial_votes(&p, &l, &map);
        assert_eq!(tp, vec![Label::Rest, Label::Move]);
        assert_eq!(tl, vec![Label::Move, Label::Rest]);
        let r = evaluate(&p, &l, Level::Trial, Some(&map)).unwrap();
        assert_eq!(r.n, 2);
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn folds_hold_out_one_subject() {
        let s = [0, 1, 2, 0, 1, 2];
        let f = loso_folds(&s).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f[1].test, vec![1, 4]);
        assert!(matches!(loso_folds(&[3, 3]), Err(BoostError::SingleSubject)));
    }

    #[test]
    fn silhouette_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = Array2::from_shape_fn((40, 5), |(i, j)| {
            let off = if i < 20 { 0.0 } else { 10.0 / (5f64).sqrt() };
            off + rng.random_range(-0.5..0.5) * (1.0 + j as f64 * 0.0)
        });
        let labels: Vec<Label> = (0..40).map(|i| if i < 20 { Label::Rest } else { Label::Move }).collect();
        let p = project_latents_2d(pts.view(), &labels).unwrap();
        assert!(p.silhouette > 0.8, "{}", p.silhouette);

        let same = Array2::from_elem((6, 3), 1.0);
        let l: Vec<Label> = (0..6).map(|i| Label::from_index(i % 2)).collect();
        assert!(project_latents_2d(same.view(), &l).unwrap().silhouette <= 0.0);
    }
}
