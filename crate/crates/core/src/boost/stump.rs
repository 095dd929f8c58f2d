use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::BoostError;
use crate::dsp::Label;

/// Weighted errors closer than this are ties; the earlier candidate wins.
pub const TIE_EPS: f64 = 1e-12;
/// Vote weight of a learner with zero weighted error.
pub const ALPHA_CAP: f64 = 20.0;

/// Threshold on one feature. Polarity +1 predicts move above the threshold,
/// -1 predicts move at or below it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub polarity: i8,
}

impl Stump {
    pub fn predict(&self, x: ArrayView1<f64>) -> Label {
        let above = x[self.feature] > self.threshold;
        if above == (self.polarity > 0) {
            Label::Move
        } else {
            Label::Rest
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StumpEnsemble {
    pub stumps: Vec<Stump>,
    pub alphas: Vec<f64>,
    /// Rounds requested; `stumps.len()` is smaller after an early exit.
    pub n_rounds: usize,
    pub seed: u64,
    /// Weighted error of each accepted round.
    pub error_curve: Vec<f64>,
}

fn check(x: &ArrayView2<f64>, y: &[Label]) -> Result<(), BoostError> {
    if x.nrows() != y.len() {
        return Err(BoostError::Shape(format!("{} rows, {} labels", x.nrows(), y.len())));
    }
    if x.nrows() < 2 || x.ncols() == 0 {
        return Err(BoostError::Degenerate("need at least 2 samples and 1 feature".into()));
    }
    if y.iter().all(|&l| l == y[0]) {
        return Err(BoostError::Degenerate("all labels are equal".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(BoostError::Shape("non-finite feature".into()));
    }
    Ok(())
}

/// Per-feature sample order, shared across boosting rounds.
struct Presorted {
    order: Vec<Vec<usize>>,
}

impl Presorted {
    fn new(x: &ArrayView2<f64>) -> Self {
        let order = (0..x.ncols())
            .map(|f| {
                let col = x.column(f);
                let mut idx: Vec<usize> = (0..x.nrows()).collect();
                idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Self { order }
    }
}

fn best_stump(x: &ArrayView2<f64>, y: &[Label], w: &[f64], sorted: &Presorted) -> Option<(Stump, f64)> {
    // error of "move everywhere" under polarity +1 with threshold below all data
    let rest_mass: f64 = y.iter().zip(w).filter(|(l, _)| **l == Label::Rest).map(|(_, w)| w).sum();
    let total: f64 = w.iter().sum();
    let mut best: Option<(Stump, f64)> = None;
    for (f, order) in sorted.order.iter().enumerate() {
        let col = x.column(f);
        // polarity +1 error after moving sample i to the left (predicted rest)
        let mut err_pos = rest_mass;
        for k in 0..order.len() - 1 {
            let i = order[k];
            err_pos += if y[i] == Label::Move { w[i] } else { -w[i] };
            let (lo, hi) = (col[i], col[order[k + 1]]);
            if lo == hi {
                continue;
            }
            let threshold = lo + (hi - lo) / 2.0;
            for (polarity, err) in [(1i8, err_pos), (-1, total - err_pos)] {
                if best.as_ref().is_none_or(|(_, e)| err < e - TIE_EPS) {
                    best = Some((Stump { feature: f, threshold, polarity }, err));
                }
            }
        }
    }
    best.map(|(s, e)| (s, e.max(0.0)))
}

/// Exhaustive weighted-error minimizer over features, midpoint thresholds
/// and both polarities.
pub fn train_stump(x: ArrayView2<f64>, y: &[Label], w: &[f64]) -> Result<(Stump, f64), BoostError> {
    check(&x, y)?;
    if w.len() != y.len() || w.iter().any(|v| !(*v >= 0.0)) {
        return Err(BoostError::Shape("weights must be non-negative, one per sample".into()));
    }
    best_stump(&x, y, w, &Presorted::new(&x))
        .ok_or_else(|| BoostError::Degenerate("every feature is constant".into()))
}

/// `ln((1 - err) / err)`, capped for (near) perfect learners.
pub fn alpha_for(err: f64) -> f64 {
    if err <= 0.0 {
        ALPHA_CAP
    } else {
        ((1.0 - err) / err).ln().min(ALPHA_CAP)
    }
}

pub fn train_adaboost(x: ArrayView2<f64>, y: &[Label], rounds: usize) -> Result<StumpEnsemble, BoostError> {
    train_adaboost_traced(x, y, rounds, |_| {})
}

/// Boosting with a callback receiving the sample weights after each round.
pub fn train_adaboost_traced(
    x: ArrayView2<f64>,
    y: &[Label],
    rounds: usize,
    mut on_round: impl FnMut(&[f64]),
) -> Result<StumpEnsemble, BoostError> {
    check(&x, y)?;
    let n = y.len();
    let sorted = Presorted::new(&x);
    let mut w = vec![1.0 / n as f64; n];
    let mut ens = StumpEnsemble { stumps: vec![], alphas: vec![], n_rounds: rounds, seed: 0, error_curve: vec![] };
    for _ in 0..rounds {
        let Some((stump, err)) = best_stump(&x, y, &w, &sorted) else { break };
        if err >= 0.5 {
            break;
        }
        let alpha = alpha_for(err);
        ens.stumps.push(stump);
        ens.alphas.push(alpha);
        ens.error_curve.push(err);
        if err <= 0.0 {
            break;
        }
        let boost = alpha.exp();
        for (i, wi) in w.iter_mut().enumerate() {
            if stump.predict(x.row(i)) != y[i] {
                *wi *= boost;
            }
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        on_round(&w);
    }
    Ok(ens)
}

impl StumpEnsemble {
    /// Signed vote normalized by total alpha; zero votes mean rest.
    pub fn predict(&self, x: ArrayView1<f64>) -> (Label, f64) {
        self.predict_prefix(x, self.stumps.len())
    }

    /// Prediction using only the first `t` learners.
    pub fn predict_prefix(&self, x: ArrayView1<f64>, t: usize) -> (Label, f64) {
        let t = t.min(self.stumps.len());
        let mut sum = 0.0;
        let mut norm = 0.0;
        for (s, a) in self.stumps[..t].iter().zip(&self.alphas) {
            sum += a * if s.predict(x) == Label::Move { 1.0 } else { -1.0 };
            norm += a;
        }
        if sum == 0.0 || norm == 0.0 {
            return (Label::Rest, 0.0);
        }
        let label = if sum > 0.0 { Label::Move } else { Label::Rest };
        (label, (sum / norm).clamp(-1.0, 1.0))
    }

    pub fn truncated(&self, t: usize) -> Self {
        let t = t.min(self.stumps.len());
        Self {
            stumps: self.stumps[..t].to_vec(),
            alphas: self.alphas[..t].to_vec(),
            n_rounds: t,
            seed: self.seed,
            error_curve: self.error_curve[..t].to_vec(),
        }
    }
}

/// Picks the round count from `grid` by k-fold cross-validation inside the
/// given training data; ties go to the smaller count.
pub fn select_rounds(x: ArrayView2<f64>, y: &[Label], grid: &[usize], folds: usize, seed: u64) -> Result<usize, BoostError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    check(&x, y)?;
    let max_t = *grid.iter().max().ok_or_else(|| BoostError::Shape("empty grid".into()))?;
    let folds = folds.clamp(2, y.len());
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut correct = vec![0usize; grid.len()];
    for k in 0..folds {
        let test: Vec<usize> = idx.iter().copied().skip(k).step_by(folds).collect();
        let train: Vec<usize> = idx.iter().enumerate().filter(|(j, _)| j % folds != k).map(|(_, &i)| i).collect();
        let xt = x.select(ndarray::Axis(0), &train);
        let yt: Vec<Label> = train.iter().map(|&i| y[i]).collect();
        let Ok(ens) = train_adaboost(xt.view(), &yt, max_t) else { continue };
        for (g, &t) in grid.iter().enumerate() {
            correct[g] += test.iter().filter(|&&i| ens.predict_prefix(x.row(i), t).0 == y[i]).count();
        }
    }
    let mut best = 0;
    for g in 1..grid.len() {
        if correct[g] > correct[best] || (correct[g] == correct[best] && grid[g] < grid[best]) {
            best = g;
        }
    }
    Ok(grid[best])
}
