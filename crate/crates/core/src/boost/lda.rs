use nalgebra::{DMatrix, DVector};
use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::BoostError;
use crate::dsp::Label;

/// Linear discriminant `w . x + b > 0 => move`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub shrinkage: f64,
}

/// Pooled covariance shrunk toward `(trace / d) * I` by `gamma`.
pub fn train_lda(x: ArrayView2<f64>, y: &[Label], gamma: f64) -> Result<LdaModel, BoostError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(BoostError::Shape("shrinkage must be in [0, 1]".into()));
    }
    if x.nrows() != y.len() {
        return Err(BoostError::Shape("rows and labels differ".into()));
    }
    let d = x.ncols();
    let mut mean = [DVector::<f64>::zeros(d), DVector::zeros(d)];
    let mut count = [0usize; 2];
    for (row, l) in x.rows().into_iter().zip(y) {
        let c = l.index();
        count[c] += 1;
        for j in 0..d {
            mean[c][j] += row[j];
        }
    }
    if count[0] == 0 || count[1] == 0 {
        return Err(BoostError::Degenerate("LDA needs both classes".into()));
    }
    for c in 0..2 {
        mean[c] /= count[c] as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (row, l) in x.rows().into_iter().zip(y) {
        let diff = DVector::from_iterator(d, row.iter().copied()) - &mean[l.index()];
        cov.ger(1.0, &diff, &diff, 1.0);
    }
    let dof = (y.len() as f64 - 2.0).max(1.0);
    cov /= dof;
    let avg_var = cov.trace() / d as f64;
    let shrunk = cov * (1.0 - gamma) + DMatrix::identity(d, d) * (gamma * avg_var);
    let eig = shrunk.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if eig.iter().any(|&v| v <= 1e-12 * max) {
        return Err(BoostError::Singular);
    }
    let chol = shrunk.cholesky().ok_or(BoostError::Singular)?;
    let delta = &mean[1] - &mean[0];
    let w = chol.solve(&delta);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(BoostError::Singular);
    }
    let mid = (&mean[0] + &mean[1]) * 0.5;
    let prior = (count[1] as f64 / count[0] as f64).ln();
    let b = -w.dot(&mid) + prior;
    Ok(LdaModel { w: w.iter().copied().collect(), b, shrinkage: gamma })
}

impl LdaModel {
    pub fn score(&self, x: ArrayView1<f64>) -> f64 {
        self.w.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() + self.b
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> Label {
        if self.score(x) > 0.0 {
            Label::Move
        } else {
            Label::Rest
        }
    }
}

pub fn predict_lda(model: &LdaModel, x: ArrayView1<f64>) -> Label {
    model.predict(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn symmetric_classes_split_at_zero() {
        let x = array![[-1.5], [-1.0], [-0.5], [0.5], [1.0], [1.5]];
        let y = [Label::Rest, Label::Rest, Label::Rest, Label::Move, Label::Move, Label::Move];
        let m = train_lda(x.view(), &y, 0.0).unwrap();
        assert!(m.b.abs() < 1e-12);
        assert_eq!(m.predict(array![1e-6].view()), Label::Move);
        assert_eq!(m.predict(array![-1e-6].view()), Label::Rest);
    }

    #[test]
    fn full_shrinkage_is_nearest_mean() {
        let x = Array2::from_shape_fn((40, 3), |(i, j)| {
            let base = if i < 20 { 0.0 } else { 2.0 };
            base + ((i * 31 + j * 17) % 11) as f64 * 0.3 * (j + 1) as f64
        });
        let y: Vec<Label> = (0..40).map(|i| if i < 20 { Label::Rest } else { Label::Move }).collect();
        let m = train_lda(x.view(), &y, 1.0).unwrap();
        let mean = |c: usize| -> Vec<f64> {
            (0..3).map(|j| (0..20).map(|i| x[[i + 20 * c, j]]).sum::<f64>() / 20.0).collect()
        };
        let (m0, m1) = (mean(0), mean(1));
        for row in x.rows() {
            let d0: f64 = row.iter().zip(&m0).map(|(a, b)| (a - b).powi(2)).sum();
            let d1: f64 = row.iter().zip(&m1).map(|(a, b)| (a - b).powi(2)).sum();
            let expect = if d1 < d0 { Label::Move } else { Label::Rest };
            assert_eq!(m.predict(row), expect);
        }
    }

    #[test]
    fn singular_without_shrinkage() {
        let x = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [4.0, 8.0]];
        let y = [Label::Rest, Label::Rest, Label::Move, Label::Move];
        assert!(matches!(train_lda(x.view(), &y, 0.0), Err(BoostError::Singular)));
        assert!(train_lda(x.view(), &y, 0.1).is_ok());
    }
}
