use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::BoostError;
use crate::dsp::Label;

/// Depth-limited CART tree on Gini impurity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Tree {
    Leaf(Label),
    Split {
        feature: usize,
        threshold: f64,
        /// Taken when `x[feature] <= threshold`.
        left: Box<Tree>,
        right: Box<Tree>,
    },
}

fn majority(y: &[Label], idx: &[usize]) -> Label {
    let moves = idx.iter().filter(|&&i| y[i] == Label::Move).count();
    if 2 * moves > idx.len() {
        Label::Move
    } else {
        Label::Rest
    }
}

fn gini(moves: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = moves as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

fn grow(x: &ArrayView2<f64>, y: &[Label], idx: Vec<usize>, depth: usize, min_leaf: usize) -> Tree {
    let n = idx.len();
    let moves = idx.iter().filter(|&&i| y[i] == Label::Move).count();
    if depth == 0 || moves == 0 || moves == n || n < 2 * min_leaf {
        return Tree::Leaf(majority(y, &idx));
    }
    let parent = gini(moves, n) * n as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..x.ncols() {
        let mut order = idx.clone();
        order.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]).then(a.cmp(&b)));
        let mut left_moves = 0;
        for k in 0..n - 1 {
            left_moves += (y[order[k]] == Label::Move) as usize;
            let (lo, hi) = (x[[order[k], f]], x[[order[k + 1], f]]);
            let nl = k + 1;
            if lo == hi || nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let cost = gini(left_moves, nl) * nl as f64 + gini(moves - left_moves, n - nl) * (n - nl) as f64;
            if best.is_none_or(|(c, _, _)| cost < c - 1e-12) {
                best = Some((cost, f, lo + (hi - lo) / 2.0));
            }
        }
    }
    match best {
        Some((cost, feature, threshold)) if cost < parent - 1e-12 => {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[[i, feature]] <= threshold);
            Tree::Split {
                feature,
                threshold,
                left: Box::new(grow(x, y, l, depth - 1, min_leaf)),
                right: Box::new(grow(x, y, r, depth - 1, min_leaf)),
            }
        }
        _ => Tree::Leaf(majority(y, &idx)),
    }
}

pub fn train_tree(x: ArrayView2<f64>, y: &[Label], max_depth: usize, min_leaf: usize) -> Result<Tree, BoostError> {
    if x.nrows() != y.len() || x.nrows() == 0 {
        return Err(BoostError::Shape("rows and labels differ or are empty".into()));
    }
    Ok(grow(&x, y, (0..y.len()).collect(), max_depth, min_leaf.max(1)))
}

impl Tree {
    pub fn predict(&self, x: ArrayView1<f64>) -> Label {
        match self {
            Tree::Leaf(l) => *l,
            Tree::Split { feature, threshold, left, right } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Tree::Leaf(_) => 0,
            Tree::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}
