//! Softmax-regression probe and F1 metrics.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::encoder::Params;
use crate::trainer::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { steps: 300, learning_rate: 0.05, l2: 1e-4 }
    }
}

/// Column means and standard deviations of `x`; zero spread maps to 1.
pub(crate) fn standardizer(x: &Mat) -> (Mat, Mat) {
    let n = x.nrows().max(1) as f64;
    let mean = x.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
    let var = (x - &mean).mapv(|v| v * v).sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
    let std = var.mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    (mean, std)
}

/// Linear layer with softmax output, trained full-batch with Adam on
/// cross-entropy plus an L2 penalty on the weights.
#[derive(Clone, Debug)]
pub struct SoftmaxClassifier {
    mean: Mat,
    std: Mat,
    w: Mat,
    b: Mat,
}

fn softmax_rows(z: &mut Mat) {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

impl SoftmaxClassifier {
    pub fn fit(x: &Mat, y: &[usize], n_classes: usize, cfg: &ClassifierConfig) -> Self {
        let (mean, std) = standardizer(x);
        let xs = (x - &mean) / &std;
        let n = x.nrows() as f64;
        let mut onehot = Mat::zeros((x.nrows(), n_classes));
        for (i, &c) in y.iter().enumerate() {
            onehot[[i, c]] = 1.0;
        }
        let mut params = Params::new();
        params.insert("w".into(), Mat::zeros((x.ncols(), n_classes)));
        params.insert("b".into(), Mat::zeros((1, n_classes)));
        let mut adam = Adam::new();
        for _ in 0..cfg.steps {
            let mut p = xs.dot(&params["w"]) + &params["b"];
            softmax_rows(&mut p);
            let g = (p - &onehot) / n;
            let mut grads = Params::new();
            grads.insert("w".into(), xs.t().dot(&g) + &params["w"] * cfg.l2);
            grads.insert("b".into(), g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            adam.step(&mut [&mut params], &grads, cfg.learning_rate);
        }
        let b = params.remove("b").unwrap();
        let w = params.remove("w").unwrap();
        Self { mean, std, w, b }
    }

    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        let z = ((x - &self.mean) / &self.std).dot(&self.w) + &self.b;
        z.rows()
            .into_iter()
            .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best }).0)
            .collect()
    }
}

/// Micro-F1, which equals accuracy for single-label predictions.
pub fn micro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    assert_eq!(truth.len(), pred.len());
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Unweighted mean of per-class F1 over every class seen in `truth` or `pred`.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    assert_eq!(truth.len(), pred.len());
    let classes: BTreeSet<usize> = truth.iter().chain(pred).copied().collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<usize, (f64, f64, f64)> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            counts.entry(t).or_default().0 += 1.0;
        } else {
            counts.entry(p).or_default().1 += 1.0;
            counts.entry(t).or_default().2 += 1.0;
        }
    }
    let total: f64 = classes
        .iter()
        .map(|c| {
            let (tp, fp, fn_) = counts.get(c).copied().unwrap_or_default();
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        })
        .sum();
    total / classes.len() as f64
}

/// Most frequent label, ties broken toward the smaller label.
pub fn majority_label(y: &[usize]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in y {
        *counts.entry(c).or_default() += 1;
    }
    counts.into_iter().fold((0, 0), |best, (c, k)| if k > best.1 { (c, k) } else { best }).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_one_hot_is_perfect() {
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let x = Mat::from_shape_fn((30, 3), |(i, k)| if y[i] == k { 1.0 } else { 0.0 });
        let clf = SoftmaxClassifier::fit(&x, &y, 3, &ClassifierConfig::default());
        let p = clf.predict(&x);
        assert_eq!(micro_f1(&y, &p), 1.0);
        assert_eq!(macro_f1(&y, &p), 1.0);
    }

    #[test]
    fn micro_f1_is_accuracy_and_macro_by_hand() {
        let t = [0, 0, 1, 1, 2];
        let p = [0, 1, 1, 1, 0];
        assert_eq!(micro_f1(&t, &p), 3.0 / 5.0);
        // class 0: tp1 fp1 fn1 -> 0.5; class 1: tp2 fp1 fn0 -> 0.8; class 2: 0
        assert!((macro_f1(&t, &p) - (0.5 + 0.8 + 0.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn random_embeddings_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4000;
        let x = Mat::from_shape_fn((n, 8), |_| rng.gen_range(-1.0..1.0));
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let (train, test) = (0..n / 2, n / 2..n);
        let xt = x.slice(ndarray::s![train.clone(), ..]).to_owned();
        let clf = SoftmaxClassifier::fit(&xt, &y[train], 2, &ClassifierConfig::default());
        let p = clf.predict(&x.slice(ndarray::s![test.clone(), ..]).to_owned());
        let f1 = micro_f1(&y[test], &p);
        assert!((f1 - 0.5).abs() < 0.05, "{f1}");
    }

    #[test]
    fn majority_ties_pick_smallest() {
        assert_eq!(majority_label(&[2, 1, 2, 1, 0]), 1);
        assert_eq!(majority_label(&[3, 3, 0]), 3);
    }
}
