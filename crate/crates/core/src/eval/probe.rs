use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::numcore::rng;

/// What the probe reads from the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeInput {
    #[default]
    Logits,
    /// Hard one-hot samples.
    Samples,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Held-out accuracy.
    pub accuracy: f64,
    /// The training split held a single class; the probe predicts it everywhere.
    pub degenerate: bool,
    pub train_rows: usize,
    pub test_rows: usize,
}

const PROBE_STREAM: u64 = 0x9B0E;
const ITERS: usize = 400;
const LR: f64 = 0.5;

/// Fits a multinomial logistic regression on a seeded 80% of the rows by
/// full-batch gradient descent on standardized features and scores the rest.
pub fn fit_probe(x: &[Vec<f64>], y: &[usize], classes: usize, seed: u64) -> Result<ProbeResult, EvalError> {
    let n = x.len();
    if n < 5 || y.len() != n || classes < 2 {
        return Err(EvalError::Invalid(format!(
            "probe needs at least 5 labelled rows and 2 classes, got {n} rows, {} labels, {classes} classes",
            y.len()
        )));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) || y.iter().any(|&c| c >= classes) {
        return Err(EvalError::Invalid("ragged, non-finite or out-of-range probe data".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[PROBE_STREAM]));
    let cut = n * 4 / 5;
    let (train, test) = order.split_at(cut);

    let first = y[train[0]];
    if train.iter().all(|&i| y[i] == first) {
        let hits = test.iter().filter(|&&i| y[i] == first).count();
        return Ok(ProbeResult {
            accuracy: hits as f64 / test.len() as f64,
            degenerate: true,
            train_rows: train.len(),
            test_rows: test.len(),
        });
    }

    let (mean, scale) = standardizer(x, train);
    let z = |i: usize| -> Vec<f64> {
        x[i].iter()
            .zip(&mean)
            .zip(&scale)
            .map(|((v, m), s)| (v - m) / s)
            .chain([1.0])
            .collect()
    };
    let xs: Vec<Vec<f64>> = (0..n).map(z).collect();
    let mut w = vec![vec![0.0; d + 1]; classes];
    let mut p = vec![0.0; classes];
    for _ in 0..ITERS {
        let mut grad = vec![vec![0.0; d + 1]; classes];
        for &i in train {
            scores(&w, &xs[i], &mut p);
            softmax(&mut p);
            p[y[i]] -= 1.0;
            for (gc, &pc) in grad.iter_mut().zip(&p) {
                gc.iter_mut().zip(&xs[i]).for_each(|(g, &v)| *g += pc * v);
            }
        }
        let k = LR / train.len() as f64;
        for (wc, gc) in w.iter_mut().zip(&grad) {
            wc.iter_mut().zip(gc).for_each(|(a, g)| *a -= k * g);
        }
    }
    let hits = test
        .iter()
        .filter(|&&i| {
            scores(&w, &xs[i], &mut p);
            argmax(&p) == y[i]
        })
        .count();
    Ok(ProbeResult {
        accuracy: hits as f64 / test.len() as f64,
        degenerate: false,
        train_rows: train.len(),
        test_rows: test.len(),
    })
}

fn standardizer(x: &[Vec<f64>], rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in rows {
        mean.iter_mut().zip(&x[i]).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for &i in rows {
        var.iter_mut().zip(&x[i]).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    // Constant columns stay at zero after centering.
    let scale = var.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

fn scores(w: &[Vec<f64>], x: &[f64], out: &mut [f64]) {
    for (o, wc) in out.iter_mut().zip(w) {
        *o = wc.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn softmax(p: &mut [f64]) {
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    p.iter_mut().for_each(|v| *v = (*v - max).exp());
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn one_hot(c: usize, l: usize) -> Vec<f64> {
        (0..l).map(|k| f64::from(u8::from(k == c))).collect()
    }

    #[test]
    fn ground_truth_one_hot_decodes_perfectly() {
        let mut r = rng::stream(1, &[]);
        let y: Vec<usize> = (0..600).map(|_| r.gen_range(0..4)).collect();
        let x: Vec<Vec<f64>> = y.iter().map(|&c| one_hot(c, 4)).collect();
        let res = fit_probe(&x, &y, 4, 0).unwrap();
        assert_eq!(res.accuracy, 1.0);
        assert!(!res.degenerate);
        assert_eq!((res.train_rows, res.test_rows), (480, 120));
    }

    #[test]
    fn permuted_scaled_logits_decode_perfectly() {
        let mut r = rng::stream(2, &[]);
        let perm = [2, 0, 3, 1];
        let y: Vec<usize> = (0..500).map(|_| r.gen_range(0..4)).collect();
        let x: Vec<Vec<f64>> = y
            .iter()
            .map(|&c| one_hot(perm[c], 4).into_iter().map(|v| 7.0 * v - 3.0 + r.gen_range(-0.5..0.5)).collect())
            .collect();
        assert_eq!(fit_probe(&x, &y, 4, 9).unwrap().accuracy, 1.0);
    }

    #[test]
    fn uninformative_features_score_near_chance() {
        let mut r = rng::stream(3, &[]);
        let y: Vec<usize> = (0..2000).map(|_| r.gen_range(0..4)).collect();
        let x: Vec<Vec<f64>> = (0..2000).map(|_| (0..4).map(|_| r.gen::<f64>()).collect()).collect();
        let acc = fit_probe(&x, &y, 4, 0).unwrap().accuracy;
        assert!((0.15..0.35).contains(&acc), "{acc}");
    }

    #[test]
    fn single_class_is_flagged() {
        let x = vec![vec![0.3, 1.0]; 50];
        let res = fit_probe(&x, &[2; 50], 4, 0).unwrap();
        assert!(res.degenerate);
        assert_eq!(res.accuracy, 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_probe(&vec![vec![1.0]; 3], &[0; 3], 2, 0).is_err());
        assert!(fit_probe(&vec![vec![f64::NAN]; 10], &[0; 10], 2, 0).is_err());
        assert!(fit_probe(&vec![vec![1.0]; 10], &[5; 10], 2, 0).is_err());
    }
}
