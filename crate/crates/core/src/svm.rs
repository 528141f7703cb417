//! Linear SVM over clinical measurements with Platt-calibrated outputs.

use serde::{Deserialize, Serialize};

use crate::error::SvmError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    /// Candidate regularization constants; the first is used when there is
    /// nothing to select on.
    pub c_grid: Vec<f64>,
    pub iterations: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c_grid: vec![1.0, 0.1, 10.0],
            iterations: 100_000,
        }
    }
}

/// Per-feature z-scoring fitted on training data. Zero-variance features are
/// kept in place but carry zero weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub keep: Vec<bool>,
}

impl Scaler {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self, SvmError> {
        let d = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for row in features {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for row in features {
            for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        std.iter_mut().for_each(|s| *s = s.sqrt());
        let keep: Vec<bool> = std.iter().map(|&s| s > 1e-12).collect();
        for (j, k) in keep.iter().enumerate() {
            if !k {
                log::warn!("feature {j} has zero variance and is ignored");
            }
        }
        if !keep.iter().any(|&k| k) {
            return Err(SvmError::NoUsableFeature);
        }
        Ok(Self { mean, std, keep })
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| {
                if self.keep[j] {
                    (v - self.mean[j]) / self.std[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub scaler: Scaler,
    pub platt_a: f64,
    pub platt_b: f64,
    pub iterations: usize,
    /// Recorded for provenance; the solver itself draws no random numbers.
    pub seed: u64,
}

fn validate(features: &[Vec<f64>], labels: &[u8]) -> Result<(), SvmError> {
    if features.len() < 2 || features.len() != labels.len() {
        return Err(SvmError::TooFewSamples(features.len().min(labels.len())));
    }
    let d = features[0].len();
    for (row, x) in features.iter().enumerate() {
        if x.len() != d {
            return Err(SvmError::FeatureWidth {
                row,
                expected: d,
                found: x.len(),
            });
        }
        if let Some(col) = x.iter().position(|v| !v.is_finite()) {
            return Err(SvmError::NonFiniteFeature { row, col });
        }
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(SvmError::BadLabel(bad));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(SvmError::SingleClass);
    }
    Ok(())
}

/// `(1/2)|w|^2 + C sum_i max(0, 1 - t_i (w.x_i + b))` on already scaled
/// features, with `t = 2y - 1`.
pub fn objective(w: &[f64], b: f64, x: &[Vec<f64>], labels: &[u8], c: f64) -> f64 {
    let reg: f64 = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let hinge: f64 = x
        .iter()
        .zip(labels)
        .map(|(xi, &y)| {
            let t = 2.0 * y as f64 - 1.0;
            (1.0 - t * (dot(w, xi) + b)).max(0.0)
        })
        .sum();
    reg + c * hinge
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full-batch subgradient descent on the objective divided by `C N`, with
/// step `1 / (lambda t)`, `lambda = 1 / (C N)`, returning the average of the
/// second half of the iterates.
fn solve(x: &[Vec<f64>], labels: &[u8], keep: &[bool], c: f64, iterations: usize) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let d = x[0].len();
    let lambda = 1.0 / (c * n);
    let t_of = |y: u8| 2.0 * y as f64 - 1.0;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut avg_w = vec![0.0; d];
    let mut avg_b = 0.0;
    let burn = iterations / 2;
    let mut gw = vec![0.0; d];
    for it in 1..=iterations {
        gw.iter_mut().zip(&w).for_each(|(g, wi)| *g = lambda * wi);
        let mut gb = 0.0;
        for (xi, &y) in x.iter().zip(labels) {
            let t = t_of(y);
            if t * (dot(&w, xi) + b) < 1.0 {
                for (g, v) in gw.iter_mut().zip(xi) {
                    *g -= t * v / n;
                }
                gb -= t / n;
            }
        }
        let eta = 1.0 / (lambda * it as f64);
        for j in 0..d {
            w[j] = if keep[j] { w[j] - eta * gw[j] } else { 0.0 };
        }
        b -= eta * gb;
        if it > burn {
            let k = (it - burn) as f64;
            for (a, wi) in avg_w.iter_mut().zip(&w) {
                *a += (wi - *a) / k;
            }
            avg_b += (b - avg_b) / k;
        }
    }
    (avg_w, avg_b)
}

/// Sigmoid `1 / (1 + exp(A f + B))` fitted to decision values by Newton's
/// method with backtracking on the regularized targets
/// `(N+ + 1)/(N+ + 2)` and `1/(N- + 2)`.
pub fn fit_platt(decisions: &[f64], labels: &[u8]) -> (f64, f64) {
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let hi = (pos + 1.0) / (pos + 2.0);
    let lo = 1.0 / (neg + 2.0);
    let targets: Vec<f64> = labels.iter().map(|&y| if y == 1 { hi } else { lo }).collect();
    let mut a = 0.0;
    let mut b = ((neg + 1.0) / (pos + 1.0)).ln();
    let sigma = 1e-12;
    let fval = |a: f64, b: f64| -> f64 {
        decisions
            .iter()
            .zip(&targets)
            .map(|(&f, &t)| {
                let z = f * a + b;
                if z >= 0.0 {
                    t * z + (1.0 + (-z).exp()).ln()
                } else {
                    (t - 1.0) * z + (1.0 + z.exp()).ln()
                }
            })
            .sum()
    };
    let mut f = fval(a, b);
    for _ in 0..100 {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (sigma, sigma, 0.0, 0.0, 0.0);
        for (&d, &t) in decisions.iter().zip(&targets) {
            let z = d * a + b;
            let (p, q) = if z >= 0.0 {
                let e = (-z).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = z.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += d * d * d2;
            h22 += d2;
            h21 += d * d2;
            let d1 = t - p;
            g1 += d * d1;
            g2 += d1;
        }
        if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        let mut moved = false;
        while step >= 1e-10 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = fval(na, nb);
            if nf < f + 1e-4 * step * gd {
                a = na;
                b = nb;
                f = nf;
                moved = true;
                break;
            }
            step /= 2.0;
        }
        if !moved {
            break;
        }
    }
    (a, b)
}

fn sigmoid_survival(a: f64, b: f64, s: f64) -> f64 {
    let z = a * s + b;
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Trains on `features` (rows) and `labels` (1 = survived) with a fixed `c`.
pub fn train_svm(
    features: &[Vec<f64>],
    labels: &[u8],
    c: f64,
    iterations: usize,
    seed: u64,
) -> Result<SvmModel, SvmError> {
    validate(features, labels)?;
    let scaler = Scaler::fit(features)?;
    let x: Vec<Vec<f64>> = features.iter().map(|r| scaler.transform(r)).collect();
    let (weights, bias) = solve(&x, labels, &scaler.keep, c, iterations.max(1));
    let decisions: Vec<f64> = x.iter().map(|xi| dot(&weights, xi) + bias).collect();
    let (platt_a, platt_b) = fit_platt(&decisions, labels);
    Ok(SvmModel {
        weights,
        bias,
        c,
        scaler,
        platt_a,
        platt_b,
        iterations,
        seed,
    })
}

impl SvmModel {
    pub fn decision(&self, row: &[f64]) -> Result<f64, SvmError> {
        if row.len() != self.weights.len() {
            return Err(SvmError::FeatureWidth {
                row: 0,
                expected: self.weights.len(),
                found: row.len(),
            });
        }
        if let Some(col) = row.iter().position(|v| !v.is_finite()) {
            return Err(SvmError::NonFiniteFeature { row: 0, col });
        }
        Ok(dot(&self.weights, &self.scaler.transform(row)) + self.bias)
    }

    /// Calibrated survival probability.
    pub fn predict_proba(&self, row: &[f64]) -> Result<f64, SvmError> {
        Ok(sigmoid_survival(self.platt_a, self.platt_b, self.decision(row)?))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Trains one model per candidate `C` and keeps the one with the highest
/// AUC on the validation rows (first candidate on ties).
pub fn train_svm_selected(
    train: (&[Vec<f64>], &[u8]),
    val: (&[Vec<f64>], &[u8]),
    cfg: &SvmConfig,
    seed: u64,
) -> crate::Result<SvmModel> {
    let mut best: Option<(f64, SvmModel)> = None;
    for &c in &cfg.c_grid {
        let model = train_svm(train.0, train.1, c, cfg.iterations, seed)?;
        let scores = val
            .0
            .iter()
            .map(|r| model.decision(r))
            .collect::<Result<Vec<_>, _>>()?;
        let auc = crate::stats::auc(&scores, val.1)?;
        if best.as_ref().is_none_or(|(a, _)| auc > *a) {
            best = Some((auc, model));
        }
    }
    best.map(|(_, m)| m)
        .ok_or_else(|| crate::Error::Config("empty SVM C grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn clusters(n: usize, gap: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = (i % 2) as u8;
            let c = if label == 1 { gap } else { -gap };
            x.push(vec![
                c + rng.sample::<f64, _>(StandardNormal) * 0.3,
                rng.sample::<f64, _>(StandardNormal),
            ]);
            y.push(label);
        }
        (x, y)
    }

    #[test]
    fn separable_clusters_are_fit_perfectly() {
        let (x, y) = clusters(40, 3.0, 1);
        let m = train_svm(&x, &y, 1.0, 20_000, 0).unwrap();
        for (xi, &yi) in x.iter().zip(&y) {
            assert_eq!((m.decision(xi).unwrap() > 0.0) as u8, yi);
        }
        let centroid = [3.0, 0.0];
        assert!(m.predict_proba(&centroid).unwrap() > 0.5);
        assert!(m.platt_a < 0.0);
    }

    #[test]
    fn mirrored_classes_calibrate_midpoint_to_half() {
        let base = [[1.0, 2.0], [2.0, 0.5], [0.5, 1.5], [1.5, -1.0], [0.2, 0.1]];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for p in base {
            x.push(vec![p[0], p[1]]);
            y.push(1);
            x.push(vec![-p[0], -p[1]]);
            y.push(0);
        }
        let m = train_svm(&x, &y, 1.0, 100_000, 0).unwrap();
        assert!(m.bias.abs() < 1e-3, "bias {}", m.bias);
        let p = m.predict_proba(&[0.0, 0.0]).unwrap();
        assert!((p - 0.5).abs() < 1e-3, "{p}");
    }

    #[test]
    fn beats_random_search() {
        let (x, y) = clusters(30, 0.5, 4);
        let m = train_svm(&x, &y, 1.0, 100_000, 0).unwrap();
        let xs: Vec<Vec<f64>> = x.iter().map(|r| m.scaler.transform(r)).collect();
        let ours = objective(&m.weights, m.bias, &xs, &y, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let w = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let b = rng.random_range(-3.0..3.0);
            let theirs = objective(&w, b, &xs, &y, 1.0);
            assert!(ours <= theirs + 1e-9, "{ours} > {theirs} at {w:?} {b}");
        }
    }

    #[test]
    fn probabilities_are_complementary_and_monotone() {
        let (x, y) = clusters(30, 1.0, 2);
        let m = train_svm(&x, &y, 1.0, 10_000, 0).unwrap();
        let mut last = 0.0;
        for s in -50..=50 {
            let p = sigmoid_survival(m.platt_a, m.platt_b, s as f64 * 0.1);
            assert!(p >= last);
            assert_eq!(p + (1.0 - p), 1.0);
            last = p;
        }
    }

    #[test]
    fn column_rescaling_keeps_ranking() {
        let (x, y) = clusters(30, 0.8, 3);
        let scaled: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] * 250.0, r[1]]).collect();
        let a = train_svm(&x, &y, 1.0, 20_000, 0).unwrap();
        let b = train_svm(&scaled, &y, 1.0, 20_000, 0).unwrap();
        let da: Vec<f64> = x.iter().map(|r| a.decision(r).unwrap()).collect();
        let db: Vec<f64> = scaled.iter().map(|r| b.decision(r).unwrap()).collect();
        for i in 0..x.len() {
            for j in 0..x.len() {
                if (da[i] - da[j]).abs() > 1e-9 {
                    assert_eq!(da[i] < da[j], db[i] < db[j]);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_serializable() {
        let (x, y) = clusters(20, 1.0, 5);
        let a = train_svm(&x, &y, 0.1, 5_000, 7).unwrap();
        let b = train_svm(&x, &y, 0.1, 5_000, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(SvmModel::from_json(&a.to_json()).unwrap(), a);
    }

    #[test]
    fn input_errors() {
        let x = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert!(matches!(train_svm(&x, &[1, 1], 1.0, 10, 0), Err(SvmError::SingleClass)));
        let bad = vec![vec![1.0, f64::NAN], vec![3.0, 4.0]];
        assert!(matches!(
            train_svm(&bad, &[0, 1], 1.0, 10, 0),
            Err(SvmError::NonFiniteFeature { row: 0, col: 1 })
        ));
        let m = train_svm(&x, &[0, 1], 1.0, 10, 0).unwrap();
        assert!(m.predict_proba(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn constant_feature_is_ignored() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 5.0]).collect();
        let y: Vec<u8> = (0..10).map(|i| (i >= 5) as u8).collect();
        let m = train_svm(&x, &y, 1.0, 5_000, 0).unwrap();
        assert_eq!(m.weights[1], 0.0);
        assert_eq!(m.scaler.keep, vec![true, false]);
    }
}
