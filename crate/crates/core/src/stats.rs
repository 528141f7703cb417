//! Fold planning, ROC/AUC and the paired hypothesis tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::beta_reg;

use crate::error::StatsError;

/// Subjects split into `k` class-balanced parts, plus the validation part
/// assigned to each test fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    /// Subject indices per part.
    pub parts: Vec<Vec<usize>>,
    /// `validation[i]` is the validation part when part `i` is the test part.
    pub validation: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldRoles {
    pub test: Vec<usize>,
    pub val: Vec<usize>,
    pub train: Vec<usize>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.parts.len()
    }

    pub fn roles(&self, fold: usize) -> FoldRoles {
        let v = self.validation[fold];
        let train = (0..self.k())
            .filter(|&p| p != fold && p != v)
            .flat_map(|p| self.parts[p].iter().copied())
            .collect();
        FoldRoles {
            test: self.parts[fold].clone(),
            val: self.parts[v].clone(),
            train,
        }
    }
}

/// Shuffles each class with `seed`, deals both classes evenly into `k`
/// parts, and draws a validation part for every test part.
pub fn make_fold_plan(labels: &[u8], k: usize, seed: u64) -> Result<FoldPlan, StatsError> {
    if k < 3 {
        return Err(StatsError::InvalidPlan(format!("k = {k} leaves no training part")));
    }
    let mut classes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        if y > 1 {
            return Err(StatsError::InvalidPlan(format!("label {y} at subject {i}")));
        }
        classes[y as usize].push(i);
    }
    if classes[0].len() != classes[1].len() {
        return Err(StatsError::InvalidPlan(format!(
            "class counts differ: {} vs {}",
            classes[0].len(),
            classes[1].len()
        )));
    }
    if labels.len() % k != 0 || classes[0].len() % k != 0 {
        return Err(StatsError::InvalidPlan(format!(
            "{} subjects cannot be split into {k} balanced parts",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = classes[0].len() / k;
    for c in &mut classes {
        c.shuffle(&mut rng);
    }
    let parts = (0..k)
        .map(|p| {
            classes[0][p * per..(p + 1) * per]
                .iter()
                .chain(&classes[1][p * per..(p + 1) * per])
                .copied()
                .collect()
        })
        .collect();
    let validation = (0..k)
        .map(|t| {
            let v = rng.random_range(0..k - 1);
            if v >= t {
                v + 1
            } else {
                v
            }
        })
        .collect();
    Ok(FoldPlan { parts, validation })
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<(u64, u64), StatsError> {
    if scores.len() != labels.len() {
        return Err(StatsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(StatsError::NonFiniteScore(i));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(StatsError::SingleClass);
    }
    Ok((pos, neg))
}

/// `(score, positives, negatives)` per distinct score, highest first.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Vec<(f64, u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for i in order {
        let (p, n) = if labels[i] == 1 { (1, 0) } else { (0, 1) };
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += p;
                g.2 += n;
            }
            _ => groups.push((scores[i], p, n)),
        }
    }
    groups
}

/// Mann-Whitney AUC with label 1 as the positive class; tied pairs count
/// one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, StatsError> {
    let (pos, neg) = check_scores(scores, labels)?;
    // twice the concordance count keeps ties integral
    let mut twice = 0u128;
    let mut neg_below = neg;
    for (_, p, n) in tie_groups(scores, labels) {
        neg_below -= n;
        twice += 2 * p as u128 * neg_below as u128 + p as u128 * n as u128;
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

/// `(fpr, tpr)` points from `(0, 0)` to `(1, 1)`, one step per distinct
/// score.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>, StatsError> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (_, p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const AD_CRITICAL_5PCT: f64 = 0.752;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AndersonDarling {
    pub a2: f64,
    /// `a2 * (1 + 0.75/n + 2.25/n^2)`, compared against the critical value.
    pub a2_adjusted: f64,
    pub critical_5pct: f64,
    pub reject_at_5pct: bool,
}

/// Normality test with mean and variance estimated from the sample.
pub fn anderson_darling_normal(sample: &[f64]) -> Result<AndersonDarling, StatsError> {
    let n = sample.len();
    if n < 5 {
        return Err(StatsError::TooFew { needed: 5, got: n });
    }
    let (mean, sd) = mean_std(sample);
    if !(sd > 0.0) {
        return Err(StatsError::ZeroVariance);
    }
    let mut z: Vec<f64> = sample.iter().map(|v| (v - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let nf = n as f64;
    let tiny = f64::MIN_POSITIVE;
    let s: f64 = (0..n)
        .map(|i| {
            let lo = unit.cdf(z[i]).max(tiny).ln();
            let hi = unit.sf(z[n - 1 - i]).max(tiny).ln();
            (2.0 * i as f64 + 1.0) * (lo + hi)
        })
        .sum();
    let a2 = -nf - s / nf;
    let a2_adjusted = a2 * (1.0 + 0.75 / nf + 2.25 / (nf * nf));
    Ok(AndersonDarling {
        a2,
        a2_adjusted,
        critical_5pct: AD_CRITICAL_5PCT,
        reject_at_5pct: a2_adjusted > AD_CRITICAL_5PCT,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub t: f64,
    pub df: usize,
    /// One-sided, alternative `mean(a - b) > 0`.
    pub p: f64,
    pub reject_at_5pct: bool,
}

/// Upper tail `P(T > t)` of Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * beta_reg(df / 2.0, 0.5, x);
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// One-sided paired t-test of `mean(a - b) > 0`. Identical samples give
/// `t = 0, p = 0.5`; any other constant difference is an error.
pub fn paired_t_test_one_sided(a: &[f64], b: &[f64]) -> Result<PairedTTest, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch {
            scores: a.len(),
            labels: b.len(),
        });
    }
    let k = a.len();
    if k < 2 {
        return Err(StatsError::TooFew { needed: 2, got: k });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&v| v == d[0]) {
        if d[0] == 0.0 {
            return Ok(PairedTTest {
                t: 0.0,
                df: k - 1,
                p: 0.5,
                reject_at_5pct: false,
            });
        }
        return Err(StatsError::ConstantDifferences);
    }
    let (mean, sd) = mean_std(&d);
    let t = mean / (sd / (k as f64).sqrt());
    let p = student_t_sf(t, (k - 1) as f64);
    Ok(PairedTTest {
        t,
        df: k - 1,
        p,
        reject_at_5pct: p < 0.05,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.3, 0.5, 0.1], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]), Err(StatsError::SingleClass));
    }

    #[test]
    fn roc_endpoints_and_perfect_corner() {
        let r = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(r.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.last(), Some(&(1.0, 1.0)));
        assert!(r.contains(&(0.0, 1.0)));
    }

    #[test]
    fn fold_plan_paper_shape() {
        let labels: Vec<u8> = (0..180).map(|i| (i % 2) as u8).collect();
        let plan = make_fold_plan(&labels, 10, 42).unwrap();
        let mut seen = vec![0; 180];
        for part in &plan.parts {
            assert_eq!(part.len(), 18);
            assert_eq!(part.iter().filter(|&&i| labels[i] == 0).count(), 9);
            for &i in part {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        for f in 0..10 {
            assert_ne!(plan.validation[f], f);
            let r = plan.roles(f);
            assert_eq!(r.train.len(), 144);
        }
        assert_eq!(plan, make_fold_plan(&labels, 10, 42).unwrap());
        assert_ne!(plan, make_fold_plan(&labels, 10, 43).unwrap());
    }

    #[test]
    fn fold_plan_errors() {
        let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        assert!(make_fold_plan(&labels, 3, 0).is_err());
        assert!(make_fold_plan(&[0, 0, 1, 0, 1, 1, 0, 0], 2, 0).is_err());
    }

    /// Standard-normal quantile by bisection on the CDF.
    fn normal_quantile(p: f64) -> f64 {
        let unit = Normal::new(0.0, 1.0).unwrap();
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if unit.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn anderson_darling_reference_cases() {
        let q: Vec<f64> = (1..=20).map(|i| normal_quantile((i as f64 - 0.5) / 20.0)).collect();
        let r = anderson_darling_normal(&q).unwrap();
        assert!(!r.reject_at_5pct, "{r:?}");
        assert!(r.a2_adjusted < 0.3);

        let bimodal: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 100.0 }).collect();
        let r = anderson_darling_normal(&bimodal).unwrap();
        assert!(r.reject_at_5pct, "{r:?}");

        assert_eq!(anderson_darling_normal(&[1.0; 5]), Err(StatsError::ZeroVariance));
        assert!(matches!(anderson_darling_normal(&[1.0, 2.0]), Err(StatsError::TooFew { .. })));
    }

    #[test]
    fn anderson_darling_matches_direct_formula() {
        // independent evaluation of the textbook expression with erf
        let x = [2.1, -0.3, 0.8, 1.7, -1.2, 0.05, 0.9, 3.3, -0.7, 1.1];
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let mut y: Vec<f64> = x.to_vec();
        y.sort_by(f64::total_cmp);
        let phi = |v: f64| 0.5 * (1.0 + statrs::function::erf::erf((v - mean) / sd / 2f64.sqrt()));
        let mut s = 0.0;
        for i in 1..=x.len() {
            s += (2.0 * i as f64 - 1.0) / n
                * (phi(y[i - 1]).ln() + (1.0 - phi(y[x.len() - i])).ln());
        }
        let a2 = -n - s;
        let r = anderson_darling_normal(&x).unwrap();
        assert!((r.a2 - a2).abs() < 1e-10, "{} vs {a2}", r.a2);
    }

    /// Upper tail of Student's t by composite Simpson integration of the
    /// density from `t` to a far cutoff.
    fn t_sf_by_quadrature(t: f64, df: f64) -> f64 {
        let ln_c = statrs::function::gamma::ln_gamma((df + 1.0) / 2.0)
            - statrs::function::gamma::ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let pdf = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        // substitute x = t + u / (1 - u) to map [t, inf) onto [0, 1)
        let steps = 200_000;
        let h = 1.0 / steps as f64;
        let f = |u: f64| {
            if u >= 1.0 {
                0.0
            } else {
                pdf(t + u / (1.0 - u)) / ((1.0 - u) * (1.0 - u))
            }
        };
        let mut s = f(0.0) + f(1.0);
        for i in 1..steps {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn t_test_worked_example() {
        let d = [0.3, 0.1, 0.2, 0.4, 0.0];
        let zeros = [0.0; 5];
        let r = paired_t_test_one_sided(&d, &zeros).unwrap();
        assert!((r.t - 2.828427).abs() < 1e-5, "{}", r.t);
        assert_eq!(r.df, 4);
        assert!((r.p - 0.0237).abs() < 1e-3, "{}", r.p);
        let oracle = t_sf_by_quadrature(r.t, 4.0);
        assert!((r.p - oracle).abs() < 1e-9, "{} vs {oracle}", r.p);
        assert!(r.reject_at_5pct);
    }

    #[test]
    fn t_tail_matches_quadrature_and_statrs() {
        use statrs::distribution::StudentsT;
        for &(t, df) in &[(0.5, 3.0), (-1.2, 9.0), (2.2, 9.0), (1.5, 2.0), (0.01, 30.0)] {
            let ours = student_t_sf(t, df);
            let quad = t_sf_by_quadrature(t, df);
            let lib = StudentsT::new(0.0, 1.0, df).unwrap().sf(t);
            assert!((ours - quad).abs() < 1e-9, "t={t} df={df}: {ours} vs {quad}");
            assert!((ours - lib).abs() < 1e-10, "t={t} df={df}: {ours} vs {lib}");
        }
        // one degree of freedom is the Cauchy distribution
        let cauchy = 0.5 - 4f64.atan() / std::f64::consts::PI;
        assert!((student_t_sf(4.0, 1.0) - cauchy).abs() < 1e-12);
    }

    #[test]
    fn t_test_degenerate_cases() {
        let a = [0.7, 0.8, 0.75];
        let r = paired_t_test_one_sided(&a, &a).unwrap();
        assert_eq!((r.t, r.p, r.reject_at_5pct), (0.0, 0.5, false));
        assert_eq!(
            paired_t_test_one_sided(&[2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0]),
            Err(StatsError::ConstantDifferences)
        );
    }

    fn scored_sets() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..=50)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(0u8..20, n),
                    proptest::collection::vec(0u8..=1, n),
                )
            })
            .prop_filter("both classes", |(_, y)| y.contains(&0) && y.contains(&1))
            .prop_map(|(s, y)| (s.into_iter().map(|v| v as f64 / 19.0).collect(), y))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn auc_matches_pairwise_and_roc_area((s, y) in scored_sets()) {
            let a = auc(&s, &y).unwrap();
            prop_assert!((a - brute_auc(&s, &y)).abs() < 1e-9);
            let roc = roc_curve(&s, &y).unwrap();
            prop_assert!((trapezoid_area(&roc) - a).abs() < 1e-12);
            for w in roc.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }

        #[test]
        fn auc_is_invariant_to_increasing_transforms((s, y) in scored_sets()) {
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auc(&s, &y).unwrap(), auc(&t, &y).unwrap());
        }

        #[test]
        fn negated_scores_complement(n in 2usize..40, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let mut y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            y.shuffle(&mut rng);
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auc(&s, &y).unwrap() + auc(&neg, &y).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
