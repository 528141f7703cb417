//! Built-in verification suite: gradient checks plus small oracle checks of
//! the coding, ranking and statistics code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::gradcheck::{check_all, TOLERANCE};
use crate::coding::{encode_value, HU_MAX, HU_MIN};
use crate::fusion::{alpha_grid, fuse, DEFAULT_STEP};
use crate::stats::{anderson_darling_normal, auc, paired_t_test_one_sided, roc_curve, trapezoid_area};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

pub fn gradient_checks(seed: u64) -> Vec<Check> {
    match check_all(3, seed) {
        Ok(reports) => reports
            .into_iter()
            .map(|r| {
                check(
                    format!("gradient {:?}", r.op),
                    r.passed(),
                    format!("max relative error {:.3e} (limit {TOLERANCE:e})", r.max_rel_error),
                )
            })
            .collect(),
        Err(e) => vec![check("gradient", false, e.to_string())],
    }
}

pub fn coding_check() -> Check {
    let mut prev: Option<(usize, u8)> = None;
    for hu in HU_MIN..=HU_MAX {
        let b = encode_value(hu as f64);
        let nonzero: Vec<usize> = (0..3).filter(|&c| b[c] != 0).collect();
        if nonzero.len() > 1 {
            return check("hu coding", false, format!("HU {hu} sets channels {nonzero:?}"));
        }
        let owner = if hu <= -900 { 0 } else if hu <= 0 { 2 } else { 1 };
        if let Some((c, v)) = prev {
            if c == owner && b[owner] < v {
                return check("hu coding", false, format!("HU {hu} decreases channel {owner}"));
            }
        }
        prev = Some((owner, b[owner]));
    }
    let examples = [(-1024.0, [0, 0, 0]), (500.0, [0, 255, 0]), (-450.0, [0, 0, 128])];
    for (hu, want) in examples {
        if encode_value(hu) != want {
            return check("hu coding", false, format!("HU {hu} gives {:?}", encode_value(hu)));
        }
    }
    check("hu coding", true, "partition, monotonicity and examples hold")
}

pub fn auc_check(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_auc = 0.0f64;
    let mut worst_area = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        let a = match auc(&scores, &labels) {
            Ok(a) => a,
            Err(e) => return check("auc", false, e.to_string()),
        };
        let roc = roc_curve(&scores, &labels).expect("two classes");
        worst_auc = worst_auc.max((a - num / pairs).abs());
        worst_area = worst_area.max((trapezoid_area(&roc) - a).abs());
    }
    check(
        "auc",
        worst_auc <= 1e-9 && worst_area <= 1e-12,
        format!("max |auc - pairwise| {worst_auc:.1e}, max |area - auc| {worst_area:.1e}"),
    )
}

pub fn statistics_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let a = [0.3, 0.1, 0.2, 0.4, 0.0];
    let b = [0.0; 5];
    out.push(match paired_t_test_one_sided(&a, &b) {
        Ok(t) => check(
            "paired t-test",
            (t.t - 2.828427).abs() < 1e-5 && (t.p - 0.0237).abs() < 1e-3 && t.reject_at_5pct,
            format!("t {:.6}, df {}, p {:.6}", t.t, t.df, t.p),
        ),
        Err(e) => check("paired t-test", false, e.to_string()),
    });
    out.push(check(
        "paired t-test constant differences",
        paired_t_test_one_sided(&[2.0; 4], &[1.0; 4]).is_err(),
        "rejected as undefined",
    ));
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let quantiles: Vec<f64> = (1..=20).map(|i| normal.inverse_cdf((i as f64 - 0.5) / 20.0)).collect();
    let bimodal: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 100.0 }).collect();
    let ad = (anderson_darling_normal(&quantiles), anderson_darling_normal(&bimodal));
    out.push(match ad {
        (Ok(q), Ok(bi)) => check(
            "anderson-darling",
            !q.reject_at_5pct && bi.reject_at_5pct && anderson_darling_normal(&[1.0; 5]).is_err(),
            format!("quantiles A2* {:.4}, bimodal A2* {:.4}", q.a2_adjusted, bi.a2_adjusted),
        ),
        (Err(e), _) | (_, Err(e)) => check("anderson-darling", false, e.to_string()),
    });
    out
}

pub fn fusion_check() -> Check {
    let grid = alpha_grid(DEFAULT_STEP).unwrap_or_default();
    let ends = [(0.2, 0.9), (0.0, 1.0), (0.7310585786300049, 0.1)]
        .iter()
        .all(|&(d, s)| fuse(d, s, 0.0).ok() == Some(s) && fuse(d, s, 1.0).ok() == Some(d));
    check(
        "fusion",
        ends && grid.len() == 21 && grid[0] == 0.0 && grid[20] == 1.0,
        format!("{} grid points", grid.len()),
    )
}

/// Every check, gradient checks first.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut out = gradient_checks(seed);
    out.push(coding_check());
    out.push(auc_check(seed));
    out.extend(statistics_checks());
    out.push(fusion_check());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for c in run_all(3) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
