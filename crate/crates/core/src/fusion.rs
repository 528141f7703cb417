//! Probability-level fusion `p = alpha p_dsn + (1 - alpha) p_svm`.

use serde::{Deserialize, Serialize};

use crate::error::FusionError;
use crate::stats::{auc, mean_std};

pub const DEFAULT_ALPHA: f64 = 0.75;
pub const DEFAULT_STEP: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub alpha: f64,
    pub step: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            step: DEFAULT_STEP,
        }
    }
}

fn unit(what: &'static str, value: f64) -> Result<f64, FusionError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(FusionError::OutOfRange { what, value })
    }
}

pub fn fuse(p_dsn: f64, p_svm: f64, alpha: f64) -> Result<f64, FusionError> {
    let (p, q, a) = (unit("p_dsn", p_dsn)?, unit("p_svm", p_svm)?, unit("alpha", alpha)?);
    Ok(a * p + (1.0 - a) * q)
}

/// Survival probabilities of one subject from every source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub subject_id: String,
    pub label: u8,
    pub p_dsn: f64,
    pub p_svm: f64,
    pub p_fused: f64,
}

impl SubjectPrediction {
    pub fn new(subject_id: String, label: u8, p_dsn: f64, p_svm: f64, alpha: f64) -> Result<Self, FusionError> {
        Ok(Self {
            subject_id,
            label,
            p_dsn,
            p_svm,
            p_fused: fuse(p_dsn, p_svm, alpha)?,
        })
    }

    pub fn p_deceased(&self) -> f64 {
        1.0 - self.p_fused
    }
}

/// `{0, step, 2 step, ..., 1}`, with both endpoints exact.
pub fn alpha_grid(step: f64) -> Result<Vec<f64>, FusionError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(FusionError::BadStep(step));
    }
    let n = (1.0 / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
    let last = grid.len() - 1;
    if (grid[last] - 1.0).abs() < 1e-9 {
        grid[last] = 1.0;
    } else {
        grid.push(1.0);
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
    pub std_auc: f64,
}

/// AUC of the fused score of one set of predictions at `alpha`.
pub fn fused_auc(preds: &[SubjectPrediction], alpha: f64) -> Result<f64, crate::Error> {
    let scores = preds
        .iter()
        .map(|p| fuse(p.p_dsn, p.p_svm, alpha))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
    Ok(auc(&scores, &labels)?)
}

/// Per-alpha AUC on each fold's predictions, with the mean and standard
/// deviation across folds.
pub fn sweep_alpha(folds: &[Vec<SubjectPrediction>], step: f64) -> Result<Vec<AlphaPoint>, crate::Error> {
    alpha_grid(step)?
        .into_iter()
        .map(|alpha| {
            let fold_aucs = folds
                .iter()
                .enumerate()
                .map(|(fold, preds)| {
                    fused_auc(preds, alpha).map_err(|e| match e {
                        crate::Error::Stats(source) => FusionError::Fold { fold, source }.into(),
                        other => other,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let (mean_auc, std_auc) = mean_std(&fold_aucs);
            Ok(AlphaPoint {
                alpha,
                fold_aucs,
                mean_auc,
                std_auc,
            })
        })
        .collect()
}

/// Alpha with the highest fused AUC on `val`; ties go to the candidate
/// closest to `prefer`.
pub fn select_alpha(val: &[SubjectPrediction], step: f64, prefer: f64) -> Result<f64, crate::Error> {
    let mut best: Option<(f64, f64)> = None;
    for alpha in alpha_grid(step)? {
        let a = fused_auc(val, alpha)?;
        best = match best {
            Some((ba, bv)) if bv > a || (bv == a && (ba - prefer).abs() <= (alpha - prefer).abs()) => {
                Some((ba, bv))
            }
            _ => Some((alpha, a)),
        };
    }
    Ok(best.expect("grid is never empty").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn preds(dsn: &[f64], svm: &[f64], labels: &[u8]) -> Vec<SubjectPrediction> {
        dsn.iter()
            .zip(svm)
            .zip(labels)
            .enumerate()
            .map(|(i, ((&d, &s), &y))| SubjectPrediction::new(format!("S{i}"), y, d, s, 0.75).unwrap())
            .collect()
    }

    #[test]
    fn fuse_examples() {
        assert!((fuse(0.8, 0.4, 0.75).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(fuse(0.8123, 0.4, 1.0).unwrap(), 0.8123);
        assert_eq!(fuse(0.8, 0.4321, 0.0).unwrap(), 0.4321);
        assert!(fuse(1.2, 0.4, 0.5).is_err());
        assert!(fuse(0.2, 0.4, -0.1).is_err());
    }

    #[test]
    fn grid_has_21_points_with_exact_endpoints() {
        let g = alpha_grid(0.05).unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[20], 1.0);
        assert_eq!(alpha_grid(0.3).unwrap().last(), Some(&1.0));
        assert!(alpha_grid(0.0).is_err());
        assert!(alpha_grid(1.5).is_err());
    }

    #[test]
    fn sweep_endpoints_equal_component_aucs() {
        let f1 = preds(&[0.9, 0.2, 0.6, 0.4], &[0.3, 0.1, 0.8, 0.5], &[1, 0, 1, 0]);
        let f2 = preds(&[0.1, 0.7, 0.55, 0.5], &[0.6, 0.2, 0.9, 0.3], &[1, 0, 0, 1]);
        let sweep = sweep_alpha(&[f1.clone(), f2.clone()], 0.05).unwrap();
        for (k, f) in [f1, f2].iter().enumerate() {
            let y: Vec<u8> = f.iter().map(|p| p.label).collect();
            let dsn: Vec<f64> = f.iter().map(|p| p.p_dsn).collect();
            let svm: Vec<f64> = f.iter().map(|p| p.p_svm).collect();
            assert_eq!(sweep[0].fold_aucs[k].to_bits(), auc(&svm, &y).unwrap().to_bits());
            assert_eq!(sweep[20].fold_aucs[k].to_bits(), auc(&dsn, &y).unwrap().to_bits());
        }
    }

    #[test]
    fn identical_components_give_flat_sweep() {
        let s = [0.9, 0.2, 0.6, 0.4, 0.35];
        let f = preds(&s, &s, &[1, 0, 1, 0, 1]);
        let sweep = sweep_alpha(&[f], 0.05).unwrap();
        assert!(sweep.iter().all(|p| p.mean_auc == sweep[0].mean_auc));
    }

    #[test]
    fn single_class_fold_is_reported_with_index() {
        let good = preds(&[0.9, 0.2], &[0.3, 0.1], &[1, 0]);
        let bad = preds(&[0.9, 0.2], &[0.3, 0.1], &[1, 1]);
        let err = sweep_alpha(&[good, bad], 0.5).unwrap_err();
        assert!(matches!(err, crate::Error::Fusion(FusionError::Fold { fold: 1, .. })), "{err:?}");
    }

    #[test]
    fn nested_selection_prefers_default_on_ties() {
        let s = [0.9, 0.2, 0.6, 0.4];
        let f = preds(&s, &s, &[1, 0, 1, 0]);
        assert_eq!(select_alpha(&f, 0.05, 0.75).unwrap(), 0.75);
        // svm perfectly separates, dsn inverted
        let f = preds(&[0.1, 0.9, 0.2, 0.8], &[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0]);
        assert!(select_alpha(&f, 0.05, 0.75).unwrap() < 0.5);
    }

    proptest! {
        #[test]
        fn monotone_in_each_component(p in 0.0f64..1.0, q in 0.0f64..1.0, dp in 0.0f64..0.5, a in 0.0f64..=1.0) {
            let p2 = (p + dp).min(1.0);
            prop_assert!(fuse(p2, q, a).unwrap() >= fuse(p, q, a).unwrap());
            prop_assert!(fuse(q, p2, a).unwrap() >= fuse(q, p, a).unwrap());
        }

        #[test]
        fn equal_svm_keeps_dsn_order(p1 in 0.0f64..1.0, p2 in 0.0f64..1.0, q in 0.0f64..1.0, a in 0.01f64..=1.0) {
            prop_assume!((p1 - p2).abs() > 1e-9);
            let f1 = fuse(p1, q, a).unwrap();
            let f2 = fuse(p2, q, a).unwrap();
            prop_assert_eq!(p1 < p2, f1 < f2);
        }
    }
}
