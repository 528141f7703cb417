//! Cross-validated training and evaluation of every method on one dataset.

mod config;
pub mod outputs;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CodedSubject;
use crate::fusion::{fuse, select_alpha, sweep_alpha, AlphaPoint, SubjectPrediction};
use crate::model::{assemble_dsn, compute_cam, derive_seed, train, Arch, Model, Normalizers, TrainRecord};
use crate::stats::{
    anderson_darling_normal, auc, make_fold_plan, mean_std, paired_t_test_one_sided, roc_curve,
    AndersonDarling, FoldPlan, FoldRoles, PairedTTest,
};
use crate::svm::{train_svm_selected, SvmModel};
use crate::Error;

pub use config::ExperimentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Slice,
    Patch,
    Dsn,
    DsnScratch,
    Svm,
    Kamp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Slice,
        Method::Patch,
        Method::Dsn,
        Method::DsnScratch,
        Method::Svm,
        Method::Kamp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Slice => "slice",
            Method::Patch => "patch",
            Method::Dsn => "dsn",
            Method::DsnScratch => "dsn_scratch",
            Method::Svm => "svm",
            Method::Kamp => "kamp",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecords {
    pub slice: TrainRecord,
    pub patch: TrainRecord,
    pub dsn: TrainRecord,
    pub dsn_scratch: TrainRecord,
}

/// Everything trained for one fold.
#[derive(Clone, Debug)]
pub struct FoldModels {
    pub slice: Model,
    pub patch: Model,
    pub dsn: Model,
    pub dsn_scratch: Model,
    pub svm: SvmModel,
    pub records: FoldRecords,
}

fn clinical_rows(subjects: &[CodedSubject], set: &[usize]) -> (Vec<Vec<f64>>, Vec<u8>) {
    set.iter()
        .map(|&i| (subjects[i].clinical.to_vec(), subjects[i].label))
        .unzip()
}

fn fold_err(fold: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Fold {
        fold,
        source: Box::new(e),
    }
}

/// Seed of fold `fold`: the experiment seed xor the fold index.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ fold as u64
}

/// Stage one (both streams), stage two, the from-scratch baseline and the
/// SVM for one fold.
pub fn train_fold(
    subjects: &[CodedSubject],
    roles: &FoldRoles,
    cfg: &ExperimentConfig,
    fold: usize,
) -> Result<FoldModels, Error> {
    let run = || -> Result<FoldModels, Error> {
        let seed = fold_seed(cfg.seed, fold);
        let norm = Normalizers::fit(roles.train.iter().map(|&i| &subjects[i]))?;
        let single = |stream: &crate::model::StreamConfig, init: u64, order: u64| {
            let m = Model::init(Arch::Single { stream: stream.clone() }, norm.clone(), derive_seed(seed, init))?;
            train(m, subjects, &roles.train, &roles.val, &cfg.stage1, derive_seed(seed, order), 1)
        };
        log::info!("fold {fold}: stage one");
        let (slice, patch) = rayon::join(
            || single(&cfg.slice_stream, 1, 2),
            || single(&cfg.patch_stream, 3, 4),
        );
        let ((slice, slice_rec), (patch, patch_rec)) = (slice?, patch?);
        log::info!("fold {fold}: stage two and scratch baseline");
        let assembled = assemble_dsn(&slice, &patch, derive_seed(seed, 5))?;
        let dual = Arch::Dual {
            slice: cfg.slice_stream.clone(),
            patch: cfg.patch_stream.clone(),
        };
        let scratch = Model::init(dual, norm.clone(), derive_seed(seed, 7))?;
        let (dsn, dsn_scratch) = rayon::join(
            || train(assembled, subjects, &roles.train, &roles.val, &cfg.stage2, derive_seed(seed, 6), 2),
            || train(scratch, subjects, &roles.train, &roles.val, &cfg.stage2, derive_seed(seed, 8), 2),
        );
        let ((dsn, dsn_rec), (dsn_scratch, scratch_rec)) = (dsn?, dsn_scratch?);
        let (tx, ty) = clinical_rows(subjects, &roles.train);
        let (vx, vy) = clinical_rows(subjects, &roles.val);
        let svm = train_svm_selected((&tx, &ty), (&vx, &vy), &cfg.svm, seed)?;
        Ok(FoldModels {
            slice,
            patch,
            dsn,
            dsn_scratch,
            svm,
            records: FoldRecords {
                slice: slice_rec,
                patch: patch_rec,
                dsn: dsn_rec,
                dsn_scratch: scratch_rec,
            },
        })
    };
    run().map_err(fold_err(fold))
}

/// Test-set predictions of every method for one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub fold: usize,
    pub subject_id: String,
    pub label: u8,
    pub p_slice: f64,
    pub p_patch: f64,
    pub p_dsn: f64,
    pub p_dsn_scratch: f64,
    pub p_svm: f64,
    pub p_kamp: f64,
    pub alpha: f64,
}

impl PredictionRow {
    pub fn score(&self, m: Method) -> f64 {
        match m {
            Method::Slice => self.p_slice,
            Method::Patch => self.p_patch,
            Method::Dsn => self.p_dsn,
            Method::DsnScratch => self.p_dsn_scratch,
            Method::Svm => self.p_svm,
            Method::Kamp => self.p_kamp,
        }
    }

    pub fn component(&self) -> SubjectPrediction {
        SubjectPrediction {
            subject_id: self.subject_id.clone(),
            label: self.label,
            p_dsn: self.p_dsn,
            p_svm: self.p_svm,
            p_fused: self.p_kamp,
        }
    }
}

/// Localization of the deceased-class activation map on correctly
/// classified deceased test subjects.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CamSummary {
    /// Subjects with planted calcification inside the evaluation crop.
    pub evaluated: usize,
    /// Of those, subjects whose mean activation is higher inside the mask.
    pub inside_higher: usize,
    /// Correctly classified deceased subjects with no visible calcification.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub alpha: f64,
    pub auc: BTreeMap<Method, f64>,
    pub roc: BTreeMap<Method, Vec<(f64, f64)>>,
    pub predictions: Vec<PredictionRow>,
    pub cam: CamSummary,
    pub records: FoldRecords,
}

fn component_predictions(
    models: &FoldModels,
    subjects: &[CodedSubject],
    set: &[usize],
) -> Result<Vec<SubjectPrediction>, Error> {
    set.iter()
        .map(|&i| {
            let s = &subjects[i];
            let p_dsn = models.dsn.predict_subject(s)?;
            let p_svm = models.svm.predict_proba(&s.clinical)?;
            Ok(SubjectPrediction::new(s.subject_id.clone(), s.label, p_dsn, p_svm, 0.0)?)
        })
        .collect()
}

/// Planted calcification inside a coded patch: green channel saturated.
pub fn calcification_mask_coded(subject: &CodedSubject, view: usize) -> Vec<bool> {
    subject.patches[view].plane(1).iter().map(|&v| v == 255).collect()
}

fn cam_summary(models: &FoldModels, subjects: &[CodedSubject], rows: &[PredictionRow], test: &[usize]) -> Result<CamSummary, Error> {
    let mut summary = CamSummary::default();
    for (row, &i) in rows.iter().zip(test) {
        if row.label != 0 || row.p_dsn >= 0.5 {
            continue;
        }
        let s = &subjects[i];
        let (mut inside, mut outside, mut views) = (0.0, 0.0, 0);
        for view in 0..3 {
            let cam = compute_cam(&models.dsn, s, view, 0)?;
            let mask = calcification_mask_coded(s, view);
            if let Some((a, b)) = cam.inside_outside(&mask, s.patches[view].width()) {
                inside += a;
                outside += b;
                views += 1;
            }
        }
        if views == 0 {
            summary.skipped += 1;
            continue;
        }
        summary.evaluated += 1;
        if inside > outside {
            summary.inside_higher += 1;
        }
    }
    Ok(summary)
}

/// Predicts the fold's test subjects with every method. The fusion weight is
/// chosen on the fold's validation subjects.
pub fn evaluate_fold(
    subjects: &[CodedSubject],
    roles: &FoldRoles,
    models: &FoldModels,
    cfg: &ExperimentConfig,
    fold: usize,
) -> Result<FoldReport, Error> {
    let run = || -> Result<FoldReport, Error> {
        let val = component_predictions(models, subjects, &roles.val)?;
        let alpha = select_alpha(&val, cfg.fusion.step, cfg.fusion.alpha)?;
        let test = component_predictions(models, subjects, &roles.test)?;
        let rows = roles
            .test
            .iter()
            .zip(&test)
            .map(|(&i, c)| {
                let s = &subjects[i];
                Ok(PredictionRow {
                    fold,
                    subject_id: s.subject_id.clone(),
                    label: s.label,
                    p_slice: models.slice.predict_subject(s)?,
                    p_patch: models.patch.predict_subject(s)?,
                    p_dsn: c.p_dsn,
                    p_dsn_scratch: models.dsn_scratch.predict_subject(s)?,
                    p_svm: c.p_svm,
                    p_kamp: fuse(c.p_dsn, c.p_svm, alpha)?,
                    alpha,
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        let mut aucs = BTreeMap::new();
        let mut rocs = BTreeMap::new();
        for m in Method::ALL {
            let scores: Vec<f64> = rows.iter().map(|r| r.score(m)).collect();
            aucs.insert(m, auc(&scores, &labels)?);
            rocs.insert(m, roc_curve(&scores, &labels)?);
        }
        let cam = cam_summary(models, subjects, &rows, &roles.test)?;
        Ok(FoldReport {
            fold,
            alpha,
            auc: aucs,
            roc: rocs,
            predictions: rows,
            cam,
            records: models.records.clone(),
        })
    };
    run().map_err(fold_err(fold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub better: Method,
    pub than: Method,
    pub differences: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normality: Option<AndersonDarling>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normality_error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_test: Option<PairedTTest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_test_error: Option<String>,
}

/// Anderson-Darling on the per-fold AUC differences, then the one-sided
/// paired t-test of `better > than`.
pub fn compare(folds: &[FoldReport], better: Method, than: Method) -> Comparison {
    let a: Vec<f64> = folds.iter().map(|f| f.auc[&better]).collect();
    let b: Vec<f64> = folds.iter().map(|f| f.auc[&than]).collect();
    let differences: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let (normality, normality_error) = match anderson_darling_normal(&differences) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let (t_test, t_test_error) = match paired_t_test_one_sided(&a, &b) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Comparison {
        better,
        than,
        differences,
        normality,
        normality_error,
        t_test,
        t_test_error,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_auc: f64,
    pub std_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub plan: FoldPlan,
    pub folds: Vec<FoldReport>,
    pub summary: Vec<MethodSummary>,
    pub sweep: Vec<AlphaPoint>,
    pub tests: Vec<Comparison>,
}

impl ExperimentResult {
    pub fn mean_auc(&self, m: Method) -> f64 {
        self.summary.iter().find(|s| s.method == m).expect("every method summarized").mean_auc
    }

    pub fn fold_aucs(&self, m: Method) -> Vec<f64> {
        self.folds.iter().map(|f| f.auc[&m]).collect()
    }

    pub fn cam_totals(&self) -> CamSummary {
        self.folds.iter().fold(CamSummary::default(), |acc, f| CamSummary {
            evaluated: acc.evaluated + f.cam.evaluated,
            inside_higher: acc.inside_higher + f.cam.inside_higher,
            skipped: acc.skipped + f.cam.skipped,
        })
    }
}

/// Reduces per-fold reports into method summaries, the fusion sweep and the
/// hypothesis tests.
pub fn summarize(plan: FoldPlan, folds: Vec<FoldReport>, step: f64) -> Result<ExperimentResult, Error> {
    let summary = Method::ALL
        .iter()
        .map(|&method| {
            let v: Vec<f64> = folds.iter().map(|f| f.auc[&method]).collect();
            let (mean_auc, std_auc) = mean_std(&v);
            MethodSummary {
                method,
                mean_auc,
                std_auc,
            }
        })
        .collect();
    let per_fold: Vec<Vec<SubjectPrediction>> = folds
        .iter()
        .map(|f| f.predictions.iter().map(PredictionRow::component).collect())
        .collect();
    let sweep = sweep_alpha(&per_fold, step)?;
    let tests = vec![
        compare(&folds, Method::Kamp, Method::Dsn),
        compare(&folds, Method::Kamp, Method::Svm),
    ];
    Ok(ExperimentResult {
        plan,
        folds,
        summary,
        sweep,
        tests,
    })
}

pub fn fold_plan(subjects: &[CodedSubject], cfg: &ExperimentConfig) -> Result<FoldPlan, Error> {
    let labels: Vec<u8> = subjects.iter().map(|s| s.label).collect();
    Ok(make_fold_plan(&labels, cfg.folds, cfg.seed)?)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Obtains every fold's models from `provide` (training or loading them),
/// evaluates them and summarizes. Up to `jobs` folds run at once (`0` uses
/// every core); results do not depend on `jobs`.
pub fn run_experiment<F>(
    subjects: &[CodedSubject],
    cfg: &ExperimentConfig,
    jobs: usize,
    provide: F,
) -> Result<ExperimentResult, Error>
where
    F: Fn(usize, &FoldRoles) -> Result<FoldModels, Error> + Sync,
{
    cfg.validate()?;
    let plan = fold_plan(subjects, cfg)?;
    let reports = pool(jobs)?.install(|| {
        (0..plan.k())
            .into_par_iter()
            .map(|fold| {
                let roles = plan.roles(fold);
                let models = provide(fold, &roles).map_err(|e| match e {
                    Error::Fold { .. } => e,
                    other => fold_err(fold)(other),
                })?;
                evaluate_fold(subjects, &roles, &models, cfg, fold)
            })
            .collect::<Result<Vec<_>, Error>>()
    })?;
    summarize(plan, reports, cfg.fusion.step)
}

/// Trains every fold and hands each fold's models to `sink` as soon as they
/// are ready.
pub fn train_all<S>(subjects: &[CodedSubject], cfg: &ExperimentConfig, jobs: usize, sink: S) -> Result<(), Error>
where
    S: Fn(usize, &FoldModels) -> Result<(), Error> + Sync,
{
    cfg.validate()?;
    let plan = fold_plan(subjects, cfg)?;
    pool(jobs)?.install(|| {
        (0..plan.k()).into_par_iter().try_for_each(|fold| {
            let models = train_fold(subjects, &plan.roles(fold), cfg, fold)?;
            sink(fold, &models).map_err(fold_err(fold))
        })
    })
}

#[cfg(test)]
mod tests {
    use super::outputs::{load_fold_models, save_fold_models, summary_csv};
    use super::*;
    use crate::model::tests::{tiny_stream, tiny_subjects};
    use crate::model::StreamKind;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            seed: 5,
            folds: 4,
            slice_stream: tiny_stream(StreamKind::Slice),
            patch_stream: tiny_stream(StreamKind::Patch),
            ..ExperimentConfig::default()
        };
        for stage in [&mut cfg.stage1, &mut cfg.stage2] {
            stage.max_epochs = 2;
            stage.batch_size = 8;
            stage.adam.lr = 1e-3;
        }
        cfg.svm.iterations = 2000;
        cfg
    }

    #[test]
    fn experiment_is_complete_consistent_and_reloadable() {
        let subjects = tiny_subjects(16);
        let cfg = tiny_config();
        let result = run_experiment(&subjects, &cfg, 1, |fold, roles| train_fold(&subjects, roles, &cfg, fold)).unwrap();
        assert_eq!(result.folds.len(), 4);
        for f in &result.folds {
            assert_eq!(f.auc.len(), 6);
            assert_eq!(f.predictions.len(), 4);
            for roc in f.roc.values() {
                assert_eq!(roc[0], (0.0, 0.0));
                assert_eq!(*roc.last().unwrap(), (1.0, 1.0));
            }
        }
        let mut tested: Vec<&str> = result
            .folds
            .iter()
            .flat_map(|f| f.predictions.iter().map(|r| r.subject_id.as_str()))
            .collect();
        tested.sort();
        tested.dedup();
        assert_eq!(tested.len(), 16);
        for s in &result.summary {
            let v = result.fold_aucs(s.method);
            let mean = v.iter().sum::<f64>() / 4.0;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0;
            assert!((s.mean_auc - mean).abs() < 1e-12);
            assert!((s.std_auc - var.sqrt()).abs() < 1e-12);
        }
        assert_eq!(result.sweep.len(), 21);
        assert_eq!(result.tests.len(), 2);

        let dir = tempfile::tempdir().unwrap();
        train_all(&subjects, &cfg, 2, |fold, m| save_fold_models(dir.path(), fold, m)).unwrap();
        let reloaded = run_experiment(&subjects, &cfg, 2, |fold, _| load_fold_models(dir.path(), fold)).unwrap();
        assert_eq!(summary_csv(&reloaded), summary_csv(&result));
        assert_eq!(reloaded.folds, result.folds);
    }

    #[test]
    fn fold_errors_carry_the_fold_index() {
        let subjects = tiny_subjects(16);
        let cfg = tiny_config();
        let err = run_experiment(&subjects, &cfg, 1, |fold, _| {
            if fold == 2 {
                Err(Error::Config("boom".into()))
            } else {
                train_fold(&subjects, &fold_plan(&subjects, &cfg).unwrap().roles(fold), &cfg, fold)
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Fold { fold: 2, .. }), "{err}");
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::from_name(m.name()), Some(m));
        }
        assert_eq!(Method::from_name("resnet"), None);
    }
}
