//! Checkpoints, report files and the run manifest of an experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExperimentConfig, ExperimentResult, FoldModels, FoldRecords, Method, PredictionRow};
use crate::error::io_err;
use crate::model::Model;
use crate::report::{line_plot, write_atomic, Series};
use crate::stats::FoldPlan;
use crate::svm::SvmModel;
use crate::Error;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const ALPHA_SWEEP_CSV: &str = "alpha_sweep.csv";
pub const TESTS_JSON: &str = "tests.json";
pub const FOLDS_JSON: &str = "folds.json";
pub const MANIFEST_JSON: &str = "run_manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

fn write(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    write_atomic(path, bytes).map_err(io_err(path))
}

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(io_err(path))
}

const NETWORKS: [(&str, u8); 4] = [("slice", 1), ("patch", 1), ("dsn", 2), ("dsn_scratch", 2)];

pub fn checkpoint_path(dir: &Path, fold: usize, name: &str) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("fold{fold}_{name}.ktnsr"))
}

fn svm_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("fold{fold}_svm.json"))
}

fn records_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("fold{fold}_records.json"))
}

/// Writes the four networks, the SVM and the training records of a fold.
pub fn save_fold_models(dir: &Path, fold: usize, m: &FoldModels) -> Result<(), Error> {
    let nets = [&m.slice, &m.patch, &m.dsn, &m.dsn_scratch];
    for ((name, stage), net) in NETWORKS.iter().zip(nets) {
        write(&checkpoint_path(dir, fold, name), &net.to_checkpoint(*stage))?;
    }
    write(&svm_path(dir, fold), m.svm.to_json().as_bytes())?;
    write(&records_path(dir, fold), &serde_json::to_vec_pretty(&m.records)?)?;
    Ok(())
}

pub fn load_fold_models(dir: &Path, fold: usize) -> Result<FoldModels, Error> {
    let mut nets = Vec::with_capacity(4);
    for (name, stage) in NETWORKS {
        let path = checkpoint_path(dir, fold, name);
        let (model, found) = Model::from_checkpoint(&read(&path)?)?;
        if found != stage {
            return Err(Error::Config(format!(
                "{}: expected a stage {stage} checkpoint, found stage {found}",
                path.display()
            )));
        }
        nets.push(model);
    }
    let svm_text = String::from_utf8_lossy(&read(&svm_path(dir, fold))?).into_owned();
    let svm = SvmModel::from_json(&svm_text)?;
    let records: FoldRecords = serde_json::from_slice(&read(&records_path(dir, fold))?)?;
    let mut nets = nets.into_iter();
    Ok(FoldModels {
        slice: nets.next().expect("four"),
        patch: nets.next().expect("four"),
        dsn: nets.next().expect("four"),
        dsn_scratch: nets.next().expect("four"),
        svm,
        records,
    })
}

/// Whether every artifact of folds `0..k` is present.
pub fn has_fold_models(dir: &Path, k: usize) -> bool {
    (0..k).all(|fold| {
        NETWORKS.iter().all(|(n, _)| checkpoint_path(dir, fold, n).is_file())
            && svm_path(dir, fold).is_file()
            && records_path(dir, fold).is_file()
    })
}

/// `method,fold_0,..,fold_{k-1},mean,std`, one row per method, six decimals.
pub fn summary_csv(result: &ExperimentResult) -> String {
    let k = result.folds.len();
    let mut s = String::from("method");
    for i in 0..k {
        write!(s, ",fold_{i}").unwrap();
    }
    s += ",mean,std\n";
    for m in &result.summary {
        s += m.method.name();
        for f in &result.folds {
            write!(s, ",{:.6}", f.auc[&m.method]).unwrap();
        }
        writeln!(s, ",{:.6},{:.6}", m.mean_auc, m.std_auc).unwrap();
    }
    s
}

pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("fpr,tpr\n");
    for (x, y) in points {
        writeln!(s, "{x},{y}").unwrap();
    }
    s
}

pub fn alpha_sweep_csv(result: &ExperimentResult) -> String {
    let k = result.folds.len();
    let mut s = String::from("alpha,mean_auc,std_auc");
    for i in 0..k {
        write!(s, ",fold_{i}").unwrap();
    }
    s.push('\n');
    for p in &result.sweep {
        write!(s, "{:.2},{:.6},{:.6}", p.alpha, p.mean_auc, p.std_auc).unwrap();
        for a in &p.fold_aucs {
            write!(s, ",{a:.6}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn predictions_csv(rows: &[PredictionRow]) -> Result<Vec<u8>, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("predictions csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("predictions csv: {e}")))
}

pub fn read_predictions_csv(bytes: &[u8]) -> Result<Vec<PredictionRow>, Error> {
    let mut r = csv::Reader::from_reader(bytes);
    let rows = r
        .deserialize()
        .collect::<Result<Vec<PredictionRow>, _>>()
        .map_err(|e| Error::Config(format!("predictions csv: {e}")))?;
    for row in &rows {
        let ok = Method::ALL.iter().all(|&m| (0.0..=1.0).contains(&row.score(m)))
            && (0.0..=1.0).contains(&row.alpha)
            && row.label <= 1;
        if !ok {
            return Err(Error::Config(format!(
                "predictions csv: row for `{}` has a value outside [0, 1]",
                row.subject_id
            )));
        }
    }
    Ok(rows)
}

/// Groups prediction rows by fold, folds in ascending order.
pub fn rows_by_fold(rows: &[PredictionRow]) -> Vec<Vec<PredictionRow>> {
    let mut map: BTreeMap<usize, Vec<PredictionRow>> = BTreeMap::new();
    for r in rows {
        map.entry(r.fold).or_default().push(r.clone());
    }
    map.into_values().collect()
}

/// Linear interpolation of an ROC curve at `fpr`, taking the highest TPR on
/// vertical segments.
pub fn interpolate_tpr(points: &[(f64, f64)], fpr: f64) -> f64 {
    let mut best = 0.0f64;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if fpr < x0 || fpr > x1 {
            continue;
        }
        let y = if x1 == x0 { y1 } else { y0 + (y1 - y0) * (fpr - x0) / (x1 - x0) };
        best = best.max(y);
    }
    best
}

/// Mean over folds of the interpolated ROC curves on a 101-point grid.
pub fn mean_roc(result: &ExperimentResult, method: Method) -> Vec<(f64, f64)> {
    let k = result.folds.len() as f64;
    (0..=100)
        .map(|i| {
            let x = i as f64 / 100.0;
            let y = result.folds.iter().map(|f| interpolate_tpr(&f.roc[&method], x)).sum::<f64>() / k;
            (x, y)
        })
        .collect()
}

pub fn roc_svg(result: &ExperimentResult) -> String {
    let series: Vec<Series> = Method::ALL
        .iter()
        .map(|&m| Series {
            name: format!("{} ({:.2})", m.name(), result.mean_auc(m)),
            points: mean_roc(result, m),
        })
        .collect();
    line_plot("Mean ROC over folds", "false positive rate", "true positive rate", (0.0, 1.0), (0.0, 1.0), &series)
}

pub fn alpha_svg(result: &ExperimentResult) -> String {
    let pts = |f: &dyn Fn(&crate::fusion::AlphaPoint) -> f64| result.sweep.iter().map(|p| (p.alpha, f(p))).collect();
    let series = vec![
        Series { name: "mean AUC".into(), points: pts(&|p| p.mean_auc) },
        Series { name: "mean - std".into(), points: pts(&|p| p.mean_auc - p.std_auc) },
        Series { name: "mean + std".into(), points: pts(&|p| p.mean_auc + p.std_auc) },
    ];
    line_plot("Fused AUC by alpha", "alpha", "AUC", (0.0, 1.0), (0.0, 1.0), &series)
}

#[derive(Serialize)]
struct FoldSummary<'a> {
    fold: usize,
    alpha: f64,
    auc: &'a BTreeMap<Method, f64>,
    cam: &'a super::CamSummary,
    records: &'a FoldRecords,
}

#[derive(Serialize)]
struct FoldsFile<'a> {
    plan: &'a FoldPlan,
    folds: Vec<FoldSummary<'a>>,
    cam_total: super::CamSummary,
}

/// Everything needed to repeat a run, plus the hashes of what it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub config_toml: String,
    pub dataset_hash: String,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn config(&self) -> crate::Result<ExperimentConfig> {
        let cfg = ExperimentConfig::from_toml(&self.config_toml)?;
        if cfg.hash() != self.config_hash {
            return Err(Error::Config("manifest config does not match its hash".into()));
        }
        Ok(cfg)
    }

    pub fn from_json(bytes: &[u8]) -> crate::Result<Self> {
        let m: Self = serde_json::from_slice(bytes)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", m.format_version)));
        }
        Ok(m)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), Error> {
    for e in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = e.map_err(io_err(dir))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != MANIFEST_JSON && !n.to_string_lossy().starts_with('.')) {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 of every file under `dir` except the manifest, keyed by
/// slash-separated relative path.
pub fn hash_artifacts(dir: &Path) -> Result<BTreeMap<String, String>, Error> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files
        .into_iter()
        .map(|rel| {
            let key = rel.iter().map(|c| c.to_string_lossy()).collect::<Vec<_>>().join("/");
            Ok((key, sha256_hex(&read(&dir.join(&rel))?)))
        })
        .collect()
}

/// Writes every report of `result` into `dir`, then the manifest.
pub fn write_reports(
    dir: &Path,
    cfg: &ExperimentConfig,
    dataset_hash: &str,
    result: &ExperimentResult,
) -> Result<RunManifest, Error> {
    write(&dir.join(SUMMARY_CSV), summary_csv(result).as_bytes())?;
    for f in &result.folds {
        for m in Method::ALL {
            let name = format!("roc_fold{}_{}.csv", f.fold, m.name());
            write(&dir.join(name), roc_csv(&f.roc[&m]).as_bytes())?;
        }
    }
    write(&dir.join(ALPHA_SWEEP_CSV), alpha_sweep_csv(result).as_bytes())?;
    let rows: Vec<PredictionRow> = result.folds.iter().flat_map(|f| f.predictions.iter().cloned()).collect();
    write(&dir.join(PREDICTIONS_CSV), &predictions_csv(&rows)?)?;
    write(&dir.join(TESTS_JSON), &serde_json::to_vec_pretty(&result.tests)?)?;
    let folds = FoldsFile {
        plan: &result.plan,
        folds: result
            .folds
            .iter()
            .map(|f| FoldSummary {
                fold: f.fold,
                alpha: f.alpha,
                auc: &f.auc,
                cam: &f.cam,
                records: &f.records,
            })
            .collect(),
        cam_total: result.cam_totals(),
    };
    write(&dir.join(FOLDS_JSON), &serde_json::to_vec_pretty(&folds)?)?;
    write(&dir.join("roc_mean.svg"), roc_svg(result).as_bytes())?;
    write(&dir.join("alpha_sweep.svg"), alpha_svg(result).as_bytes())?;
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config_toml: cfg.to_toml(),
        dataset_hash: dataset_hash.to_string(),
        artifacts: hash_artifacts(dir)?,
    };
    write(&dir.join(MANIFEST_JSON), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
