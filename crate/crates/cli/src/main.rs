use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use kampnet::dataset::{code_subject, dataset_hash, extract_inputs, generate_phantoms, load_dataset, load_volume, save_dataset, Volume};
use kampnet::coding::encode_grayscale;
use kampnet::experiment::outputs::{
    has_fold_models, load_fold_models, read_predictions_csv, rows_by_fold, save_fold_models, sha256_hex,
    write_reports, RunManifest, CHECKPOINT_DIR, MANIFEST_JSON, SUMMARY_CSV,
};
use kampnet::experiment::{run_experiment, train_all, ExperimentConfig};
use kampnet::fusion::sweep_alpha;
use kampnet::model::{compute_cam, Arch, Model};
use kampnet::report::write_atomic;

#[derive(Parser)]
#[command(name = "kampnet", version, about = "Mortality risk experiments on synthetic CT phantoms")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment config; paper defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set stage1.max_epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset directory written by `generate`; phantoms are generated in
    /// memory from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset directory.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Phantom seed (overrides `phantom.seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the HU-coded slice and patch PNGs of one volume.
    Encode {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every fold and save checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Experiment seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Folds trained at once; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Evaluate every fold and write reports, training folds without
    /// matching checkpoints first.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Repeat the run described by a `run_manifest.json` and compare
        /// every report against it. Replaces `--config` and `--set`.
        #[arg(long, conflicts_with_all = ["config", "overrides", "seed"])]
        manifest: Option<PathBuf>,
        /// Retrain even when matching checkpoints exist.
        #[arg(long)]
        retrain: bool,
        /// Golden `summary.csv` that the result must match byte for byte.
        #[arg(long)]
        golden: Option<PathBuf>,
        /// Overwrite the golden file with this run's summary.
        #[arg(long, requires = "golden")]
        bless: bool,
    },
    /// Sweep the fusion weight over saved test predictions.
    SweepAlpha {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = kampnet::fusion::DEFAULT_STEP)]
        step: f64,
        /// Write the sweep as CSV instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Class activation heatmap of one subject from a DSN checkpoint.
    Cam {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        subject: String,
        /// Selected slice 0, 1 or 2.
        #[arg(long, default_value_t = 1)]
        view: usize,
        /// Class whose map is drawn; 0 is deceased.
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved config as TOML.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Gradient checks and oracle checks.
    Selftest {
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_toml(&text).with_context(|| format!("config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        cfg.set(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_volumes(data: &DataArgs, cfg: &ExperimentConfig) -> anyhow::Result<Vec<Volume>> {
    match &data.data {
        Some(dir) => Ok(load_dataset(dir).with_context(|| format!("dataset {}", dir.display()))?),
        None => {
            log::info!("generating {} phantoms (seed {})", cfg.phantom.subjects, cfg.phantom.seed);
            generate_phantoms(&cfg.phantom).map_err(|e| anyhow::anyhow!(kampnet::Error::Config(e)))
        }
    }
}

fn code_all(volumes: &[Volume]) -> anyhow::Result<Vec<kampnet::dataset::CodedSubject>> {
    Ok(volumes.iter().map(code_subject).collect::<kampnet::Result<Vec<_>>>()?)
}

const PROVENANCE: &str = "provenance.json";

fn provenance(cfg: &ExperimentConfig, data_hash: &str) -> serde_json::Value {
    serde_json::json!({ "config_hash": cfg.hash(), "dataset_hash": data_hash })
}

fn checkpoints_match(out: &Path, cfg: &ExperimentConfig, data_hash: &str) -> bool {
    let path = out.join(CHECKPOINT_DIR).join(PROVENANCE);
    let stored = fs::read(&path).ok().and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok());
    stored.as_ref() == Some(&provenance(cfg, data_hash)) && has_fold_models(out, cfg.folds)
}

fn train_and_save(
    subjects: &[kampnet::dataset::CodedSubject],
    cfg: &ExperimentConfig,
    out: &Path,
    data_hash: &str,
    jobs: usize,
) -> anyhow::Result<()> {
    let marker = out.join(CHECKPOINT_DIR).join(PROVENANCE);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    train_all(subjects, cfg, jobs, |fold, models| {
        log::info!("fold {fold}: trained");
        save_fold_models(out, fold, models)
    })?;
    write_atomic(&marker, &serde_json::to_vec_pretty(&provenance(cfg, data_hash))?)?;
    Ok(())
}

fn print_summary(summary_csv: &str) {
    for line in summary_csv.lines() {
        let cells: Vec<&str> = line.split(',').collect();
        let n = cells.len();
        println!("{:<12} {:>9} {:>9}", cells[0], cells[n - 2], cells[n - 1]);
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    config: &ConfigArgs,
    data: &DataArgs,
    seed: Option<u64>,
    out: Option<PathBuf>,
    jobs: usize,
    manifest: Option<PathBuf>,
    retrain: bool,
    golden: Option<PathBuf>,
    bless: bool,
) -> anyhow::Result<bool> {
    let reference = match &manifest {
        Some(p) => Some(RunManifest::from_json(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)?),
        None => None,
    };
    let mut cfg = match &reference {
        Some(m) => m.config()?,
        None => load_config(config)?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let volumes = load_volumes(data, &cfg)?;
    let data_hash = dataset_hash(&volumes);
    if let Some(m) = &reference {
        if m.dataset_hash != data_hash {
            bail!("dataset hash {data_hash} differs from the manifest's {}", m.dataset_hash);
        }
    }
    let subjects = code_all(&volumes)?;
    if retrain || !checkpoints_match(&out, &cfg, &data_hash) {
        log::info!("training {} folds into {}", cfg.folds, out.display());
        train_and_save(&subjects, &cfg, &out, &data_hash, jobs)?;
    } else {
        log::info!("reusing checkpoints in {}", out.join(CHECKPOINT_DIR).display());
    }
    let result = run_experiment(&subjects, &cfg, jobs, |fold, _| load_fold_models(&out, fold))?;
    let written = write_reports(&out, &cfg, &data_hash, &result)?;
    let summary = fs::read_to_string(out.join(SUMMARY_CSV))?;
    print_summary(&summary);
    let cam = result.cam_totals();
    println!(
        "cam: inside > outside for {}/{} correctly classified deceased subjects ({} without visible calcification)",
        cam.inside_higher, cam.evaluated, cam.skipped
    );
    println!("wrote {}", out.join(MANIFEST_JSON).display());
    let mut ok = true;
    if let Some(m) = &reference {
        let mut differing = Vec::new();
        for (name, hash) in &m.artifacts {
            if written.artifacts.get(name) != Some(hash) {
                differing.push(name.as_str());
            }
        }
        if differing.is_empty() {
            println!("reproduced all {} artifacts of the manifest", m.artifacts.len());
        } else {
            ok = !differing.contains(&SUMMARY_CSV);
            println!("{} of {} artifacts differ: {}", differing.len(), m.artifacts.len(), differing.join(", "));
        }
    }
    if let Some(g) = golden {
        if bless {
            write_atomic(&g, summary.as_bytes())?;
            println!("blessed {}", g.display());
        } else {
            let expected = fs::read(&g).with_context(|| format!("reading golden {}", g.display()))?;
            if expected == summary.as_bytes() {
                println!("summary matches golden {}", g.display());
            } else {
                println!(
                    "summary differs from golden {} (sha256 {} vs {})",
                    g.display(),
                    sha256_hex(summary.as_bytes()),
                    sha256_hex(&expected)
                );
                ok = false;
            }
        }
    }
    Ok(ok)
}

fn heat_color(v: f32) -> [u8; 3] {
    let ch = |c: f32| ((1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn cam(
    config: &ConfigArgs,
    data: &DataArgs,
    checkpoint: &Path,
    subject: &str,
    view: usize,
    class: usize,
    out: &Path,
) -> anyhow::Result<()> {
    if view > 2 || class > 1 {
        bail!("view must be 0..=2 and class 0 or 1");
    }
    let bytes = fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let (model, _) = Model::from_checkpoint(&bytes)?;
    if !matches!(model.arch, Arch::Dual { .. }) {
        bail!("{} is not a dual-stream checkpoint", checkpoint.display());
    }
    let volume = match &data.data {
        Some(dir) => load_volume(&kampnet::dataset::store::volume_path(dir, subject))?,
        None => {
            let cfg = load_config(config)?;
            load_volumes(data, &cfg)?
                .into_iter()
                .find(|v| v.meta.subject_id == subject)
                .with_context(|| format!("no subject `{subject}` in the generated phantoms"))?
        }
    };
    let coded = code_subject(&volume)?;
    let heat = compute_cam(&model, &coded, view, class)?;
    if heat.constant {
        log::warn!("activation map is flat");
    }
    let side = heat.crop.side as u32;
    let scale = 8;
    let mut map = image::RgbImage::new(side, side);
    let mut overlay = image::RgbImage::new(side, side);
    let inputs = extract_inputs(&volume)?;
    let gray = encode_grayscale(&inputs.patches[view]);
    let (pw, _) = inputs.patch_size;
    for y in 0..heat.crop.side {
        for x in 0..heat.crop.side {
            let h = heat.data[y * heat.crop.side + x];
            map.put_pixel(x as u32, y as u32, image::Rgb(heat_color(h)));
            let g = gray[(y + heat.crop.y) * pw + x + heat.crop.x] as f32;
            let a = 0.6 * h;
            let px = [g * (1.0 - a) + 255.0 * a, g * (1.0 - a), g * (1.0 - a)].map(|c| c.round() as u8);
            overlay.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let up = |img: &image::RgbImage| {
        image::imageops::resize(img, side * scale, side * scale, image::imageops::FilterType::Nearest)
    };
    fs::create_dir_all(out)?;
    let stem = format!("cam_{subject}_v{view}");
    up(&map).save(out.join(format!("{stem}.png")))?;
    up(&overlay).save(out.join(format!("{stem}_overlay.png")))?;
    println!("wrote {}", out.join(format!("{stem}.png")).display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.phantom.seed = s;
            }
            let volumes = generate_phantoms(&cfg.phantom).map_err(kampnet::Error::Config)?;
            save_dataset(&out, &volumes)?;
            println!("{} subjects in {}", volumes.len(), out.display());
            println!("dataset_hash {}", dataset_hash(&volumes));
            Ok(true)
        }
        Command::Encode { volume, out } => {
            let v = load_volume(&volume)?;
            let coded = code_subject(&v)?;
            for (k, z) in v.meta.selected_slices.iter().enumerate() {
                coded.slices[k].save_png(&out.join(format!("{}_slice_z{z}.png", v.meta.subject_id)))?;
                coded.patches[k].save_png(&out.join(format!("{}_patch_z{z}.png", v.meta.subject_id)))?;
            }
            println!("wrote 6 images to {}", out.display());
            Ok(true)
        }
        Command::Train { config, data, seed, out, jobs } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let volumes = load_volumes(&data, &cfg)?;
            let subjects = code_all(&volumes)?;
            train_and_save(&subjects, &cfg, &out, &dataset_hash(&volumes), jobs)?;
            println!("checkpoints in {}", out.join(CHECKPOINT_DIR).display());
            Ok(true)
        }
        Command::Evaluate {
            config,
            data,
            seed,
            out,
            jobs,
            manifest,
            retrain,
            golden,
            bless,
        } => evaluate(&config, &data, seed, out, jobs, manifest, retrain, golden, bless),
        Command::SweepAlpha { predictions, step, out } => {
            let bytes = fs::read(&predictions).with_context(|| format!("reading {}", predictions.display()))?;
            let rows = read_predictions_csv(&bytes)?;
            let folds: Vec<_> = rows_by_fold(&rows)
                .iter()
                .map(|f| f.iter().map(|r| r.component()).collect())
                .collect();
            let sweep = sweep_alpha(&folds, step)?;
            let mut text = String::from("alpha,mean_auc,std_auc\n");
            for p in &sweep {
                text += &format!("{:.2},{:.6},{:.6}\n", p.alpha, p.mean_auc, p.std_auc);
            }
            match out {
                Some(path) => write_atomic(&path, text.as_bytes())?,
                None => print!("{text}"),
            }
            Ok(true)
        }
        Command::Cam {
            config,
            data,
            checkpoint,
            subject,
            view,
            class,
            out,
        } => cam(&config, &data, &checkpoint, &subject, view, class, &out).map(|_| true),
        Command::Config { config } => {
            let cfg = load_config(&config)?;
            print!("{}", cfg.to_toml());
            println!("# sha256 {}", cfg.hash());
            Ok(true)
        }
        Command::Selftest { seed } => {
            let checks = kampnet::selftest::run_all(seed);
            for c in &checks {
                println!("{} {:<40} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use kampnet::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => "config",
                E::Io { .. } => "io",
                E::Checkpoint(_) => "checkpoint",
                E::Volume(_) => "volume",
                E::Fold { .. } => "fold",
                E::Json(_) => "json",
                E::Image(_) => "image",
                _ => "computation",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            let line = serde_json::json!({
                "error": error_kind(&err),
                "message": format!("{err:#}"),
            });
            eprintln!("{line}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_colors_run_blue_to_red() {
        assert_eq!(heat_color(0.0), [0, 0, 128]);
        assert_eq!(heat_color(1.0), [128, 0, 0]);
        assert_eq!(heat_color(0.5), [128, 255, 128]);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
