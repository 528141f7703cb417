use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::PhantomSpec;
use crate::fusion::FusionConfig;
use crate::model::{StreamConfig, TrainConfig};
use crate::svm::SvmConfig;

/// Every tunable of an experiment. Missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub folds: usize,
    pub output_dir: PathBuf,
    pub phantom: PhantomSpec,
    pub slice_stream: StreamConfig,
    pub patch_stream: StreamConfig,
    /// Separate training of each stream.
    pub stage1: TrainConfig,
    /// Fine-tuning of the assembled network; also used for the
    /// from-scratch baseline.
    pub stage2: TrainConfig,
    pub svm: SvmConfig,
    pub fusion: FusionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2018,
            folds: 10,
            output_dir: PathBuf::from("runs/default"),
            phantom: PhantomSpec::default(),
            slice_stream: StreamConfig::slice_default(),
            patch_stream: StreamConfig::patch_default(),
            stage1: TrainConfig::default(),
            stage2: TrainConfig::default(),
            svm: SvmConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> crate::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| crate::Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a `dotted.key=value` override, the value parsed as TOML.
    /// Call [`validate`](Self::validate) once all overrides are in.
    pub fn set(&mut self, assignment: &str) -> crate::Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| crate::Error::Config(format!("override `{assignment}` needs key=value")))?;
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        let value: toml::Value = format!("v = {raw}")
            .parse::<toml::Table>()
            .map(|mut t| t.remove("v").expect("present"))
            .or_else(|_| Ok::<_, crate::Error>(toml::Value::String(raw.to_string())))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut table = &mut doc;
        for p in &parts[..parts.len() - 1] {
            table = table
                .get_mut(*p)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| crate::Error::Config(format!("unknown config section `{p}` in `{key}`")))?;
        }
        let last = parts[parts.len() - 1];
        if !table.contains_key(last) && !is_optional_key(last) {
            return Err(crate::Error::Config(format!("unknown config key `{key}`")));
        }
        table.insert(last.to_string(), value);
        *self = toml::from_str(&toml::to_string(&doc).expect("table serializes"))
            .map_err(|e| crate::Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.phantom.validate().map_err(crate::Error::Config)?;
        if self.folds < 3 {
            return Err(crate::Error::Config(format!("folds = {} must be at least 3", self.folds)));
        }
        self.slice_stream.validate()?;
        self.patch_stream.validate()?;
        if !(0.0..=1.0).contains(&self.fusion.alpha) {
            return Err(crate::Error::Config(format!("fusion.alpha = {} outside [0, 1]", self.fusion.alpha)));
        }
        crate::fusion::alpha_grid(self.fusion.step)?;
        if self.svm.c_grid.is_empty() || self.svm.c_grid.iter().any(|&c| !(c > 0.0)) {
            return Err(crate::Error::Config("svm.c_grid must hold positive values".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Keys that serialize to nothing when unset.
fn is_optional_key(key: &str) -> bool {
    key == "patience"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_stated_training_schedule() {
        let c = ExperimentConfig::default();
        assert_eq!(c.stage1.adam.lr, 1e-5);
        assert_eq!(c.stage1.adam.decay_factor, 0.9);
        assert_eq!(c.stage1.adam.decay_every, 5);
        assert_eq!(c.stage1.max_epochs, 200);
        assert_eq!(c.stage2.max_epochs, 200);
        assert_eq!(c.stage1.batch_size, 16);
        assert_eq!(c.folds, 10);
        assert_eq!(c.fusion.alpha, 0.75);
        assert_eq!(c.fusion.step, 0.05);
        assert_eq!(c.phantom.subjects, 180);
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut c = ExperimentConfig::default();
        c.stage1.patience = Some(4);
        c.stage2.adam.lr = 3.3e-4;
        c.phantom.effects.calcification = 2.75;
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = ExperimentConfig::from_toml("seed = 3\n[stage1]\nmax_epochs = 5\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.stage1.max_epochs, 5);
        assert_eq!(c.stage1.adam.lr, 1e-5);
    }

    #[test]
    fn parse_errors_carry_line_context() {
        let err = ExperimentConfig::from_toml("seed = 3\nfolds = \"ten\"\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = ExperimentConfig::from_toml("sed = 3\n").unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::default();
        c.set("stage1.adam.lr=0.002").unwrap();
        c.set("phantom.effects.calcification = 3.5").unwrap();
        c.set("stage2.patience=3").unwrap();
        c.set("output_dir=runs/x").unwrap();
        c.set("slice_stream.widths=[4, 8]").unwrap();
        c.set("slice_stream.blocks=[1, 1]").unwrap();
        assert_eq!(c.stage1.adam.lr, 0.002);
        assert_eq!(c.phantom.effects.calcification, 3.5);
        assert_eq!(c.stage2.patience, Some(3));
        assert_eq!(c.output_dir, PathBuf::from("runs/x"));
        assert_eq!(c.slice_stream.widths, vec![4, 8]);
        assert!(c.set("stage1.nope=1").is_err());
        c.validate().unwrap();
        c.set("folds=1").unwrap();
        assert!(c.validate().is_err());
        assert!(c.set("folds=\"x\"").is_err());
    }
}
