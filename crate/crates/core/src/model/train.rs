use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{eval_input, image_of, Model, Network};
use crate::autodiff::{AdamConfig, AdamState, Mode};
use crate::dataset::augment::augment;
use crate::dataset::CodedSubject;
use crate::error::ModelError;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a new best validation loss.
    /// `None` always runs `max_epochs`.
    pub patience: Option<usize>,
    /// Random crops during training; off means center crops throughout.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            max_epochs: 200,
            batch_size: 16,
            patience: None,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: u8,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainRecord {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch].val_loss
    }

    /// Number of epochs until validation loss first drops to `target`.
    pub fn epochs_to_reach(&self, target: f64) -> Option<usize> {
        self.epochs
            .iter()
            .position(|e| e.val_loss <= target)
            .map(|i| i + 1)
    }
}

fn check_sets(subjects: &[CodedSubject], train: &[usize], val: &[usize]) -> Result<(), ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptySet("training"));
    }
    if val.is_empty() {
        return Err(ModelError::EmptySet("validation"));
    }
    let first = subjects[train[0]].label;
    if train.iter().all(|&i| subjects[i].label == first) {
        return Err(ModelError::SingleClass);
    }
    let ids: HashSet<&str> = train.iter().map(|&i| subjects[i].subject_id.as_str()).collect();
    if let Some(&i) = val.iter().find(|&&i| ids.contains(subjects[i].subject_id.as_str())) {
        return Err(ModelError::Overlap(subjects[i].subject_id.clone()));
    }
    Ok(())
}

/// Assembles one batch of `(subject, view)` samples. With an rng each image
/// gets a random crop, otherwise the evaluation center crop.
fn batch_feed(
    model: &Model,
    subjects: &[CodedSubject],
    samples: &[(usize, usize)],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<(&'static str, Tensor)>, ModelError> {
    let n = samples.len();
    let mut feed = Vec::new();
    for cfg in model.arch.streams() {
        let stats = model.norm.for_kind(cfg.kind);
        let s = cfg.input_size;
        let mut data = Vec::with_capacity(n * 3 * s * s);
        for &(i, k) in samples {
            let img = image_of(&subjects[i], cfg.kind, k);
            match rng.as_deref_mut() {
                Some(r) => {
                    let mut v = augment(&img.to_f32(), 3, img.width(), img.height(), s, r);
                    stats.apply(&mut v);
                    data.extend(v);
                }
                None => data.extend(eval_input(img, stats, s)),
            }
        }
        feed.push((cfg.kind.input_name(), Tensor::new(vec![n, 3, s, s], data)?));
    }
    let labels = samples.iter().map(|&(i, _)| subjects[i].label as f32).collect();
    feed.push(("labels", Tensor::from_vec(labels)));
    Ok(feed)
}

fn as_refs<'a>(feed: &'a [(&'static str, Tensor)]) -> Vec<(&'a str, &'a Tensor)> {
    feed.iter().map(|(n, t)| (*n, t)).collect()
}

fn scalar(net: &Network) -> f64 {
    net.graph.value(net.loss).expect("evaluated").data()[0] as f64
}

/// Mean evaluation-mode loss over every view of the given subjects.
fn evaluate_loss(
    net: &mut Network,
    model: &mut Model,
    subjects: &[CodedSubject],
    set: &[usize],
    batch: usize,
) -> Result<f64, ModelError> {
    let samples: Vec<(usize, usize)> = set.iter().flat_map(|&i| (0..3).map(move |k| (i, k))).collect();
    let mut total = 0.0;
    for chunk in samples.chunks(batch) {
        let feed = batch_feed(model, subjects, chunk, None)?;
        net.graph.forward(&mut model.store, &as_refs(&feed), Mode::Eval)?;
        total += scalar(net) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains every parameter of `model` on the views of the `train` subjects and
/// returns the parameters from the epoch with the lowest validation loss
/// (earliest on ties).
pub fn train(
    mut model: Model,
    subjects: &[CodedSubject],
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    stage: u8,
) -> Result<(Model, TrainRecord), ModelError> {
    check_sets(subjects, train, val)?;
    if cfg.max_epochs == 0 || cfg.batch_size == 0 {
        return Err(ModelError::Config("epochs and batch size must be positive".into()));
    }
    let mut net = Network::build(&model.arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(cfg.adam.clone());
    let mut samples: Vec<(usize, usize)> =
        train.iter().flat_map(|&i| (0..3).map(move |k| (i, k))).collect();
    let mut record = TrainRecord {
        stage,
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best = model.store.clone();
    for epoch in 0..cfg.max_epochs {
        samples.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in samples.chunks(cfg.batch_size) {
            let feed = batch_feed(&model, subjects, chunk, cfg.augment.then_some(&mut rng))?;
            net.graph.forward(&mut model.store, &as_refs(&feed), Mode::Train)?;
            loss_sum += scalar(&net) * chunk.len() as f64;
            let grads = net.graph.backward(net.loss)?;
            adam.step(&mut model.store, &grads, epoch)?;
        }
        let val_loss = evaluate_loss(&mut net, &mut model, subjects, val, cfg.batch_size)?;
        log::debug!("stage {stage} epoch {epoch}: val loss {val_loss:.5}");
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / samples.len() as f64,
            val_loss,
            lr: cfg.adam.effective_lr(epoch),
        });
        if epoch == 0 || val_loss < record.best_val_loss() {
            record.best_epoch = epoch;
            best = model.store.clone();
        }
        if let Some(p) = cfg.patience {
            if epoch - record.best_epoch >= p {
                break;
            }
        }
    }
    model.store = best;
    Ok((model, record))
}
