//! Residual streams, the dual-stream network, the two-stage training
//! protocol, subject-level prediction and class activation maps.

mod cam;
mod network;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Mode, ParamStore};
use crate::coding::{compute_channel_stats, ChannelStats, CodedImage};
use crate::dataset::augment::eval_view;
use crate::dataset::CodedSubject;
use crate::error::ModelError;
use crate::tensor::Tensor;

pub use cam::{compute_cam, Heatmap};
pub use network::{basic_block, build_stream, Arch, Network, StreamConfig, StreamKind, StreamNodes};
pub use train::{train, EpochRecord, TrainConfig, TrainRecord};

/// Channel statistics for each input kind, fitted on a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    pub slice: ChannelStats,
    pub patch: ChannelStats,
}

impl Normalizers {
    pub fn fit<'a>(subjects: impl IntoIterator<Item = &'a CodedSubject> + Clone) -> crate::Result<Self> {
        let slice = compute_channel_stats(subjects.clone().into_iter().flat_map(|s| s.slices.iter()))?;
        let patch = compute_channel_stats(subjects.into_iter().flat_map(|s| s.patches.iter()))?;
        Ok(Self { slice, patch })
    }

    pub fn for_kind(&self, kind: StreamKind) -> &ChannelStats {
        match kind {
            StreamKind::Slice => &self.slice,
            StreamKind::Patch => &self.patch,
        }
    }
}

pub(crate) fn image_of(subject: &CodedSubject, kind: StreamKind, k: usize) -> &CodedImage {
    match kind {
        StreamKind::Slice => &subject.slices[k],
        StreamKind::Patch => &subject.patches[k],
    }
}

/// Standardized network input for one image, planar `3 x out x out`.
pub(crate) fn eval_input(img: &CodedImage, stats: &ChannelStats, out: usize) -> Vec<f32> {
    let mut v = eval_view(&img.to_f32(), 3, img.width(), img.height(), out);
    stats.apply(&mut v);
    v
}

/// A network architecture together with its parameters and the input
/// normalization it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub store: ParamStore<f32>,
    pub norm: Normalizers,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    arch: Arch,
    norm: Normalizers,
    stage: u8,
}

/// Mixes a tag into a seed so related jobs draw from unrelated streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Model {
    /// Fresh parameters for `arch`, drawn from `seed`.
    pub fn init(arch: Arch, norm: Normalizers, seed: u64) -> Result<Self, ModelError> {
        let net = Network::build(&arch)?;
        let mut store = ParamStore::new();
        store.initialize(net.graph.param_decls(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { arch, store, norm })
    }

    pub fn to_checkpoint(&self, stage: u8) -> Vec<u8> {
        let meta = CheckpointMeta {
            arch: self.arch.clone(),
            norm: self.norm.clone(),
            stage,
        };
        checkpoint::encode(&self.store, serde_json::to_value(meta).expect("metadata serializes"))
    }

    /// Restores a model and its training stage.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Self, u8), ModelError> {
        let (store, manifest) = checkpoint::decode(bytes)?;
        let meta: CheckpointMeta = serde_json::from_value(manifest.metadata)
            .map_err(|e| ModelError::Metadata(e.to_string()))?;
        let net = Network::build(&meta.arch)?;
        for decl in net.graph.param_decls() {
            match store.get(&decl.name) {
                Some(t) if t.shape() == decl.shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Metadata(format!(
                        "tensor `{}` has shape {:?}, architecture needs {:?}",
                        decl.name,
                        t.shape(),
                        decl.shape
                    )))
                }
                None => return Err(ModelError::Metadata(format!("tensor `{}` is missing", decl.name))),
            }
        }
        Ok((
            Self {
                arch: meta.arch,
                store,
                norm: meta.norm,
            },
            meta.stage,
        ))
    }

    /// Evaluation-mode forward pass on the three center-cropped views of a
    /// subject. Returns the network with its node values populated.
    fn forward_views(&self, subject: &CodedSubject) -> Result<Network, ModelError> {
        let mut net = Network::build(&self.arch)?;
        let mut inputs = Vec::new();
        for cfg in self.arch.streams() {
            let stats = self.norm.for_kind(cfg.kind);
            let s = cfg.input_size;
            let mut data = Vec::with_capacity(3 * 3 * s * s);
            for k in 0..3 {
                data.extend(eval_input(image_of(subject, cfg.kind, k), stats, s));
            }
            inputs.push((cfg.kind.input_name(), Tensor::new(vec![3, 3, s, s], data)?));
        }
        let labels = Tensor::from_vec(vec![0.0f32; 3]);
        let mut feed: Vec<(&str, &Tensor)> = inputs.iter().map(|(n, t)| (*n, t)).collect();
        feed.push(("labels", &labels));
        let mut store = self.store.clone();
        net.graph.forward(&mut store, &feed, Mode::Eval)?;
        Ok(net)
    }

    /// Survival probability of each (slice, patch) pair, in selected-slice
    /// order.
    pub fn predict_views(&self, subject: &CodedSubject) -> Result<[f64; 3], ModelError> {
        let net = self.forward_views(subject)?;
        let p = net.graph.value(net.probs).expect("evaluated").data();
        Ok([p[1] as f64, p[3] as f64, p[5] as f64])
    }

    /// Mean survival probability over the three views.
    pub fn predict_subject(&self, subject: &CodedSubject) -> Result<f64, ModelError> {
        Ok(mean_probability(&self.predict_views(subject)?))
    }

    /// Pooled features of one stream for each view, row-major `3 x D`.
    pub fn stream_features(&self, subject: &CodedSubject, kind: StreamKind) -> Result<Vec<f32>, ModelError> {
        let net = self.forward_views(subject)?;
        let nodes = net
            .stream_nodes(kind)
            .ok_or_else(|| ModelError::Config(format!("model has no {kind:?} stream")))?;
        Ok(net.graph.value(nodes.features).expect("evaluated").data().to_vec())
    }
}

pub fn mean_probability(views: &[f64]) -> f64 {
    views.iter().sum::<f64>() / views.len() as f64
}

/// Combines two stage-one streams into a dual-stream model. Stream parameters
/// are copied unchanged; the stage-one heads are dropped and a fresh head is
/// drawn from `seed`.
pub fn assemble_dsn(slice: &Model, patch: &Model, seed: u64) -> Result<Model, ModelError> {
    let cfg = |m: &Model, want: StreamKind| match &m.arch {
        Arch::Single { stream } if stream.kind == want => Ok(stream.clone()),
        other => Err(ModelError::Config(format!("expected a single {want:?} stream, got {other:?}"))),
    };
    let arch = Arch::Dual {
        slice: cfg(slice, StreamKind::Slice)?,
        patch: cfg(patch, StreamKind::Patch)?,
    };
    let mut store = ParamStore::new();
    store.copy_prefixed(&slice.store, StreamKind::Slice.prefix());
    store.copy_prefixed(&patch.store, StreamKind::Patch.prefix());
    let net = Network::build(&arch)?;
    let expected = arch.head_width();
    store
        .initialize(net.graph.param_decls(), &mut ChaCha8Rng::seed_from_u64(seed))
        .map_err(|e| match e {
            crate::error::GraphError::ParamShape { found, .. } if found.len() == 2 => {
                ModelError::FeatureWidth {
                    expected,
                    found: found[1],
                }
            }
            other => other.into(),
        })?;
    Ok(Model {
        arch,
        store,
        norm: Normalizers {
            slice: slice.norm.slice.clone(),
            patch: patch.norm.patch.clone(),
        },
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::{code_subject, generate_phantoms, PhantomSpec};

    pub(crate) fn tiny_stream(kind: StreamKind) -> StreamConfig {
        StreamConfig {
            kind,
            input_size: 12,
            stem_stride: 2,
            widths: vec![4, 6],
            blocks: vec![1, 1],
        }
    }

    pub(crate) fn tiny_subjects(n: usize) -> Vec<CodedSubject> {
        let spec = PhantomSpec {
            subjects: n,
            extent: 32,
            depth: 4,
            roi_size: 12,
            ..PhantomSpec::default()
        };
        generate_phantoms(&spec)
            .unwrap()
            .iter()
            .map(|v| code_subject(v).unwrap())
            .collect()
    }

    #[test]
    fn assembly_preserves_stream_features_bit_exactly() {
        let subjects = tiny_subjects(4);
        let norm = Normalizers::fit(subjects.iter()).unwrap();
        let s = Model::init(Arch::Single { stream: tiny_stream(StreamKind::Slice) }, norm.clone(), 1).unwrap();
        let p = Model::init(Arch::Single { stream: tiny_stream(StreamKind::Patch) }, norm, 2).unwrap();
        let dsn = assemble_dsn(&s, &p, 3).unwrap();
        for (name, entry) in s.store.iter().filter(|(n, _)| n.starts_with("slice.")) {
            assert_eq!(dsn.store.get(name).unwrap(), &entry.value);
        }
        assert!(!dsn.store.contains("head.weight"));
        assert_eq!(dsn.store.get("dsn_head.weight").unwrap().shape(), &[2, 12]);
        for subj in &subjects {
            assert_eq!(
                dsn.stream_features(subj, StreamKind::Slice).unwrap(),
                s.stream_features(subj, StreamKind::Slice).unwrap()
            );
            assert_eq!(
                dsn.stream_features(subj, StreamKind::Patch).unwrap(),
                p.stream_features(subj, StreamKind::Patch).unwrap()
            );
        }
    }

    #[test]
    fn assembly_rejects_swapped_streams() {
        let subjects = tiny_subjects(2);
        let norm = Normalizers::fit(subjects.iter()).unwrap();
        let s = Model::init(Arch::Single { stream: tiny_stream(StreamKind::Slice) }, norm, 1).unwrap();
        assert!(assemble_dsn(&s, &s, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_predicts_identically() {
        let subjects = tiny_subjects(2);
        let norm = Normalizers::fit(subjects.iter()).unwrap();
        let arch = Arch::Dual {
            slice: tiny_stream(StreamKind::Slice),
            patch: tiny_stream(StreamKind::Patch),
        };
        let m = Model::init(arch, norm, 5).unwrap();
        let bytes = m.to_checkpoint(2);
        let (back, stage) = Model::from_checkpoint(&bytes).unwrap();
        assert_eq!(stage, 2);
        assert_eq!(back, m);
        for s in &subjects {
            let a = m.predict_views(s).unwrap();
            let b = back.predict_views(s).unwrap();
            assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        }
    }

    #[test]
    fn subject_probability_is_view_mean_and_order_free() {
        assert!((mean_probability(&[0.6, 0.7, 0.8]) - 0.7).abs() < 1e-15);
        let a = mean_probability(&[0.2, 0.9, 0.4]);
        let b = mean_probability(&[0.4, 0.2, 0.9]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn probabilities_are_complementary() {
        let subjects = tiny_subjects(2);
        let norm = Normalizers::fit(subjects.iter()).unwrap();
        let m = Model::init(Arch::Single { stream: tiny_stream(StreamKind::Patch) }, norm, 4).unwrap();
        let net = m.forward_views(&subjects[0]).unwrap();
        let p = net.graph.value(net.probs).unwrap().data();
        for row in p.chunks(2) {
            assert!((0.0..=1.0).contains(&row[1]));
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
    }
}
