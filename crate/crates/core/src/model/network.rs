//! Residual streams and the networks built from them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, NodeId};
use crate::error::ModelError;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Slice,
    Patch,
}

impl StreamKind {
    /// Parameter-name prefix of this stream inside any network.
    pub fn prefix(self) -> &'static str {
        match self {
            StreamKind::Slice => "slice.",
            StreamKind::Patch => "patch.",
        }
    }

    pub fn input_name(self) -> &'static str {
        match self {
            StreamKind::Slice => "slice.input",
            StreamKind::Patch => "patch.input",
        }
    }
}

/// One convolutional stream: a 3x3 stem followed by stages of basic residual
/// blocks. Every stage after the first halves the spatial extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub kind: StreamKind,
    pub input_size: usize,
    #[serde(default = "default_stem_stride")]
    pub stem_stride: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
}

fn default_stem_stride() -> usize {
    2
}

impl StreamConfig {
    pub fn slice_default() -> Self {
        Self {
            kind: StreamKind::Slice,
            input_size: 64,
            stem_stride: 2,
            widths: vec![32, 64, 128],
            blocks: vec![2, 2, 2],
        }
    }

    pub fn patch_default() -> Self {
        Self {
            kind: StreamKind::Patch,
            input_size: 64,
            stem_stride: 2,
            widths: vec![16, 32, 64],
            blocks: vec![2, 2, 2],
        }
    }

    /// Width of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    /// Side of the final feature maps.
    pub fn feature_map_size(&self) -> usize {
        let mut s = self.input_size.div_ceil(self.stem_stride);
        for _ in 1..self.widths.len() {
            s = s.div_ceil(2);
        }
        s
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.widths.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.widths.len() != self.blocks.len() {
            return bad(format!(
                "{} stage widths but {} block counts",
                self.widths.len(),
                self.blocks.len()
            ));
        }
        if self.widths.contains(&0) || self.blocks.contains(&0) {
            return bad("widths and block counts must be positive".into());
        }
        if self.stem_stride == 0 || self.input_size < 4 {
            return bad(format!(
                "input size {} with stem stride {} is unusable",
                self.input_size, self.stem_stride
            ));
        }
        Ok(())
    }
}

fn conv3(g: &mut Graph, name: &str, cin: usize, cout: usize) -> NodeId {
    g.param(name, &[cout, cin, 3, 3], Init::FanInNormal { fan_in: cin * 9 })
}

fn conv_bn(g: &mut Graph, x: NodeId, p: &str, cin: usize, cout: usize, stride: usize) -> NodeId {
    let w = conv3(g, &format!("{p}.conv.weight"), cin, cout);
    let y = g.conv2d(x, w, None, stride, 1);
    g.batchnorm2d(y, &format!("{p}.bn"), cout, BN_EPS, BN_MOMENTUM)
}

/// Basic block: `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`, with a
/// strided 1x1 projection shortcut when the shape changes.
pub fn basic_block(
    g: &mut Graph,
    x: NodeId,
    p: &str,
    cin: usize,
    cout: usize,
    stride: usize,
) -> NodeId {
    let a = conv_bn(g, x, &format!("{p}.a"), cin, cout, stride);
    let a = g.relu(a);
    let b = conv_bn(g, a, &format!("{p}.b"), cout, cout, 1);
    let shortcut = if stride != 1 || cin != cout {
        let w = g.param(
            &format!("{p}.down.conv.weight"),
            &[cout, cin, 1, 1],
            Init::FanInNormal { fan_in: cin },
        );
        let s = g.conv2d(x, w, None, stride, 0);
        g.batchnorm2d(s, &format!("{p}.down.bn"), cout, BN_EPS, BN_MOMENTUM)
    } else {
        x
    };
    let sum = g.add(b, shortcut);
    g.relu(sum)
}

#[derive(Clone, Copy, Debug)]
pub struct StreamNodes {
    pub feature_map: NodeId,
    pub features: NodeId,
}

pub fn build_stream(g: &mut Graph, cfg: &StreamConfig) -> StreamNodes {
    let p = cfg.kind.prefix();
    let x = g.input(cfg.kind.input_name());
    let stem = conv_bn(g, x, &format!("{p}stem"), 3, cfg.widths[0], cfg.stem_stride);
    let mut h = g.relu(stem);
    let mut cin = cfg.widths[0];
    for (s, (&w, &n)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
        for b in 0..n {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            h = basic_block(g, h, &format!("{p}s{s}.b{b}"), cin, w, stride);
            cin = w;
        }
    }
    StreamNodes {
        feature_map: h,
        features: g.global_avgpool2d(h),
    }
}

/// Which streams a network contains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum Arch {
    /// A single stream with its own head `head.*` (stage one).
    Single { stream: StreamConfig },
    /// Both streams, features concatenated into the head `dsn_head.*`.
    Dual {
        slice: StreamConfig,
        patch: StreamConfig,
    },
}

impl Arch {
    pub fn head_prefix(&self) -> &'static str {
        match self {
            Arch::Single { .. } => "head.",
            Arch::Dual { .. } => "dsn_head.",
        }
    }

    pub fn head_width(&self) -> usize {
        match self {
            Arch::Single { stream } => stream.feature_dim(),
            Arch::Dual { slice, patch } => slice.feature_dim() + patch.feature_dim(),
        }
    }

    pub fn streams(&self) -> Vec<&StreamConfig> {
        match self {
            Arch::Single { stream } => vec![stream],
            Arch::Dual { slice, patch } => vec![slice, patch],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for s in self.streams() {
            s.validate()?;
        }
        if let Arch::Dual { slice, patch } = self {
            if slice.kind != StreamKind::Slice || patch.kind != StreamKind::Patch {
                return Err(ModelError::Config(
                    "dual network needs one slice and one patch stream".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A built graph with the nodes the training and analysis code needs.
pub struct Network {
    pub graph: Graph,
    pub arch: Arch,
    pub logits: NodeId,
    pub probs: NodeId,
    pub loss: NodeId,
    /// Per stream, in [`Arch::streams`] order.
    pub streams: Vec<(StreamKind, StreamNodes)>,
}

impl Network {
    pub fn build(arch: &Arch) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut g = Graph::new();
        let streams: Vec<(StreamKind, StreamNodes)> = arch
            .streams()
            .into_iter()
            .map(|cfg| (cfg.kind, build_stream(&mut g, cfg)))
            .collect();
        let features = if streams.len() == 1 {
            streams[0].1.features
        } else {
            let f: Vec<NodeId> = streams.iter().map(|(_, s)| s.features).collect();
            g.concat(&f)
        };
        let width = arch.head_width();
        let hp = arch.head_prefix();
        let w = g.param(
            &format!("{hp}weight"),
            &[2, width],
            Init::FanInNormal { fan_in: width },
        );
        let b = g.param(&format!("{hp}bias"), &[2], Init::Zeros);
        let logits = g.linear(features, w, Some(b));
        let probs = g.softmax(logits);
        let labels = g.input("labels");
        let loss = g.cross_entropy(probs, labels);
        Ok(Self {
            graph: g,
            arch: arch.clone(),
            logits,
            probs,
            loss,
            streams,
        })
    }

    pub fn stream_nodes(&self, kind: StreamKind) -> Option<StreamNodes> {
        self.streams.iter().find(|(k, _)| *k == kind).map(|(_, n)| *n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Mode, ParamStore};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(kind: StreamKind) -> StreamConfig {
        StreamConfig {
            kind,
            input_size: 12,
            stem_stride: 2,
            widths: vec![4, 6],
            blocks: vec![1, 1],
        }
    }

    #[test]
    fn zero_weight_block_is_identity_on_nonnegative_input() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = basic_block(&mut g, x, "blk", 3, 3, 1);
        let mut store = ParamStore::new();
        store
            .initialize(g.param_decls(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        for name in ["blk.a.conv.weight", "blk.b.conv.weight"] {
            let t = store.get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let input = Tensor::new(
            vec![2, 3, 4, 4],
            (0..96).map(|i| (i % 7) as f32 * 0.3).collect(),
        )
        .unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            g.forward(&mut store, &[("x", &input)], mode).unwrap();
            assert_eq!(g.value(y).unwrap(), &input);
        }
    }

    #[test]
    fn head_width_is_sum_of_feature_dims() {
        let mut s = StreamConfig::slice_default();
        let mut p = StreamConfig::patch_default();
        s.widths = vec![32, 64, 128];
        p.widths = vec![16, 32, 64];
        let arch = Arch::Dual { slice: s.clone(), patch: p.clone() };
        assert_eq!(arch.head_width(), 192);
        s.widths = vec![256, 512, 2048];
        p.widths = vec![128, 256, 512];
        assert_eq!(Arch::Dual { slice: s, patch: p }.head_width(), 2560);
    }

    #[test]
    fn dual_network_forward_shapes() {
        let arch = Arch::Dual {
            slice: tiny(StreamKind::Slice),
            patch: tiny(StreamKind::Patch),
        };
        let mut net = Network::build(&arch).unwrap();
        let mut store = ParamStore::new();
        store
            .initialize(net.graph.param_decls(), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let img = Tensor::full(&[3, 3, 12, 12], 0.5f32);
        let labels = Tensor::from_vec(vec![0.0, 1.0, 1.0]);
        net.graph
            .forward(
                &mut store,
                &[("slice.input", &img), ("patch.input", &img), ("labels", &labels)],
                Mode::Eval,
            )
            .unwrap();
        assert_eq!(net.graph.value(net.probs).unwrap().shape(), &[3, 2]);
        let fm = net.stream_nodes(StreamKind::Patch).unwrap().feature_map;
        assert_eq!(net.graph.value(fm).unwrap().shape(), &[3, 6, 3, 3]);
        assert_eq!(tiny(StreamKind::Patch).feature_map_size(), 3);
        assert!(store.contains("dsn_head.weight"));
        assert!(store.contains("slice.s1.b0.down.conv.weight"));
        assert!(!store.contains("slice.s0.b0.down.conv.weight"));
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let mut c = tiny(StreamKind::Slice);
        c.blocks = vec![1];
        assert!(Network::build(&Arch::Single { stream: c }).is_err());
    }
}
