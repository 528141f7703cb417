//! Finite-difference verification of every differentiable op, run in `f64`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Init, Mode, NodeId, OpKind, ParamStore};
use crate::error::GraphError;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Op kinds with a gradient rule that the checker exercises.
pub const CHECKED_OPS: [OpKind; 12] = [
    OpKind::Conv2d,
    OpKind::Linear,
    OpKind::Relu,
    OpKind::MaxPool2d,
    OpKind::GlobalAvgPool2d,
    OpKind::BatchNorm2d,
    OpKind::Add,
    OpKind::Mul,
    OpKind::Sum,
    OpKind::Concat,
    OpKind::Softmax,
    OpKind::CrossEntropy,
];

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: OpKind,
    pub points: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero gradients
/// from turning rounding noise into large ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

struct Case {
    graph: Graph<f64>,
    store: ParamStore<f64>,
    feed: Vec<(String, Tensor<f64>)>,
    loss: NodeId,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so the ReLU kink is never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced 0.1 apart so no pooling window has a near tie.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n)
        .map(|i| i as f64 * 0.1 - n as f64 * 0.05 + rng.random_range(-0.01..0.01))
        .collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `out` to a scalar through fixed random weights.
fn weighted_sum(case: &mut Case, out: NodeId, shape: &[usize], rng: &mut ChaCha8Rng) -> NodeId {
    let r = case.graph.input("readout");
    case.feed
        .push(("readout".to_string(), uniform(rng, shape, -1.0, 1.0)));
    let prod = case.graph.mul(out, r);
    case.graph.sum(prod)
}

fn build_case(op: OpKind, rng: &mut ChaCha8Rng) -> Case {
    let mut case = Case {
        graph: Graph::new(),
        store: ParamStore::new(),
        feed: Vec::new(),
        loss: NodeId::default_placeholder(),
    };
    let g = &mut case.graph;
    let mut params: Vec<(&str, Tensor<f64>)> = Vec::new();
    let (out, out_shape) = match op {
        OpKind::Conv2d => {
            let x = g.param("x", &[2, 2, 5, 5], Init::Zeros);
            let w = g.param("w", &[3, 2, 3, 3], Init::Zeros);
            let b = g.param("b", &[3], Init::Zeros);
            params.push(("x", uniform(rng, &[2, 2, 5, 5], -1.0, 1.0)));
            params.push(("w", uniform(rng, &[3, 2, 3, 3], -1.0, 1.0)));
            params.push(("b", uniform(rng, &[3], -1.0, 1.0)));
            (g.conv2d(x, w, Some(b), 2, 1), vec![2, 3, 3, 3])
        }
        OpKind::Linear => {
            let x = g.param("x", &[3, 4], Init::Zeros);
            let w = g.param("w", &[2, 4], Init::Zeros);
            let b = g.param("b", &[2], Init::Zeros);
            params.push(("x", uniform(rng, &[3, 4], -1.0, 1.0)));
            params.push(("w", uniform(rng, &[2, 4], -1.0, 1.0)));
            params.push(("b", uniform(rng, &[2], -1.0, 1.0)));
            (g.linear(x, w, Some(b)), vec![3, 2])
        }
        OpKind::Relu => {
            let x = g.param("x", &[2, 3, 4], Init::Zeros);
            params.push(("x", away_from_zero(rng, &[2, 3, 4])));
            (g.relu(x), vec![2, 3, 4])
        }
        OpKind::MaxPool2d => {
            let x = g.param("x", &[2, 2, 4, 4], Init::Zeros);
            params.push(("x", separated(rng, &[2, 2, 4, 4])));
            (g.maxpool2d(x, 2, 2), vec![2, 2, 2, 2])
        }
        OpKind::GlobalAvgPool2d => {
            let x = g.param("x", &[2, 3, 3, 3], Init::Zeros);
            params.push(("x", uniform(rng, &[2, 3, 3, 3], -1.0, 1.0)));
            (g.global_avgpool2d(x), vec![2, 3])
        }
        OpKind::BatchNorm2d => {
            let x = g.param("x", &[3, 2, 3, 3], Init::Zeros);
            let y = g.batchnorm2d(x, "bn", 2, 1e-5, 0.1);
            params.push(("x", uniform(rng, &[3, 2, 3, 3], -1.0, 1.0)));
            params.push(("bn.weight", uniform(rng, &[2], 0.5, 1.5)));
            params.push(("bn.bias", uniform(rng, &[2], -0.5, 0.5)));
            (y, vec![3, 2, 3, 3])
        }
        OpKind::Add => {
            let a = g.param("a", &[2, 3], Init::Zeros);
            let b = g.param("b", &[2, 3], Init::Zeros);
            params.push(("a", uniform(rng, &[2, 3], -1.0, 1.0)));
            params.push(("b", uniform(rng, &[2, 3], -1.0, 1.0)));
            (g.add(a, b), vec![2, 3])
        }
        OpKind::Mul => {
            let a = g.param("a", &[2, 3], Init::Zeros);
            let b = g.param("b", &[2, 3], Init::Zeros);
            params.push(("a", uniform(rng, &[2, 3], -1.0, 1.0)));
            params.push(("b", uniform(rng, &[2, 3], -1.0, 1.0)));
            (g.mul(a, b), vec![2, 3])
        }
        OpKind::Sum => {
            let a = g.param("a", &[2, 3, 2], Init::Zeros);
            params.push(("a", uniform(rng, &[2, 3, 2], -1.0, 1.0)));
            let s = g.sum(a);
            // square the total so the gradient depends on the input
            (g.mul(s, s), vec![])
        }
        OpKind::Concat => {
            let a = g.param("a", &[2, 1, 2, 2], Init::Zeros);
            let b = g.param("b", &[2, 2, 2, 2], Init::Zeros);
            params.push(("a", uniform(rng, &[2, 1, 2, 2], -1.0, 1.0)));
            params.push(("b", uniform(rng, &[2, 2, 2, 2], -1.0, 1.0)));
            (g.concat(&[a, b]), vec![2, 3, 2, 2])
        }
        OpKind::Softmax => {
            let z = g.param("z", &[3, 4], Init::Zeros);
            params.push(("z", uniform(rng, &[3, 4], -2.0, 2.0)));
            (g.softmax(z), vec![3, 4])
        }
        OpKind::CrossEntropy => {
            let z = g.param("z", &[4, 2], Init::Zeros);
            let p = g.softmax(z);
            let y = g.input("labels");
            params.push(("z", uniform(rng, &[4, 2], -2.0, 2.0)));
            let labels = (0..4).map(|_| rng.random_range(0..2) as f64).collect();
            case.feed
                .push(("labels".to_string(), Tensor::new(vec![4], labels).unwrap()));
            (g.cross_entropy(p, y), vec![])
        }
        other => panic!("{other:?} has no gradient check"),
    };
    for (name, value) in params {
        case.store.insert(name, value, true);
    }
    case.store
        .initialize(case.graph.param_decls(), rng)
        .expect("declared shapes match");
    case.loss = if out_shape.is_empty() {
        out
    } else {
        weighted_sum(&mut case, out, &out_shape, rng)
    };
    case
}

impl NodeId {
    fn default_placeholder() -> Self {
        NodeId::from_index(usize::MAX)
    }
}

fn loss_at(case: &mut Case) -> Result<f64, GraphError> {
    let feed: Vec<(&str, &Tensor<f64>)> = case.feed.iter().map(|(n, t)| (n.as_str(), t)).collect();
    case.graph.forward(&mut case.store, &feed, Mode::Train)?;
    Ok(case.graph.value(case.loss).expect("evaluated").data()[0])
}

/// Max relative error between autodiff and central differences for one op,
/// over `points` random evaluation points.
pub fn check_op(op: OpKind, points: usize, seed: u64) -> Result<GradCheckReport, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (op as u64).wrapping_mul(0x9E37_79B9));
    let mut worst = 0.0f64;
    for _ in 0..points {
        let mut case = build_case(op, &mut rng);
        loss_at(&mut case)?;
        let grads = case.graph.backward(case.loss)?;
        let names: Vec<String> = grads.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let analytic = grads.get(&name).expect("listed").clone();
            for i in 0..analytic.numel() {
                let orig = case.store.get(&name).unwrap().data()[i];
                case.store.get_mut(&name).unwrap().data_mut()[i] = orig + STEP;
                let plus = loss_at(&mut case)?;
                case.store.get_mut(&name).unwrap().data_mut()[i] = orig - STEP;
                let minus = loss_at(&mut case)?;
                case.store.get_mut(&name).unwrap().data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * STEP);
                worst = worst.max(relative_error(analytic.data()[i], numeric));
            }
        }
    }
    Ok(GradCheckReport {
        op,
        points,
        max_rel_error: worst,
    })
}

pub fn check_all(points: usize, seed: u64) -> Result<Vec<GradCheckReport>, GraphError> {
    CHECKED_OPS
        .iter()
        .map(|&op| check_op(op, points, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_at_three_points() {
        for report in check_all(3, 11).unwrap() {
            assert!(
                report.passed(),
                "{:?}: max relative error {}",
                report.op,
                report.max_rel_error
            );
        }
    }

    #[test]
    fn a_wrong_gradient_would_be_caught() {
        // sanity check on the metric itself
        assert!(relative_error(1.0, 1.001) > TOLERANCE);
        assert!(relative_error(1e-9, 0.0) < TOLERANCE);
    }
}
