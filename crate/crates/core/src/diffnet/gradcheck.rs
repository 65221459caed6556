//! Central finite-difference oracle for validating analytic gradients.
//!
//! The oracle only ever calls the forward path, so it stays independent
//! of the backward implementation it is used to check.

/// Central difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let fp = f(&probe);
            probe[i] = orig - step;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Worst-case elementwise relative error between an analytic gradient
/// and a numeric one. Elements where both magnitudes fall below `atol`
/// count as exact; everywhere else the error is |a-n| / max(|a|, |n|).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], atol: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            if a.abs() < atol && n.abs() < atol {
                0.0
            } else {
                (a - n).abs() / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Default probe step for f64 central differences.
pub const FD_STEP: f64 = 1e-5;

/// Absolute floor below which gradients are treated as zero.
pub const FD_ATOL: f64 = 1e-7;

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

/// Every differentiable op the graph supports, for sweep-style checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Dense,
    Conv2d,
    Conv2dStride2,
    Relu,
    Sigmoid,
    MaxPool2x2,
    AvgPool2x2,
    Upsample2x,
    Flatten,
    Add,
    ConcatChannels,
    Affine,
    Mul,
    Sum,
    Mse,
    MaskedMse,
}

pub const ALL_OP_KINDS: &[OpKind] = &[
    OpKind::Dense,
    OpKind::Conv2d,
    OpKind::Conv2dStride2,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::MaxPool2x2,
    OpKind::AvgPool2x2,
    OpKind::Upsample2x,
    OpKind::Flatten,
    OpKind::Add,
    OpKind::ConcatChannels,
    OpKind::Affine,
    OpKind::Mul,
    OpKind::Sum,
    OpKind::Mse,
    OpKind::MaskedMse,
];

fn random_data<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Resamples values that sit too close to a ReLU kink or a pooling tie,
/// where a central difference straddles the non-smooth point and the
/// comparison would be meaningless.
fn random_data_with_margin<R: Rng>(rng: &mut R, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if v.abs() >= margin {
                break v;
            }
        })
        .collect()
}

fn maxpool_safe_input<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize) -> Vec<f64> {
    'outer: loop {
        let x = random_data(rng, c * h * w);
        for ic in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let base = (ic * h + oy * 2) * w + ox * 2;
                    let mut vals = [x[base], x[base + 1], x[base + w], x[base + w + 1]];
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if vals[0] - vals[1] < 1e-3 {
                        continue 'outer;
                    }
                }
            }
        }
        return x;
    }
}

/// One randomized gradient check for `kind`: builds the op inside a
/// graph, reduces it to a scalar through a fixed random weighting, and
/// compares the analytic gradient of every differentiable operand with
/// a central finite difference. Returns the worst relative error.
pub fn random_trial<R: Rng>(kind: OpKind, rng: &mut R) -> f64 {
    // Random but gradient-friendly sizes.
    let c = rng.random_range(1..=3usize);
    let he = 2 * rng.random_range(2..=4usize); // even spatial dim
    let we = 2 * rng.random_range(2..=4usize);

    match kind {
        OpKind::Dense => {
            let (n_in, n_out) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let x = random_data(rng, n_in);
            let w = random_data(rng, n_out * n_in);
            let b = random_data(rng, n_out);
            let weights = random_data(rng, n_out);
            check_operands(
                &[(vec![n_in], x), (vec![n_out, n_in], w), (vec![n_out], b)],
                &weights,
                |g, ids| g.dense(ids[0], ids[1], ids[2]).unwrap(),
            )
        }
        OpKind::Conv2d | OpKind::Conv2dStride2 => {
            let (stride, h, w_sp) = if kind == OpKind::Conv2dStride2 {
                (2, he + 1, we + 1) // odd dims so (d + 2p - k) is even
            } else {
                (1, he, we)
            };
            let c_out = rng.random_range(1..=3usize);
            let k = 3;
            let p = 1;
            let x = random_data(rng, c * h * w_sp);
            let wt = random_data(rng, c_out * c * k * k);
            let b = random_data(rng, c_out);
            let h_out = (h + 2 * p - k) / stride + 1;
            let w_out = (w_sp + 2 * p - k) / stride + 1;
            let weights = random_data(rng, c_out * h_out * w_out);
            check_operands(
                &[
                    (vec![c, h, w_sp], x),
                    (vec![c_out, c, k, k], wt),
                    (vec![c_out], b),
                ],
                &weights,
                move |g, ids| g.conv2d(ids[0], ids[1], ids[2], stride, p).unwrap(),
            )
        }
        OpKind::Relu => {
            let x = random_data_with_margin(rng, c * he * we, 1e-3);
            let weights = random_data(rng, c * he * we);
            check_operands(&[(vec![c, he, we], x)], &weights, |g, ids| g.relu(ids[0]))
        }
        OpKind::Sigmoid => {
            let x = random_data(rng, c * he * we);
            let weights = random_data(rng, c * he * we);
            check_operands(&[(vec![c, he, we], x)], &weights, |g, ids| {
                g.sigmoid(ids[0])
            })
        }
        OpKind::MaxPool2x2 => {
            let x = maxpool_safe_input(rng, c, he, we);
            let weights = random_data(rng, c * (he / 2) * (we / 2));
            check_operands(&[(vec![c, he, we], x)], &weights, |g, ids| {
                g.maxpool2x2(ids[0]).unwrap()
            })
        }
        OpKind::AvgPool2x2 => {
            let x = random_data(rng, c * he * we);
            let weights = random_data(rng, c * (he / 2) * (we / 2));
            check_operands(&[(vec![c, he, we], x)], &weights, |g, ids| {
                g.avgpool2x2(ids[0]).unwrap()
            })
        }
        OpKind::Upsample2x => {
            let x = random_data(rng, c * he * we);
            let weights = random_data(rng, c * he * 2 * we * 2);
            check_operands(&[(vec![c, he, we], x)], &weights, |g, ids| {
                g.upsample2x(ids[0]).unwrap()
            })
        }
        OpKind::Flatten => {
            let x = random_data(rng, c * he * we);
            let weights = random_data(rng, c * he * we);
            check_operands(&[(vec![c, he, we], x)], &weights, |g, ids| {
                g.flatten(ids[0])
            })
        }
        OpKind::Add => {
            let a = random_data(rng, c * he * we);
            let b = random_data(rng, c * he * we);
            let weights = random_data(rng, c * he * we);
            check_operands(
                &[(vec![c, he, we], a), (vec![c, he, we], b)],
                &weights,
                |g, ids| g.add(ids[0], ids[1]).unwrap(),
            )
        }
        OpKind::ConcatChannels => {
            let c2 = rng.random_range(1..=3usize);
            let a = random_data(rng, c * he * we);
            let b = random_data(rng, c2 * he * we);
            let weights = random_data(rng, (c + c2) * he * we);
            check_operands(
                &[(vec![c, he, we], a), (vec![c2, he, we], b)],
                &weights,
                |g, ids| g.concat_channels(ids[0], ids[1]).unwrap(),
            )
        }
        OpKind::Affine => {
            let scale = rng.random_range(0.1..3.0);
            let shift = rng.random_range(-1.0..1.0);
            let x = random_data(rng, c * he * we);
            let weights = random_data(rng, c * he * we);
            check_operands(&[(vec![c, he, we], x)], &weights, move |g, ids| {
                g.affine(ids[0], scale, shift)
            })
        }
        OpKind::Mul => {
            let a = random_data(rng, c * he * we);
            let b = random_data(rng, c * he * we);
            let weights = random_data(rng, c * he * we);
            check_operands(
                &[(vec![c, he, we], a), (vec![c, he, we], b)],
                &weights,
                |g, ids| g.mul(ids[0], ids[1]).unwrap(),
            )
        }
        OpKind::Sum => {
            let x = random_data(rng, c * he * we);
            check_operands(&[(vec![c, he, we], x)], &[1.0], |g, ids| g.sum(ids[0]))
        }
        OpKind::Mse => {
            let p = random_data(rng, c * he);
            let t = random_data(rng, c * he);
            check_operands(
                &[(vec![c, he], p), (vec![c, he], t)],
                &[1.0],
                |g, ids| g.mse(ids[0], ids[1]).unwrap(),
            )
        }
        OpKind::MaskedMse => {
            let n = c * he;
            let p = random_data(rng, n);
            let t = random_data(rng, n);
            let m: Vec<f64> = (0..n)
                .map(|_| if rng.random_range(0.0..1.0) < 0.5 { 1.0 } else { 0.0 })
                .collect();
            let weights = vec![1.0];
            // Mask is a constant; only pred and target are differentiated.
            let worst = check_operands_with_constants(
                &[(vec![n], p), (vec![n], t)],
                &[(vec![n], m)],
                &weights,
                |g, ids, consts| g.masked_mse(ids[0], ids[1], consts[0]).unwrap(),
            );
            worst
        }
    }
}

fn weighted_scalar(graph: &mut Graph, out: NodeId, weights: &[f64]) -> NodeId {
    if weights.len() == 1 && graph.value(out).is_scalar() {
        return out;
    }
    let w = graph.constant(Tensor::from_vec(graph.shape(out), weights.to_vec()).unwrap());
    let prod = graph.mul(out, w).unwrap();
    graph.sum(prod)
}

fn check_operands<F>(operands: &[(Vec<usize>, Vec<f64>)], weights: &[f64], build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    check_operands_with_constants(operands, &[], weights, |g, ids, _| build(g, ids))
}

fn check_operands_with_constants<F>(
    operands: &[(Vec<usize>, Vec<f64>)],
    constants: &[(Vec<usize>, Vec<f64>)],
    weights: &[f64],
    build: F,
) -> f64
where
    F: Fn(&mut Graph, &[NodeId], &[NodeId]) -> NodeId,
{
    let run =
        |values: &[Vec<f64>], want_grad_of: Option<usize>| -> (f64, Option<Vec<f64>>) {
            let mut graph = Graph::new();
            let ids: Vec<NodeId> = operands
                .iter()
                .zip(values)
                .map(|((shape, _), data)| {
                    graph.variable(Tensor::from_vec(shape, data.clone()).unwrap())
                })
                .collect();
            let consts: Vec<NodeId> = constants
                .iter()
                .map(|(shape, data)| {
                    graph.constant(Tensor::from_vec(shape, data.clone()).unwrap())
                })
                .collect();
            let out = build(&mut graph, &ids, &consts);
            let loss = weighted_scalar(&mut graph, out, weights);
            let value = graph.value(loss).item();
            let grad = want_grad_of.map(|oi| {
                graph.backward(loss).unwrap();
                graph.grad(ids[oi]).to_vec()
            });
            (value, grad)
        };

    let base: Vec<Vec<f64>> = operands.iter().map(|(_, d)| d.clone()).collect();
    let mut worst: f64 = 0.0;
    for oi in 0..operands.len() {
        let (_, analytic) = run(&base, Some(oi));
        let analytic = analytic.unwrap();
        let numeric = finite_diff_grad(
            |probe: &[f64]| {
                let mut vals = base.clone();
                vals[oi] = probe.to_vec();
                run(&vals, None).0
            },
            &base[oi],
            FD_STEP,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric, FD_ATOL));
    }
    worst
}
