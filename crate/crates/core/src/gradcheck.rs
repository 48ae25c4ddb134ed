//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{NetworkGraph, NodeId, Op, ParamRole, ParamSpec};
use crate::error::{Error, Result};
use crate::kernels::{maxpool2d, NormMode};
use crate::network::{Forward, Network};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over the checked coordinates.
    pub max_rel_error: f64,
    /// Flat index of the coordinate attaining `max_rel_error`.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates left out because a probe moved some unit across a ReLU
    /// kink or changed a max-pool winner.
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>, index: usize) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract("grad_check function must return a scalar".into()));
    }
    let y = value.data()[0];
    if !y.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite function value {y} while probing coordinate {index}"
        )));
    }
    Ok(y)
}

/// Compares the tape gradient of `f` at `x` against central differences
/// with the given `step`, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, step, tolerance, &coords)
}

/// Like [`grad_check`] but only probes the listed flat coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, step: f64, tolerance: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    tape.backprop(out)?;
    let analytic = tape.take_grad(v).expect("leaf gradient is always set");

    let mut probe = x.clone();
    let mut worst = (0.0f64, None);
    for &i in coords {
        let a = analytic[i];
        if !a.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite analytic gradient {a} at coordinate {i}"
            )));
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval_scalar(&f, &probe, i)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval_scalar(&f, &probe, i)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(a, numeric);
        if err > worst.0 || worst.1.is_none() {
            worst = (err, Some(i));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: coords.len(),
        skipped: 0,
        tolerance,
        passed: worst.0 <= tolerance,
    })
}

/// A single scalar inside a network parameter.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ParamCoord {
    pub param: usize,
    pub index: usize,
}

/// True when every forward path from `node` hits a batch norm through sums
/// only, so a per-channel constant added at `node` is removed by the mean
/// subtraction of training mode.
fn normalized_away(graph: &NetworkGraph, node: NodeId) -> bool {
    let mut consumers = graph
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| n.inputs.contains(&node))
        .peekable();
    consumers.peek().is_some()
        && consumers.all(|(id, n)| match n.op {
            Op::BatchNorm { .. } => true,
            Op::Fuse { .. } => normalized_away(graph, id),
            _ => false,
        })
}

/// Biases whose true gradient is exactly zero: the relative error of two
/// rounding residues is meaningless there.
fn cancelled_by_norm(graph: &NetworkGraph, spec: &ParamSpec) -> bool {
    spec.role == ParamRole::Bias && normalized_away(graph, spec.node)
}

/// `count` seeded coordinates: a uniformly chosen parameter tensor, then a
/// uniformly chosen entry of it. Biases cancelled by a following batch norm
/// are never chosen.
pub fn sample_param_coords<T>(net: &Network<T>, count: usize, seed: u64) -> Vec<ParamCoord>
where
    T: crate::scalar::Scalar,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = net.param_specs();
    let eligible: Vec<usize> = (0..specs.len())
        .filter(|&i| !cancelled_by_norm(net.graph(), &specs[i]))
        .collect();
    (0..count)
        .map(|_| {
            let param = eligible[rng.random_range(0..eligible.len())];
            let index = rng.random_range(0..specs[param].shape.numel());
            ParamCoord { param, index }
        })
        .collect()
}

/// Adds seeded uniform noise in `[-scale, scale]` to every conv bias. With
/// zero biases a 1x1 conv fed by a ReLU outputs exactly zero wherever its
/// input is zero, which puts the next ReLU on its kink.
pub fn offset_biases(net: &mut Network<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roles: Vec<ParamRole> = net.param_specs().iter().map(|s| s.role).collect();
    for (p, role) in net.params_mut().iter_mut().zip(roles) {
        if role == ParamRole::Bias {
            for v in p.data_mut() {
                *v += rng.random_range(-scale..=scale);
            }
        }
    }
}

fn network_loss(
    net: &mut Network<f64>,
    images: &Tensor<f64>,
    labels: &[u8],
    tape: &mut Tape<f64>,
    params: Vec<Var>,
) -> Result<(Var, Forward)> {
    let x = tape.constant(images.clone());
    let f = net.forward_with_params(tape, x, params, NormMode::Train)?;
    let out = f.output(net.graph());
    Ok((tape.softmax_cross_entropy(out, labels)?, f))
}

/// Side of every ReLU kink and winner of every max-pool window.
fn activation_pattern(graph: &NetworkGraph, tape: &Tape<f64>, f: &Forward) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for node in graph.nodes() {
        match &node.op {
            Op::Relu => {
                let x = tape.value(f.nodes[node.inputs[0]]);
                out.extend(x.data().iter().map(|&v| usize::from(v > 0.0)));
            }
            Op::MaxPool(p) => out.extend(maxpool2d(tape.value(f.nodes[node.inputs[0]]), p)?.1),
            _ => {}
        }
    }
    Ok(out)
}

/// Finite-difference check of the training loss (softmax cross-entropy,
/// batch-norm in training mode) with respect to individual parameters.
/// `worst_index` points into `coords`. A coordinate whose probes change the
/// ReLU/max-pool pattern is skipped: the loss is not differentiable between
/// the probes, and with ~1e5 units a whole-channel parameter hits such a
/// kink now and then.
pub fn network_grad_check(
    net: &mut Network<f64>,
    images: &Tensor<f64>,
    labels: &[u8],
    coords: &[ParamCoord],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let params: Vec<Var> = net.params().iter().map(|p| tape.leaf(p.clone())).collect();
    let (loss, fwd) = network_loss(net, images, labels, &mut tape, params.clone())?;
    let pattern = activation_pattern(net.graph(), &tape, &fwd)?;
    tape.backprop(loss)?;

    let mut worst = (0.0f64, None);
    let mut skipped = 0;
    for (k, c) in coords.iter().enumerate() {
        let spec_name = net.param_specs()[c.param].name.clone();
        let a = tape.grad(params[c.param]).expect("parameter leaf")[c.index];
        let mut eval = |delta: f64| -> Result<(f64, bool)> {
            let mut t = Tape::new();
            let vals: Vec<Var> = net
                .params()
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut p = p.clone();
                    if i == c.param {
                        p.data_mut()[c.index] += delta;
                    }
                    t.constant(p)
                })
                .collect();
            let (l, f) = network_loss(net, images, labels, &mut t, vals)?;
            let y = t.value(l).data()[0];
            if !y.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss while probing `{spec_name}`[{}]",
                    c.index
                )));
            }
            Ok((y, activation_pattern(net.graph(), &t, &f)? == pattern))
        };
        let (plus, smooth_plus) = eval(step)?;
        let (minus, smooth_minus) = eval(-step)?;
        if !(smooth_plus && smooth_minus) {
            skipped += 1;
            continue;
        }
        let err = relative_error(a, (plus - minus) / (2.0 * step));
        if err > worst.0 || worst.1.is_none() {
            worst = (err, Some(k));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: coords.len() - skipped,
        skipped,
        tolerance,
        passed: worst.0 <= tolerance && (skipped < coords.len() || coords.is_empty()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn lcg_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn sum_of_squares() {
        let x = lcg_tensor(Shape::new(1, 2, 3, 3), 3);
        let r = grad_check(|t, v| Ok(t.sum_squares(v)), &x, 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 18);
    }

    #[test]
    fn relu_away_from_kink() {
        // keep every entry at least 0.1 from zero (>> 10 * step)
        let x = lcg_tensor(Shape::new(1, 2, 3, 3), 9).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });
        let r = grad_check(
            |t, v| {
                let y = t.relu(v);
                Ok(t.sum(y))
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = lcg_tensor(Shape::new(1, 1, 2, 2), 1);
        let r = grad_check(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &x, 1e-5, 1e-6).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_value_is_reported_with_coordinate() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, f64::MAX]).unwrap();
        let err = grad_check(|t, v| Ok(t.sum_squares(v)), &x, 1e-5, 1e-6).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }
}
