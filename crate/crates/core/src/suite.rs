//! Named finite-difference checks over every primitive and over a whole
//! assembled network. Shared by the `gradcheck` command and the
//! acceptance runner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::ResolvedArch;
use crate::error::Result;
use crate::gradcheck::{grad_check, network_grad_check, offset_biases, sample_param_coords, GradCheckReport};
use crate::kernels::{ConvParams, NormMode, PoolParams, RunningStats};
use crate::network::Network;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct NamedReport {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn uniform(shape: Shape, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Shuffled, evenly spaced values at least `gap` apart and from zero.
fn separated(shape: Shape, gap: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.numel();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 2.0 * gap).collect();
    for i in (1..n).rev() {
        v.swap(i, r.random_range(0..=i));
    }
    Tensor::from_vec(shape, v).expect("shape matches")
}

fn projection(t: &mut Tape<f64>, y: Var, weights: &[f64]) -> Result<Var> {
    t.weighted_sum(y, weights)
}

struct Case<'a> {
    out: &'a mut Vec<NamedReport>,
    seed: u64,
    tol: f64,
}

impl Case<'_> {
    fn check<F>(&mut self, name: &str, x: &Tensor<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    {
        let report = grad_check(f, x, STEP, self.tol)?;
        self.out.push(NamedReport {
            name: name.to_string(),
            seed: self.seed,
            report,
        });
        Ok(())
    }
}

/// Checks conv2d (with and without dilation), transposed conv, max-pool,
/// batch norm in both modes, relu, fuse_add and softmax cross-entropy
/// for each of `seeds` seeds, with respect to every differentiable input.
pub fn primitive_suite(seeds: u64, tol: f64) -> Result<Vec<NamedReport>> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut case = Case {
            out: &mut out,
            seed,
            tol,
        };

        let p = ConvParams::new(2, 3, 3)
            .dilation(1 + (seed % 2) as usize)
            .stride(1 + (seed / 5) as usize)
            .padding(1);
        let (x, w, b) = (
            uniform(Shape::new(2, 2, 6, 7), &mut r),
            uniform(p.conv_weight_shape(), &mut r),
            uniform(p.bias_shape(), &mut r),
        );
        let (oh, ow) = p.conv_output(6, 7)?;
        let proj: Vec<f64> = (0..2 * 3 * oh * ow).map(|_| r.random_range(-1.0..1.0)).collect();
        case.check("conv2d.input", &x, |t, v| {
            let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv2d(v, wv, Some(bv), &p)?;
            projection(t, y, &proj)
        })?;
        case.check("conv2d.weight", &w, |t, v| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
            let y = t.conv2d(xv, v, Some(bv), &p)?;
            projection(t, y, &proj)
        })?;
        case.check("conv2d.bias", &b, |t, v| {
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            let y = t.conv2d(xv, wv, Some(v), &p)?;
            projection(t, y, &proj)
        })?;

        let k = [2, 3][seed as usize % 2];
        let pad = usize::from(k == 3);
        let p = ConvParams::new(3, 2, k).stride(2).padding(pad).output_padding(pad);
        let (x, w, b) = (
            uniform(Shape::new(2, 3, 3, 4), &mut r),
            uniform(p.deconv_weight_shape(), &mut r),
            uniform(p.bias_shape(), &mut r),
        );
        let (oh, ow) = p.deconv_output(3, 4)?;
        let proj: Vec<f64> = (0..2 * 2 * oh * ow).map(|_| r.random_range(-1.0..1.0)).collect();
        case.check("conv_transpose2d.input", &x, |t, v| {
            let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv_transpose2d(v, wv, Some(bv), &p)?;
            projection(t, y, &proj)
        })?;
        case.check("conv_transpose2d.weight", &w, |t, v| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
            let y = t.conv_transpose2d(xv, v, Some(bv), &p)?;
            projection(t, y, &proj)
        })?;
        case.check("conv_transpose2d.bias", &b, |t, v| {
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            let y = t.conv_transpose2d(xv, wv, Some(v), &p)?;
            projection(t, y, &proj)
        })?;

        // ties and kinks kept far outside the probe step
        let x = separated(Shape::new(2, 2, 4, 6), 100.0 * STEP, &mut r);
        let proj: Vec<f64> = (0..2 * 2 * 2 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        case.check("maxpool2d.input", &x, |t, v| {
            let y = t.maxpool2d(v, &PoolParams::default())?;
            projection(t, y, &proj)
        })?;

        let x = uniform(Shape::new(3, 2, 3, 3), &mut r);
        let gamma = uniform(Shape::new(1, 2, 1, 1), &mut r);
        let beta = uniform(Shape::new(1, 2, 1, 1), &mut r);
        let proj: Vec<f64> = (0..x.numel()).map(|_| r.random_range(-1.0..1.0)).collect();
        for (mode, tag) in [(NormMode::Train, "train"), (NormMode::Infer, "infer")] {
            let bn = |t: &mut Tape<f64>, x: Var, g: Var, b: Var| -> Result<Var> {
                let mut stats = RunningStats {
                    mean: vec![0.1, -0.2],
                    var: vec![0.8, 1.3],
                };
                let y = t.batch_norm(x, g, b, &mut stats, mode)?;
                projection(t, y, &proj)
            };
            case.check(&format!("batch_norm.{tag}.input"), &x, |t, v| {
                let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
                bn(t, v, g, b)
            })?;
            case.check(&format!("batch_norm.{tag}.gamma"), &gamma, |t, v| {
                let (xv, b) = (t.constant(x.clone()), t.constant(beta.clone()));
                bn(t, xv, v, b)
            })?;
            case.check(&format!("batch_norm.{tag}.beta"), &beta, |t, v| {
                let (xv, g) = (t.constant(x.clone()), t.constant(gamma.clone()));
                bn(t, xv, g, v)
            })?;
        }

        let x = separated(Shape::new(1, 2, 3, 3), 100.0 * STEP, &mut r);
        let others = [uniform(x.shape(), &mut r), uniform(x.shape(), &mut r)];
        let proj: Vec<f64> = (0..x.numel()).map(|_| r.random_range(-1.0..1.0)).collect();
        case.check("relu.input", &x, |t, v| {
            let y = t.relu(v);
            projection(t, y, &proj)
        })?;
        case.check("fuse_add.input", &x, |t, v| {
            let (a, b) = (t.constant(others[0].clone()), t.constant(others[1].clone()));
            let y = t.fuse_add(&[a, v, b])?;
            projection(t, y, &proj)
        })?;

        let logits = uniform(Shape::new(2, 4, 2, 3), &mut r).map(|v| 3.0 * v);
        let labels: Vec<u8> = (0..12).map(|_| r.random_range(0..4)).collect();
        case.check("softmax_ce_loss.logits", &logits, |t, v| {
            t.softmax_cross_entropy(v, &labels)
        })?;
    }
    Ok(out)
}

/// Finite-difference check of `count` sampled parameters of the whole
/// network under the training loss, on a seeded pseudo-image with random
/// labels. The input is shrunk to 2x6 times the encoder's downsampling: on
/// larger maps some ReLU or max-pool kink lies within reach of a 1e-5 probe
/// of a whole-channel parameter. Biases are offset off zero first.
pub fn network_suite(arch: &ResolvedArch, count: usize, seed: u64, tol: f64) -> Result<NamedReport> {
    let ds = arch.encoder.downsampling();
    let arch = arch.clone().with_input(2 * ds, 6 * ds);
    let [c, h, w] = arch.encoder.input_shape;
    let mut net = Network::<f64>::new(arch.graph()?, seed);
    offset_biases(&mut net, 0.01, seed);
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let images = Tensor::from_fn(Shape::new(1, c, h, w), |_| r.random_range(0.0..1.0));
    let k = arch.decoder.num_classes as u8;
    let labels: Vec<u8> = (0..h * w).map(|_| r.random_range(0..k)).collect();
    let coords = sample_param_coords(&net, count, seed);
    let report = network_grad_check(&mut net, &images, &labels, &coords, STEP, tol)?;
    Ok(NamedReport {
        name: format!("network.{}", arch.name),
        seed,
        report,
    })
}
