//! Non-bottleneck blocks: gradient routing, variant equivalence and
//! finite-difference checks of every constructible block.

mod common;

use common::{rng, uniform};
use rand::Rng;
use segdecoder::blocks::{
    build_d5_block, build_nonbottleneck, gradient_fanout, BlockVariant, NonBottleneckSpec, SkipMode,
};
use segdecoder::gradcheck::grad_check;
use segdecoder::kernels::NormMode;
use segdecoder::network::Network;
use segdecoder::{Shape, Tape, Tensor};

fn variants(channels: usize) -> Vec<NonBottleneckSpec> {
    let base = [NonBottleneckSpec::type1(channels), NonBottleneckSpec::type2(channels)];
    let mut out = Vec::new();
    for b in base {
        out.push(b.clone());
        out.push(NonBottleneckSpec {
            use_post_1x1: false,
            ..b.clone()
        });
        out.push(NonBottleneckSpec {
            use_pre_1x1: false,
            use_post_1x1: false,
            ..b.clone()
        });
        out.push(NonBottleneckSpec {
            skip_mode: SkipMode::Single,
            ..b.clone()
        });
        out.push(NonBottleneckSpec {
            parallel_kernels: vec![1],
            use_post_1x1: false,
            ..b.clone()
        });
        out.push(NonBottleneckSpec {
            oned_pairs: 2,
            batch_norm: true,
            ..b.clone()
        });
        out.push(NonBottleneckSpec {
            oned_pairs: 0,
            parallel_kernels: vec![3, 5, 1],
            ..b.clone()
        });
    }
    out.push(NonBottleneckSpec {
        dilation: 2,
        ..NonBottleneckSpec::type2(channels)
    });
    out
}

#[test]
fn zeroed_block_passes_the_incoming_gradient_through_unchanged() {
    for spec in variants(3) {
        let graph = build_nonbottleneck(&spec).unwrap();
        let mut net = Network::<f64>::new(graph, 1);
        for p in net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut r = rng(5);
        let shape = Shape::new(2, 3, 7, 9);
        // strictly positive inputs keep the final ReLU open everywhere
        let x = Tensor::from_fn(shape, |_| r.random_range(0.1..1.0));
        let g: Vec<f64> = (0..shape.numel()).map(|_| r.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let f = net.forward(&mut tape, xv, NormMode::Train, true).unwrap();
        let out = f.output(net.graph());
        assert_eq!(tape.value(out), &x, "{spec:?}");
        let loss = tape.weighted_sum(out, &g).unwrap();
        tape.backprop(loss).unwrap();
        let got = tape.grad(xv).unwrap();
        assert!(got.iter().zip(&g).all(|(a, b)| a.to_bits() == b.to_bits()), "{spec:?}");
    }
}

#[test]
fn canonical_fanout_is_three_and_single_skip_two() {
    let t1 = build_nonbottleneck(&NonBottleneckSpec::type1(4)).unwrap();
    assert_eq!(gradient_fanout(&t1), 3);
    let single = build_nonbottleneck(&NonBottleneckSpec {
        skip_mode: SkipMode::Single,
        ..NonBottleneckSpec::type1(4)
    })
    .unwrap();
    assert_eq!(gradient_fanout(&single), 2);
}

#[test]
fn undilated_type2_equals_type1_bitwise() {
    let mut r = rng(8);
    let x = uniform(Shape::new(2, 4, 11, 13), &mut r);
    for flags in variants(4).into_iter().filter(|s| s.variant == BlockVariant::Type1) {
        let t2 = NonBottleneckSpec {
            variant: BlockVariant::Type2,
            ..flags.clone()
        };
        let mut a = Network::<f64>::new(build_nonbottleneck(&flags).unwrap(), 3);
        let mut b = Network::<f64>::new(build_nonbottleneck(&t2).unwrap(), 3);
        assert_eq!(a.params(), b.params());
        let ya = a.predict(&x).unwrap();
        let yb = b.predict(&x).unwrap();
        assert!(ya.data().iter().zip(yb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn blocks_preserve_shape_for_sizes_from_five() {
    for spec in variants(2) {
        let g = build_nonbottleneck(&spec).unwrap();
        for (h, w) in [(5, 5), (6, 11), (16, 48)] {
            let s = Shape::new(1, 2, h, w);
            assert_eq!(g.infer_shapes(s).unwrap()[g.output()], s);
        }
    }
    for i in 1..=4 {
        let g = build_d5_block(i, 4).unwrap();
        let s = Shape::new(2, 4, 5, 7);
        assert_eq!(g.infer_shapes(s).unwrap()[g.output()], s);
    }
}

fn check_block(graph: segdecoder::arch::NetworkGraph, channels: usize, seed: u64) {
    let mut net = Network::<f64>::new(graph, seed);
    // random biases move ReLU kinks away from exact zeros of the input
    let mut r = rng(seed);
    for p in net.params_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
    let x = uniform(Shape::new(2, channels, 6, 7), &mut r);
    let proj: Vec<f64> = (0..x.numel()).map(|_| r.random_range(-1.0..1.0)).collect();
    let net = std::cell::RefCell::new(net);
    let report = grad_check(
        |tape, v| {
            let mut net = net.borrow_mut();
            let f = net.forward(tape, v, NormMode::Train, false)?;
            let out = f.output(net.graph());
            tape.weighted_sum(out, &proj)
        },
        &x,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn every_block_passes_gradient_check() {
    for (i, spec) in variants(2).into_iter().enumerate() {
        check_block(build_nonbottleneck(&spec).unwrap(), 2, 100 + i as u64);
    }
    for i in 1..=4 {
        check_block(build_d5_block(i, 2).unwrap(), 2, 200 + i as u64);
    }
}
