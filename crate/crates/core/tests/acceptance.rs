//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Numeric arguments select a subset, e.g.
//! `cargo test -p segdecoder --test acceptance -- 4 6`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{conv2d_oracle, rng, uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segdecoder::arch::{
    assemble_network, build_encoder, parse_decoder_config, ArchConfig, BlockKind, EncoderSpec, GraphBuilder,
    NetworkGraph, Op, Preset, Region, TABLE1_CONFIGS,
};
use segdecoder::blocks::{build_nonbottleneck, gradient_fanout, NonBottleneckSpec};
use segdecoder::dataset::{make_split, SegSample};
use segdecoder::kernels::{conv2d, conv_transpose2d, ConvParams, NormMode};
use segdecoder::network::Network;
use segdecoder::profiler::{count_macs, count_params, profile, receptive_field};
use segdecoder::suite::primitive_suite;
use segdecoder::training::{evaluate, render_table, train, MetricsTable, TableRow, TrainConfig, Trainer};
use segdecoder::{Precision, Shape, Tape, Tensor};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed <= Duration::from_secs(limit_s), || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let reports = primitive_suite(10, 1e-4).map_err(|e| e.to_string())?;
    let worst = reports
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.report.passed)
        .map(|r| format!("{}#{}", r.name, r.seed))
        .collect();
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    within(t0.elapsed(), 120)?;
    Ok(format!(
        "{} checks, worst {:.2e} ({}#{})",
        reports.len(),
        worst.report.max_rel_error,
        worst.name,
        worst.seed
    ))
}

fn adjoint() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(2025);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 100 {
        let k = [1, 2, 3, 5][r.random_range(0..4)];
        let (s, d, pad) = (r.random_range(1..=2), r.random_range(1..=2), r.random_range(0..=2));
        let (h, w) = (r.random_range(1..=12), r.random_range(1..=12));
        let (c_in, c_out, n) = (r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=2));
        let p = ConvParams::new(c_in, c_out, k)
            .stride(s)
            .dilation(d)
            .padding(pad)
            .no_bias();
        let Ok((oh, ow)) = p.conv_output(h, w) else { continue };
        let x = uniform(Shape::new(n, c_in, h, w), &mut r);
        let y = uniform(Shape::new(n, c_out, oh, ow), &mut r);
        let wt = uniform(p.conv_weight_shape(), &mut r);
        let mut tp = p;
        tp.in_channels = c_out;
        tp.out_channels = c_in;
        let rows = h + 2 * pad - (d * (k - 1) + 1);
        let cols = w + 2 * pad - (d * (k - 1) + 1);
        tp.output_padding = (rows % s, cols % s);
        let fwd = conv2d(&x, &wt, None, &p).map_err(|e| e.to_string())?;
        let back = conv_transpose2d(&y, &wt, None, &tp).map_err(|e| e.to_string())?;
        ensure(back.shape() == x.shape(), || {
            format!("deconv shape {:?} vs {:?}", back.shape(), x.shape())
        })?;
        let gap = (fwd.dot(&y) - x.dot(&back)).abs();
        ensure(gap < 1e-10, || format!("k{k} s{s} d{d} p{pad} {h}x{w}: gap {gap:e}"))?;
        worst = worst.max(gap);
        done += 1;
    }
    within(t0.elapsed(), 60)?;
    Ok(format!("100 geometries, worst gap {worst:.1e}"))
}

fn oracle() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(12);
    let mut compared = 0;
    let mut worst = 0.0f64;
    for h in 1..=9 {
        for w in 1..=9 {
            for k in [1, 2, 3, 5] {
                for s in [1, 2] {
                    for d in [1, 2] {
                        for pad in [0, 1, 2] {
                            let p = ConvParams::new(2, 3, k).stride(s).dilation(d).padding(pad);
                            let x = uniform(Shape::new(2, 2, h, w), &mut r);
                            let wt = uniform(p.conv_weight_shape(), &mut r);
                            let b = uniform(p.bias_shape(), &mut r);
                            let got = conv2d(&x, &wt, Some(&b), &p);
                            match (conv2d_oracle(&x, &wt, Some(b.data()), &p), got) {
                                (Some(want), Ok(got)) => {
                                    ensure(got.shape() == want.shape(), || {
                                        format!("shape at {h}x{w} k{k} s{s} d{d}")
                                    })?;
                                    let diff = got.max_abs_diff(&want);
                                    ensure(diff <= 1e-12, || format!("{h}x{w} k{k} s{s} d{d} p{pad}: {diff:e}"))?;
                                    worst = worst.max(diff);
                                    compared += 1;
                                }
                                (None, Err(_)) => {}
                                (want, got) => {
                                    return Err(format!(
                                        "{h}x{w} k{k} s{s} d{d} p{pad}: oracle valid {}, conv2d ok {}",
                                        want.is_some(),
                                        got.is_ok()
                                    ))
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    within(t0.elapsed(), 120)?;
    Ok(format!("{compared} geometries, worst {worst:.1e}"))
}

fn architecture() -> Outcome {
    let t0 = Instant::now();
    let names: Vec<&str> = TABLE1_CONFIGS
        .iter()
        .copied()
        .chain(Preset::ALL.iter().map(|p| p.name()))
        .collect();
    for name in &names {
        let r = ArchConfig::from_text(name)
            .resolve()
            .map_err(|e| format!("{name}: {e}"))?;
        let g = r.graph().map_err(|e| format!("{name}: {e}"))?;
        let [c, h, w] = r.encoder.input_shape;
        let shapes = g
            .infer_shapes(Shape::new(1, c, h, w))
            .map_err(|e| format!("{name}: {e}"))?;
        ensure(shapes[g.output()] == Shape::new(1, 4, h, w), || {
            format!("{name}: output {:?}", shapes[g.output()])
        })?;
    }

    use BlockKind::{Type1 as T1, Type2 as T2};
    let opt = Preset::Optimal.config();
    ensure(opt.groups == vec![vec![T1, T1], vec![T2, T2], vec![T2], vec![]], || {
        format!("Optimal groups {:?}", opt.groups)
    })?;
    ensure(
        parse_decoder_config("Optimal").map_err(|e| e.to_string())? == opt,
        || "alias differs".into(),
    )?;

    let flags =
        |c: &segdecoder::arch::DecoderConfig| (c.skip_count, c.block_flags.use_pre_1x1, c.block_flags.use_post_1x1);
    let same_rest = |c: &segdecoder::arch::DecoderConfig| {
        let mut rest = c.clone();
        rest.skip_count = opt.skip_count;
        rest.block_flags.use_pre_1x1 = opt.block_flags.use_pre_1x1;
        rest.block_flags.use_post_1x1 = opt.block_flags.use_post_1x1;
        rest == opt
    };
    let (s, pre, post) = flags(&opt);
    ensure(s == 2 && pre && post, || format!("Optimal flags {:?}", (s, pre, post)))?;
    let expect = [
        (Preset::D1, (s, pre, false)),
        (Preset::D2, (1, pre, false)),
        (Preset::D4, (1, false, false)),
    ];
    for (p, want) in expect {
        let c = p.config();
        ensure(flags(&c) == want && same_rest(&c), || {
            format!("{} flags {:?}", p.name(), flags(&c))
        })?;
    }

    let enc = build_encoder(&EncoderSpec::vgg10()).map_err(|e| e.to_string())?;
    let convs: Vec<&ConvParams> = enc
        .nodes()
        .iter()
        .filter_map(|n| if let Op::Conv2d(p) = &n.op { Some(p) } else { None })
        .collect();
    ensure(convs.len() == 10, || format!("{} encoder convs", convs.len()))?;
    ensure(convs.iter().all(|p| p.kernel == (5, 5)), || {
        "non-5x5 encoder conv".into()
    })?;
    ensure(convs.last().map(|p| p.out_channels) == Some(256), || {
        "encoder width".into()
    })?;
    within(t0.elapsed(), 30)?;
    Ok(format!(
        "{} configurations assemble, Optimal layout and D1/D2/D4 flags match",
        names.len()
    ))
}

fn gradient_flow() -> Outcome {
    let graph = build_nonbottleneck(&NonBottleneckSpec::type1(4)).map_err(|e| e.to_string())?;
    let fanout = gradient_fanout(&graph);
    ensure(fanout == 3, || format!("fanout {fanout}"))?;

    let mut net = Network::<f64>::new(graph, 1);
    for p in net.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut r = rng(6);
    let shape = Shape::new(2, 4, 9, 11);
    let x = Tensor::from_fn(shape, |_| r.random_range(0.1..1.0));
    let g: Vec<f64> = (0..shape.numel()).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let f = net
        .forward(&mut tape, xv, NormMode::Train, true)
        .map_err(|e| e.to_string())?;
    let loss = tape
        .weighted_sum(f.output(net.graph()), &g)
        .map_err(|e| e.to_string())?;
    tape.backprop(loss).map_err(|e| e.to_string())?;
    let got = tape.grad(xv).ok_or("no input gradient")?;
    let mismatched = got.iter().zip(&g).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    ensure(mismatched == 0, || {
        format!("{mismatched} gradient entries differ from the incoming gradient")
    })?;
    Ok("fanout 3, zeroed block passes the gradient through bitwise".into())
}

fn chain(convs: &[(usize, usize, usize)]) -> NetworkGraph {
    let mut b = GraphBuilder::new(Region::Encoder);
    let mut x = b.input("input", 1);
    for (i, &(k, s, d)) in convs.iter().enumerate() {
        x = b.conv(
            format!("c{i}"),
            ConvParams::new(1, 1, k).stride(s).dilation(d).same(),
            x,
        );
    }
    b.finish(x).unwrap()
}

/// r_l = r_{l-1} + (k_l - 1) d_l j_{l-1}, j_l = j_{l-1} s_l
fn rf_recurrence(convs: &[(usize, usize, usize)]) -> f64 {
    let (mut rf, mut jump) = (1.0, 1.0);
    for &(k, s, d) in convs {
        rf += ((k - 1) * d) as f64 * jump;
        jump *= s as f64;
    }
    rf
}

fn profiler() -> Outcome {
    let t0 = Instant::now();
    let mut b = GraphBuilder::new(Region::Encoder);
    let x = b.input("input", 3);
    let c1 = b.conv("conv1", ConvParams::new(3, 8, 3).same(), x);
    let r = b.relu("relu", c1);
    let c2 = b.conv("conv2", ConvParams::new(8, 2, 1).no_bias(), r);
    let g = b.finish(c2).map_err(|e| e.to_string())?;
    let (_, params) = count_params(&g);
    ensure(params == 3 * 3 * 3 * 8 + 8 + 8 * 2, || format!("params {params}"))?;
    let (_, macs) = count_macs(&g, Shape::new(1, 3, 10, 12)).map_err(|e| e.to_string())?;
    ensure(macs == 25920 + 960 + 1920, || format!("macs {macs}"))?;

    let chains: [&[(usize, usize, usize)]; 5] = [
        &[(3, 1, 1), (3, 1, 1)],
        &[(5, 2, 1), (3, 1, 1)],
        &[(3, 1, 2), (3, 2, 1), (5, 1, 2)],
        &[(5, 2, 1), (5, 2, 1), (5, 2, 1), (3, 1, 2)],
        &[(1, 1, 1), (2, 2, 1), (3, 2, 2)],
    ];
    for c in chains {
        let g = chain(c);
        let rf = receptive_field(&g)[g.output()];
        let want = rf_recurrence(c);
        ensure(rf.rf_h == want && rf.rf_w == want, || {
            format!("chain {c:?}: {} vs {want}", rf.rf_h)
        })?;
    }

    let g = assemble_network(&EncoderSpec::vgg10().with_input(384, 1280), &Preset::Optimal.config())
        .map_err(|e| e.to_string())?;
    let rep = profile(&g, Shape::new(1, 3, 384, 1280), Precision::F32).map_err(|e| e.to_string())?;
    ensure(rep.split.encoder.macs > rep.split.decoder.macs, || {
        format!(
            "encoder {} <= decoder {}",
            rep.split.encoder.macs, rep.split.decoder.macs
        )
    })?;
    within(t0.elapsed(), 10)?;
    Ok(format!(
        "hand counts exact, 5 chains match, encoder MAC share {:.4} at 384x1280",
        rep.split.encoder_mac_share
    ))
}

/// Initial learning rate of both training runs. The default is tuned for
/// schedules of hundreds of thousands of iterations; over 3000 it leaves the
/// lane class barely learned.
const LR0: f64 = 5e-3;
const OVERFIT_ITERS: usize = 2000;
const OVERFIT_TARGET: f64 = 0.05;
const DESK_ITERS: usize = 3000;

fn trainability() -> Outcome {
    let graph = assemble_network(&EncoderSpec::vgg10(), &Preset::Optimal.config()).map_err(|e| e.to_string())?;
    let split = make_split(300, 50, 50, 7, 48, 160).map_err(|e| e.to_string())?;

    let t0 = Instant::now();
    let fixed: Vec<&SegSample> = split.train[..4].iter().collect();
    let cfg = TrainConfig {
        max_iters: OVERFIT_ITERS,
        lr0: LR0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(Network::<f32>::new(graph.clone(), 0), cfg).map_err(|e| e.to_string())?;
    let mut reached = None;
    let mut last = f64::NAN;
    for i in 1..=OVERFIT_ITERS {
        last = t.step_on(&fixed).map_err(|e| e.to_string())?;
        if last < OVERFIT_TARGET {
            reached = Some(i);
            break;
        }
    }
    let overfit_time = t0.elapsed();
    let overfit = match reached {
        Some(i) => format!(
            "overfit loss {last:.4} at iteration {i} ({:.0}s)",
            overfit_time.as_secs_f64()
        ),
        None => format!("overfit loss {last:.4} after {OVERFIT_ITERS} iterations, target {OVERFIT_TARGET}"),
    };

    let t0 = Instant::now();
    let mut untrained = Network::<f32>::new(graph.clone(), 0);
    let before = evaluate(&mut untrained, &split.val, 4)
        .map_err(|e| e.to_string())?
        .mean_iou_3;
    let cfg = TrainConfig {
        max_iters: DESK_ITERS,
        lr0: LR0,
        ..TrainConfig::default()
    };
    let mut trained = train(untrained, &split.train, &cfg).map_err(|e| e.to_string())?.net;
    let m = evaluate(&mut trained, &split.val, 4).map_err(|e| e.to_string())?;
    let desk = format!(
        "desk val mean_iou_3 {:.4} (untrained {before:.4}; lanes {:.3} curb {:.3} road {:.3}; {:.0}s)",
        m.mean_iou_3,
        m.lanes.iou.unwrap_or(0.0),
        m.curb.iou.unwrap_or(0.0),
        m.road.iou.unwrap_or(0.0),
        t0.elapsed().as_secs_f64()
    );
    let ok = reached.is_some() && m.mean_iou_3 >= 0.60 && m.mean_iou_3 - before >= 0.30;
    let line = format!("{overfit}; {desk}");
    if ok {
        Ok(line)
    } else {
        Err(line)
    }
}

/// Pixel counting without a confusion matrix: (accuracy, iou).
fn count_class(truth: &[u8], pred: &[u8], c: u8) -> (Option<f64>, Option<f64>) {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&t, &p) in truth.iter().zip(pred) {
        match (t == c, p == c) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            _ => {}
        }
    }
    let acc = (tp + fneg > 0).then(|| tp as f64 / (tp + fneg) as f64);
    let iou = (tp + fp + fneg > 0).then(|| tp as f64 / (tp + fp + fneg) as f64);
    (acc, iou)
}

fn metrics() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(51);
    for pair in 0..50 {
        let n = r.random_range(1..2000);
        let truth: Vec<u8> = (0..n).map(|_| r.random_range(0..4)).collect();
        let pred: Vec<u8> = truth
            .iter()
            .map(|&t| if r.random_bool(0.4) { r.random_range(0..4) } else { t })
            .collect();
        let m = MetricsTable::from_labels(&truth, &pred, 4).map_err(|e| e.to_string())?;
        for c in 0..4u8 {
            let (acc, iou) = count_class(&truth, &pred, c);
            let got = &m.per_class[c as usize];
            ensure(got.accuracy == acc && got.iou == iou, || {
                format!("pair {pair} class {c}: {got:?} vs {acc:?}/{iou:?}")
            })?;
        }
        let named: Vec<f64> = [2u8, 3, 1]
            .iter()
            .filter_map(|&c| count_class(&truth, &pred, c).1)
            .collect();
        let want = if named.is_empty() {
            0.0
        } else {
            named.iter().sum::<f64>() / named.len() as f64
        };
        ensure((m.mean_iou_3 - want).abs() < 1e-15, || {
            format!("pair {pair}: mean {} vs {want}", m.mean_iou_3)
        })?;
    }
    let row = TableRow::new("Optimal", [0.6118, 0.6588, 0.9689, 0.5304, 0.4696, 0.9314], 0.7441);
    let text = render_table(&[row]);
    let cells: Vec<&str> = text.lines().nth(2).unwrap_or("").split_whitespace().collect();
    let want = [
        "Optimal", "0.6118", "0.6588", "0.9689", "0.5304", "0.4696", "0.9314", "0.7441",
    ];
    ensure(cells == want, || format!("row {cells:?}"))?;
    Ok("50 pairs equal pixel counting, Optimal row reproduced".into())
}

fn snapshot(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let graph = assemble_network(&EncoderSpec::vgg10(), &Preset::Optimal.config()).map_err(|e| e.to_string())?;
    let split = make_split(12, 1, 1, 9, 48, 160).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        max_iters: 6,
        log_every: 1,
        seed: 4,
        ..TrainConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let t = train(Network::<f32>::new(graph.clone(), 3), &split.train, &cfg).map_err(|e| e.to_string())?;
        t.save(d.path()).map_err(|e| e.to_string())?;
    }
    let (a, b) = (snapshot(dirs[0].path()), snapshot(dirs[1].path()));
    ensure(!a.is_empty() && a.iter().any(|(n, _)| n == "loss.csv"), || {
        "nothing written".into()
    })?;
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    ensure(a.len() == b.len() && differing.is_empty(), || {
        format!("differ: {differing:?}")
    })?;
    Ok(format!("{} files bitwise identical across two runs", a.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradients),
        ("adjoint identity", adjoint),
        ("oracle equivalence", oracle),
        ("architecture fidelity", architecture),
        ("gradient-flow structure", gradient_flow),
        ("profiler correctness", profiler),
        ("trainability", trainability),
        ("metrics oracle", metrics),
        ("determinism", determinism),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS {n} {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failures += 1;
                println!("FAIL {n} {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
