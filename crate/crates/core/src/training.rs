//! Optimization (Adam with polynomial learning-rate decay), evaluation
//! metrics and the comparison table.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::graph::NetworkGraph;
use crate::checkpoint::Checkpoint;
use crate::dataset::{self, SegSample, CLASS_NAMES, CURB, LANES, ROAD};
use crate::error::{Error, Result};
use crate::kernels::NormMode;
use crate::network::Network;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub max_iters: usize,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub l2_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Loss is logged at iterations divisible by this and at the last one.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.0005,
            max_iters: 3000,
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2_decay: 0.0,
            batch_size: 4,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.lr0,
            self.poly_power,
            self.beta1,
            self.beta2,
            self.eps,
            self.l2_decay,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.lr0 < 0.0 || self.max_iters == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Spec(
                "training needs finite settings, lr0 >= 0, and positive iterations, batch size and log interval".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Spec("Adam needs 0 <= beta < 1 and eps > 0".into()));
        }
        Ok(())
    }
}

/// `lr0 * (1 - iter/max_iters)^power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    let frac = 1.0 - iter.min(cfg.max_iters) as f64 / cfg.max_iters as f64;
    cfg.lr0 * frac.powf(cfg.poly_power)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    names: &[String],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (g, p)) in grads.iter().zip(params.iter()).enumerate() {
        let name = names.get(i).map_or("?", String::as_str);
        if g.len() != p.numel() {
            return Err(Error::dim(
                name.to_string(),
                format!("{} gradient values for {} parameters", g.len(), p.numel()),
            ));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} in parameter `{name}` at index {j}",
                g[j]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let corr1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let corr2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr_t = T::from_f64(lr);
    let eps = T::from_f64(cfg.eps);
    let decay = T::from_f64(lr * cfg.l2_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + c1 * g;
            v[j] = b2 * v[j] + c2 * g * g;
            let mhat = m[j] / corr1;
            let vhat = v[j] / corr2;
            let mut update = lr_t * mhat / (vhat.sqrt() + eps);
            if cfg.l2_decay > 0.0 {
                update += decay * *w;
            }
            *w -= update;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("iter,loss,lr\n");
    for r in log {
        let _ = writeln!(s, "{},{},{}", r.iter, r.loss, r.lr);
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainMeta {
    iteration: usize,
    adam_step: u64,
    config: TrainConfig,
    log: Vec<LossRecord>,
}

/// Owns a network and its optimizer state while iterating over a sample set.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub net: Network<T>,
    pub cfg: TrainConfig,
    adam: AdamState<T>,
    names: Vec<String>,
    iteration: usize,
    log: Vec<LossRecord>,
    last_finite: f64,
}

/// Sample indices used at iteration `iter`: a seeded permutation per epoch,
/// consumed `batch` at a time and wrapping across epochs.
pub fn batch_indices(seed: u64, n: usize, batch: usize, iter: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for j in 0..batch {
        let pos = iter * batch + j;
        let epoch = pos / n;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("set above").1[pos % n]);
    }
    out
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: Network<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(net.params());
        let names = net.param_specs().iter().map(|s| s.name.clone()).collect();
        Ok(Trainer {
            net,
            cfg,
            adam,
            names,
            iteration: 0,
            log: Vec::new(),
            last_finite: f64::NAN,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.max_iters
    }

    /// One forward/backward/update on an explicit batch; returns the loss.
    pub fn step_on(&mut self, samples: &[&SegSample]) -> Result<f64> {
        let (x, labels) = dataset::batch::<T>(samples)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fwd = self.net.forward(&mut tape, xv, NormMode::Train, true)?;
        let loss_var = tape.softmax_cross_entropy(fwd.output(self.net.graph()), &labels)?;
        let loss = tape.value(loss_var).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                last_finite_loss: self.last_finite,
            });
        }
        self.last_finite = loss;
        tape.backprop(loss_var)?;
        let grads: Vec<Vec<T>> = fwd
            .params
            .iter()
            .map(|&p| tape.take_grad(p).expect("parameter leaves receive gradients"))
            .collect();
        let lr = poly_lr(self.iteration, &self.cfg);
        adam_step(
            self.net.params_mut(),
            &grads,
            &self.names,
            &mut self.adam,
            lr,
            &self.cfg,
        )?;
        let it = self.iteration;
        if it.is_multiple_of(self.cfg.log_every) || it + 1 == self.cfg.max_iters {
            self.log.push(LossRecord { iter: it, loss, lr });
        }
        self.iteration += 1;
        Ok(loss)
    }

    /// The next scheduled step over `train`.
    pub fn step(&mut self, train: &[SegSample]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Spec("empty training set".into()));
        }
        let idx = batch_indices(self.cfg.seed, train.len(), self.cfg.batch_size, self.iteration);
        let batch: Vec<&SegSample> = idx.iter().map(|&i| &train[i]).collect();
        self.step_on(&batch)
    }

    /// Runs scheduled steps until iteration `until` (capped at `max_iters`).
    pub fn run_until(&mut self, train: &[SegSample], until: usize) -> Result<()> {
        while self.iteration < until.min(self.cfg.max_iters) {
            self.step(train)?;
        }
        Ok(())
    }

    pub fn run(&mut self, train: &[SegSample]) -> Result<()> {
        self.run_until(train, self.cfg.max_iters)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut c = self.net.to_checkpoint();
        for (i, s) in self.net.param_specs().iter().enumerate() {
            c.insert(
                format!("adam.m.{}", s.name),
                Tensor::from_vec(s.shape, self.adam.m[i].clone()).expect("moment shape"),
            );
            c.insert(
                format!("adam.v.{}", s.name),
                Tensor::from_vec(s.shape, self.adam.v[i].clone()).expect("moment shape"),
            );
        }
        let meta = TrainMeta {
            iteration: self.iteration,
            adam_step: self.adam.step,
            config: self.cfg.clone(),
            log: self.log.clone(),
        };
        c.meta = serde_json::to_value(meta).expect("meta serializes");
        c
    }

    /// Restores a trainer; `cfg` replaces the stored configuration (e.g. a
    /// larger `max_iters`) but the schedule position is kept.
    pub fn from_checkpoint(graph: NetworkGraph, c: &Checkpoint<T>, cfg: Option<TrainConfig>) -> Result<Self> {
        let meta: TrainMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Ingestion(format!("checkpoint has no training state: {e}")))?;
        let net = Network::from_checkpoint(graph, c)?;
        let mut t = Trainer::new(net, cfg.unwrap_or(meta.config))?;
        for (i, s) in t.net.param_specs().iter().enumerate() {
            t.adam.m[i] = c.get(&format!("adam.m.{}", s.name))?.data().to_vec();
            t.adam.v[i] = c.get(&format!("adam.v.{}", s.name))?.data().to_vec();
        }
        t.adam.step = meta.adam_step;
        t.iteration = meta.iteration;
        t.last_finite = meta.log.last().map_or(f64::NAN, |r| r.loss);
        t.log = meta.log;
        Ok(t)
    }

    /// Writes `checkpoint/` and `loss.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint().save(&dir.join("checkpoint"))?;
        let path = dir.join("loss.csv");
        std::fs::write(&path, loss_csv(&self.log)).map_err(|e| Error::io(&path, e))
    }
}

/// Trains a fresh or given network over `train` for `cfg.max_iters` steps.
pub fn train<T: Scalar>(net: Network<T>, train: &[SegSample], cfg: &TrainConfig) -> Result<Trainer<T>> {
    let mut t = Trainer::new(net, cfg.clone())?;
    t.run(train)?;
    Ok(t)
}

// ---- evaluation ----

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    /// `TP / (TP + FN)`; `None` when the class never occurs in the labels.
    pub accuracy: Option<f64>,
    /// `TP / (TP + FP + FN)`; `None` when the class occurs nowhere.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub class_names: Vec<String>,
    /// `confusion[truth][prediction]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassScore>,
    pub lanes: ClassScore,
    pub curb: ClassScore,
    pub road: ClassScore,
    /// Mean IoU of lanes, curb and road.
    pub mean_iou_3: f64,
    /// Mean IoU over all classes including void.
    pub mean_iou_4: f64,
    /// Mean accuracy over all classes including void.
    pub mean_acc_4: f64,
    /// Mean of the three accuracies and three IoUs of the named classes.
    pub mean_six: f64,
}

fn mean(values: impl IntoIterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl MetricsTable {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let k = confusion.len();
        let per_class: Vec<ClassScore> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let truth: u64 = confusion[c].iter().sum();
                let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
                let union = truth + predicted - tp;
                ClassScore {
                    accuracy: (truth > 0).then(|| tp as f64 / truth as f64),
                    iou: (union > 0).then(|| tp as f64 / union as f64),
                }
            })
            .collect();
        let get = |c: u8| per_class.get(c as usize).copied().unwrap_or_default();
        let (lanes, curb, road) = (get(LANES), get(CURB), get(ROAD));
        let named = [lanes, curb, road];
        MetricsTable {
            class_names: (0..k)
                .map(|c| {
                    CLASS_NAMES
                        .get(c)
                        .map_or_else(|| format!("class{c}"), |s| s.to_string())
                })
                .collect(),
            mean_iou_3: mean(named.iter().map(|s| s.iou)),
            mean_iou_4: mean(per_class.iter().map(|s| s.iou)),
            mean_acc_4: mean(per_class.iter().map(|s| s.accuracy)),
            mean_six: mean(named.iter().map(|s| s.accuracy).chain(named.iter().map(|s| s.iou))),
            confusion,
            per_class,
            lanes,
            curb,
            road,
        }
    }

    /// Metrics of label pairs `(truth, prediction)`.
    pub fn from_labels(truth: &[u8], pred: &[u8], num_classes: usize) -> Result<Self> {
        let mut acc = ConfusionCounter::new(num_classes);
        acc.add(truth, pred)?;
        Ok(acc.finish())
    }
}

#[derive(Debug, Clone)]
pub struct ConfusionCounter {
    counts: Vec<Vec<u64>>,
}

impl ConfusionCounter {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounter {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn add(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        let k = self.counts.len();
        if truth.len() != pred.len() {
            return Err(Error::dim(
                "labels",
                format!("{} truth labels, {} predictions", truth.len(), pred.len()),
            ));
        }
        for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
            if t as usize >= k || p as usize >= k {
                // positions are reported within the flat label vector
                return Err(Error::Label {
                    value: u32::from(t.max(p)),
                    row: 0,
                    col: i,
                    num_classes: k,
                });
            }
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> MetricsTable {
        MetricsTable::from_confusion(self.counts)
    }
}

/// Per-pixel argmax over classes of `(n, k, h, w)` logits, laid out `(n, h, w)`.
/// Ties go to the lowest class index.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let plane = s.plane();
    let d = logits.data();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for i in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if d[(n * s.c + c) * plane + i] > d[(n * s.c + best) * plane + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Inference-mode metrics of `net` over `samples`, `batch` images at a time.
pub fn evaluate<T: Scalar>(net: &mut Network<T>, samples: &[SegSample], batch: usize) -> Result<MetricsTable> {
    let mut counter = ConfusionCounter::new(output_classes(net.graph()).unwrap_or(dataset::NUM_CLASSES));
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (x, labels) = dataset::batch::<T>(&refs)?;
        let logits = net.predict(&x)?;
        counter.add(&labels, &argmax_labels(&logits))?;
    }
    Ok(counter.finish())
}

fn output_classes(graph: &NetworkGraph) -> Option<usize> {
    use crate::arch::graph::Op;
    // the logits come from the last layer that sets a channel count
    let mut id = graph.output();
    loop {
        let node = graph.node(id);
        match &node.op {
            Op::Conv2d(p) | Op::ConvTranspose2d(p) => return Some(p.out_channels),
            Op::BatchNorm { channels } | Op::Input { channels } => return Some(*channels),
            _ => id = *node.inputs.first()?,
        }
    }
}

// ---- table ----

/// Which mean fills the last table column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanRule {
    #[default]
    Iou3,
    Iou4,
    Acc4,
    Six,
}

impl std::str::FromStr for MeanRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iou3" | "iou_3" => Ok(MeanRule::Iou3),
            "iou4" | "iou_4" => Ok(MeanRule::Iou4),
            "acc4" | "acc_4" => Ok(MeanRule::Acc4),
            "six" => Ok(MeanRule::Six),
            _ => Err(Error::Spec(format!("unknown mean rule `{s}` (iou3, iou4, acc4, six)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    /// Lanes, curb, road accuracy, then lanes, curb, road IoU.
    pub values: [f64; 6],
    pub mean: f64,
}

impl TableRow {
    pub fn new(name: impl Into<String>, values: [f64; 6], mean: f64) -> Self {
        TableRow {
            name: name.into(),
            values,
            mean,
        }
    }

    /// Absent classes render as 0.
    pub fn from_metrics(name: impl Into<String>, m: &MetricsTable, rule: MeanRule) -> Self {
        let z = |v: Option<f64>| v.unwrap_or(0.0);
        TableRow::new(
            name,
            [
                z(m.lanes.accuracy),
                z(m.curb.accuracy),
                z(m.road.accuracy),
                z(m.lanes.iou),
                z(m.curb.iou),
                z(m.road.iou),
            ],
            match rule {
                MeanRule::Iou3 => m.mean_iou_3,
                MeanRule::Iou4 => m.mean_iou_4,
                MeanRule::Acc4 => m.mean_acc_4,
                MeanRule::Six => m.mean_six,
            },
        )
    }
}

const NAME_HEADER: &str = "Decoder configuration";

/// Table with accuracy and IoU column groups; values to 4 decimals.
pub fn render_table(rows: &[TableRow]) -> String {
    let entries: Vec<(String, Option<TableRow>)> = rows.iter().map(|r| (r.name.clone(), Some(r.clone()))).collect();
    render_partial_table(&entries)
}

/// Like [`render_table`], with `FAILED` in every cell of a missing row.
pub fn render_partial_table(entries: &[(String, Option<TableRow>)]) -> String {
    let name_w = entries
        .iter()
        .map(|(n, _)| n.len())
        .chain([NAME_HEADER.len()])
        .max()
        .unwrap_or(0);
    let cell = |v: &str| format!("{v:>7}");
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:name_w$}  {:<23}  {:<23}",
        "", "Avg. class accuracy", "Avg. class IoU score"
    );
    let heads = ["Lanes", "Curb", "Road"].map(cell).join(" ");
    let _ = writeln!(s, "{NAME_HEADER:<name_w$}  {heads}  {heads}  {}", cell("Mean"));
    for (name, row) in entries {
        let (v, mean): (Vec<String>, String) = match row {
            Some(r) => (
                r.values.iter().map(|v| cell(&format!("{v:.4}"))).collect(),
                cell(&format!("{:.4}", r.mean)),
            ),
            None => (vec![cell("FAILED"); 6], cell("FAILED")),
        };
        let _ = writeln!(s, "{name:<name_w$}  {}  {}  {mean}", v[..3].join(" "), v[3..].join(" "));
    }
    s
}
