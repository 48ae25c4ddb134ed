//! Static cost analysis of a [`NetworkGraph`]: parameters, multiply-accumulates,
//! receptive field and activation memory.
//!
//! Convolution MACs follow the per-image closed forms
//! `kh*kw*cin*cout*hout*wout` (conv) and `kh*kw*cin*cout*hin*win` (deconv).
//! Batch norm, ReLU and additions cost one MAC-equivalent per output element
//! of the whole batch; pooling and the input cost nothing.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::graph::{NetworkGraph, Op, Region};
use crate::error::{Error, Result};
use crate::scalar::Precision;
use crate::tensor::Shape;

/// Receptive field size and jump (input pixels per step) along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub rf_h: f64,
    pub rf_w: f64,
    pub jump_h: f64,
    pub jump_w: f64,
}

impl ReceptiveField {
    pub const INPUT: ReceptiveField = ReceptiveField {
        rf_h: 1.0,
        rf_w: 1.0,
        jump_h: 1.0,
        jump_w: 1.0,
    };

    fn max(self, o: ReceptiveField) -> ReceptiveField {
        ReceptiveField {
            rf_h: self.rf_h.max(o.rf_h),
            rf_w: self.rf_w.max(o.rf_w),
            jump_h: self.jump_h.max(o.jump_h),
            jump_w: self.jump_w.max(o.jump_w),
        }
    }

    /// A window of `k` taps with dilation `d` and stride `s`.
    fn window(self, k: (usize, usize), d: (usize, usize), s: (usize, usize)) -> ReceptiveField {
        ReceptiveField {
            rf_h: self.rf_h + (d.0 * (k.0 - 1)) as f64 * self.jump_h,
            rf_w: self.rf_w + (d.1 * (k.1 - 1)) as f64 * self.jump_w,
            jump_h: self.jump_h * s.0 as f64,
            jump_w: self.jump_w * s.1 as f64,
        }
    }

    /// A transposed convolution: each output pixel reads `ceil(k/s)` inputs.
    fn upsample(self, k: (usize, usize), s: (usize, usize)) -> ReceptiveField {
        ReceptiveField {
            rf_h: self.rf_h + (k.0.div_ceil(s.0) - 1) as f64 * self.jump_h,
            rf_w: self.rf_w + (k.1.div_ceil(s.1) - 1) as f64 * self.jump_w,
            jump_h: self.jump_h / s.0 as f64,
            jump_w: self.jump_w / s.1 as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRow {
    pub name: String,
    pub kind: String,
    pub region: Region,
    pub params: u64,
    pub macs: u64,
    pub out_shape: [usize; 4],
    pub rf: [f64; 2],
    pub jump: [f64; 2],
    pub act_bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
    pub act_bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub encoder: Totals,
    pub decoder: Totals,
    /// `encoder.macs / (encoder.macs + decoder.macs)`, 0 when both are 0.
    pub encoder_mac_share: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub input: [usize; 4],
    pub precision: Precision,
    pub nodes: Vec<NodeRow>,
    pub totals: Totals,
    pub split: Split,
}

impl ProfileReport {
    /// Builds totals and the region split from `nodes`.
    pub fn from_rows(input: [usize; 4], precision: Precision, nodes: Vec<NodeRow>) -> Self {
        let mut totals = Totals::default();
        let mut split = Split::default();
        for r in &nodes {
            for t in [
                &mut totals,
                match r.region {
                    Region::Encoder => &mut split.encoder,
                    Region::Decoder => &mut split.decoder,
                },
            ] {
                t.params += r.params;
                t.macs += r.macs;
                t.act_bytes += r.act_bytes;
            }
        }
        let both = split.encoder.macs + split.decoder.macs;
        if both > 0 {
            split.encoder_mac_share = split.encoder.macs as f64 / both as f64;
        }
        ProfileReport {
            input,
            precision,
            nodes,
            totals,
            split,
        }
    }
}

pub fn node_params(op: &Op) -> u64 {
    match op {
        Op::Conv2d(p) | Op::ConvTranspose2d(p) => {
            p.weight_count() as u64 + if p.bias { p.out_channels as u64 } else { 0 }
        }
        Op::BatchNorm { channels } => 2 * *channels as u64,
        _ => 0,
    }
}

/// Per-node and total parameter counts.
pub fn count_params(graph: &NetworkGraph) -> (Vec<u64>, u64) {
    let per: Vec<u64> = graph.nodes().iter().map(|n| node_params(&n.op)).collect();
    let total = per.iter().sum();
    (per, total)
}

/// Per-node and total MACs for an input batch of shape `input`.
pub fn count_macs(graph: &NetworkGraph, input: Shape) -> Result<(Vec<u64>, u64)> {
    let shapes = graph.infer_shapes(input)?;
    let per: Vec<u64> = graph
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let out = shapes[i];
            let taps =
                |p: &crate::kernels::ConvParams| (p.kernel.0 * p.kernel.1 * p.in_channels * p.out_channels) as u64;
            match &n.op {
                Op::Conv2d(p) => taps(p) * out.plane() as u64,
                Op::ConvTranspose2d(p) => taps(p) * shapes[n.inputs[0]].plane() as u64,
                Op::BatchNorm { .. } | Op::Relu | Op::Fuse { .. } => out.numel() as u64,
                Op::Input { .. } | Op::MaxPool(_) => 0,
            }
        })
        .collect();
    let total = per.iter().sum();
    Ok((per, total))
}

/// Receptive field of every node relative to the graph input.
pub fn receptive_field(graph: &NetworkGraph) -> Vec<ReceptiveField> {
    let mut out: Vec<ReceptiveField> = Vec::with_capacity(graph.nodes().len());
    for n in graph.nodes() {
        let merged = n
            .inputs
            .iter()
            .map(|&j| out[j])
            .reduce(ReceptiveField::max)
            .unwrap_or(ReceptiveField::INPUT);
        out.push(match &n.op {
            Op::Conv2d(p) => merged.window(p.kernel, p.dilation, p.stride),
            Op::ConvTranspose2d(p) => merged.upsample(p.kernel, p.stride),
            Op::MaxPool(p) => merged.window(p.window, (1, 1), p.stride),
            _ => merged,
        });
    }
    out
}

pub fn profile(graph: &NetworkGraph, input: Shape, precision: Precision) -> Result<ProfileReport> {
    let shapes = graph.infer_shapes(input)?;
    let (params, _) = count_params(graph);
    let (macs, _) = count_macs(graph, input)?;
    let rf = receptive_field(graph);
    let rows = graph
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| NodeRow {
            name: n.name.clone(),
            kind: n.op.kind().to_string(),
            region: n.region,
            params: params[i],
            macs: macs[i],
            out_shape: shapes[i].dims(),
            rf: [rf[i].rf_h, rf[i].rf_w],
            jump: [rf[i].jump_h, rf[i].jump_w],
            act_bytes: (shapes[i].numel() * precision.bytes()) as u64,
        })
        .collect();
    Ok(ProfileReport::from_rows(input.dims(), precision, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Text,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" => Ok(Format::Text),
            "json" => Ok(Format::Json),
            _ => Err(Error::Spec(format!("unknown format `{s}`, expected text or json"))),
        }
    }
}

fn fmt_rf(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

pub fn emit_report(report: &ProfileReport, format: Format) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        Format::Text => render_text(report),
    }
}

fn render_text(r: &ProfileReport) -> String {
    let [n, c, h, w] = r.input;
    let mut s = String::new();
    let _ = writeln!(s, "input ({n}, {c}, {h}, {w}), {} activations", r.precision);
    let _ = writeln!(
        s,
        "MACs: conv kh*kw*cin*cout*hout*wout, deconv kh*kw*cin*cout*hin*win, bn/relu/add 1 per output element; rf merges take the max per axis"
    );
    let header = ["node", "kind", "params", "MACs", "output", "rf", "act bytes"];
    let rows: Vec<[String; 7]> = r
        .nodes
        .iter()
        .map(|row| {
            let [n, c, h, w] = row.out_shape;
            [
                row.name.clone(),
                row.kind.clone(),
                row.params.to_string(),
                row.macs.to_string(),
                format!("({n}, {c}, {h}, {w})"),
                format!("{}x{}", fmt_rf(row.rf[0]), fmt_rf(row.rf[1])),
                row.act_bytes.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (wd, cell) in widths.iter_mut().zip(row) {
            *wd = (*wd).max(cell.len());
        }
    }
    let line = |cells: &[&str]| {
        let mut out = String::new();
        for (i, (cell, wd)) in cells.iter().zip(widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            if i < 2 || i == 4 {
                let _ = write!(out, "{cell:<wd$}");
            } else {
                let _ = write!(out, "{cell:>wd$}");
            }
        }
        out.trim_end().to_string()
    };
    let _ = writeln!(s, "{}", line(&header));
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        let _ = writeln!(s, "{}", line(&cells));
    }
    let t = &r.totals;
    let _ = writeln!(
        s,
        "total    params {}  MACs {}  act bytes {}",
        t.params, t.macs, t.act_bytes
    );
    let e = &r.split.encoder;
    let d = &r.split.decoder;
    let _ = writeln!(s, "encoder  params {}  MACs {}", e.params, e.macs);
    let _ = writeln!(s, "decoder  params {}  MACs {}", d.params, d.macs);
    let _ = writeln!(s, "encoder MAC share {:.4}", r.split.encoder_mac_share);
    s
}
