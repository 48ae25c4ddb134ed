//! Decoder configurations: the `mNp` grammar, named presets, and the
//! decoder graph builder.
//!
//! Grammar (whitespace is not allowed inside a configuration):
//!
//! ```text
//! CONFIG := GROUP+
//! GROUP  := "(" ITEM ("-" ITEM)* ")" | "()"
//! ITEM   := count "N" type        count >= 1, type in {1, 2}
//! ```
//!
//! Group `i` holds the blocks that follow deconvolution `i`. Missing
//! trailing groups are empty.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::encoder::EncoderTaps;
use super::graph::{FuseKind, GraphBuilder, NodeId};
use crate::blocks::{build_d5_block, build_nonbottleneck, BlockVariant, NonBottleneckSpec, SkipMode};
use crate::error::{Error, Result};
use crate::kernels::ConvParams;

pub const DEFAULT_STAGES: usize = 4;
pub const DEFAULT_CLASSES: usize = 4;

/// The fourteen decoder configurations compared in the ablation table.
pub const TABLE1_CONFIGS: [&str; 14] = [
    "D1",
    "D2",
    "D3",
    "D4",
    "D5",
    "D6",
    "D7",
    "D8",
    "(2N1)(2N1)(2N2)(2N2)",
    "(2N2)(2N2)(2N2)(2N2)",
    "(2N2)(2N2)(2N2)",
    "(2N1)(2N1)(2N1)(2N1)",
    "(1N1-1N2)(1N1-1N2)(1N1-1N2)(1N1-1N2)",
    "Optimal",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Type1,
    Type2,
    /// The stage-dependent block of the D5/D6 decoders.
    D5,
}

/// Block options shared by every non-bottleneck layer in a decoder.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockFlags {
    pub use_pre_1x1: bool,
    pub use_post_1x1: bool,
    pub oned_pairs: usize,
    pub parallel_kernels: Vec<usize>,
    /// Dilation of type-2 parallel kernels.
    pub dilation: usize,
    pub skip_mode: SkipMode,
    pub batch_norm: bool,
}

impl Default for BlockFlags {
    fn default() -> Self {
        let s = NonBottleneckSpec::type2(1);
        BlockFlags {
            use_pre_1x1: s.use_pre_1x1,
            use_post_1x1: s.use_post_1x1,
            oned_pairs: s.oned_pairs,
            parallel_kernels: s.parallel_kernels,
            dilation: s.dilation,
            skip_mode: s.skip_mode,
            batch_norm: s.batch_norm,
        }
    }
}

impl BlockFlags {
    pub fn spec(&self, variant: BlockVariant, channels: usize) -> NonBottleneckSpec {
        NonBottleneckSpec {
            variant,
            channels,
            use_pre_1x1: self.use_pre_1x1,
            use_post_1x1: self.use_post_1x1,
            oned_pairs: self.oned_pairs,
            parallel_kernels: self.parallel_kernels.clone(),
            dilation: match variant {
                BlockVariant::Type1 => 1,
                BlockVariant::Type2 => self.dilation,
            },
            skip_mode: self.skip_mode,
            batch_norm: self.batch_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub groups: Vec<Vec<BlockKind>>,
    pub deconv_kernels: Vec<usize>,
    pub num_classes: usize,
    pub skip_count: usize,
    pub block_flags: BlockFlags,
}

impl DecoderConfig {
    pub fn from_groups(groups: Vec<Vec<BlockKind>>) -> Self {
        let stages = groups.len();
        DecoderConfig {
            groups,
            deconv_kernels: vec![2; stages],
            num_classes: DEFAULT_CLASSES,
            skip_count: 2,
            block_flags: BlockFlags::default(),
        }
    }

    pub fn stages(&self) -> usize {
        self.groups.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Assembly(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.groups.is_empty() || self.deconv_kernels.len() != self.groups.len() {
            return Err(Error::Assembly(format!(
                "{} block groups but {} deconvolution kernels",
                self.groups.len(),
                self.deconv_kernels.len()
            )));
        }
        if self.deconv_kernels.contains(&0) {
            return Err(Error::Assembly("deconvolution kernels must be positive".into()));
        }
        if self.skip_count > 2 {
            return Err(Error::Assembly(format!(
                "at most 2 encoder skips exist, asked for {}",
                self.skip_count
            )));
        }
        Ok(())
    }

    /// Text form: a preset-free `mNp` string. Fails for configurations the
    /// grammar cannot express (non-default flags, kernels, classes, skips,
    /// or D5 blocks).
    pub fn render(&self) -> Result<String> {
        let plain = DecoderConfig {
            groups: self.groups.clone(),
            ..DecoderConfig::from_groups(self.groups.clone())
        };
        if *self != plain || self.groups.iter().flatten().any(|k| *k == BlockKind::D5) {
            return Err(Error::Contract(
                "configuration has options the mNp grammar cannot express".into(),
            ));
        }
        let mut out = String::new();
        for group in &self.groups {
            out.push('(');
            let mut runs: Vec<(usize, BlockKind)> = Vec::new();
            for &k in group {
                match runs.last_mut() {
                    Some((n, last)) if *last == k => *n += 1,
                    _ => runs.push((1, k)),
                }
            }
            let items: Vec<String> = runs
                .iter()
                .map(|(n, k)| format!("{n}N{}", if *k == BlockKind::Type1 { 1 } else { 2 }))
                .collect();
            out.push_str(&items.join("-"));
            out.push(')');
        }
        Ok(out)
    }

    fn pad_to_default(mut groups: Vec<Vec<BlockKind>>) -> Vec<Vec<BlockKind>> {
        while groups.len() < DEFAULT_STAGES {
            groups.push(Vec::new());
        }
        groups
    }
}

/// Named decoder configurations from the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    D1,
    D2,
    D3,
    D4,
    D5,
    D6,
    D7,
    D8,
    Optimal,
}

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::D1,
        Preset::D2,
        Preset::D3,
        Preset::D4,
        Preset::D5,
        Preset::D6,
        Preset::D7,
        Preset::D8,
        Preset::Optimal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::D1 => "D1",
            Preset::D2 => "D2",
            Preset::D3 => "D3",
            Preset::D4 => "D4",
            Preset::D5 => "D5",
            Preset::D6 => "D6",
            Preset::D7 => "D7",
            Preset::D8 => "D8",
            Preset::Optimal => "Optimal",
        }
    }

    pub fn from_name(s: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.name().eq_ignore_ascii_case(s))
    }

    /// Batch size the configuration was trained with (D3 and D5 used 8).
    pub fn training_batch(self) -> usize {
        match self {
            Preset::D3 | Preset::D5 => 8,
            _ => 4,
        }
    }

    /// D7 upsamples five times and needs a /32 encoder.
    pub fn needs_five_stage_encoder(self) -> bool {
        self == Preset::D7
    }

    pub fn config(self) -> DecoderConfig {
        use BlockKind::{Type1 as T1, Type2 as T2};
        let optimal = DecoderConfig::from_groups(vec![vec![T1, T1], vec![T2, T2], vec![T2], vec![]]);
        match self {
            Preset::Optimal => optimal,
            // without the 1x1 after the 3x3 and 5x5 convolutions
            Preset::D1 => {
                let mut c = optimal;
                c.block_flags.use_post_1x1 = false;
                c
            }
            // D1 without the second encoder skip; D3 only changes the batch size
            Preset::D2 | Preset::D3 => {
                let mut c = Preset::D1.config();
                c.skip_count = 1;
                c
            }
            // D3 without the 1x1 in front of the 3x3 and 5x5 convolutions
            Preset::D4 => {
                let mut c = Preset::D3.config();
                c.block_flags.use_pre_1x1 = false;
                c
            }
            Preset::D5 | Preset::D6 => DecoderConfig::from_groups(vec![vec![BlockKind::D5]; 4]),
            Preset::D7 => {
                let mut groups = optimal.groups.clone();
                groups.push(vec![]);
                DecoderConfig {
                    deconv_kernels: vec![2, 2, 3, 3, 5],
                    ..DecoderConfig::from_groups(groups)
                }
            }
            // D7's blocks without the 3x3 and 5x5 convolutions: a single
            // 1x1 branch remains
            Preset::D8 => {
                let mut c = optimal;
                c.block_flags.parallel_kernels = vec![1];
                c.block_flags.use_post_1x1 = false;
                c
            }
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

struct Scanner<'a> {
    chars: Vec<(usize, char)>,
    pos: usize,
    text: &'a str,
}

impl Scanner<'_> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).map(|&(_, c)| c)
    }

    fn at(&self) -> usize {
        self.chars.get(self.pos).map_or(self.text.len(), |&(i, _)| i)
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            pos: self.at(),
            msg: msg.into(),
        })
    }

    fn expect(&mut self, want: char) -> Result<()> {
        match self.peek() {
            Some(c) if c == want => {
                self.pos += 1;
                Ok(())
            }
            Some(c) => self.fail(format!("expected `{want}`, found `{c}`")),
            None => self.fail(format!("expected `{want}`, found end of input")),
        }
    }

    fn item(&mut self, out: &mut Vec<BlockKind>) -> Result<()> {
        let start = self.pos;
        let mut count = 0usize;
        while let Some(d) = self.peek().and_then(|c| c.to_digit(10)) {
            count = count
                .checked_mul(10)
                .and_then(|c| c.checked_add(d as usize))
                .ok_or_else(|| Error::Parse {
                    pos: self.at(),
                    msg: "count overflows".into(),
                })?;
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail("expected a block count");
        }
        if count == 0 {
            self.pos = start;
            return self.fail("block count must be at least 1");
        }
        self.expect('N')?;
        let kind = match self.peek() {
            Some('1') => BlockKind::Type1,
            Some('2') => BlockKind::Type2,
            Some(c) => return self.fail(format!("block type must be 1 or 2, found `{c}`")),
            None => return self.fail("expected block type, found end of input"),
        };
        self.pos += 1;
        out.extend(std::iter::repeat_n(kind, count));
        Ok(())
    }

    fn group(&mut self) -> Result<Vec<BlockKind>> {
        self.expect('(')?;
        let mut blocks = Vec::new();
        if self.peek() == Some(')') {
            self.pos += 1;
            return Ok(blocks);
        }
        self.item(&mut blocks)?;
        while self.peek() == Some('-') {
            self.pos += 1;
            self.item(&mut blocks)?;
        }
        self.expect(')')?;
        Ok(blocks)
    }
}

/// Parses a preset name (case-insensitive) or an `mNp` string.
pub fn parse_decoder_config(text: &str) -> Result<DecoderConfig> {
    let trimmed = text.trim();
    if let Some(p) = Preset::from_name(trimmed) {
        return Ok(p.config());
    }
    let offset = text.len() - text.trim_start().len();
    let mut sc = Scanner {
        chars: trimmed.char_indices().map(|(i, c)| (i + offset, c)).collect(),
        pos: 0,
        text,
    };
    if trimmed.is_empty() {
        return sc.fail("empty decoder configuration");
    }
    let mut groups = Vec::new();
    while sc.peek().is_some() {
        groups.push(sc.group()?);
    }
    Ok(DecoderConfig::from_groups(DecoderConfig::pad_to_default(groups)))
}

fn deconv_params(channels: usize, k: usize) -> ConvParams {
    // exact x2 upsampling: out = 2*in for every kernel size
    let (pad, op) = if k.is_multiple_of(2) {
        ((k - 2) / 2, 0)
    } else {
        ((k - 1) / 2, 1)
    };
    ConvParams::new(channels, channels, k)
        .stride(2)
        .padding(pad)
        .output_padding(op)
}

/// Appends the decoder after the encoder taps and returns the logits node.
pub fn build_decoder(config: &DecoderConfig, b: &mut GraphBuilder, taps: &EncoderTaps) -> Result<NodeId> {
    config.validate()?;
    let k = config.num_classes;
    if config.skip_count > taps.skips.len() {
        return Err(Error::Assembly(format!(
            "decoder wants {} encoder skips, encoder offers {}",
            config.skip_count,
            taps.skips.len()
        )));
    }
    let mut x = b.conv(
        "decoder.collapse",
        ConvParams::new(taps.output_channels, k, 1),
        taps.output,
    );
    if config.skip_count > 0 {
        let mut addends = vec![x];
        for (i, &(tap, channels)) in taps.skips.iter().take(config.skip_count).enumerate() {
            addends.push(b.conv(format!("decoder.skip{}", i + 1), ConvParams::new(channels, k, 1), tap));
        }
        x = b.fuse("decoder.skip_fuse", FuseKind::Skip, addends);
    }
    for (s, (group, &kernel)) in config.groups.iter().zip(&config.deconv_kernels).enumerate() {
        let stage = s + 1;
        x = b.deconv(format!("decoder.stage{stage}.deconv"), deconv_params(k, kernel), x);
        for (j, kind) in group.iter().enumerate() {
            let block = match kind {
                BlockKind::Type1 => build_nonbottleneck(&config.block_flags.spec(BlockVariant::Type1, k))?,
                BlockKind::Type2 => build_nonbottleneck(&config.block_flags.spec(BlockVariant::Type2, k))?,
                BlockKind::D5 => build_d5_block(stage, k)?,
            };
            x = b.splice(&block, x, &format!("decoder.stage{stage}.block{}", j + 1));
        }
    }
    Ok(x)
}
