//! Non-bottleneck decoder layers and their ablation variants.
//!
//! The canonical block, for `c` channels throughout:
//!
//! ```text
//! x ─ [1x1] ─ (3x1 ─ 1x3)×pairs ─┬─ kxk ─ [1x1] ─┐ (one branch per kernel)
//! │                              │               ├─ Σ branches
//! │                              └───────────────┴─ + ─ + x ─ ReLU
//! ```
//!
//! Every convolution is followed by a ReLU (and optionally batch norm
//! before it). Fusion is elementwise addition, so every tensor inside the
//! block keeps the input shape. In `SkipMode::Single` the middle addition
//! with the factorized-stage output is dropped.

use serde::{Deserialize, Serialize};

use crate::arch::graph::{FuseKind, GraphBuilder, NetworkGraph, NodeId, Region};
use crate::error::{Error, Result};
use crate::kernels::ConvParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockVariant {
    /// Plain parallel k×k convolutions.
    Type1,
    /// Parallel k×k convolutions are dilated.
    Type2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    #[default]
    Cascaded,
    Single,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NonBottleneckSpec {
    pub variant: BlockVariant,
    pub channels: usize,
    pub use_pre_1x1: bool,
    pub use_post_1x1: bool,
    pub oned_pairs: usize,
    pub parallel_kernels: Vec<usize>,
    pub dilation: usize,
    pub skip_mode: SkipMode,
    pub batch_norm: bool,
}

impl NonBottleneckSpec {
    pub fn new(variant: BlockVariant, channels: usize) -> Self {
        NonBottleneckSpec {
            variant,
            channels,
            use_pre_1x1: true,
            use_post_1x1: true,
            oned_pairs: 1,
            parallel_kernels: vec![3, 5],
            dilation: 1,
            skip_mode: SkipMode::Cascaded,
            batch_norm: false,
        }
    }

    pub fn type1(channels: usize) -> Self {
        Self::new(BlockVariant::Type1, channels)
    }

    pub fn type2(channels: usize) -> Self {
        Self::new(BlockVariant::Type2, channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Spec("channels must be at least 1".into()));
        }
        if self.variant == BlockVariant::Type1 && self.dilation != 1 {
            return Err(Error::Spec(format!(
                "type-1 blocks are undilated, got dilation {}",
                self.dilation
            )));
        }
        if self.dilation == 0 {
            return Err(Error::Spec("dilation must be at least 1".into()));
        }
        if self.parallel_kernels.is_empty() {
            return Err(Error::Spec("at least one parallel kernel is required".into()));
        }
        if let Some(k) = self.parallel_kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Spec(format!(
                "parallel kernel {k} is even and cannot keep the spatial size"
            )));
        }
        Ok(())
    }
}

struct Emitter<'a> {
    b: &'a mut GraphBuilder,
    channels: usize,
    batch_norm: bool,
}

impl Emitter<'_> {
    /// conv (+ bn) + relu
    fn conv_relu(&mut self, name: &str, p: ConvParams, x: NodeId) -> NodeId {
        let mut y = self.b.conv(name, p, x);
        if self.batch_norm {
            y = self.b.batch_norm(format!("{name}_bn"), self.channels, y);
        }
        self.b.relu(format!("{name}_relu"), y)
    }

    fn square(&self, k: usize, d: usize) -> ConvParams {
        ConvParams::new(self.channels, self.channels, k).dilation(d).same()
    }

    fn rect(&self, kh: usize, kw: usize) -> ConvParams {
        ConvParams::new(self.channels, self.channels, 1).kernel(kh, kw).same()
    }
}

/// Emits the block as a standalone graph with one input node named `input`.
pub fn build_nonbottleneck(spec: &NonBottleneckSpec) -> Result<NetworkGraph> {
    spec.validate()?;
    let mut b = GraphBuilder::new(Region::Decoder);
    let x = b.input("input", spec.channels);
    let mut e = Emitter {
        b: &mut b,
        channels: spec.channels,
        batch_norm: spec.batch_norm,
    };

    let mut trunk = x;
    if spec.use_pre_1x1 {
        trunk = e.conv_relu("pre1x1", e.square(1, 1), trunk);
    }
    for i in 1..=spec.oned_pairs {
        trunk = e.conv_relu(&format!("oned{i}.conv3x1"), e.rect(3, 1), trunk);
        trunk = e.conv_relu(&format!("oned{i}.conv1x3"), e.rect(1, 3), trunk);
    }
    let dilation = match spec.variant {
        BlockVariant::Type1 => 1,
        BlockVariant::Type2 => spec.dilation,
    };
    let mut branches = Vec::with_capacity(spec.parallel_kernels.len());
    for (i, &k) in spec.parallel_kernels.iter().enumerate() {
        let name = format!("branch{}_{k}x{k}", i + 1);
        let mut y = e.conv_relu(&name, e.square(k, dilation), trunk);
        if spec.use_post_1x1 {
            y = e.conv_relu(&format!("{name}.post1x1"), e.square(1, 1), y);
        }
        branches.push(y);
    }
    let merged = if branches.len() > 1 {
        b.fuse("branch_fuse", FuseKind::Branch, branches)
    } else {
        branches[0]
    };
    let residual = match spec.skip_mode {
        SkipMode::Cascaded => {
            let stage = b.fuse("stage_fuse", FuseKind::Skip, vec![merged, trunk]);
            b.fuse("input_fuse", FuseKind::Skip, vec![stage, x])
        }
        SkipMode::Single => b.fuse("input_fuse", FuseKind::Skip, vec![merged, x]),
    };
    let out = b.relu("out_relu", residual);
    b.finish(out)
}

/// The ad-hoc blocks of the D5/D6 decoders, by the deconvolution stage
/// (1-based) they follow:
///
/// * 1: two (3x1, 1x3, ReLU) sets with one residual add from the block input
/// * 2: a 3x3 convolution (dilation 1) followed by the stage-1 block
/// * 3, 4: a single 3x3 convolution (dilation 1)
///
/// The lone 3x3 convolutions carry no activation so that a block at the
/// last stage still emits unconstrained logits.
pub fn build_d5_block(after_deconv_index: usize, channels: usize) -> Result<NetworkGraph> {
    if !(1..=4).contains(&after_deconv_index) {
        return Err(Error::Spec(format!(
            "D5 blocks exist after deconvolutions 1-4, not {after_deconv_index}"
        )));
    }
    if channels == 0 {
        return Err(Error::Spec("channels must be at least 1".into()));
    }
    let mut b = GraphBuilder::new(Region::Decoder);
    let x = b.input("input", channels);
    let square = ConvParams::new(channels, channels, 3).same();
    let mut trunk = x;
    if after_deconv_index >= 2 {
        trunk = b.conv("conv3x3", square, trunk);
    }
    if after_deconv_index <= 2 {
        let skip_from = trunk;
        let rect = |kh, kw| ConvParams::new(channels, channels, 1).kernel(kh, kw).same();
        for i in 1..=2 {
            trunk = b.conv(format!("set{i}.conv3x1"), rect(3, 1), trunk);
            trunk = b.conv(format!("set{i}.conv1x3"), rect(1, 3), trunk);
            trunk = b.relu(format!("set{i}.relu"), trunk);
        }
        trunk = b.fuse("residual_fuse", FuseKind::Skip, vec![trunk, skip_from]);
    }
    b.finish(trunk)
}

/// Distinct backward paths from block output to block input, with parallel
/// branches collapsed into one.
pub fn gradient_fanout(block: &NetworkGraph) -> u64 {
    block.gradient_fanout()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::graph::Op;
    use crate::tensor::Shape;

    fn convs(g: &NetworkGraph) -> usize {
        g.count(Op::is_conv)
    }

    fn fuses(g: &NetworkGraph) -> usize {
        g.count(|op| matches!(op, Op::Fuse { .. }))
    }

    #[test]
    fn canonical_type1_node_counts() {
        let g = build_nonbottleneck(&NonBottleneckSpec::type1(4)).unwrap();
        assert_eq!(convs(&g), 7);
        assert_eq!(fuses(&g), 3);
        let kernels: Vec<_> = g
            .nodes()
            .iter()
            .filter_map(|n| match &n.op {
                Op::Conv2d(p) => Some(p.kernel),
                _ => None,
            })
            .collect();
        assert_eq!(kernels, vec![(1, 1), (3, 1), (1, 3), (3, 3), (1, 1), (5, 5), (1, 1)]);
    }

    #[test]
    fn without_post_projection_has_five_convs() {
        let spec = NonBottleneckSpec {
            use_post_1x1: false,
            ..NonBottleneckSpec::type1(4)
        };
        assert_eq!(convs(&build_nonbottleneck(&spec).unwrap()), 5);
    }

    #[test]
    fn blocks_preserve_shape() {
        for spec in [
            NonBottleneckSpec::type1(4),
            NonBottleneckSpec {
                dilation: 2,
                ..NonBottleneckSpec::type2(3)
            },
            NonBottleneckSpec {
                parallel_kernels: vec![3, 5, 1],
                batch_norm: true,
                ..NonBottleneckSpec::type1(2)
            },
        ] {
            let g = build_nonbottleneck(&spec).unwrap();
            for (h, w) in [(5, 5), (6, 20), (9, 7)] {
                let s = Shape::new(2, spec.channels, h, w);
                assert_eq!(*g.infer_shapes(s).unwrap().last().unwrap(), s);
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let even = NonBottleneckSpec {
            parallel_kernels: vec![3, 4],
            ..NonBottleneckSpec::type1(4)
        };
        assert!(matches!(build_nonbottleneck(&even), Err(Error::Spec(_))));
        let dilated_t1 = NonBottleneckSpec {
            dilation: 2,
            ..NonBottleneckSpec::type1(4)
        };
        assert!(build_nonbottleneck(&dilated_t1).is_err());
        let empty = NonBottleneckSpec {
            parallel_kernels: vec![],
            ..NonBottleneckSpec::type2(4)
        };
        assert!(build_nonbottleneck(&empty).is_err());
        assert!(build_nonbottleneck(&NonBottleneckSpec::type1(0)).is_err());
    }

    #[test]
    fn fanout_counts() {
        let canonical = build_nonbottleneck(&NonBottleneckSpec::type1(4)).unwrap();
        assert_eq!(gradient_fanout(&canonical), 3);
        let single = NonBottleneckSpec {
            skip_mode: SkipMode::Single,
            ..NonBottleneckSpec::type1(4)
        };
        assert_eq!(gradient_fanout(&build_nonbottleneck(&single).unwrap()), 2);
    }

    #[test]
    fn d5_blocks() {
        let one = build_d5_block(1, 4).unwrap();
        assert_eq!((convs(&one), fuses(&one)), (4, 1));
        let two = build_d5_block(2, 4).unwrap();
        assert_eq!((convs(&two), fuses(&two)), (5, 1));
        for i in [3, 4] {
            let g = build_d5_block(i, 4).unwrap();
            assert_eq!((convs(&g), fuses(&g)), (1, 0));
        }
        for i in 1..=4 {
            let s = Shape::new(1, 4, 6, 20);
            assert_eq!(
                *build_d5_block(i, 4).unwrap().infer_shapes(s).unwrap().last().unwrap(),
                s
            );
        }
        assert!(matches!(build_d5_block(0, 4), Err(Error::Spec(_))));
        assert!(matches!(build_d5_block(5, 4), Err(Error::Spec(_))));
    }
}
