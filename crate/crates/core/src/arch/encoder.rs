use serde::{Deserialize, Serialize};

use super::graph::{GraphBuilder, NetworkGraph, NodeId, Region};
use crate::error::{Error, Result};
use crate::kernels::ConvParams;

/// VGG-style encoder: stages of 5x5 conv + batch norm + ReLU, a stride-2
/// first convolution and a 2x2 max-pool in front of every later stage.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// `(channels, height, width)` of the network input.
    pub input_shape: [usize; 3],
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: Vec<usize>,
    pub kernel: usize,
    pub first_conv_stride: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::vgg10()
    }
}

impl EncoderSpec {
    /// Ten 5x5 convolutions in four stages, 256 output channels, /16.
    pub fn vgg10() -> Self {
        EncoderSpec {
            input_shape: [3, 48, 160],
            stage_channels: vec![32, 64, 128, 256],
            convs_per_stage: vec![2, 2, 2, 4],
            kernel: 5,
            first_conv_stride: 2,
        }
    }

    /// Ten convolutions over five stages (/32), for decoders with five
    /// upsampling layers. The last three convolutions share one resolution
    /// so both encoder skips can be fused.
    pub fn vgg10_five_stage() -> Self {
        EncoderSpec {
            input_shape: [3, 64, 160],
            stage_channels: vec![32, 64, 128, 256, 256],
            convs_per_stage: vec![2, 2, 2, 1, 3],
            kernel: 5,
            first_conv_stride: 2,
        }
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input_shape[1] = h;
        self.input_shape[2] = w;
        self
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn conv_count(&self) -> usize {
        self.convs_per_stage.iter().sum()
    }

    pub fn output_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }

    pub fn downsampling(&self) -> usize {
        self.first_conv_stride << self.stages().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.convs_per_stage.len() {
            return Err(Error::Assembly(format!(
                "{} stage widths but {} conv counts",
                self.stage_channels.len(),
                self.convs_per_stage.len()
            )));
        }
        if self.stage_channels.contains(&0) || self.convs_per_stage.contains(&0) {
            return Err(Error::Assembly("stage widths and conv counts must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) || self.first_conv_stride == 0 || self.input_shape[0] == 0 {
            return Err(Error::Assembly("encoder kernel must be odd and stride positive".into()));
        }
        let f = self.downsampling();
        let [_, h, w] = self.input_shape;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Geometry(format!(
                "input {h}x{w} is not divisible by the encoder downsampling factor {f}"
            )));
        }
        Ok(())
    }
}

/// Where the decoder may read encoder features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderTaps {
    pub output: NodeId,
    pub output_channels: usize,
    /// Second-last then third-last conv outputs, with their channel counts.
    pub skips: Vec<(NodeId, usize)>,
}

pub fn build_encoder_into(spec: &EncoderSpec, b: &mut GraphBuilder, input: NodeId) -> Result<EncoderTaps> {
    spec.validate()?;
    let mut x = input;
    let mut channels = spec.input_shape[0];
    let mut conv_outputs = Vec::new();
    for (s, (&width, &count)) in spec.stage_channels.iter().zip(&spec.convs_per_stage).enumerate() {
        let stage = s + 1;
        if s > 0 {
            x = b.maxpool(format!("encoder.stage{stage}.pool"), x);
        }
        for m in 1..=count {
            let name = format!("encoder.stage{stage}.conv{m}");
            let mut p = ConvParams::new(channels, width, spec.kernel).same();
            if s == 0 && m == 1 {
                p = p.stride(spec.first_conv_stride);
            }
            x = b.conv(&name, p, x);
            x = b.batch_norm(format!("{name}.bn"), width, x);
            x = b.relu(format!("{name}.relu"), x);
            channels = width;
            conv_outputs.push((x, width));
        }
    }
    let output = x;
    b.tap("encoder.out", output);
    let mut skips = Vec::new();
    for (i, &(id, c)) in conv_outputs.iter().rev().skip(1).take(2).enumerate() {
        b.tap(&format!("encoder.skip{}", i + 1), id);
        skips.push((id, c));
    }
    Ok(EncoderTaps {
        output,
        output_channels: channels,
        skips,
    })
}

/// The encoder alone, as a graph from image to final feature map.
pub fn build_encoder(spec: &EncoderSpec) -> Result<NetworkGraph> {
    let mut b = GraphBuilder::new(Region::Encoder);
    let x = b.input("input", spec.input_shape[0]);
    let taps = build_encoder_into(spec, &mut b, x)?;
    b.finish(taps.output)
}
