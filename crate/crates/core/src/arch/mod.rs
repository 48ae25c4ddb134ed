//! Encoder, decoder configurations, and the assembled network graph.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod graph;

pub use config::{ArchConfig, ResolvedArch};
pub use decoder::{parse_decoder_config, BlockFlags, BlockKind, DecoderConfig, Preset, TABLE1_CONFIGS};
pub use encoder::{build_encoder, EncoderSpec, EncoderTaps};
pub use graph::{FuseKind, GraphBuilder, NetworkGraph, NodeId, NodeSpec, Op, ParamRole, ParamSpec, Region};

use crate::error::{Error, Result};
use crate::tensor::Shape;

/// Builds the full image-to-logits graph and checks it end to end at the
/// encoder's input resolution.
pub fn assemble_network(enc: &EncoderSpec, dec: &DecoderConfig) -> Result<NetworkGraph> {
    enc.validate()?;
    dec.validate()?;
    let factor = enc.downsampling();
    if 1usize << dec.stages() != factor {
        return Err(Error::Assembly(format!(
            "encoder downsamples by {factor} but the decoder has {} x2 upsampling stages",
            dec.stages()
        )));
    }
    let mut b = GraphBuilder::new(Region::Encoder);
    let input = b.input("input", enc.input_shape[0]);
    let taps = encoder::build_encoder_into(enc, &mut b, input)?;
    b.set_region(Region::Decoder);
    let out = decoder::build_decoder(dec, &mut b, &taps)?;
    let graph = b.finish(out)?;

    let [c, h, w] = enc.input_shape;
    let shapes = graph.infer_shapes(Shape::new(1, c, h, w))?;
    let got = shapes[graph.output()];
    let want = Shape::new(1, dec.num_classes, h, w);
    if got != want {
        return Err(Error::Assembly(format!("network output is {got}, expected {want}")));
    }
    Ok(graph)
}
