//! JSON architecture files and their fully resolved form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::decoder::{parse_decoder_config, DecoderConfig, Preset};
use super::encoder::EncoderSpec;
use super::graph::NetworkGraph;
use crate::blocks::SkipMode;
use crate::error::{Error, Result};

/// Partial block options; unset fields keep the configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlagsPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_pre_1x1: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_post_1x1: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oned_pairs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallel_kernels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_mode: Option<SkipMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_norm: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    /// Preset name or `mNp` string.
    pub config: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skips: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deconv_kernels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flags: Option<FlagsPatch>,
}

/// On-disk architecture description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderSpec>,
    pub decoder: DecoderSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

/// Every architecture choice spelled out, defaults included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedArch {
    pub name: String,
    pub encoder: EncoderSpec,
    pub decoder: DecoderConfig,
    pub batch_size: usize,
}

impl ArchConfig {
    pub fn from_text(config: &str) -> Self {
        ArchConfig {
            encoder: None,
            decoder: DecoderSection {
                config: config.to_string(),
                num_classes: None,
                skips: None,
                deconv_kernels: None,
                flags: None,
            },
            batch_size: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Accepts a JSON file path, a preset name, or an `mNp` string.
    pub fn from_arg(arg: &str) -> Result<Self> {
        let path = Path::new(arg);
        if arg.ends_with(".json") || path.is_file() {
            Self::load(path)
        } else {
            Ok(Self::from_text(arg))
        }
    }

    pub fn preset(p: Preset) -> Self {
        Self::from_text(p.name())
    }

    pub fn resolve(&self) -> Result<ResolvedArch> {
        let text = self.decoder.config.trim();
        let preset = Preset::from_name(text);
        let mut dec = parse_decoder_config(text)?;
        if let Some(k) = self.decoder.num_classes {
            dec.num_classes = k;
        }
        if let Some(s) = self.decoder.skips {
            dec.skip_count = s;
        }
        if let Some(k) = &self.decoder.deconv_kernels {
            dec.deconv_kernels = k.clone();
        }
        if let Some(f) = &self.decoder.flags {
            let b = &mut dec.block_flags;
            if let Some(v) = f.use_pre_1x1 {
                b.use_pre_1x1 = v;
            }
            if let Some(v) = f.use_post_1x1 {
                b.use_post_1x1 = v;
            }
            if let Some(v) = f.oned_pairs {
                b.oned_pairs = v;
            }
            if let Some(v) = &f.parallel_kernels {
                b.parallel_kernels = v.clone();
            }
            if let Some(v) = f.dilation {
                b.dilation = v;
            }
            if let Some(v) = f.skip_mode {
                b.skip_mode = v;
            }
            if let Some(v) = f.batch_norm {
                b.batch_norm = v;
            }
        }
        dec.validate()?;
        let encoder = match &self.encoder {
            Some(e) => e.clone(),
            None if preset.is_some_and(Preset::needs_five_stage_encoder) => EncoderSpec::vgg10_five_stage(),
            None => EncoderSpec::vgg10(),
        };
        encoder.validate()?;
        let batch_size = self
            .batch_size
            .unwrap_or_else(|| preset.map_or(4, Preset::training_batch));
        if batch_size == 0 {
            return Err(Error::Assembly("batch size must be at least 1".into()));
        }
        Ok(ResolvedArch {
            name: preset.map_or_else(|| text.to_string(), |p| p.name().to_string()),
            encoder,
            decoder: dec,
            batch_size,
        })
    }
}

impl ResolvedArch {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads either a resolved document or an `ArchConfig` file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match Self::from_json(&text) {
            Ok(r) => Ok(r),
            Err(_) => ArchConfig::from_json(&text)?.resolve(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("resolved config serializes")
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.encoder = self.encoder.with_input(h, w);
        self
    }

    pub fn graph(&self) -> Result<NetworkGraph> {
        super::assemble_network(&self.encoder, &self.decoder)
    }
}
