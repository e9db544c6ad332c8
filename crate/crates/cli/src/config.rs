//! Flat `key = value` run configuration.
//!
//! Every key is optional and overrides the chosen `preset`; unknown keys are
//! rejected. See the README for the annotated reference file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use recdet::decoder::{DecoderConfig, ProposalInit, Sharing};
use recdet::numerics::DType;
use recdet::pipeline::{DataSource, TrainConfig};
use recdet::posenc::CenternessVariant;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Batch 8 at 2.5e-5, the reference desk schedule.
    Desk,
    /// Batch 2 at a larger step, sized for one CPU core.
    #[default]
    SingleCore,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<Preset>,
    /// `f32` or `f64`.
    pub dtype: Option<String>,

    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_decay_at: Option<Vec<usize>>,
    pub lr_decay_factor: Option<f64>,
    pub warmup_iters: Option<usize>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub clip_norm: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub image_size: Option<usize>,

    pub c: Option<usize>,
    pub d: Option<usize>,
    pub n_stages: Option<usize>,
    pub n_heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub in_stage_depth: Option<usize>,
    pub sharing: Option<Sharing>,
    pub use_box_pe: Option<bool>,
    pub use_centerness: Option<bool>,
    pub centerness_variant: Option<CenternessVariant>,
    pub num_classes: Option<usize>,
    pub num_proposals: Option<usize>,
    pub detach_boxes: Option<bool>,
    pub proposal_init: Option<ProposalInit>,

    pub lambda_cls: Option<f64>,
    pub lambda_l1: Option<f64>,
    pub lambda_giou: Option<f64>,
    pub focal_alpha: Option<f64>,
    pub focal_gamma: Option<f64>,

    /// COCO annotation file; enables COCO ingestion together with `coco_images`.
    pub coco_annotations: Option<PathBuf>,
    pub coco_images: Option<PathBuf>,
}

/// A resolved configuration: training settings plus storage precision.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dtype: DType,
}

impl Default for RunConfig {
    fn default() -> Self {
        FileConfig::default().resolve().expect("defaults are valid")
    }
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!(describe(text, &e)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut t = match self.preset.unwrap_or_default() {
            Preset::Desk => TrainConfig::desk(),
            Preset::SingleCore => TrainConfig::single_core(),
        };
        macro_rules! set {
            ($dst:expr, $($key:ident),+) => {
                $(if let Some(v) = self.$key.clone() { $dst.$key = v; })+
            };
        }
        set!(t, seed, iterations, batch_size, lr, lr_decay_at, lr_decay_factor, warmup_iters, weight_decay);
        set!(t, beta1, beta2, adam_eps, clip_norm, checkpoint_every, image_size);
        set!(t.decoder, c, d, n_stages, n_heads, ffn_dim, in_stage_depth, sharing, use_box_pe);
        set!(t.decoder, use_centerness, centerness_variant, num_classes, num_proposals, detach_boxes, proposal_init);
        set!(t.loss, lambda_cls, lambda_l1, lambda_giou, focal_alpha, focal_gamma);
        t.data = match (&self.coco_annotations, &self.coco_images) {
            (None, None) => DataSource::Synthetic,
            (Some(annotations), Some(images)) => DataSource::CocoJson {
                annotations: annotations.clone(),
                images: images.clone(),
            },
            (Some(_), None) => bail!("key `coco_annotations` requires `coco_images`"),
            (None, Some(_)) => bail!("key `coco_images` requires `coco_annotations`"),
        };
        let dtype = match self.dtype.as_deref() {
            None => DType::Float32,
            Some(s) => DType::parse(s).map_err(|e| anyhow::anyhow!("key `dtype`: {e}"))?,
        };
        t.validate()?;
        Ok(RunConfig { train: t, dtype })
    }
}

/// Decoder overrides shared by the `audit` command.
pub fn decoder_of(cfg: Option<&Path>) -> Result<DecoderConfig> {
    Ok(match cfg {
        Some(p) => FileConfig::load(p)?.resolve()?.train.decoder,
        None => DecoderConfig::desk(),
    })
}

/// Error text that always names the offending key.
fn describe(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message();
    if msg.contains('`') && (msg.starts_with("unknown field") || msg.starts_with("duplicate key")) {
        return msg.to_string();
    }
    let key = e.span().and_then(|span| {
        let start = text[..span.start.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
        let line = text[start..].lines().next()?;
        let (key, _) = line.split_once('=')?;
        Some(key.trim().to_string())
    });
    match key {
        Some(k) if !k.is_empty() => format!("key `{k}`: {msg}"),
        _ => msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_single_core_preset() {
        let r = FileConfig::parse("").unwrap().resolve().unwrap();
        assert_eq!(r.train, TrainConfig::single_core());
        assert_eq!(r.dtype, DType::Float32);
    }

    #[test]
    fn keys_override_the_preset() {
        let text = "preset = \"desk\"\nsharing = \"shared_all\"\nin_stage_depth = 2\nlr = 1e-4\nlr_decay_at = [10]\niterations = 20\ndtype = \"f64\"\ncenterness_variant = \"adjust\"\n";
        let r = FileConfig::parse(text).unwrap().resolve().unwrap();
        assert_eq!(r.train.decoder.sharing, Sharing::SharedAll);
        assert_eq!(r.train.decoder.in_stage_depth, 2);
        assert_eq!(r.train.decoder.centerness_variant, CenternessVariant::Adjust);
        assert_eq!(r.train.lr, 1e-4);
        assert_eq!(r.train.batch_size, TrainConfig::desk().batch_size);
        assert_eq!(r.dtype, DType::Float64);
    }

    #[test]
    fn errors_name_the_key() {
        let unknown = FileConfig::parse("learning_rate = 0.1").unwrap_err().to_string();
        assert!(unknown.contains("learning_rate"), "{unknown}");
        let typed = FileConfig::parse("seed = 1\nlr = \"fast\"\n").unwrap_err().to_string();
        assert!(typed.contains("`lr`"), "{typed}");
        let variant = FileConfig::parse("sharing = \"all\"").unwrap_err().to_string();
        assert!(variant.contains("`sharing`"), "{variant}");
        let invalid = FileConfig::parse("iterations = 10\nlr_decay_at = [20]").unwrap().resolve().unwrap_err();
        assert!(invalid.to_string().contains("decay"), "{invalid}");
        let dtype = FileConfig::parse("dtype = \"f16\"").unwrap().resolve().unwrap_err();
        assert!(dtype.to_string().contains("`dtype`"), "{dtype}");
    }
}
