//! Training and evaluation data sources.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::coco::{load_coco_json, CocoDataset};
use super::synth::{generate_scene_sized, stream_seed, CLASS_NAMES};
use super::PipelineError;
use crate::matching_loss::Target;
use crate::numerics::Tensor;

/// Stream key of the held-out synthetic evaluation images, shared by every
/// training seed so runs are scored on the same scenes.
pub const SYNTHETIC_EVAL_STREAM: u64 = 0x5EED_E7A1;

/// One `[size, size, 3]` image with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f64>,
    pub target: Target,
}

/// Indexable image source. Synthetic sources are unbounded.
pub trait Dataset: Send + Sync {
    fn num_classes(&self) -> usize;
    fn image_size(&self) -> usize;
    /// `None` for unbounded streams.
    fn len(&self) -> Option<usize>;
    fn get(&self, index: u64) -> Result<Sample, PipelineError>;

    fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }
}

/// Where training or evaluation images come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    CocoJson { annotations: PathBuf, images: PathBuf },
}

/// Deterministic stream of synthetic scenes keyed by `stream`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticDataset {
    pub stream: u64,
    pub size: usize,
}

impl SyntheticDataset {
    pub fn new(stream: u64, size: usize) -> Self {
        Self { stream, size }
    }
}

impl Dataset for SyntheticDataset {
    fn num_classes(&self) -> usize {
        CLASS_NAMES.len()
    }

    fn image_size(&self) -> usize {
        self.size
    }

    fn len(&self) -> Option<usize> {
        None
    }

    fn get(&self, index: u64) -> Result<Sample, PipelineError> {
        let scene = generate_scene_sized(stream_seed(self.stream, index), self.size);
        let target = scene.target();
        Ok(Sample {
            image: scene.image,
            target,
        })
    }
}

/// COCO annotations plus an image directory; images are resized to a
/// square of `size` pixels, which leaves normalized boxes unchanged.
#[derive(Debug, Clone)]
pub struct CocoImages {
    pub dataset: CocoDataset,
    pub image_dir: PathBuf,
    pub size: usize,
}

impl CocoImages {
    pub fn open(annotations: &std::path::Path, image_dir: PathBuf, size: usize) -> Result<Self, PipelineError> {
        Ok(Self {
            dataset: load_coco_json(annotations)?,
            image_dir,
            size,
        })
    }
}

impl Dataset for CocoImages {
    fn num_classes(&self) -> usize {
        self.dataset.num_classes()
    }

    fn image_size(&self) -> usize {
        self.size
    }

    fn len(&self) -> Option<usize> {
        Some(self.dataset.records.len())
    }

    fn get(&self, index: u64) -> Result<Sample, PipelineError> {
        let n = self.dataset.records.len();
        if n == 0 {
            return Err(PipelineError::Dataset("no images".into()));
        }
        let rec = &self.dataset.records[(index % n as u64) as usize];
        let path = self.image_dir.join(&rec.file_name);
        let img = image::open(&path)
            .map_err(|e| PipelineError::Dataset(format!("image {} ({}): {e}", rec.image_id, path.display())))?
            .resize_exact(self.size as u32, self.size as u32, image::imageops::FilterType::Triangle)
            .to_rgb8();
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Ok(Sample {
            image: Tensor::new(&[self.size, self.size, 3], data).expect("image extent"),
            target: rec.target.clone(),
        })
    }
}

/// Opens the training stream for `source`.
pub fn open_dataset(source: &DataSource, seed: u64, size: usize) -> Result<Box<dyn Dataset>, PipelineError> {
    Ok(match source {
        DataSource::Synthetic => Box::new(SyntheticDataset::new(seed, size)),
        DataSource::CocoJson { annotations, images } => Box::new(CocoImages::open(annotations, images.clone(), size)?),
    })
}

/// Opens the evaluation set for `source`.
pub fn open_eval_dataset(source: &DataSource, size: usize) -> Result<Box<dyn Dataset>, PipelineError> {
    open_dataset(source, SYNTHETIC_EVAL_STREAM, size)
}
