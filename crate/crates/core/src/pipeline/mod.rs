//! Everything around the decoder: backbone and pyramid, RoI Align, data,
//! training, evaluation and experiment curves.

mod backbone;
pub mod coco;
pub mod data;
pub mod eval;
mod model;
mod roi;
pub mod synth;
pub mod train;

pub use backbone::{Backbone, MAX_STRIDE, WIDTHS};
pub use model::Detector;
pub use roi::{
    level_for_box, roi_align, FeaturePyramid, PyramidLevel, RoiSample, CANONICAL_SIZE, DEFAULT_SAMPLING_RATIO,
    MAX_LEVEL, MIN_LEVEL,
};

pub use coco::{load_coco_json, parse_coco_json, CocoDataset, CocoRecord};
pub use data::{DataSource, Dataset, Sample, SyntheticDataset};
pub use eval::{average_precision, evaluate, evaluate_stages, APReport, Detection, EvalOptions};
pub use synth::{generate_synthetic_scene, SyntheticScene};
pub use train::{load_trained, TrainConfig, Trainer};

use crate::decoder::DecoderError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("bad image: {0}")]
    BadImage(String),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration}: {breakdown}")]
    NonFinite { iteration: usize, breakdown: String },
}
