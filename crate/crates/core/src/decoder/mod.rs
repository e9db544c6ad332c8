//! The recursive decoder: stage weights, sharing policies, the stage loop
//! and checkpoint persistence.

mod checkpoint;
mod config;
mod stage;

pub use checkpoint::{Checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DecoderConfig, ProposalInit, Sharing};
pub use stage::{
    decode_stage, dynamic_conv, BottleneckNorm, SelfAttention, StageOutput, StageRoi, StageWeights, Tower,
    CLS_TOWER_DEPTH, PRIOR_PROB, REG_TOWER_DEPTH,
};

use rand::Rng;

use crate::geometry::BoxCXCYWH;
use crate::nn::ParamBuilder;
use crate::numerics::{Graph, ParamId, Params, Scalar, Tensor, Var};
use crate::pipeline::{roi_align, FeaturePyramid, DEFAULT_SAMPLING_RATIO};
use crate::posenc::roi_element_pe;

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error("invalid decoder config: {0}")]
    InvalidConfig(String),
    #[error("sharing policy {policy} needs {expected} stage weight sets, found {found}")]
    PolicyMismatch {
        policy: Sharing,
        expected: usize,
        found: usize,
    },
    #[error("cannot run {requested} stages with a decoder trained for {available}")]
    TooManyStages { requested: usize, available: usize },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// Learnable proposals plus the policy-selected stage weight sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub stages: Vec<StageWeights>,
    /// Learnable initial proposal features `[N, c]`.
    pub proposals: ParamId,
}

impl Decoder {
    /// Registers all decoder parameters under `decoder.`.
    pub fn build<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, cfg: &DecoderConfig) -> Result<Self, DecoderError> {
        cfg.validate()?;
        b.scope("decoder", |b| {
            let stages = (0..cfg.unique_stages())
                .map(|i| b.scope(&format!("stage{i}"), |b| StageWeights::build(b, cfg)))
                .collect();
            let init = Tensor::randn(&[cfg.num_proposals, cfg.c], 1.0, b.rng());
            let proposals = b.tensor("proposals", init);
            Ok(Self {
                cfg: cfg.clone(),
                stages,
                proposals,
            })
        })
    }

    /// Checks that the weight-set count fits the sharing policy.
    pub fn check_policy(&self) -> Result<(), DecoderError> {
        let expected = self.cfg.unique_stages();
        if self.stages.len() != expected {
            return Err(DecoderError::PolicyMismatch {
                policy: self.cfg.sharing,
                expected,
                found: self.stages.len(),
            });
        }
        Ok(())
    }

    /// Weights driving stage `t` (zero-based).
    pub fn stage_weights(&self, t: usize) -> &StageWeights {
        &self.stages[self.cfg.sharing.weight_index(t)]
    }

    /// Initial proposal boxes, laid out by `proposal_init`.
    pub fn initial_boxes<T: Scalar>(&self) -> Tensor<T> {
        let n = self.cfg.num_proposals;
        let data = self.cfg.proposal_init.boxes(n).into_iter().flatten().map(T::lit).collect();
        Tensor::new(&[n, 4], data).expect("box extent")
    }

    /// Runs `n_stages` stages (at most the configured count), resampling
    /// RoI features from the current boxes before each one.
    pub fn run<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        p: &Params<T>,
        pyramid: &FeaturePyramid<'g, T>,
        n_stages: usize,
    ) -> Result<Vec<StageOutput<'g, T>>, DecoderError> {
        self.check_policy()?;
        if n_stages > self.cfg.n_stages {
            return Err(DecoderError::TooManyStages {
                requested: n_stages,
                available: self.cfg.n_stages,
            });
        }
        let q = g.param(p, self.proposals);
        let boxes = g.constant(self.initial_boxes());
        Ok(run_decoder(g, p, &self.cfg, |t| self.stage_weights(t), q, boxes, pyramid, n_stages))
    }
}

/// The stage loop: for each stage, sample RoIs at the current boxes, decode,
/// and carry features and boxes forward (boxes detached unless configured
/// otherwise).
#[allow(clippy::too_many_arguments)]
pub fn run_decoder<'g, 'w, T: Scalar>(
    g: &'g Graph<T>,
    p: &Params<T>,
    cfg: &DecoderConfig,
    weights: impl Fn(usize) -> &'w StageWeights,
    q: Var<'g, T>,
    boxes: Var<'g, T>,
    pyramid: &FeaturePyramid<'g, T>,
    n_stages: usize,
) -> Vec<StageOutput<'g, T>> {
    let mut q = q;
    let mut boxes = boxes;
    let mut outputs = Vec::with_capacity(n_stages);
    for t in 0..n_stages {
        let roi = sample_stage_roi(cfg, pyramid, boxes);
        let out = decode_stage(g, p, weights(t), cfg, q, boxes, roi);
        q = out.features;
        boxes = if cfg.detach_boxes { out.boxes.detach() } else { out.boxes };
        outputs.push(out);
    }
    outputs
}

/// RoI features at the given boxes, plus per-element encodings when box PE
/// is enabled.
pub fn sample_stage_roi<'g, T: Scalar>(
    cfg: &DecoderConfig,
    pyramid: &FeaturePyramid<'g, T>,
    boxes: Var<'g, T>,
) -> StageRoi<'g, T> {
    let values = boxes.value();
    let list: Vec<_> = values
        .data()
        .chunks(4)
        .map(|b| BoxCXCYWH::new(b[0], b[1], b[2], b[3]))
        .collect();
    let sample = roi_align(pyramid, &list, DEFAULT_SAMPLING_RATIO);
    let element_pe = cfg
        .use_box_pe
        .then(|| boxes.graph().constant(roi_element_pe(&sample.centers, cfg.c)));
    StageRoi {
        features: sample.features,
        element_pe,
    }
}
