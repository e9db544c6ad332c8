use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Backbone, PipelineError};
use crate::decoder::{Decoder, DecoderConfig, StageOutput};
use crate::nn::ParamBuilder;
use crate::numerics::{Graph, Params, Scalar, Tensor};

/// Backbone, pyramid and recursive decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub cfg: DecoderConfig,
    pub backbone: Backbone,
    pub decoder: Decoder,
}

impl Detector {
    /// Builds the model and its freshly initialized parameters from `seed`.
    pub fn build<T: Scalar>(cfg: &DecoderConfig, seed: u64) -> Result<(Self, Params<T>), PipelineError> {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let backbone = Backbone::build(&mut b, cfg.c);
        let decoder = Decoder::build(&mut b, cfg)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                backbone,
                decoder,
            },
            params,
        ))
    }

    pub fn num_params(&self) -> usize {
        self.backbone.num_params()
            + self.decoder.stages.iter().map(|s| s.num_params()).sum::<usize>()
            + self.cfg.num_proposals * self.cfg.c
    }

    /// Per-stage predictions for one `[h, w, 3]` image.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        p: &Params<T>,
        image: &Tensor<T>,
        n_stages: usize,
    ) -> Result<Vec<StageOutput<'g, T>>, PipelineError> {
        let pyramid = self.backbone.forward(g, p, g.constant(image.clone()))?;
        Ok(self.decoder.run(g, p, &pyramid, n_stages)?)
    }
}
