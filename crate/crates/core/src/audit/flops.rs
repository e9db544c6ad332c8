use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::posenc::ROI_CELLS;

/// Multiply-accumulate counts of one decoding stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageFlops {
    /// `4Nc² + 2N²c`: four projections plus scores and mixing.
    pub self_attention: u64,
    /// `2Nc²d` per in-stage pass.
    pub dyn_layer: u64,
    /// `N·49·(c_in·d + d·c)` per in-stage pass.
    pub dynamic_conv: u64,
    /// `N·49c·c` per in-stage pass.
    pub out: u64,
    /// `2N·c·ffn_dim`.
    pub ffn: u64,
}

impl StageFlops {
    pub fn total(&self) -> u64 {
        self.self_attention + self.dyn_layer + self.dynamic_conv + self.out + self.ffn
    }
}

/// Analytic MAC counts of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEstimate {
    pub num_proposals: usize,
    pub image_size: usize,
    pub in_stage_depth: usize,
    /// Identical for every stage, whatever the sharing policy.
    pub per_stage: StageFlops,
    pub n_stages: usize,
    /// `n_stages × per_stage.total()`.
    pub decoder_total: u64,
    /// The desk backbone and pyramid on an `image_size²` input; zero when
    /// no backbone MACs are supplied.
    pub backbone: u64,
}

impl FlopEstimate {
    pub fn total(&self) -> u64 {
        self.decoder_total + self.backbone
    }
}

/// Decoder MACs for `num_proposals` proposals; `backbone_macs` is added as
/// reported, since the decoder cost does not depend on the image size.
pub fn estimate_flops(cfg: &DecoderConfig, num_proposals: usize, image_size: usize, backbone_macs: u64) -> FlopEstimate {
    let n = num_proposals as u64;
    let c = cfg.c as u64;
    let d = cfg.d as u64;
    let c_in = cfg.kernel_in_dim() as u64;
    let cells = ROI_CELLS as u64;
    let depth = cfg.in_stage_depth as u64;
    let per_stage = StageFlops {
        self_attention: 4 * n * c * c + 2 * n * n * c,
        dyn_layer: depth * 2 * n * c * c * d,
        dynamic_conv: depth * n * cells * (c_in * d + d * c),
        out: depth * n * cells * c * c,
        ffn: 2 * n * c * cfg.ffn_dim as u64,
    };
    FlopEstimate {
        num_proposals,
        image_size,
        in_stage_depth: cfg.in_stage_depth,
        per_stage,
        n_stages: cfg.n_stages,
        decoder_total: cfg.n_stages as u64 * per_stage.total(),
        backbone: backbone_macs,
    }
}
