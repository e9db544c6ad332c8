use serde::{Deserialize, Serialize};

use super::DecoderError;
use crate::posenc::CenternessVariant;

/// How stage parameters are shared across the decoding stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// Every stage owns its parameters.
    Cascade,
    /// One parameter copy drives every stage.
    SharedAll,
    /// A unique first stage, then one copy shared by the rest.
    FirstIndependent,
}

impl Sharing {
    pub const ALL: [Sharing; 3] = [Sharing::Cascade, Sharing::SharedAll, Sharing::FirstIndependent];

    /// Number of distinct stage weight sets for `n_stages` stages.
    pub fn unique_stages(self, n_stages: usize) -> usize {
        match self {
            Sharing::Cascade => n_stages,
            Sharing::SharedAll => n_stages.min(1),
            Sharing::FirstIndependent => n_stages.min(2),
        }
    }

    /// Which weight set runs stage `t` (zero-based).
    pub fn weight_index(self, t: usize) -> usize {
        match self {
            Sharing::Cascade => t,
            Sharing::SharedAll => 0,
            Sharing::FirstIndependent => t.min(1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sharing::Cascade => "cascade",
            Sharing::SharedAll => "shared_all",
            Sharing::FirstIndependent => "first_independent",
        }
    }
}

impl std::fmt::Display for Sharing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Sharing {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Sharing::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown sharing policy `{s}` (cascade, shared_all, first_independent)"))
    }
}

/// Where the proposal boxes start before the first stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalInit {
    /// Every proposal covers the whole image.
    FullImage,
    /// Proposals tile the image on a near-square grid; each box spans two
    /// grid cells per side so neighbours overlap.
    #[default]
    Grid,
}

impl ProposalInit {
    /// `[n, 4]` normalized center/size boxes.
    pub fn boxes(self, n: usize) -> Vec<[f64; 4]> {
        match self {
            ProposalInit::FullImage => vec![[0.5, 0.5, 1.0, 1.0]; n],
            ProposalInit::Grid => {
                let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
                let rows = n.div_ceil(cols).max(1);
                let (cw, rh) = (1.0 / cols as f64, 1.0 / rows as f64);
                (0..n)
                    .map(|i| {
                        let (r, c) = (i / cols, i % cols);
                        [(c as f64 + 0.5) * cw, (r as f64 + 0.5) * rh, (2.0 * cw).min(1.0), (2.0 * rh).min(1.0)]
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Channel width of proposal features and RoI features.
    pub c: usize,
    /// Bottleneck width of the dynamic convolution.
    pub d: usize,
    pub n_stages: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Dyn/Out passes per stage (1 or 2).
    pub in_stage_depth: usize,
    pub sharing: Sharing,
    pub use_box_pe: bool,
    pub use_centerness: bool,
    pub centerness_variant: CenternessVariant,
    pub num_classes: usize,
    pub num_proposals: usize,
    /// Stop box gradients between stages.
    pub detach_boxes: bool,
    #[serde(default)]
    pub proposal_init: ProposalInit,
}

impl DecoderConfig {
    /// The small configuration trained on synthetic scenes.
    pub fn desk() -> Self {
        Self {
            c: 64,
            d: 16,
            n_stages: 6,
            n_heads: 4,
            ffn_dim: 256,
            in_stage_depth: 1,
            sharing: Sharing::Cascade,
            use_box_pe: false,
            use_centerness: false,
            centerness_variant: CenternessVariant::Static,
            num_classes: 3,
            num_proposals: 20,
            detach_boxes: true,
            proposal_init: ProposalInit::Grid,
        }
    }

    /// Full-size decoder, used for parameter and FLOP audits.
    pub fn paper_scale() -> Self {
        Self {
            c: 256,
            d: 64,
            n_stages: 6,
            n_heads: 8,
            ffn_dim: 2048,
            num_classes: 80,
            num_proposals: 300,
            proposal_init: ProposalInit::FullImage,
            ..Self::desk()
        }
    }

    /// Full recursive model: first stage independent, box PE and centerness on.
    pub fn with_full_recursion(mut self) -> Self {
        self.sharing = Sharing::FirstIndependent;
        self.in_stage_depth = 2;
        self.use_box_pe = true;
        self.use_centerness = true;
        self
    }

    pub fn unique_stages(&self) -> usize {
        self.sharing.unique_stages(self.n_stages)
    }

    /// Input width of the first dynamic kernel: `2c` when positional
    /// encodings are concatenated onto the RoI features.
    pub fn kernel_in_dim(&self) -> usize {
        if self.use_box_pe {
            2 * self.c
        } else {
            self.c
        }
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let fail = |msg: String| Err(DecoderError::InvalidConfig(msg));
        if self.c == 0 || self.d == 0 {
            return fail("c and d must be positive".into());
        }
        if self.c < 2 * self.d {
            return fail(format!("bottleneck requires c >= 2d, got c={} d={}", self.c, self.d));
        }
        if self.c % 4 != 0 {
            return fail(format!("c must be divisible by 4, got {}", self.c));
        }
        if self.n_heads == 0 || self.c % self.n_heads != 0 {
            return fail(format!("c={} is not divisible by n_heads={}", self.c, self.n_heads));
        }
        if self.n_stages == 0 {
            return fail("n_stages must be at least 1".into());
        }
        if !(1..=2).contains(&self.in_stage_depth) {
            return fail(format!("in_stage_depth must be 1 or 2, got {}", self.in_stage_depth));
        }
        if self.ffn_dim == 0 || self.num_classes == 0 || self.num_proposals == 0 {
            return fail("ffn_dim, num_classes and num_proposals must be positive".into());
        }
        Ok(())
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unique_stage_counts() {
        assert_eq!(Sharing::Cascade.unique_stages(6), 6);
        assert_eq!(Sharing::SharedAll.unique_stages(6), 1);
        assert_eq!(Sharing::FirstIndependent.unique_stages(6), 2);
        assert_eq!(Sharing::FirstIndependent.unique_stages(1), 1);
    }

    #[test]
    fn weight_indices() {
        let idx = |s: Sharing| (0..6).map(|t| s.weight_index(t)).collect::<Vec<_>>();
        assert_eq!(idx(Sharing::Cascade), [0, 1, 2, 3, 4, 5]);
        assert_eq!(idx(Sharing::SharedAll), [0; 6]);
        assert_eq!(idx(Sharing::FirstIndependent), [0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn parse_round_trip() {
        for s in Sharing::ALL {
            assert_eq!(s.name().parse::<Sharing>().unwrap(), s);
        }
        assert!("tied".parse::<Sharing>().is_err());
    }

    #[test]
    fn validation() {
        assert!(DecoderConfig::desk().validate().is_ok());
        assert!(DecoderConfig::paper_scale().validate().is_ok());
        let bad = DecoderConfig { d: 40, ..DecoderConfig::desk() };
        assert!(bad.validate().is_err());
        let bad = DecoderConfig { in_stage_depth: 3, ..DecoderConfig::desk() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn grid_proposals_tile_the_image() {
        let b = ProposalInit::Grid.boxes(20);
        assert_eq!(b.len(), 20);
        // 5 columns x 4 rows.
        assert_eq!(b[0], [0.1, 0.125, 0.4, 0.5]);
        assert_eq!(b[19], [0.9, 0.875, 0.4, 0.5]);
        assert!(b.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ProposalInit::Grid.boxes(1), vec![[0.5, 0.5, 1.0, 1.0]]);
        assert_eq!(ProposalInit::FullImage.boxes(3), vec![[0.5, 0.5, 1.0, 1.0]; 3]);
    }
}
