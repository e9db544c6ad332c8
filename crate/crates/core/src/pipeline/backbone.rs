//! Tiny strided conv backbone with a top-down feature pyramid.

use rand::Rng;

use super::roi::{FeaturePyramid, PyramidLevel, MIN_LEVEL};
use super::PipelineError;
use crate::nn::{Conv2d, ParamBuilder};
use crate::numerics::{ConvGeom, Graph, Params, Scalar, Var};

/// Output widths of the stem and the four stride-2 blocks.
pub const WIDTHS: [usize; 5] = [16, 32, 64, 128, 128];
/// Input extents must be divisible by the coarsest stride.
pub const MAX_STRIDE: usize = 32;
const DOWN: ConvGeom = ConvGeom { kernel: 3, stride: 2, pad: 1 };
const POINT: ConvGeom = ConvGeom { kernel: 1, stride: 1, pad: 0 };

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub stem: Conv2d,
    /// Blocks producing strides 4, 8, 16, 32 (`C2..C5`).
    pub blocks: Vec<Conv2d>,
    /// 1x1 projections of `C2..C5` to the decoder width.
    pub laterals: Vec<Conv2d>,
    pub channels: usize,
}

impl Backbone {
    pub fn build<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, channels: usize) -> Self {
        b.scope("backbone", |b| {
            let stem = b.conv("stem", 3, WIDTHS[0], DOWN);
            let blocks = (1..WIDTHS.len())
                .map(|i| b.conv(&format!("block{i}"), WIDTHS[i - 1], WIDTHS[i], DOWN))
                .collect();
            let laterals = (1..WIDTHS.len())
                .map(|i| b.conv(&format!("lateral{i}"), WIDTHS[i], channels, POINT))
                .collect();
            Self {
                stem,
                blocks,
                laterals,
                channels,
            }
        })
    }

    /// Closed-form parameter count for pyramid width `channels`.
    pub fn param_count(channels: usize) -> usize {
        let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
        conv(3, 3, WIDTHS[0])
            + (1..WIDTHS.len())
                .map(|i| conv(3, WIDTHS[i - 1], WIDTHS[i]) + conv(1, WIDTHS[i], channels))
                .sum::<usize>()
    }

    pub fn num_params(&self) -> usize {
        self.stem.num_params()
            + self.blocks.iter().map(Conv2d::num_params).sum::<usize>()
            + self.laterals.iter().map(Conv2d::num_params).sum::<usize>()
    }

    /// Multiply-accumulates of one forward pass over an `h x w` image.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        Self::macs_for(self.channels, h, w)
    }

    /// Closed-form [`Backbone::macs`] for pyramid width `channels`.
    pub fn macs_for(channels: usize, h: usize, w: usize) -> u64 {
        let mut total = 0u64;
        let (mut eh, mut ew) = (h, w);
        let mut cin = 3;
        for (i, &cout) in WIDTHS.iter().enumerate() {
            eh = DOWN.out_extent(eh);
            ew = DOWN.out_extent(ew);
            total += (eh * ew * 9 * cin * cout) as u64;
            if i > 0 {
                total += (eh * ew * cout * channels) as u64;
            }
            cin = cout;
        }
        total
    }

    /// `[h, w, 3]` image to pyramid levels `P2..P5`.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        p: &Params<T>,
        image: Var<'g, T>,
    ) -> Result<FeaturePyramid<'g, T>, PipelineError> {
        let shape = image.shape();
        if shape.len() != 3 || shape[2] != 3 || shape[0] % MAX_STRIDE != 0 || shape[1] % MAX_STRIDE != 0 {
            return Err(PipelineError::BadImage(format!(
                "expected [h, w, 3] with h and w divisible by {MAX_STRIDE}, got {shape:?}"
            )));
        }
        let mut x = self.stem.forward(g, p, image).relu();
        let mut stages = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(g, p, x).relu();
            stages.push(x);
        }
        let mut levels = Vec::with_capacity(stages.len());
        let mut top: Option<Var<'g, T>> = None;
        for (i, (c, lateral)) in stages.iter().zip(&self.laterals).enumerate().rev() {
            let mut f = lateral.forward(g, p, *c);
            if let Some(t) = top {
                f = f + t.upsample2x();
            }
            top = Some(f);
            levels.push(PyramidLevel {
                features: f,
                level: MIN_LEVEL + i,
            });
        }
        levels.reverse();
        Ok(FeaturePyramid {
            levels,
            image_height: shape[0],
            image_width: shape[1],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(c: usize) -> (Backbone, Params<f64>) {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::build(&mut ParamBuilder::new(&mut params, &mut rng), c);
        (bb, params)
    }

    #[test]
    fn macs_on_a_128_pixel_image() {
        // Stem 64²·9·3·16, then per block conv + 1x1 lateral to 64 channels.
        let expected = 64 * 64 * 9 * 3 * 16
            + 32 * 32 * (9 * 16 * 32 + 32 * 64)
            + 16 * 16 * (9 * 32 * 64 + 64 * 64)
            + 8 * 8 * (9 * 64 * 128 + 128 * 64)
            + 4 * 4 * (9 * 128 * 128 + 128 * 64);
        assert_eq!(expected, 22_085_632);
        assert_eq!(Backbone::macs_for(64, 128, 128), expected);
        assert_eq!(build(64).0.macs(128, 128), expected);
    }

    #[test]
    fn level_extents_and_width() {
        let (bb, params) = build(8);
        let g = Graph::new();
        let img = g.constant(Tensor::full(&[128, 128, 3], 0.3));
        let pyr = bb.forward(&g, &params, img).unwrap();
        let extents: Vec<_> = pyr.levels.iter().map(|l| l.features.shape()).collect();
        assert_eq!(extents, vec![vec![32, 32, 8], vec![16, 16, 8], vec![8, 8, 8], vec![4, 4, 8]]);
        assert_eq!(pyr.levels.iter().map(|l| l.level).collect::<Vec<_>>(), [2, 3, 4, 5]);
    }

    #[test]
    fn zero_image_zero_pyramid() {
        let (bb, params) = build(8);
        let g = Graph::new();
        let pyr = bb.forward(&g, &params, g.constant(Tensor::zeros(&[64, 96, 3]))).unwrap();
        for l in &pyr.levels {
            assert!(l.features.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_bad_extent() {
        let (bb, params) = build(8);
        let g = Graph::new();
        assert!(bb.forward(&g, &params, g.constant(Tensor::zeros(&[100, 64, 3]))).is_err());
    }

    #[test]
    fn closed_form_count() {
        let (bb, params) = build(64);
        assert_eq!(Backbone::param_count(64), bb.num_params());
        assert_eq!(params.num_scalars(), bb.num_params());
    }
}
