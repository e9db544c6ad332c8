//! Feature pyramid container and RoI Align.

use crate::geometry::BoxCXCYWH;
use crate::numerics::{Graph, Scalar, Tap, Var};
use crate::posenc::{ROI_CELLS, ROI_SIZE};

/// Coarsest and finest pyramid levels (`P2`..`P5`).
pub const MIN_LEVEL: usize = 2;
pub const MAX_LEVEL: usize = 5;
/// Canonical box size for level routing, in pixels.
pub const CANONICAL_SIZE: f64 = 224.0;
pub const CANONICAL_LEVEL: f64 = 4.0;
/// Bilinear samples per RoI cell along each axis.
pub const DEFAULT_SAMPLING_RATIO: usize = 2;

/// One `[h, w, c]` level with stride `2^level`.
#[derive(Debug, Clone, Copy)]
pub struct PyramidLevel<'g, T: Scalar> {
    pub features: Var<'g, T>,
    pub level: usize,
}

impl<T: Scalar> PyramidLevel<'_, T> {
    pub fn stride(&self) -> usize {
        1 << self.level
    }

    pub fn extent(&self) -> (usize, usize) {
        let s = self.features.shape();
        (s[0], s[1])
    }
}

/// Levels `P2..P5` of a single image, ordered fine to coarse.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<'g, T: Scalar> {
    pub levels: Vec<PyramidLevel<'g, T>>,
    pub image_height: usize,
    pub image_width: usize,
}

impl<'g, T: Scalar> FeaturePyramid<'g, T> {
    pub fn channels(&self) -> usize {
        self.levels[0].features.shape()[2]
    }

    fn graph(&self) -> &'g Graph<T> {
        self.levels[0].features.graph()
    }

    fn get(&self, level: usize) -> (usize, &PyramidLevel<'g, T>) {
        self.levels
            .iter()
            .enumerate()
            .find(|(_, l)| l.level == level)
            .unwrap_or_else(|| panic!("pyramid has no level P{level}"))
    }
}

/// `clamp(floor(4 + log2(sqrt(w·h·H·W) / 224)), 2, 5)`.
pub fn level_for_box(b: BoxCXCYWH<f64>, image_height: usize, image_width: usize) -> usize {
    let scale = (b.w * b.h * (image_height * image_width) as f64).sqrt();
    let raw = (CANONICAL_LEVEL + (scale / CANONICAL_SIZE).log2()).floor();
    (raw.max(MIN_LEVEL as f64) as usize).min(MAX_LEVEL)
}

/// RoI Align output.
#[derive(Debug, Clone)]
pub struct RoiSample<'g, T: Scalar> {
    /// `[n, 49, c]` features, cells in `[y, x]` row-major order.
    pub features: Var<'g, T>,
    /// Normalized global `(x, y)` of each cell center, `49` per box.
    pub centers: Vec<[T; 2]>,
    /// Pyramid level each box was read from.
    pub levels: Vec<usize>,
}

/// Bilinear taps for feature-space point `(y, x)` on an `h x w` map,
/// following the aligned convention (points beyond one pixel outside the
/// map read zero; others are clamped to the border).
fn bilinear(y: f64, x: f64, h: usize, w: usize, weight: f64, out: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let axis = |v: f64, n: usize| {
        let v = v.max(0.0);
        let lo = v.floor() as usize;
        if lo >= n - 1 {
            (n - 1, n - 1, 0.0)
        } else {
            (lo, lo + 1, v - lo as f64)
        }
    };
    let (y0, y1, ly) = axis(y, h);
    let (x0, x1, lx) = axis(x, w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (r, c, wt) in [(y0, x0, hy * hx), (y0, x1, hy * lx), (y1, x0, ly * hx), (y1, x1, ly * lx)] {
        if wt != 0.0 {
            out.push((r * w + c, weight * wt));
        }
    }
}

/// Samples a 7x7 grid from the routed pyramid level of every box, averaging
/// `sampling_ratio²` bilinear samples per cell. Gradients flow to the
/// features, not to the boxes.
pub fn roi_align<'g, T: Scalar>(
    pyramid: &FeaturePyramid<'g, T>,
    boxes: &[BoxCXCYWH<T>],
    sampling_ratio: usize,
) -> RoiSample<'g, T> {
    assert!(sampling_ratio > 0, "sampling ratio must be positive");
    let g = pyramid.graph();
    let c = pyramid.channels();
    let (ih, iw) = (pyramid.image_height as f64, pyramid.image_width as f64);
    let per_sample = 1.0 / (sampling_ratio * sampling_ratio) as f64;
    let mut row_ptr = Vec::with_capacity(boxes.len() * ROI_CELLS + 1);
    row_ptr.push(0);
    let mut taps = Vec::new();
    let mut centers = Vec::with_capacity(boxes.len() * ROI_CELLS);
    let mut levels = Vec::with_capacity(boxes.len());
    let mut scratch = Vec::with_capacity(16);
    for b in boxes {
        let bf = BoxCXCYWH::new(b.x.as_f64(), b.y.as_f64(), b.w.as_f64(), b.h.as_f64());
        let level = level_for_box(bf, pyramid.image_height, pyramid.image_width);
        levels.push(level);
        let (source, lvl) = pyramid.get(level);
        let (fh, fw) = lvl.extent();
        let stride = lvl.stride() as f64;
        let x1 = (bf.x - bf.w / 2.0) * iw / stride - 0.5;
        let y1 = (bf.y - bf.h / 2.0) * ih / stride - 0.5;
        let bin_w = bf.w * iw / stride / ROI_SIZE as f64;
        let bin_h = bf.h * ih / stride / ROI_SIZE as f64;
        for cy in 0..ROI_SIZE {
            for cx in 0..ROI_SIZE {
                scratch.clear();
                for sy in 0..sampling_ratio {
                    let y = y1 + (cy as f64 + (sy as f64 + 0.5) / sampling_ratio as f64) * bin_h;
                    for sx in 0..sampling_ratio {
                        let x = x1 + (cx as f64 + (sx as f64 + 0.5) / sampling_ratio as f64) * bin_w;
                        bilinear(y, x, fh, fw, per_sample, &mut scratch);
                    }
                }
                taps.extend(scratch.iter().map(|&(row, w)| Tap {
                    source: source as u32,
                    row: row as u32,
                    weight: T::lit(w),
                }));
                row_ptr.push(taps.len());
                let gx = bf.x - bf.w / 2.0 + (cx as f64 + 0.5) * bf.w / ROI_SIZE as f64;
                let gy = bf.y - bf.h / 2.0 + (cy as f64 + 0.5) * bf.h / ROI_SIZE as f64;
                centers.push([T::lit(gx), T::lit(gy)]);
            }
        }
    }
    let inputs: Vec<_> = pyramid.levels.iter().map(|l| l.features).collect();
    let flat = g.gather_rows(&inputs, c, row_ptr, taps);
    RoiSample {
        features: flat.reshape(&[boxes.len(), ROI_CELLS, c]),
        centers,
        levels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn pyramid<'g>(g: &'g Graph<f64>, maps: Vec<Tensor<f64>>, size: usize) -> FeaturePyramid<'g, f64> {
        FeaturePyramid {
            levels: maps
                .into_iter()
                .enumerate()
                .map(|(i, t)| PyramidLevel {
                    features: g.input(t),
                    level: MIN_LEVEL + i,
                })
                .collect(),
            image_height: size,
            image_width: size,
        }
    }

    fn constant_maps(size: usize, c: usize, v: f64) -> Vec<Tensor<f64>> {
        (MIN_LEVEL..=MAX_LEVEL)
            .map(|l| Tensor::full(&[size >> l, size >> l, c], v))
            .collect()
    }

    #[test]
    fn level_routing() {
        let b = |s: f64| BoxCXCYWH::new(0.5, 0.5, s, s);
        assert_eq!(level_for_box(b(1.0), 224, 224), 4);
        assert_eq!(level_for_box(b(0.5), 224, 224), 3);
        assert_eq!(level_for_box(b(2.0), 224, 224), 5);
        assert_eq!(level_for_box(b(0.01), 224, 224), 2);
        assert_eq!(level_for_box(b(1.0), 128, 128), 3);
    }

    #[test]
    fn constant_map_gives_constant_cells() {
        let g = Graph::new();
        let pyr = pyramid(&g, constant_maps(128, 3, 2.5), 128);
        let boxes = [
            BoxCXCYWH::new(0.5, 0.5, 1.0, 1.0),
            BoxCXCYWH::new(0.3, 0.6, 0.1, 0.05),
            BoxCXCYWH::new(0.9, 0.1, 0.2, 0.2),
        ];
        let out = roi_align(&pyr, &boxes, 2).features.value();
        assert_eq!(out.shape(), &[3, 49, 3]);
        for v in out.data() {
            assert!((v - 2.5).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn cell_centers_span_box() {
        let g = Graph::new();
        let pyr = pyramid(&g, constant_maps(64, 1, 0.0), 64);
        let out = roi_align(&pyr, &[BoxCXCYWH::new(0.5, 0.5, 0.7, 0.35)], 2);
        assert_eq!(out.centers.len(), 49);
        let first = out.centers[0];
        let last = out.centers[48];
        assert!((first[0] - (0.15 + 0.05)).abs() < 1e-12);
        assert!((first[1] - (0.325 + 0.025)).abs() < 1e-12);
        assert!((last[0] - (0.85 - 0.05)).abs() < 1e-12);
        assert!((last[1] - (0.675 - 0.025)).abs() < 1e-12);
    }
}
