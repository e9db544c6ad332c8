//! Deterministic synthetic shapes scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BoxCXCYWH};
use crate::matching_loss::Target;
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_IMAGE_SIZE: usize = 128;
pub const MAX_OBJECTS: usize = 8;
pub const MAX_PAIR_IOU: f64 = 0.3;
pub const MIN_SIDE_PX: usize = 12;
pub const MAX_SIDE_PX: usize = 40;
pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn class_index(self) -> usize {
        self as usize
    }

    /// Base colour; each drawn object jitters around it.
    fn base_color(self) -> [f64; 3] {
        match self {
            ShapeKind::Circle => [0.9, 0.25, 0.2],
            ShapeKind::Square => [0.2, 0.85, 0.3],
            ShapeKind::Triangle => [0.25, 0.35, 0.95],
        }
    }

    /// Whether pixel centre `(px, py)` lies inside the shape drawn in the
    /// `side x side` square with top-left corner `(x0, y0)`.
    fn contains(self, px: f64, py: f64, x0: f64, y0: f64, side: f64) -> bool {
        let (u, v) = ((px - x0) / side, (py - y0) / side);
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            // Apex at the top centre, base along the bottom edge.
            ShapeKind::Triangle => (u - 0.5).abs() <= 0.5 * v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ShapeKind,
    /// Normalized box of the painted pixels.
    pub bbox: BoxCXCYWH<f64>,
}

/// A rasterized scene: `[size, size, 3]` image in `[0, 1]` and its objects.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: Tensor<f64>,
    pub objects: Vec<SceneObject>,
}

impl SyntheticScene {
    pub fn size(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn target(&self) -> Target {
        Target {
            classes: self.objects.iter().map(|o| o.kind.class_index()).collect(),
            boxes: self.objects.iter().map(|o| o.bbox).collect(),
        }
    }

    pub fn image_as<T: Scalar>(&self) -> Tensor<T> {
        self.image.cast()
    }
}

/// Scene for `seed` at the default size.
pub fn generate_synthetic_scene(seed: u64) -> SyntheticScene {
    generate_scene_sized(seed, DEFAULT_IMAGE_SIZE)
}

/// Deterministic scene of `size x size` pixels with 1–8 shapes whose
/// ground-truth boxes overlap pairwise by IoU ≤ 0.3.
pub fn generate_scene_sized(seed: u64, size: usize) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background: f64 = rng.gen_range(0.05..0.2);
    let mut data: Vec<f64> = (0..size * size * 3)
        .map(|_| (background + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0))
        .collect();
    let wanted = rng.gen_range(1..=MAX_OBJECTS);
    let max_side = MAX_SIDE_PX.min(size);
    let min_side = MIN_SIDE_PX.min(max_side);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while objects.len() < wanted && attempts < 200 {
        attempts += 1;
        let kind = ShapeKind::ALL[rng.gen_range(0..3)];
        let side = rng.gen_range(min_side..=max_side);
        let x0 = rng.gen_range(0..=size - side);
        let y0 = rng.gen_range(0..=size - side);
        let Some(bbox) = painted_box(kind, x0, y0, side, size) else {
            continue;
        };
        if objects.iter().any(|o| iou(o.bbox.to_xyxy(), bbox.to_xyxy()) > MAX_PAIR_IOU) {
            continue;
        }
        let base = kind.base_color();
        let color: Vec<f64> = base.iter().map(|c| (c + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)).collect();
        for py in y0..y0 + side {
            for px in x0..x0 + side {
                if kind.contains(px as f64 + 0.5, py as f64 + 0.5, x0 as f64, y0 as f64, side as f64) {
                    let o = (py * size + px) * 3;
                    data[o..o + 3].copy_from_slice(&color);
                }
            }
        }
        objects.push(SceneObject { kind, bbox });
    }
    // Later shapes may occlude earlier ones; boxes keep the full drawn extent.
    SyntheticScene {
        image: Tensor::new(&[size, size, 3], data).expect("image extent"),
        objects,
    }
}

/// Tight normalized box around the pixels the shape paints.
fn painted_box(kind: ShapeKind, x0: usize, y0: usize, side: usize, size: usize) -> Option<BoxCXCYWH<f64>> {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for py in y0..y0 + side {
        for px in x0..x0 + side {
            if kind.contains(px as f64 + 0.5, py as f64 + 0.5, x0 as f64, y0 as f64, side as f64) {
                x1 = x1.min(px);
                y1 = y1.min(py);
                x2 = x2.max(px + 1);
                y2 = y2.max(py + 1);
            }
        }
    }
    if x1 == usize::MAX {
        return None;
    }
    let s = size as f64;
    Some(crate::geometry::BoxXYXY::new(x1 as f64 / s, y1 as f64 / s, x2 as f64 / s, y2 as f64 / s).to_cxcywh())
}

/// Seed of the `index`-th image of a stream keyed by `seed`.
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(generate_synthetic_scene(42), generate_synthetic_scene(42));
        assert_ne!(generate_synthetic_scene(42).image, generate_synthetic_scene(43).image);
    }

    #[test]
    fn object_count_within_bounds() {
        for seed in 0..10_000 {
            let s = generate_scene_sized(seed, 64);
            assert!((1..=MAX_OBJECTS).contains(&s.objects.len()), "seed {seed}");
        }
    }

    #[test]
    fn boxes_inside_and_separated() {
        for seed in 0..200 {
            let s = generate_synthetic_scene(seed);
            for (i, a) in s.objects.iter().enumerate() {
                let b = a.bbox.to_xyxy();
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 1.0 && b.y2 <= 1.0);
                for o in &s.objects[i + 1..] {
                    assert!(iou(b, o.bbox.to_xyxy()) <= MAX_PAIR_IOU);
                }
            }
        }
    }

    #[test]
    fn square_box_is_drawn_extent() {
        let bbox = painted_box(ShapeKind::Square, 10, 20, 16, 128).unwrap().to_xyxy();
        let px = |v: f64| v * 128.0;
        assert!((px(bbox.x1) - 10.0).abs() <= 1.0);
        assert!((px(bbox.y1) - 20.0).abs() <= 1.0);
        assert!((px(bbox.x2) - 26.0).abs() <= 1.0);
        assert!((px(bbox.y2) - 36.0).abs() <= 1.0);
    }

    #[test]
    fn stream_seeds_differ() {
        assert_ne!(stream_seed(0, 0), stream_seed(0, 1));
        assert_ne!(stream_seed(0, 1), stream_seed(1, 0));
    }
}
