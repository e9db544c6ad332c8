//! PNG previews of synthetic scenes with their ground-truth boxes.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use recdet::pipeline::synth::{generate_scene_sized, stream_seed, SyntheticScene};

/// Outline colour per shape class.
const CLASS_COLORS: [[u8; 3]; 3] = [[255, 64, 64], [64, 255, 64], [64, 160, 255]];

pub fn write_previews(count: usize, seed: u64, size: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    for i in 0..count {
        let scene = generate_scene_sized(stream_seed(seed, i as u64), size);
        let path = dir.join(format!("scene_{i:03}.png"));
        render(&scene)
            .save(&path)
            .with_context(|| format!("cannot write {}", path.display()))?;
        println!("{} ({} objects)", path.display(), scene.objects.len());
    }
    Ok(())
}

/// The scene raster with one-pixel box outlines coloured by class.
pub fn render(scene: &SyntheticScene) -> RgbImage {
    let n = scene.size();
    let data = scene.image.data();
    let mut img = RgbImage::from_fn(n as u32, n as u32, |x, y| {
        let at = (y as usize * n + x as usize) * 3;
        let px = |c: usize| (data[at + c].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    let last = n as f64 - 1.0;
    for o in &scene.objects {
        let b = o.bbox.to_xyxy();
        let to_px = |v: f64| (v * n as f64).round().clamp(0.0, last) as u32;
        let (x1, y1, x2, y2) = (to_px(b.x1), to_px(b.y1), to_px(b.x2 - 1.0 / n as f64), to_px(b.y2 - 1.0 / n as f64));
        let color = Rgb(CLASS_COLORS[o.kind.class_index() % CLASS_COLORS.len()]);
        for x in x1..=x2 {
            img.put_pixel(x, y1, color);
            img.put_pixel(x, y2, color);
        }
        for y in y1..=y2 {
            img.put_pixel(x1, y, color);
            img.put_pixel(x2, y, color);
        }
    }
    img
}
