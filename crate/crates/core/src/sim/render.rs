//! Top-down PNG renders with box and target overlays.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::grasp::GraspPose;
use crate::sim::raster::{LabelMap, ObjectBox};
use crate::sim::scene::Scene;

fn color_of(tag: &str) -> Rgb<u8> {
    match tag {
        "red" => Rgb([200, 40, 40]),
        "green" => Rgb([60, 160, 60]),
        "blue" => Rgb([50, 80, 200]),
        "yellow" => Rgb([230, 200, 40]),
        "purple" => Rgb([130, 60, 160]),
        "white" => Rgb([235, 235, 235]),
        "black" => Rgb([40, 40, 40]),
        "orange" => Rgb([240, 140, 30]),
        "brown" => Rgb([130, 90, 50]),
        _ => Rgb([150, 150, 150]),
    }
}

const TABLE: Rgb<u8> = Rgb([196, 178, 150]);
const BOX: Rgb<u8> = Rgb([0, 220, 255]);
const STAR: Rgb<u8> = Rgb([255, 0, 255]);
const GRASP: Rgb<u8> = Rgb([255, 120, 0]);

/// What to draw on top of the scene.
#[derive(Debug, Clone, Default)]
pub struct Overlay<'a> {
    pub boxes: &'a [ObjectBox],
    /// Per-box emphasis in `[0, 1]`; boxes are tinted proportionally.
    pub box_weights: Option<&'a [f64]>,
    pub grasp: Option<&'a GraspPose>,
    pub mark_targets: bool,
}

pub fn render_scene(scene: &Scene, overlay: &Overlay<'_>) -> RgbImage {
    let n = scene.workspace.pixels as u32;
    let map = LabelMap::render(scene);
    let mut img = RgbImage::from_pixel(n, n, TABLE);
    for row in 0..n {
        for col in 0..n {
            if let Some(i) = map.at(col as usize, row as usize) {
                let obj = &scene.objects[i];
                let mut c = color_of(&obj.spec.color);
                // shade by layer so stacks read as stacks
                let shade = (1.0 - 0.06 * obj.layer.min(8) as f64).max(0.5);
                c.0.iter_mut().for_each(|v| *v = (*v as f64 * shade) as u8);
                img.put_pixel(col, row, c);
            }
        }
    }
    for (b, bx) in overlay.boxes.iter().enumerate() {
        let w = overlay.box_weights.and_then(|ws| ws.get(b).copied());
        if let Some(w) = w {
            let alpha = w.clamp(0.0, 1.0) * 0.6;
            for row in bx.rect.min_row..=bx.rect.max_row {
                for col in bx.rect.min_col..=bx.rect.max_col {
                    let p = img.get_pixel_mut(col as u32, row as u32);
                    p.0[0] = (p.0[0] as f64 * (1.0 - alpha) + 255.0 * alpha) as u8;
                    p.0[1] = (p.0[1] as f64 * (1.0 - alpha)) as u8;
                    p.0[2] = (p.0[2] as f64 * (1.0 - alpha)) as u8;
                }
            }
        }
        for col in bx.rect.min_col..=bx.rect.max_col {
            img.put_pixel(col as u32, bx.rect.min_row as u32, BOX);
            img.put_pixel(col as u32, bx.rect.max_row as u32, BOX);
        }
        for row in bx.rect.min_row..=bx.rect.max_row {
            img.put_pixel(bx.rect.min_col as u32, row as u32, BOX);
            img.put_pixel(bx.rect.max_col as u32, row as u32, BOX);
        }
    }
    let plot = |img: &mut RgbImage, c: i64, r: i64, color| {
        if c >= 0 && r >= 0 && (c as u32) < n && (r as u32) < n {
            img.put_pixel(c as u32, r as u32, color);
        }
    };
    if overlay.mark_targets {
        for t in scene.targets.iter().filter_map(|t| scene.object(*t)) {
            if let Some((c, r)) = scene.workspace.to_pixel(t.x, t.y) {
                let (c, r) = (c as i64, r as i64);
                for d in -4..=4 {
                    plot(&mut img, c + d, r, STAR);
                    plot(&mut img, c, r + d, STAR);
                    if d.abs() <= 3 {
                        plot(&mut img, c + d, r + d, STAR);
                        plot(&mut img, c + d, r - d, STAR);
                    }
                }
            }
        }
    }
    if let Some(g) = overlay.grasp {
        if let Some((c, r)) = scene.workspace.to_pixel(g.position[0], g.position[1]) {
            let half = g.width / scene.workspace.pixel_size() / 2.0;
            let (s, co) = g.yaw.sin_cos();
            let steps = (half.ceil() as i64).max(1);
            for t in -steps..=steps {
                let f = t as f64 / steps as f64 * half;
                plot(&mut img, c as i64 + (f * co).round() as i64, r as i64 + (f * s).round() as i64, GRASP);
            }
        }
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
