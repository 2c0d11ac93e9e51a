//! Flat 2-D rasterizer and its inverse for clean renders.

use image::RgbImage;

use super::catalog::{Catalog, ObjectType, Shape, BACKGROUND_RGB};
use super::scene::Scene;

/// Rasterize `scene` at `size`x`size` pixels. A pixel takes the color of the
/// last object (in list order) whose shape contains the pixel center.
pub fn render_scene(scene: &Scene, size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, image::Rgb(BACKGROUND_RGB));
    let s = size as f64;
    for obj in &scene.objects {
        let r = obj.size * 0.5;
        let (cx, cy) = obj.position;
        let x0 = (((cx - r) * s).floor().max(0.0)) as u32;
        let x1 = (((cx + r) * s).ceil().min(s - 1.0)) as u32;
        let y0 = (((cy - r) * s).floor().max(0.0)) as u32;
        let y1 = (((cy + r) * s).ceil().min(s - 1.0)) as u32;
        let rgb = image::Rgb(obj.otype.color.rgb());
        for py in y0..=y1 {
            let y = (py as f64 + 0.5) / s;
            for px in x0..=x1 {
                let x = (px as f64 + 0.5) / s;
                if obj.otype.shape.contains(x - cx, y - cy, r) {
                    img.put_pixel(px, py, rgb);
                }
            }
        }
    }
    img
}

/// An object recovered from a clean render.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateMatch {
    pub otype: ObjectType,
    pub position: (f64, f64),
}

/// Recover the symbolic content of an exact palette render: connected
/// components per palette color, classified by corner pixels, row profile
/// and fill ratio.
/// Only meaningful for noiseless renders with non-touching objects.
pub fn template_detect(img: &RgbImage, catalog: &Catalog) -> Vec<TemplateMatch> {
    let (w, h) = img.dimensions();
    let mut seen = vec![false; (w * h) as usize];
    let mut out = Vec::new();
    for &color in &catalog.colors {
        let rgb = color.rgb();
        for start in 0..(w * h) {
            let (sx, sy) = (start % w, start / w);
            if seen[start as usize] || img.get_pixel(sx, sy).0 != rgb {
                continue;
            }
            let pixels = flood(img, &mut seen, sx, sy, rgb);
            let (mut x0, mut x1, mut y0, mut y1) = (u32::MAX, 0, u32::MAX, 0);
            for &(x, y) in &pixels {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
            let bw = (x1 - x0 + 1) as f64;
            let bh = (y1 - y0 + 1) as f64;
            let fill = pixels.len() as f64 / (bw * bh);
            let row_width = |row: u32| pixels.iter().filter(|p| p.1 == row).count() as f64;
            let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)];
            let shape = if corners.iter().all(|c| pixels.contains(c)) {
                Shape::Square
            } else if row_width(y1) >= bw && row_width(y0) < 0.5 * bw {
                Shape::Triangle
            } else if fill > 0.65 {
                Shape::Circle
            } else {
                Shape::Diamond
            };
            let otype = ObjectType::new(shape, color);
            if !catalog.shapes.contains(&shape) {
                continue;
            }
            out.push(TemplateMatch {
                otype,
                position: (
                    (x0 as f64 + x1 as f64 + 1.0) * 0.5 / w as f64,
                    (y0 as f64 + y1 as f64 + 1.0) * 0.5 / h as f64,
                ),
            });
        }
    }
    out
}

fn flood(img: &RgbImage, seen: &mut [bool], sx: u32, sy: u32, rgb: [u8; 3]) -> Vec<(u32, u32)> {
    let (w, h) = img.dimensions();
    let mut stack = vec![(sx, sy)];
    let mut pixels = Vec::new();
    seen[(sy * w + sx) as usize] = true;
    while let Some((x, y)) = stack.pop() {
        pixels.push((x, y));
        let mut visit = |nx: u32, ny: u32| {
            let idx = (ny * w + nx) as usize;
            if !seen[idx] && img.get_pixel(nx, ny).0 == rgb {
                seen[idx] = true;
                stack.push((nx, ny));
            }
        };
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < w {
            visit(x + 1, y);
        }
        if y > 0 {
            visit(x, y - 1);
        }
        if y + 1 < h {
            visit(x, y + 1);
        }
    }
    pixels
}
