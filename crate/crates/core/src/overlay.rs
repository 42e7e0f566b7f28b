//! Diagnostic rendering of the attention map and the proposed crops.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::raw_select::{CropBox, ImageTensor};
use crate::sampler::AttentionGrid;

/// Heatmap opacity.
pub const HEATMAP_ALPHA: f32 = 0.55;
pub const BOX_COLOR: [u8; 3] = [0, 255, 255];

/// Dark-to-bright palette stops, evenly spaced over `[0, 1]`.
const PALETTE: [[f32; 3]; 5] = [
    [0.0, 0.0, 4.0],
    [87.0, 16.0, 110.0],
    [188.0, 55.0, 84.0],
    [249.0, 142.0, 9.0],
    [252.0, 255.0, 164.0],
];

pub fn palette_color(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0) * (PALETTE.len() - 1) as f32;
    let i = (t.floor() as usize).min(PALETTE.len() - 2);
    let f = t - i as f32;
    let (a, b) = (PALETTE[i], PALETTE[i + 1]);
    [
        a[0] + (b[0] - a[0]) * f,
        a[1] + (b[1] - a[1]) * f,
        a[2] + (b[2] - a[2]) * f,
    ]
}

/// Attention rescaled to `[0, 1]`; a constant map becomes 0.5 everywhere.
fn normalized(attn: &AttentionGrid) -> Vec<f32> {
    let v = attn.values();
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo <= 0.0 {
        return vec![0.5; v.len()];
    }
    v.iter().map(|&x| (x - lo) / (hi - lo)).collect()
}

/// Bilinear sample of the grid at output pixel `(x, y)` with half-pixel alignment.
fn bilinear(values: &[f32], rows: usize, cols: usize, x: usize, y: usize, w: usize, h: usize) -> f32 {
    let sx = ((x as f32 + 0.5) * cols as f32 / w as f32 - 0.5).clamp(0.0, (cols - 1) as f32);
    let sy = ((y as f32 + 0.5) * rows as f32 / h as f32 - 0.5).clamp(0.0, (rows - 1) as f32);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(cols - 1), (y0 + 1).min(rows - 1));
    let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
    let at = |r: usize, c: usize| values[r * cols + c];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Source image with the heatmap blended in and each box outlined (1 px).
pub fn overlay_image(image: &ImageTensor, attn: &AttentionGrid, boxes: &[CropBox]) -> RgbImage {
    let (w, h) = image.dims();
    let grid = attn.grid();
    let heat = normalized(attn);
    let src = image.pixels();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let color = palette_color(bilinear(&heat, grid.rows, grid.cols, x, y, w, h));
            let i = (y * w + x) * 3;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = (1.0 - HEATMAP_ALPHA) * src[i + c] as f32 + HEATMAP_ALPHA * color[c];
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    for b in boxes {
        if b.check_within(w, h).is_err() {
            log::warn!("overlay skips box outside the image: {b:?}");
            continue;
        }
        let (x1, y1) = (b.x0 + b.width - 1, b.y0 + b.height - 1);
        for x in b.x0..=x1 {
            out.put_pixel(x as u32, b.y0 as u32, Rgb(BOX_COLOR));
            out.put_pixel(x as u32, y1 as u32, Rgb(BOX_COLOR));
        }
        for y in b.y0..=y1 {
            out.put_pixel(b.x0 as u32, y as u32, Rgb(BOX_COLOR));
            out.put_pixel(x1 as u32, y as u32, Rgb(BOX_COLOR));
        }
    }
    out
}

/// [`overlay_image`] encoded as PNG.
pub fn render_overlay(image: &ImageTensor, attn: &AttentionGrid, boxes: &[CropBox]) -> Result<Vec<u8>> {
    let img = overlay_image(image, attn, boxes);
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png).map_err(|e| Error::Image {
        path: image.source().into(),
        detail: format!("png encoding failed: {e}"),
    })?;
    Ok(bytes.into_inner())
}
