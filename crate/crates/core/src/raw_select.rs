//! Pixel-space crop boxes and encoder input preprocessing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::resample_channels;
use crate::rng::SampleRng;
use crate::sampler::{GridDims, PatchIndex};
use crate::tensor::Tensor;

/// Decoded 8-bit RGB image, stored row-major as `[height, width, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    source: String,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, source: impl Into<String>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::argument(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::argument(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            source: source.into(),
        })
    }

    /// Decodes a PNG or JPEG file; other color types are converted to RGB8.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w as usize, h as usize, rgb.into_raw(), path.display().to_string())
    }

    pub fn from_rgb8(img: image::RgbImage, source: impl Into<String>) -> Self {
        let (w, h) = img.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            pixels: img.into_raw(),
            source: source.into(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("pixel buffer matches dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn full_box(&self) -> CropBox {
        CropBox {
            x0: 0,
            y0: 0,
            width: self.width,
            height: self.height,
            anchor: None,
            fx: 1.0,
            fy: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    /// Patch whose center the box was placed on.
    pub anchor: Option<PatchIndex>,
    /// Drawn size fractions of the image width and height.
    pub fx: f64,
    pub fy: f64,
}

impl CropBox {
    pub fn check_within(&self, image_w: usize, image_h: usize) -> Result<()> {
        if self.width == 0
            || self.height == 0
            || self.x0 + self.width > image_w
            || self.y0 + self.height > image_h
        {
            return Err(Error::invariant(format!(
                "crop box ({}, {}, {}x{}) does not fit in a {image_w}x{image_h} image",
                self.x0, self.y0, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.width && y >= self.y0 && y < self.y0 + self.height
    }
}

/// Preprocessing constants of a pretrained encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderInputSpec {
    pub input_size: usize,
    pub patch_size: usize,
    pub grid: GridDims,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl EncoderInputSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.grid.cells() == 0 {
            return Err(Error::Config("patch size and grid must be positive".into()));
        }
        if self.grid.rows * self.patch_size != self.input_size
            || self.grid.cols * self.patch_size != self.input_size
        {
            return Err(Error::Config(format!(
                "input size {} is not patch size {} times grid {}x{}",
                self.input_size, self.patch_size, self.grid.rows, self.grid.cols
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!("std must be positive, got {:?}", self.std)));
        }
        Ok(())
    }
}

/// Pixel center of `patch` when a `grid` is laid over a `width`x`height` image.
pub fn patch_center_pixels(patch: PatchIndex, grid: GridDims, width: usize, height: usize) -> (usize, usize) {
    let cx = ((patch.col as f64 + 0.5) * width as f64 / grid.cols as f64).round() as usize;
    let cy = ((patch.row as f64 + 0.5) * height as f64 / grid.rows as f64).round() as usize;
    (cx.min(width - 1), cy.min(height - 1))
}

/// Checks `0 < alpha <= beta <= 1`.
pub fn validate_crop_bounds(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= beta && beta <= 1.0) {
        return Err(Error::Config(format!(
            "crop bounds need 0 < alpha <= beta <= 1, got alpha={alpha} beta={beta}"
        )));
    }
    Ok(())
}

fn place(center: usize, extent: usize, limit: usize) -> usize {
    let start = center as i64 - (extent / 2) as i64;
    start.clamp(0, (limit - extent) as i64) as usize
}

/// Draws a box of size `(fx·W, fy·H)`, `fx, fy ~ U[alpha, beta]`, centered on
/// `center` and shifted the minimum amount needed to fit inside the image.
///
/// Consumes two uniforms from `rng`: first `fx`, then `fy`.
pub fn propose_crop_box(
    center: (usize, usize),
    alpha: f64,
    beta: f64,
    image: (usize, usize),
    rng: &mut SampleRng,
) -> Result<CropBox> {
    validate_crop_bounds(alpha, beta)?;
    let (w, h) = image;
    if w == 0 || h == 0 {
        return Err(Error::argument("image must be at least 1x1"));
    }
    if center.0 >= w || center.1 >= h {
        return Err(Error::argument(format!(
            "crop center {center:?} lies outside a {w}x{h} image"
        )));
    }
    let fx = rng.uniform_range(alpha, beta);
    let fy = rng.uniform_range(alpha, beta);
    let width = ((fx * w as f64).round() as usize).clamp(1, w);
    let height = ((fy * h as f64).round() as usize).clamp(1, h);
    Ok(CropBox {
        x0: place(center.0, width, w),
        y0: place(center.1, height, h),
        width,
        height,
        anchor: None,
        fx,
        fy,
    })
}

/// Crops `bbox`, resizes it to the encoder input size with the bicubic
/// kernel, scales to `[0, 1]` and normalizes per channel. Output is `[3, S, S]`.
pub fn crop_and_preprocess(image: &ImageTensor, bbox: &CropBox, spec: &EncoderInputSpec) -> Result<Tensor> {
    bbox.check_within(image.width, image.height)?;
    let (bw, bh) = (bbox.width, bbox.height);
    let mut region = Vec::with_capacity(bw * bh * 3);
    for y in bbox.y0..bbox.y0 + bh {
        let row = &image.pixels[(y * image.width + bbox.x0) * 3..(y * image.width + bbox.x0 + bw) * 3];
        region.extend(row.iter().map(|&p| p as f32));
    }
    let s = spec.input_size;
    let resized = resample_channels(&region, bh, bw, 3, s, s)?;

    let plane = s * s;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in resized.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = (px[c] / 255.0 - spec.mean[c]) / spec.std[c];
        }
    }
    let t = Tensor::from_f32(vec![3, s, s], out)?;
    t.ensure_finite()?;
    Ok(t)
}

/// The whole image, squashed to the encoder input size.
pub fn preprocess_full(image: &ImageTensor, spec: &EncoderInputSpec) -> Result<Tensor> {
    crop_and_preprocess(image, &image.full_box(), spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(side: usize, mean: f32, std: f32) -> EncoderInputSpec {
        EncoderInputSpec {
            input_size: side,
            patch_size: 1,
            grid: GridDims::square(side),
            mean: [mean; 3],
            std: [std; 3],
        }
    }

    #[test]
    fn patch_centers() {
        let g = GridDims::square(14);
        assert_eq!(patch_center_pixels(PatchIndex::new(3, 5), g, 224, 224), (88, 56));
        assert_eq!(patch_center_pixels(PatchIndex::new(0, 0), g, 224, 224), (8, 8));
        let (cx, cy) = patch_center_pixels(PatchIndex::new(13, 13), g, 500, 375);
        assert_eq!(cx, (13.5f64 * 500.0 / 14.0).round() as usize);
        assert_eq!(cy, (13.5f64 * 375.0 / 14.0).round() as usize);
        assert_eq!((cx, cy), (482, 362));
    }

    #[test]
    fn tiny_image_center_stays_inside() {
        let (cx, cy) = patch_center_pixels(PatchIndex::new(13, 13), GridDims::square(14), 1, 1);
        assert_eq!((cx, cy), (0, 0));
    }

    #[test]
    fn full_size_box_covers_image() {
        let mut rng = SampleRng::new(0);
        for center in [(0, 0), (223, 100), (57, 199)] {
            let b = propose_crop_box(center, 1.0, 1.0, (224, 224), &mut rng).unwrap();
            assert_eq!((b.x0, b.y0, b.width, b.height), (0, 0, 224, 224));
        }
    }

    #[test]
    fn half_box_at_center() {
        let mut rng = SampleRng::new(0);
        let b = propose_crop_box((112, 112), 0.5, 0.5, (224, 224), &mut rng).unwrap();
        assert_eq!((b.x0, b.y0, b.width, b.height), (56, 56, 112, 112));
    }

    #[test]
    fn corner_box_is_translated() {
        let mut rng = SampleRng::new(0);
        let b = propose_crop_box((0, 0), 0.5, 0.5, (224, 224), &mut rng).unwrap();
        assert_eq!((b.x0, b.y0, b.width, b.height), (0, 0, 112, 112));
        let b = propose_crop_box((223, 223), 0.5, 0.5, (224, 224), &mut rng).unwrap();
        assert_eq!((b.x0, b.y0, b.width, b.height), (112, 112, 112, 112));
    }

    #[test]
    fn bad_bounds_are_config_errors() {
        let mut rng = SampleRng::new(0);
        for (a, b) in [(0.9, 0.5), (0.0, 0.5), (0.5, 1.1), (-0.1, 0.2)] {
            assert!(matches!(
                propose_crop_box((1, 1), a, b, (4, 4), &mut rng),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn same_rng_same_box() {
        let a = propose_crop_box((40, 30), 0.5, 0.9, (100, 80), &mut SampleRng::new(4)).unwrap();
        let b = propose_crop_box((40, 30), 0.5, 0.9, (100, 80), &mut SampleRng::new(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_crop_is_plain_normalization() {
        let pixels: Vec<u8> = (0..8 * 8 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = ImageTensor::new(8, 8, pixels.clone(), "t").unwrap();
        let out = crop_and_preprocess(&img, &img.full_box(), &spec(8, 0.0, 1.0)).unwrap();
        let out = out.as_f32().unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let want = pixels[(y * 8 + x) * 3 + c] as f32 / 255.0;
                    assert_eq!(out[c * 64 + y * 8 + x], want);
                }
            }
        }
    }

    #[test]
    fn constant_gray_stays_constant() {
        let img = ImageTensor::new(30, 20, vec![128; 30 * 20 * 3], "gray").unwrap();
        let sp = EncoderInputSpec {
            input_size: 16,
            patch_size: 4,
            grid: GridDims::square(4),
            mean: [0.48, 0.46, 0.41],
            std: [0.27, 0.26, 0.28],
        };
        let b = CropBox {
            x0: 3,
            y0: 2,
            width: 17,
            height: 11,
            anchor: None,
            fx: 0.5,
            fy: 0.5,
        };
        let out = crop_and_preprocess(&img, &b, &sp).unwrap();
        let out = out.as_f32().unwrap();
        for c in 0..3 {
            let want = (128.0 / 255.0 - sp.mean[c]) / sp.std[c];
            for v in &out[c * 256..(c + 1) * 256] {
                assert!((v - want).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn out_of_frame_box_rejected() {
        let img = ImageTensor::new(10, 10, vec![0; 300], "t").unwrap();
        let b = CropBox {
            x0: 5,
            y0: 0,
            width: 6,
            height: 2,
            anchor: None,
            fx: 0.6,
            fy: 0.2,
        };
        assert!(matches!(
            crop_and_preprocess(&img, &b, &spec(4, 0.0, 1.0)),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn encoder_spec_validation() {
        assert!(spec(4, 0.0, 1.0).validate().is_ok());
        let mut bad = spec(4, 0.0, 1.0);
        bad.input_size = 5;
        assert!(bad.validate().is_err());
        let mut bad = spec(4, 0.0, 1.0);
        bad.std = [1.0, 0.0, 1.0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn many_random_boxes_fit() {
        let mut rng = SampleRng::new(123);
        for _ in 0..100_000 {
            let w = 1 + (rng.next_u64() % 700) as usize;
            let h = 1 + (rng.next_u64() % 700) as usize;
            let cx = (rng.next_u64() % w as u64) as usize;
            let cy = (rng.next_u64() % h as u64) as usize;
            let alpha = rng.uniform_range(0.05, 1.0);
            let beta = rng.uniform_range(alpha, 1.0);
            let b = propose_crop_box((cx, cy), alpha, beta, (w, h), &mut rng).unwrap();
            b.check_within(w, h).unwrap();
        }
    }

    proptest! {
        #[test]
        fn area_fraction_within_bounds(
            w in 16usize..600, h in 16usize..600,
            alpha in 0.1f64..1.0, spread in 0.0f64..1.0, seed in any::<u64>(),
        ) {
            let beta = alpha + (1.0 - alpha) * spread;
            let mut rng = SampleRng::new(seed);
            let b = propose_crop_box((w / 2, h / 2), alpha, beta, (w, h), &mut rng).unwrap();
            let frac = (b.width * b.height) as f64 / (w * h) as f64;
            // rounding each side moves it by at most half a pixel
            let lo = (alpha - 0.5 / w as f64) * (alpha - 0.5 / h as f64);
            let hi = (beta + 0.5 / w as f64) * (beta + 0.5 / h as f64);
            prop_assert!(frac >= lo - 1e-12 && frac <= hi + 1e-12, "{frac} not in [{lo}, {hi}]");
        }

        #[test]
        fn equal_bounds_give_equal_sizes(w in 1usize..400, h in 1usize..400, f in 0.05f64..1.0, seed in any::<u64>()) {
            let mut rng = SampleRng::new(seed);
            let first = propose_crop_box((0, 0), f, f, (w, h), &mut rng).unwrap();
            for _ in 0..10 {
                let cx = (rng.next_u64() % w as u64) as usize;
                let cy = (rng.next_u64() % h as u64) as usize;
                let b = propose_crop_box((cx, cy), f, f, (w, h), &mut rng).unwrap();
                prop_assert_eq!((b.width, b.height), (first.width, first.height));
            }
        }
    }
}
