//! Feature-space crops of the pre-final-layer token grid.
//!
//! A pixel crop box is mapped onto the token grid, the covered tokens are cut
//! out, resampled back to the full grid with the bicubic kernel and prefixed
//! with the untouched class token so the encoder suffix can consume them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw_select::CropBox;
use crate::resample::resample_channels;
use crate::sampler::GridDims;
use crate::tensor::Tensor;

/// Patch tokens of one image after the encoder prefix, `[rows, cols, d_model]`,
/// plus the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    grid: GridDims,
    d_model: usize,
    tokens: Vec<f32>,
    cls: Vec<f32>,
    split_layer: usize,
}

impl TokenGrid {
    pub fn new(grid: GridDims, d_model: usize, tokens: Vec<f32>, cls: Vec<f32>, split_layer: usize) -> Result<Self> {
        if grid.cells() == 0 || d_model == 0 {
            return Err(Error::argument("token grid needs positive extents"));
        }
        if tokens.len() != grid.cells() * d_model {
            return Err(Error::argument(format!(
                "token grid {}x{}x{d_model} needs {} values, got {}",
                grid.rows,
                grid.cols,
                grid.cells() * d_model,
                tokens.len()
            )));
        }
        if cls.len() != d_model {
            return Err(Error::argument(format!(
                "class token has width {}, expected {d_model}",
                cls.len()
            )));
        }
        if tokens.iter().chain(&cls).any(|v| !v.is_finite()) {
            return Err(Error::invariant("token grid holds non-finite values"));
        }
        Ok(Self {
            grid,
            d_model,
            tokens,
            cls,
            split_layer,
        })
    }

    pub fn grid(&self) -> GridDims {
        self.grid
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn cls(&self) -> &[f32] {
        &self.cls
    }

    pub fn split_layer(&self) -> usize {
        self.split_layer
    }

    pub fn tokens_tensor(&self) -> Tensor {
        Tensor::from_f32(
            vec![self.grid.rows, self.grid.cols, self.d_model],
            self.tokens.clone(),
        )
        .expect("validated on construction")
    }
}

/// Rectangle of whole tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBox {
    pub r0: usize,
    pub c0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TokenBox {
    pub fn full(grid: GridDims) -> Self {
        Self {
            r0: 0,
            c0: 0,
            rows: grid.rows,
            cols: grid.cols,
        }
    }

    fn check_within(&self, grid: GridDims) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.r0 + self.rows > grid.rows || self.c0 + self.cols > grid.cols {
            return Err(Error::invariant(format!(
                "token box {self:?} exceeds a {}x{} grid",
                grid.rows, grid.cols
            )));
        }
        Ok(())
    }
}

fn map_axis(start: usize, extent: usize, image: usize, cells: usize) -> (usize, usize) {
    let scale = cells as f64 / image as f64;
    let first = ((start as f64 * scale).floor() as usize).min(cells - 1);
    let len = ((extent as f64 * scale).round() as usize).max(1);
    (first, len.min(cells - first))
}

/// Token rectangle covering `bbox`; at least one token on each axis.
pub fn map_box_to_tokens(bbox: &CropBox, image: (usize, usize), grid: GridDims) -> TokenBox {
    let (c0, cols) = map_axis(bbox.x0, bbox.width, image.0, grid.cols);
    let (r0, rows) = map_axis(bbox.y0, bbox.height, image.1, grid.rows);
    TokenBox { r0, c0, rows, cols }
}

/// Copies the tokens under `tb`, returning `[rows, cols, d_model]`.
pub fn crop_token_grid(grid: &TokenGrid, tb: &TokenBox) -> Result<Tensor> {
    tb.check_within(grid.grid)?;
    let d = grid.d_model;
    let mut out = Vec::with_capacity(tb.rows * tb.cols * d);
    for r in tb.r0..tb.r0 + tb.rows {
        let start = (r * grid.grid.cols + tb.c0) * d;
        out.extend_from_slice(&grid.tokens[start..start + tb.cols * d]);
    }
    Tensor::from_f32(vec![tb.rows, tb.cols, d], out)
}

/// Bicubic resize of every channel of `[rows, cols, d]` to `[target, d]`.
pub fn resize_token_grid(sub: &Tensor, target: GridDims) -> Result<Tensor> {
    let &[rows, cols, d] = sub.shape() else {
        return Err(Error::argument(format!(
            "expected [rows, cols, d_model], got {:?}",
            sub.shape()
        )));
    };
    let data = resample_channels(sub.as_f32()?, rows, cols, d, target.rows, target.cols)?;
    Tensor::from_f32(vec![target.rows, target.cols, d], data)
}

/// `[1 + rows·cols, d_model]` sequence: class token first, then tokens row-major.
pub fn assemble_crop_sequence(cls: &[f32], grid: &Tensor) -> Result<Tensor> {
    let &[rows, cols, d] = grid.shape() else {
        return Err(Error::argument(format!(
            "expected [rows, cols, d_model], got {:?}",
            grid.shape()
        )));
    };
    if cls.len() != d {
        return Err(Error::argument(format!(
            "class token width {} does not match token width {d}",
            cls.len()
        )));
    }
    let mut seq = Vec::with_capacity((1 + rows * cols) * d);
    seq.extend_from_slice(cls);
    seq.extend_from_slice(grid.as_f32()?);
    Tensor::from_f32(vec![1 + rows * cols, d], seq)
}

/// Crop, resize and assemble in one step for a pixel-space box.
pub fn feature_crop_sequence(grid: &TokenGrid, bbox: &CropBox, image: (usize, usize)) -> Result<(TokenBox, Tensor)> {
    let tb = map_box_to_tokens(bbox, image, grid.grid);
    let sub = crop_token_grid(grid, &tb)?;
    let resized = resize_token_grid(&sub, grid.grid)?;
    Ok((tb, assemble_crop_sequence(&grid.cls, &resized)?))
}
