//! Bicubic resampling with the Catmull-Rom kernel (a = -0.5).
//!
//! Sample positions use half-pixel alignment: output coordinate `o` maps to
//! input coordinate `(o + 0.5) * in / out - 0.5`. Taps falling outside the
//! source are clamped to the nearest edge sample. No antialiasing is applied
//! when shrinking.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = CUBIC_A`.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source position sampled by output index `o` along an axis.
pub fn source_coordinate(o: usize, in_len: usize, out_len: usize) -> f64 {
    (o as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5
}

#[derive(Debug, Clone, Copy)]
struct Taps {
    index: [usize; 4],
    weight: [f64; 4],
}

fn axis_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let last = in_len as isize - 1;
    (0..out_len)
        .map(|o| {
            let src = source_coordinate(o, in_len, out_len);
            let base = src.floor();
            let t = src - base;
            let base = base as isize;
            let mut index = [0usize; 4];
            let mut weight = [0f64; 4];
            for k in 0..4 {
                let offset = k as isize - 1;
                index[k] = (base + offset).clamp(0, last) as usize;
                weight[k] = cubic_kernel(t - offset as f64);
            }
            Taps { index, weight }
        })
        .collect()
}

/// Resamples a channel-last `[h, w, channels]` buffer to `[out_h, out_w, channels]`.
///
/// Every channel is filtered independently with the same separable weights.
pub fn resample_channels(
    data: &[f32],
    h: usize,
    w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f32>> {
    if h == 0 || w == 0 || channels == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::argument(format!(
            "resample needs positive extents, got {h}x{w}x{channels} -> {out_h}x{out_w}"
        )));
    }
    if data.len() != h * w * channels {
        return Err(Error::argument(format!(
            "resample input has {} values, expected {h}x{w}x{channels}",
            data.len()
        )));
    }
    if h == out_h && w == out_w {
        return Ok(data.to_vec());
    }

    let cols = axis_taps(w, out_w);
    let rows = axis_taps(h, out_h);

    // horizontal pass: [h, out_w, c]
    let mut tmp = vec![0f64; h * out_w * channels];
    for y in 0..h {
        let src_row = &data[y * w * channels..(y + 1) * w * channels];
        for (ox, taps) in cols.iter().enumerate() {
            let dst = &mut tmp[(y * out_w + ox) * channels..(y * out_w + ox + 1) * channels];
            for k in 0..4 {
                let wgt = taps.weight[k];
                if wgt == 0.0 {
                    continue;
                }
                let src = &src_row[taps.index[k] * channels..(taps.index[k] + 1) * channels];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wgt * s as f64;
                }
            }
        }
    }

    // vertical pass: [out_h, out_w, c]
    let stride = out_w * channels;
    let mut out = vec![0f64; out_h * stride];
    for (oy, taps) in rows.iter().enumerate() {
        let dst = &mut out[oy * stride..(oy + 1) * stride];
        for k in 0..4 {
            let wgt = taps.weight[k];
            if wgt == 0.0 {
                continue;
            }
            let src = &tmp[taps.index[k] * stride..(taps.index[k] + 1) * stride];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += wgt * s;
            }
        }
    }
    Ok(out.into_iter().map(|v| v as f32).collect())
}

/// Resamples a single `[h, w]` f32 plane.
pub fn bicubic_resample_2d(plane: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[h, w] = plane.shape() else {
        return Err(Error::argument(format!(
            "expected a 2-D plane, got shape {:?}",
            plane.shape()
        )));
    };
    let data = resample_channels(plane.as_f32()?, h, w, 1, out_h, out_w)?;
    Tensor::from_f32(vec![out_h, out_w], data)
}
