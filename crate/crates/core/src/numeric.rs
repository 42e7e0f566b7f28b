//! Shared scalar kernels: softmax, L2 normalization, unit vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest norm accepted by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// Temperature-scaled, max-subtracted softmax.
///
/// Accumulates in f64 and rounds once on output.
pub fn softmax(values: &[f32], temperature: f32) -> Result<Vec<f32>> {
    let wide: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    Ok(softmax_f64(&wide, temperature as f64)?
        .into_iter()
        .map(|p| p as f32)
        .collect())
}

pub fn softmax_f64(values: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::argument("softmax of an empty list"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::argument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::argument(format!("softmax input {bad} is not finite")));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// A vector whose Euclidean norm is 1 within 1e-5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct UnitVector(Vec<f32>);

pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

impl UnitVector {
    /// Wraps values that are already normalized, checking the norm.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::argument("unit vector must have positive dimension"));
        }
        let norm = dot(&values, &values).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::invariant(format!(
                "vector of dim {} has norm {norm}, expected 1",
                values.len()
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn dot(&self, other: &[f32]) -> f64 {
        dot(&self.0, other)
    }
}

impl TryFrom<Vec<f32>> for UnitVector {
    type Error = Error;

    fn try_from(v: Vec<f32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<UnitVector> for Vec<f32> {
    fn from(v: UnitVector) -> Self {
        v.0
    }
}

pub fn l2_normalize(v: &[f32]) -> Result<UnitVector> {
    let norm = dot(v, v).sqrt();
    if !(norm > MIN_NORM) || !norm.is_finite() {
        return Err(Error::DegenerateVector { norm });
    }
    Ok(UnitVector(
        v.iter().map(|&x| (x as f64 / norm) as f32).collect(),
    ))
}
