//! Self-checks runnable against any backend and against the frozen reference world.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backend::SplitEncoder;
use crate::error::Result;
use crate::feat_select::assemble_crop_sequence;
use crate::fixtures;
use crate::tensor::Tensor;

/// Tolerance of the split-composition and batching identities.
pub const COMPOSITION_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Random `[3, S, S]` inputs in the range of normalized pixels.
pub fn random_inputs(encoder: &dyn SplitEncoder, count: usize, seed: u64) -> Vec<Tensor> {
    let s = encoder.spec().input.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let values = (0..3 * s * s).map(|_| rng.random_range(-2.0f32..2.5)).collect();
            Tensor::from_f32(vec![3, s, s], values).expect("shape matches values")
        })
        .collect()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

/// `encode_suffix(prefix(x))` against `encode_image(x)`, and batched against
/// one-at-a-time encoding, over `count` random inputs.
pub fn check_split_composition(encoder: &dyn SplitEncoder, count: usize, seed: u64) -> Result<Vec<Check>> {
    let inputs = random_inputs(encoder, count, seed);
    let mut composed_err = 0f64;
    let mut sequences = Vec::with_capacity(count);
    let mut singles = Vec::with_capacity(count);
    for x in &inputs {
        let grid = encoder.encode_prefix(x)?;
        let seq = assemble_crop_sequence(grid.cls(), &grid.tokens_tensor())?;
        let composed = encoder.encode_suffix(&seq)?;
        let whole = encoder.encode_image(x)?;
        composed_err = composed_err.max(max_abs_diff(composed.as_slice(), whole.as_slice()));
        sequences.push(seq);
        singles.push(whole);
    }
    let mut batch_err = 0f64;
    for (a, b) in encoder.encode_images(&inputs)?.iter().zip(&singles) {
        batch_err = batch_err.max(max_abs_diff(a.as_slice(), b.as_slice()));
    }
    let suffix_singles = sequences
        .iter()
        .map(|s| encoder.encode_suffix(s))
        .collect::<Result<Vec<_>>>()?;
    for (a, b) in encoder.encode_suffix_batch(&sequences)?.iter().zip(&suffix_singles) {
        batch_err = batch_err.max(max_abs_diff(a.as_slice(), b.as_slice()));
    }
    Ok(vec![
        Check::new(
            "split composition",
            composed_err <= COMPOSITION_TOLERANCE,
            format!("{count} inputs, max |suffix(prefix(x)) - full(x)| = {composed_err:.3e}"),
        ),
        Check::new(
            "batch consistency",
            batch_err <= COMPOSITION_TOLERANCE,
            format!("{count} inputs, max |batched - single| = {batch_err:.3e}"),
        ),
    ])
}

fn golden_check(name: &str, produced: &str, frozen: &str) -> Check {
    if produced == frozen {
        Check::new(name, true, "matches the frozen fixture")
    } else {
        let line = produced
            .lines()
            .zip(frozen.lines())
            .position(|(a, b)| a != b)
            .map(|i| i + 1)
            .unwrap_or_else(|| produced.lines().count().min(frozen.lines().count()) + 1);
        Check::new(name, false, format!("differs from the frozen fixture at line {line}"))
    }
}

/// Golden suite of the reference world: evaluation report (serial and
/// parallel), single-image result, overlay bytes and split composition.
pub fn reference_selftest() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let serial = fixtures::golden_eval_report(1)?;
    checks.push(golden_check(
        "golden evaluation report",
        &fixtures::to_golden_json(&serial)?,
        fixtures::GOLDEN_EVAL_REPORT,
    ));
    checks.push(Check::new(
        "synthetic accuracy",
        serial.correct == serial.image_count,
        format!("{}/{} correct", serial.correct, serial.image_count),
    ));
    let mut parallel = fixtures::golden_eval_report(8)?;
    parallel.config.workers = serial.config.workers;
    checks.push(Check::new(
        "parallel evaluation",
        parallel == serial,
        "8 workers against 1, reports equal apart from the worker count",
    ));
    let run = fixtures::golden_image_run()?;
    checks.push(golden_check(
        "golden image result",
        &fixtures::to_golden_json(&run.result)?,
        fixtures::GOLDEN_IMAGE_RESULT,
    ));
    let png = fixtures::golden_overlay()?;
    checks.push(Check::new(
        "golden overlay",
        png == fixtures::GOLDEN_OVERLAY_PNG,
        format!("{} bytes", png.len()),
    ));
    let encoder = crate::backend::ReferenceEncoder::tiny(fixtures::FIXTURE_SEED);
    checks.extend(check_split_composition(&encoder, 8, 1)?);
    Ok(checks)
}
