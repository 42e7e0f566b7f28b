//! Synthetic fixture world for the reference stack.
//!
//! Three visually separable classes are rendered procedurally. The catalog's
//! "description" rows are reference-encoder embeddings of clean class
//! prototypes, so a working pipeline classifies every rendered image
//! correctly. Frozen outputs of this world live in `fixtures/` next to the
//! crate manifest.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{ReferenceEncoder, SplitEncoder};
use crate::catalog::DescriptionCatalog;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::Engine;
use crate::raw_select::{preprocess_full, ImageTensor};
use crate::rng::mix64;

pub const FIXTURE_SEED: u64 = 42;
pub const FIXTURE_IMAGES_PER_CLASS: usize = 4;
pub const FIXTURE_WIDTH: usize = 48;
pub const FIXTURE_HEIGHT: usize = 40;

/// Golden evaluation report of the synthetic dataset (seed 42, timing removed).
pub const GOLDEN_EVAL_REPORT: &str = include_str!("../fixtures/golden_eval_report.json");
/// Golden result of the first fixture image under seed 7 (timing removed).
pub const GOLDEN_IMAGE_RESULT: &str = include_str!("../fixtures/golden_image_result.json");
/// Overlay of the first fixture image with its seed-7 crops.
pub const GOLDEN_OVERLAY_PNG: &[u8] = include_bytes!("../fixtures/golden_overlay.png");

#[derive(Debug, Clone, Copy)]
struct ClassStyle {
    name: &'static str,
    base: [f32; 3],
    accent: [f32; 3],
    /// Stripe period in pixels along x and y; 0 disables that direction.
    period: (usize, usize),
}

const STYLES: [ClassStyle; 3] = [
    ClassStyle {
        name: "banded",
        base: [200.0, 40.0, 30.0],
        accent: [250.0, 200.0, 60.0],
        period: (0, 6),
    },
    ClassStyle {
        name: "checkered",
        base: [20.0, 120.0, 40.0],
        accent: [230.0, 240.0, 230.0],
        period: (8, 8),
    },
    ClassStyle {
        name: "striped",
        base: [30.0, 40.0, 170.0],
        accent: [120.0, 200.0, 250.0],
        period: (5, 0),
    },
];

/// Descriptions per class in the synthetic catalog; deliberately unequal.
const DESCRIPTIONS_PER_CLASS: [usize; 3] = [2, 3, 4];

pub fn class_names() -> Vec<&'static str> {
    STYLES.iter().map(|s| s.name).collect()
}

/// Renders one instance of class `class`; `noise` scales per-pixel jitter and
/// the random phase/shade shifts.
pub fn render_class_image(class: usize, variant: u64, noise: f32, width: usize, height: usize) -> ImageTensor {
    let style = STYLES[class];
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(variant, class as u64));
    let phase_x = rng.random_range(0..style.period.0.max(1));
    let phase_y = rng.random_range(0..style.period.1.max(1));
    let shade: f32 = 1.0 + noise * rng.random_range(-0.15..0.15);
    let mut pixels = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let on_x = style.period.0 > 0 && ((x + phase_x) / (style.period.0 / 2).max(1)) % 2 == 0;
            let on_y = style.period.1 > 0 && ((y + phase_y) / (style.period.1 / 2).max(1)) % 2 == 0;
            let accent = match style.period {
                (0, _) => on_y,
                (_, 0) => on_x,
                _ => on_x ^ on_y,
            };
            let color = if accent { style.accent } else { style.base };
            for c in color {
                let jitter = noise * rng.random_range(-20.0..20.0);
                pixels.push((c * shade + jitter).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageTensor::new(width, height, pixels, format!("{}-{variant}", style.name)).expect("dimensions are positive")
}

/// File name of image `i` of a class inside the synthetic dataset.
pub fn fixture_file_name(i: usize) -> String {
    format!("img_{i:02}.png")
}

/// Writes the 3-class synthetic dataset under `root` (one directory per class).
pub fn write_synthetic_dataset(root: &Path) -> Result<()> {
    for (k, style) in STYLES.iter().enumerate() {
        let dir = root.join(style.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..FIXTURE_IMAGES_PER_CLASS {
            let img = render_class_image(k, 1000 + i as u64, 1.0, FIXTURE_WIDTH, FIXTURE_HEIGHT);
            let path = dir.join(fixture_file_name(i));
            img.to_rgb8().save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                detail: e.to_string(),
            })?;
        }
    }
    Ok(())
}

/// Catalog whose rows are `encoder` embeddings of noise-free class prototypes.
pub fn synthetic_catalog(encoder: &dyn SplitEncoder) -> Result<DescriptionCatalog> {
    let spec = &encoder.spec().input;
    let mut classes = Vec::new();
    for (k, style) in STYLES.iter().enumerate() {
        let rows = (0..DESCRIPTIONS_PER_CLASS[k])
            .map(|m| {
                let img = render_class_image(k, m as u64, 0.0, spec.input_size, spec.input_size);
                encoder.encode_image(&preprocess_full(&img, spec)?)
            })
            .collect::<Result<Vec<_>>>()?;
        classes.push((style.name.to_string(), rows));
    }
    DescriptionCatalog::from_classes(encoder.model_id(), classes)
}

/// Engine over the reference encoder (seed 42) used as both embedding and
/// attention model, with the synthetic catalog.
pub fn reference_engine(config: RunConfig) -> Result<Engine> {
    let encoder = Arc::new(ReferenceEncoder::tiny(FIXTURE_SEED));
    let catalog = Arc::new(synthetic_catalog(encoder.as_ref())?);
    Engine::new(config, encoder.clone(), encoder, catalog)
}

/// Run configuration of the golden evaluation.
pub fn golden_eval_config() -> RunConfig {
    RunConfig {
        seed: FIXTURE_SEED,
        ..RunConfig::default()
    }
}

/// Run configuration of the golden single-image result.
pub fn golden_image_config() -> RunConfig {
    RunConfig {
        seed: 7,
        ..RunConfig::default()
    }
}

/// Pretty JSON with a trailing newline, as stored in the golden files.
pub fn to_golden_json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Scratch directory removed on drop.
struct ScratchDir(std::path::PathBuf);

impl ScratchDir {
    fn new() -> Result<Self> {
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or_default();
        static COUNTER: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
        let n = COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let path = std::env::temp_dir().join(format!("abs-fixture-{}-{nanos}-{n}", std::process::id()));
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self(path))
    }
}

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

/// Evaluates the synthetic dataset with `workers` threads; returns the report
/// without wall time.
pub fn golden_eval_report(workers: usize) -> Result<crate::dataset::EvalReport> {
    let scratch = ScratchDir::new()?;
    let root = scratch.0.join("synthetic");
    write_synthetic_dataset(&root)?;
    let engine = reference_engine(RunConfig {
        workers,
        ..golden_eval_config()
    })?;
    let dataset = crate::dataset::Dataset::scan(&root, engine.catalog(), None)?;
    Ok(crate::dataset::evaluate_dataset(&engine, &dataset, None)?.without_timing())
}

/// First fixture image, as stored in the synthetic dataset.
pub fn first_fixture_image() -> (String, ImageTensor) {
    let id = format!("{}/{}", STYLES[0].name, fixture_file_name(0));
    let img = render_class_image(0, 1000, 1.0, FIXTURE_WIDTH, FIXTURE_HEIGHT);
    (id, img)
}

/// Seed-7 run of the first fixture image, timing removed.
pub fn golden_image_run() -> Result<crate::pipeline::ImageRun> {
    let engine = reference_engine(golden_image_config())?;
    let (id, img) = first_fixture_image();
    let mut run = engine.run_image(&img, &id)?;
    run.result = run.result.without_timing();
    Ok(run)
}

pub fn golden_overlay() -> Result<Vec<u8>> {
    let run = golden_image_run()?;
    let (_, img) = first_fixture_image();
    let boxes: Vec<_> = run.result.crops.iter().map(|c| c.bbox).collect();
    crate::overlay::render_overlay(&img, &run.attention, &boxes)
}
