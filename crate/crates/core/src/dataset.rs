//! Folder-per-class datasets and top-1 evaluation.
//!
//! A dataset root holds one subdirectory per class; every PNG or JPEG directly
//! inside a class directory is one labelled image. Directory names are mapped
//! to catalog classes either verbatim or through a JSON object
//! `{"directory": "catalog class"}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::DescriptionCatalog;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{Engine, ImageResult};
use crate::raw_select::ImageTensor;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub path: PathBuf,
    /// Path relative to the dataset root with `/` separators.
    pub image_id: String,
    pub directory: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDirectory {
    pub directory: String,
    pub class: String,
    pub images: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub name: String,
    pub classes: Vec<ClassDirectory>,
    /// Lexicographic by class directory, then by file name.
    pub images: Vec<LabeledImage>,
    pub warnings: Vec<String>,
}

pub fn load_class_map(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("class map {}: {e}", path.display())))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        out.push((name, entry.path()));
    }
    out.sort();
    Ok(out)
}

impl Dataset {
    pub fn scan(
        root: impl AsRef<Path>,
        catalog: &DescriptionCatalog,
        class_map: Option<&BTreeMap<String, String>>,
    ) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let name = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| root.display().to_string());
        let dirs: Vec<_> = sorted_entries(&root)?
            .into_iter()
            .filter(|(_, p)| p.is_dir())
            .collect();

        let mut unmatched = Vec::new();
        let mut labelled = Vec::new();
        for (dir, path) in dirs {
            let class = class_map
                .and_then(|m| m.get(&dir))
                .cloned()
                .unwrap_or_else(|| dir.clone());
            if catalog.class_index(&class).is_none() {
                unmatched.push(if class == dir { dir } else { format!("{dir} -> {class}") });
                continue;
            }
            labelled.push((dir, class, path));
        }
        if !unmatched.is_empty() {
            return Err(Error::Dataset(format!(
                "class directories without a catalog class: {}",
                unmatched.join(", ")
            )));
        }
        if labelled.len() < 2 {
            return Err(Error::Dataset(format!(
                "{} has {} class directories, at least 2 are needed",
                root.display(),
                labelled.len()
            )));
        }

        let mut classes = Vec::new();
        let mut images = Vec::new();
        let mut warnings = Vec::new();
        for (dir, class, path) in labelled {
            let before = images.len();
            for (file, fpath) in sorted_entries(&path)? {
                if fpath.is_file() && is_image(&fpath) {
                    images.push(LabeledImage {
                        path: fpath,
                        image_id: format!("{dir}/{file}"),
                        directory: dir.clone(),
                        label: class.clone(),
                    });
                }
            }
            let count = images.len() - before;
            if count == 0 {
                let msg = format!("class directory `{dir}` contains no images");
                log::warn!("{msg}");
                warnings.push(msg);
            }
            classes.push(ClassDirectory {
                directory: dir,
                class,
                images: count,
            });
        }
        Ok(Self {
            root,
            name,
            classes,
            images,
            warnings,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub directory: String,
    pub class: String,
    pub images: usize,
    pub correct: usize,
    /// `None` for a class directory without evaluated images.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    /// Images found, including ones that failed to load.
    pub image_count: usize,
    pub evaluated: usize,
    pub correct: usize,
    pub top1_accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub failures: Vec<ImageFailure>,
    pub warnings: Vec<String>,
    pub rng: String,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

impl EvalReport {
    /// Copy without the wall-clock field, for comparisons that must be bit-stable.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_ms: None,
            ..self.clone()
        }
    }
}

/// Failures that only affect one image; everything else aborts the run.
fn is_per_image(e: &Error) -> bool {
    matches!(e, Error::Image { .. } | Error::Io { .. })
}

enum Outcome {
    Done(Box<ImageResult>),
    Failed(ImageFailure),
}

fn evaluate_one(engine: &Engine, item: &LabeledImage) -> Result<Outcome> {
    let image = match ImageTensor::open(&item.path) {
        Ok(img) => img,
        Err(e) if is_per_image(&e) => {
            log::warn!("skipping {}: {e}", item.image_id);
            return Ok(Outcome::Failed(ImageFailure {
                image_id: item.image_id.clone(),
                error: e.to_string(),
            }));
        }
        Err(e) => return Err(e),
    };
    let run = engine.run_image(&image, &item.image_id).map_err(|e| Error::InImage {
        image: item.image_id.clone(),
        source: Box::new(e),
    })?;
    let mut result = run.result;
    result.label = Some(item.label.clone());
    Ok(Outcome::Done(Box::new(result)))
}

/// Runs every image of `dataset` through `engine`.
///
/// Images are processed by `config.workers` threads in chunks; results reach
/// `sink` (one JSON object per line) in dataset order, so the output does not
/// depend on the worker count.
pub fn evaluate_dataset(engine: &Engine, dataset: &Dataset, mut sink: Option<&mut dyn Write>) -> Result<EvalReport> {
    let start = Instant::now();
    let workers = engine.config().workers;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;

    let mut per_dir: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut evaluated = 0;
    let mut correct = 0;
    let chunk = (workers * 4).max(1);
    for items in dataset.images.chunks(chunk) {
        let outcomes: Vec<Result<Outcome>> =
            pool.install(|| items.par_iter().map(|item| evaluate_one(engine, item)).collect());
        for (item, outcome) in items.iter().zip(outcomes) {
            match outcome? {
                Outcome::Done(result) => {
                    if let Some(w) = sink.as_deref_mut() {
                        serde_json::to_writer(&mut *w, &result)?;
                        w.write_all(b"\n").map_err(|e| Error::io("<results>", e))?;
                    }
                    let hit = result.is_correct() == Some(true);
                    let entry = per_dir.entry(&item.directory).or_default();
                    entry.0 += 1;
                    entry.1 += hit as usize;
                    evaluated += 1;
                    correct += hit as usize;
                }
                Outcome::Failed(f) => failures.push(f),
            }
        }
    }
    if let Some(w) = sink {
        w.flush().map_err(|e| Error::io("<results>", e))?;
    }

    let per_class = dataset
        .classes
        .iter()
        .map(|c| {
            let (images, hits) = per_dir.get(c.directory.as_str()).copied().unwrap_or((0, 0));
            ClassAccuracy {
                directory: c.directory.clone(),
                class: c.class.clone(),
                images,
                correct: hits,
                accuracy: (images > 0).then(|| hits as f64 / images as f64),
            }
        })
        .collect();
    Ok(EvalReport {
        dataset: dataset.name.clone(),
        image_count: dataset.images.len(),
        evaluated,
        correct,
        top1_accuracy: if evaluated > 0 { correct as f64 / evaluated as f64 } else { 0.0 },
        per_class,
        failures,
        warnings: dataset.warnings.clone(),
        rng: engine.config().rng.clone(),
        config: engine.config().clone(),
        wall_time_ms: Some(start.elapsed().as_secs_f64() * 1e3),
    })
}
