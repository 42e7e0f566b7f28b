use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use abs_core::backend::{AttentionSource, ReferenceEncoder, SplitEncoder};
use abs_core::catalog::DescriptionCatalog;
use abs_core::config::{Branches, RunConfig};
use abs_core::dataset::{evaluate_dataset, load_class_map, Dataset};
use abs_core::fixtures;
use abs_core::overlay::render_overlay;
use abs_core::pipeline::Engine;
use abs_core::raw_select::{preprocess_full, ImageTensor};
use abs_core::scoring::{argmax, baseline_clip_score};
use abs_core::selftest::{check_split_composition, reference_selftest, Check};
use abs_onnx::{probes::check_recorded_probes, OnnxAttentionSource, OnnxSplitEncoder};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "abs", version, about = "Training-free zero-shot image classification with attention-guided crops")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify one image and print the result as JSON.
    Classify {
        image: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Score the uncropped image against class centroids instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate a folder-per-class dataset; writes results.jsonl and report.json.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Dataset root with one subdirectory per class.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// JSON object mapping directory names to catalog class names.
        #[arg(long)]
        class_map: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render the attention heatmap and crop boxes of one image as PNG.
    Overlay {
        image: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the golden reference suite, or composition checks on an ONNX backend.
    Selftest {
        /// Directory with model_spec.json and exported graphs.
        #[arg(long)]
        backend: Option<PathBuf>,
        /// Random inputs for the composition check.
        #[arg(long, default_value_t = 8)]
        inputs: usize,
    },
    /// Write the built-in model as ONNX graphs, with a catalog and a synthetic dataset.
    Demo {
        /// Output directory; receives model/, catalog.{json,abst} and synthetic/.
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Both,
    RawOnly,
    FeatureOnly,
}

impl From<BranchArg> for Branches {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Both => Branches::Both,
            BranchArg::RawOnly => Branches::RawOnly,
            BranchArg::FeatureOnly => Branches::FeatureOnly,
        }
    }
}

/// Run configuration; flags override values from `--config`.
#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with the embedding model's graphs and model_spec.json.
    #[arg(long)]
    models_dir: Option<PathBuf>,
    /// Directory with the attention model (defaults to --models-dir).
    #[arg(long)]
    attention_dir: Option<PathBuf>,
    /// Catalog path (`<stem>`, `<stem>.json` or `<stem>.abst`).
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Use the built-in reference encoder and synthetic catalog instead of ONNX models.
    #[arg(long)]
    reference: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_crops: Option<usize>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    patch_temperature: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_layer: Option<usize>,
    #[arg(long)]
    include_full_image: bool,
    #[arg(long, value_enum)]
    branches: Option<BranchArg>,
    #[arg(long)]
    workers: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { c.$field = v; })*
            };
        }
        set!(alpha, beta, k, n_crops, tau, patch_temperature, seed, workers);
        if self.split_layer.is_some() {
            c.split_layer = self.split_layer;
        }
        if let Some(b) = self.branches {
            c.branches = b.into();
        }
        c.include_full_image |= self.include_full_image;
        if self.models_dir.is_some() {
            c.paths.models_dir = self.models_dir.clone();
        }
        if self.attention_dir.is_some() {
            c.paths.attention_dir = self.attention_dir.clone();
        }
        if self.catalog.is_some() {
            c.paths.catalog = self.catalog.clone();
        }
        c.validate()?;
        Ok(c)
    }

    fn engine(&self, config: RunConfig) -> Result<Engine> {
        if self.reference {
            let encoder = Arc::new(ReferenceEncoder::tiny(fixtures::FIXTURE_SEED));
            let catalog = match &config.paths.catalog {
                Some(p) => DescriptionCatalog::load(p)?,
                None => fixtures::synthetic_catalog(encoder.as_ref())?,
            };
            return Ok(Engine::new(config, encoder.clone(), encoder, Arc::new(catalog))?);
        }
        let models = config
            .paths
            .models_dir
            .clone()
            .context("--models-dir is required (or --reference for the built-in test model)")?;
        let attention_dir = config.paths.attention_dir.clone().unwrap_or_else(|| models.clone());
        let catalog_path = config.paths.catalog.clone().context("--catalog is required")?;
        let encoder: Arc<dyn SplitEncoder> = Arc::new(OnnxSplitEncoder::load(&models)?);
        let attention: Arc<dyn AttentionSource> = Arc::new(OnnxAttentionSource::load(&attention_dir)?);
        let catalog = Arc::new(DescriptionCatalog::load(&catalog_path)?);
        Ok(Engine::new(config, encoder, attention, catalog)?)
    }
}

fn image_id(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn classify(image: &Path, run: &RunArgs, baseline: bool) -> Result<()> {
    let engine = run.engine(run.config()?)?;
    let img = ImageTensor::open(image)?;
    let id = image_id(image);
    let json = if baseline {
        let spec = &engine.encoder().spec().input;
        let f = engine.encoder().encode_image(&preprocess_full(&img, spec)?)?;
        let scores = baseline_clip_score(&f, &engine.catalog().class_centroids()?)?;
        let best = argmax(&scores);
        let classes: Vec<_> = engine
            .catalog()
            .class_names()
            .zip(&scores)
            .map(|(c, s)| serde_json::json!({"class": c, "score": s}))
            .collect();
        serde_json::json!({
            "image_id": id,
            "mode": "baseline",
            "predicted_class": engine.catalog().class_name(best),
            "predicted_index": best,
            "scores": classes,
        })
    } else {
        serde_json::to_value(engine.run_image(&img, &id)?.result)?
    };
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(())
}

fn eval(run: &RunArgs, dataset: Option<PathBuf>, class_map: Option<PathBuf>, output: Option<PathBuf>) -> Result<()> {
    let mut config = run.config()?;
    if dataset.is_some() {
        config.paths.dataset = dataset;
    }
    if class_map.is_some() {
        config.paths.class_map = class_map;
    }
    if output.is_some() {
        config.paths.output = output;
    }
    let root = config.paths.dataset.clone().context("--dataset is required")?;
    let out_dir = config.paths.output.clone().context("--output is required")?;
    let map = config.paths.class_map.as_ref().map(load_class_map).transpose()?;
    let engine = run.engine(config)?;
    let ds = Dataset::scan(&root, engine.catalog(), map.as_ref())?;
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let results_path = out_dir.join("results.jsonl");
    let mut sink = BufWriter::new(File::create(&results_path).with_context(|| results_path.display().to_string())?);
    let report = evaluate_dataset(&engine, &ds, Some(&mut sink))?;
    sink.flush()?;
    let report_path = out_dir.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    eprintln!(
        "{}: {}/{} correct (top-1 {:.2} %), {} failed; wrote {} and {}",
        report.dataset,
        report.correct,
        report.evaluated,
        100.0 * report.top1_accuracy,
        report.failures.len(),
        results_path.display(),
        report_path.display()
    );
    Ok(())
}

fn overlay(image: &Path, run: &RunArgs, out: &Path) -> Result<()> {
    let engine = run.engine(run.config()?)?;
    let img = ImageTensor::open(image)?;
    let result = engine.run_image(&img, &image_id(image))?;
    let boxes: Vec<_> = result.result.crops.iter().map(|c| c.bbox).collect();
    fs::write(out, render_overlay(&img, &result.attention, &boxes)?).with_context(|| out.display().to_string())?;
    Ok(())
}

fn selftest(backend: Option<&Path>, inputs: usize) -> Result<()> {
    let checks: Vec<Check> = match backend {
        None => reference_selftest()?,
        Some(dir) => {
            let encoder = OnnxSplitEncoder::load(dir)?;
            if !encoder.has_unsplit_graph() {
                log::warn!("no unsplit graph in {}; encode_image is the composition itself", dir.display());
            }
            let mut checks = check_split_composition(&encoder, inputs, 1)?;
            checks.extend(check_recorded_probes(&encoder, dir)?);
            if dir.join(abs_onnx::ATTENTION_FILE).is_file() {
                let source = OnnxAttentionSource::load(dir)?;
                let spec = source.input_spec().clone();
                let side = spec.input_size;
                let gray = ImageTensor::new(side, side, vec![128; side * side * 3], "gray")?;
                let input = preprocess_full(&gray, &spec)?;
                let attn = source.cls_attention(&input)?;
                let worst = (0..attn.heads())
                    .map(|h| attn.head(h).iter().map(|&v| v as f64).sum::<f64>())
                    .fold(0.0, f64::max);
                checks.push(Check {
                    name: "attention rows".into(),
                    passed: worst <= 1.0 + 1e-5,
                    detail: format!("{} heads, largest patch mass {worst:.6}", attn.heads()),
                });
            }
            checks
        }
    };
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{c}");
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn demo(dir: &Path) -> Result<()> {
    let encoder = ReferenceEncoder::tiny(fixtures::FIXTURE_SEED);
    let model = dir.join("model");
    abs_onnx::export::export_reference(&encoder, &model)?;
    abs_onnx::probes::write_probes(&encoder, &model, 4, fixtures::FIXTURE_SEED)?;
    fixtures::synthetic_catalog(&encoder)?.save(dir.join("catalog"))?;
    fixtures::write_synthetic_dataset(&dir.join("synthetic"))?;
    println!(
        "wrote {}; try: abs eval --models-dir {} --catalog {} --dataset {} --output {}",
        dir.display(),
        model.display(),
        dir.join("catalog").display(),
        dir.join("synthetic").display(),
        dir.join("out").display()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Classify { image, run, baseline } => classify(&image, &run, baseline),
        Command::Eval {
            run,
            dataset,
            class_map,
            output,
        } => eval(&run, dataset, class_map, output),
        Command::Overlay { image, run, out } => overlay(&image, &run, &out),
        Command::Selftest { backend, inputs } => selftest(backend.as_deref(), inputs),
        Command::Demo { dir } => demo(&dir),
    }
}
