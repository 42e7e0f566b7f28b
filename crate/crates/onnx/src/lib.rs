//! ONNX backends for the split encoder and the attention source.
//!
//! A backend directory holds `model_spec.json` plus some of:
//!
//! * `prefix.onnx`: `image [1,3,S,S]` → `cls [1,1,d_model]`, `tokens [1,P,d_model]`
//! * `suffix.onnx`: `sequence [1,1+P,d_model]` → `embedding [1,d]`
//! * `full.onnx` (optional): `image` → `embedding`, the unsplit model
//! * `attention.onnx`: `image` → `cls_attn [1,h,P]`
//!
//! Graphs are executed with tract. Embeddings are L2-normalized after the
//! graph, so exporters may leave the final normalization out.

pub mod export;
pub mod probes;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use abs_core::backend::{io_names, AttentionSource, ModelSpecFile, SplitEncoder, SplitEncoderSpec, MODEL_SPEC_FILE};
use abs_core::feat_select::TokenGrid;
use abs_core::numeric::l2_normalize;
use abs_core::raw_select::EncoderInputSpec;
use abs_core::sampler::MultiHeadClsAttention;
use abs_core::tensor::Tensor;
use abs_core::{Error, Result, UnitVector};
use tract_onnx::prelude::*;

pub const PREFIX_FILE: &str = "prefix.onnx";
pub const SUFFIX_FILE: &str = "suffix.onnx";
pub const FULL_FILE: &str = "full.onnx";
pub const ATTENTION_FILE: &str = "attention.onnx";

type Plan = Arc<TypedRunnableModel>;

fn backend_error(model: &str, e: impl std::fmt::Display) -> Error {
    Error::Backend {
        model: model.to_string(),
        detail: e.to_string(),
    }
}

/// Loads one graph with a fixed input shape and the named outputs, in order.
fn load_plan(model: &str, path: &Path, input: &str, shape: &[usize], outputs: &[&str]) -> Result<Plan> {
    if !path.is_file() {
        return Err(backend_error(model, format!("missing graph {}", path.display())));
    }
    let load = || -> TractResult<Plan> {
        let mut graph = tract_onnx::onnx().model_for_path(path)?;
        graph.set_input_names([input])?;
        graph.set_input_fact(0, f32::fact(shape).into())?;
        graph.select_outputs_by_name(outputs)?;
        graph.into_optimized()?.into_runnable()
    };
    load().map_err(|e| backend_error(model, format!("{}: {e:#}", path.display())))
}

fn run(model: &str, plan: &Plan, input: &Tensor, shape: &[usize]) -> Result<Vec<Vec<f32>>> {
    let data = input.as_f32()?;
    let tensor = tract_ndarray::ArrayD::from_shape_vec(shape.to_vec(), data.to_vec())
        .map_err(|e| backend_error(model, e))?;
    let outputs = plan
        .run(tvec!(tract_onnx::prelude::Tensor::from(tensor).into()))
        .map_err(|e| backend_error(model, format!("{e:#}")))?;
    outputs
        .iter()
        .map(|o| {
            o.to_plain_array_view::<f32>()
                .map(|a| a.iter().copied().collect())
                .map_err(|e| backend_error(model, format!("{e:#}")))
        })
        .collect()
}

fn expect_len(model: &str, what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(backend_error(model, format!("{what} has {got} values, expected {want}")));
    }
    Ok(())
}

fn model_id(spec: &ModelSpecFile, dir: &Path) -> String {
    spec.model_id.clone().unwrap_or_else(|| dir.display().to_string())
}

/// Split embedding model backed by `prefix.onnx` and `suffix.onnx`.
pub struct OnnxSplitEncoder {
    id: String,
    dir: PathBuf,
    spec: SplitEncoderSpec,
    prefix: Plan,
    suffix: Plan,
    full: Option<Plan>,
}

impl std::fmt::Debug for OnnxSplitEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxSplitEncoder")
            .field("id", &self.id)
            .field("dir", &self.dir)
            .field("spec", &self.spec)
            .field("unsplit_graph", &self.full.is_some())
            .finish()
    }
}

impl OnnxSplitEncoder {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let file = ModelSpecFile::load(dir.join(MODEL_SPEC_FILE))?;
        let id = model_id(&file, &dir);
        let spec = file.into_split_spec()?;
        let s = spec.input.input_size;
        let image = [1, 3, s, s];
        let sequence = [1, 1 + spec.patches(), spec.d_model];
        let prefix = load_plan(&id, &dir.join(PREFIX_FILE), io_names::IMAGE, &image, &[io_names::CLS, io_names::TOKENS])?;
        let suffix = load_plan(&id, &dir.join(SUFFIX_FILE), io_names::SEQUENCE, &sequence, &[io_names::EMBEDDING])?;
        let full_path = dir.join(FULL_FILE);
        let full = if full_path.is_file() {
            Some(load_plan(&id, &full_path, io_names::IMAGE, &image, &[io_names::EMBEDDING])?)
        } else {
            None
        };
        log::info!(
            "loaded split encoder {id} from {} (split {} of {}, unsplit graph: {})",
            dir.display(),
            spec.split_layer,
            spec.layers,
            full.is_some()
        );
        Ok(Self {
            id,
            dir,
            spec,
            prefix,
            suffix,
            full,
        })
    }

    pub fn has_unsplit_graph(&self) -> bool {
        self.full.is_some()
    }

    fn image_shape(&self) -> [usize; 4] {
        let s = self.spec.input.input_size;
        [1, 3, s, s]
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = self.spec.input.input_size;
        if input.shape() != [3, s, s] {
            return Err(Error::Argument(format!(
                "{} expects a [3, {s}, {s}] input, got {:?}",
                self.id,
                input.shape()
            )));
        }
        input.ensure_finite()
    }

    fn normalize(&self, v: Vec<f32>) -> Result<UnitVector> {
        expect_len(&self.id, "embedding", v.len(), self.spec.embed_dim)?;
        l2_normalize(&v).map_err(|e| backend_error(&self.id, e))
    }
}

impl SplitEncoder for OnnxSplitEncoder {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn spec(&self) -> &SplitEncoderSpec {
        &self.spec
    }

    fn encode_prefix(&self, input: &Tensor) -> Result<TokenGrid> {
        self.check_input(input)?;
        let mut out = run(&self.id, &self.prefix, input, &self.image_shape())?;
        let d = self.spec.d_model;
        let tokens = out.pop().expect("two outputs");
        let cls = out.pop().expect("two outputs");
        expect_len(&self.id, "cls", cls.len(), d)?;
        expect_len(&self.id, "tokens", tokens.len(), self.spec.patches() * d)?;
        TokenGrid::new(self.spec.grid(), d, tokens, cls, self.spec.split_layer)
    }

    fn encode_suffix(&self, sequence: &Tensor) -> Result<UnitVector> {
        let want = [1 + self.spec.patches(), self.spec.d_model];
        if sequence.shape() != want {
            return Err(Error::Argument(format!(
                "{} suffix expects a {want:?} sequence, got {:?}",
                self.id,
                sequence.shape()
            )));
        }
        sequence.ensure_finite()?;
        let shape = [1, want[0], want[1]];
        let mut out = run(&self.id, &self.suffix, sequence, &shape)?;
        self.normalize(out.remove(0))
    }

    fn encode_image(&self, input: &Tensor) -> Result<UnitVector> {
        match &self.full {
            Some(plan) => {
                self.check_input(input)?;
                let mut out = run(&self.id, plan, input, &self.image_shape())?;
                self.normalize(out.remove(0))
            }
            None => {
                let grid = self.encode_prefix(input)?;
                let seq = abs_core::feat_select::assemble_crop_sequence(grid.cls(), &grid.tokens_tensor())?;
                self.encode_suffix(&seq)
            }
        }
    }
}

/// Attention model backed by `attention.onnx`.
pub struct OnnxAttentionSource {
    id: String,
    input: EncoderInputSpec,
    heads: Option<usize>,
    plan: Plan,
}

impl std::fmt::Debug for OnnxAttentionSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxAttentionSource")
            .field("id", &self.id)
            .field("input", &self.input)
            .field("heads", &self.heads)
            .finish()
    }
}

impl OnnxAttentionSource {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let file = ModelSpecFile::load(dir.join(MODEL_SPEC_FILE))?;
        let id = model_id(&file, dir);
        let input = file.input_spec()?;
        let s = input.input_size;
        let plan = load_plan(&id, &dir.join(ATTENTION_FILE), io_names::IMAGE, &[1, 3, s, s], &[io_names::CLS_ATTN])?;
        Ok(Self {
            id,
            input,
            heads: file.heads,
            plan,
        })
    }
}

impl AttentionSource for OnnxAttentionSource {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn input_spec(&self) -> &EncoderInputSpec {
        &self.input
    }

    fn cls_attention(&self, input: &Tensor) -> Result<MultiHeadClsAttention> {
        let s = self.input.input_size;
        if input.shape() != [3, s, s] {
            return Err(Error::Argument(format!(
                "{} expects a [3, {s}, {s}] input, got {:?}",
                self.id,
                input.shape()
            )));
        }
        input.ensure_finite()?;
        let values = run(&self.id, &self.plan, input, &[1, 3, s, s])?.remove(0);
        let cells = self.input.grid.cells();
        if values.is_empty() || values.len() % cells != 0 {
            return Err(backend_error(
                &self.id,
                format!("cls_attn has {} values, not a multiple of {cells} patches", values.len()),
            ));
        }
        let heads = values.len() / cells;
        if let Some(h) = self.heads {
            expect_len(&self.id, "cls_attn heads", heads, h)?;
        }
        MultiHeadClsAttention::new(heads, self.input.grid, values).map_err(|e| backend_error(&self.id, e))
    }
}
