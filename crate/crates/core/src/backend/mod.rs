//! Encoder interfaces.
//!
//! The embedding model is consumed as a split encoder: a prefix that maps a
//! preprocessed image to the class token and patch-token grid entering the
//! split layer, and a suffix that runs the remaining layers, the final norm and
//! the projection. The attention source is a separate model that reports the
//! class-token attention of its last layer.

mod reference;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feat_select::{assemble_crop_sequence, TokenBox, TokenGrid};
use crate::numeric::UnitVector;
use crate::raw_select::{CropBox, EncoderInputSpec};
use crate::sampler::{GridDims, MultiHeadClsAttention, PatchIndex};
use crate::tensor::Tensor;

pub use reference::ReferenceEncoder;

/// Input names and output names every exported graph must use.
pub mod io_names {
    pub const IMAGE: &str = "image";
    pub const CLS: &str = "cls";
    pub const TOKENS: &str = "tokens";
    pub const SEQUENCE: &str = "sequence";
    pub const EMBEDDING: &str = "embedding";
    pub const CLS_ATTN: &str = "cls_attn";
}

/// Name of the JSON sidecar next to exported graphs.
pub const MODEL_SPEC_FILE: &str = "model_spec.json";

#[derive(Debug, Clone, PartialEq)]
pub struct SplitEncoderSpec {
    pub input: EncoderInputSpec,
    pub d_model: usize,
    pub embed_dim: usize,
    pub split_layer: usize,
    pub layers: usize,
}

impl SplitEncoderSpec {
    pub fn validate(&self) -> Result<()> {
        self.input.validate()?;
        if self.d_model == 0 || self.embed_dim == 0 {
            return Err(Error::Config("d_model and embed_dim must be positive".into()));
        }
        if self.layers < 2 || self.split_layer < 1 || self.split_layer > self.layers - 1 {
            return Err(Error::Config(format!(
                "split layer {} must lie in [1, {}]",
                self.split_layer,
                self.layers.saturating_sub(1)
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridDims {
        self.input.grid
    }

    pub fn patches(&self) -> usize {
        self.input.grid.cells()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ModelSpecFile::load(path)?.into_split_spec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridField {
    Side(usize),
    Dims([usize; 2]),
}

impl GridField {
    pub fn dims(self) -> GridDims {
        match self {
            GridField::Side(s) => GridDims::square(s),
            GridField::Dims([r, c]) => GridDims::new(r, c),
        }
    }
}

/// On-disk form of `model_spec.json`.
///
/// `grid` may be a single side length or `[rows, cols]`. Attention-only
/// exports may omit the embedding fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpecFile {
    pub input_size: usize,
    pub patch_size: usize,
    pub grid: GridField,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

impl ModelSpecFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn input_spec(&self) -> Result<EncoderInputSpec> {
        let spec = EncoderInputSpec {
            input_size: self.input_size,
            patch_size: self.patch_size,
            grid: self.grid.dims(),
            mean: self.mean,
            std: self.std,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn into_split_spec(self) -> Result<SplitEncoderSpec> {
        let missing = |k: &str| Error::Config(format!("model spec lacks `{k}`"));
        let spec = SplitEncoderSpec {
            input: self.input_spec()?,
            d_model: self.d_model.ok_or_else(|| missing("d_model"))?,
            embed_dim: self.embed_dim.ok_or_else(|| missing("embed_dim"))?,
            split_layer: self.split_layer.ok_or_else(|| missing("split_layer"))?,
            layers: self.layers.ok_or_else(|| missing("layers"))?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_split_spec(spec: &SplitEncoderSpec) -> Self {
        Self {
            input_size: spec.input.input_size,
            patch_size: spec.input.patch_size,
            grid: GridField::Dims([spec.input.grid.rows, spec.input.grid.cols]),
            d_model: Some(spec.d_model),
            embed_dim: Some(spec.embed_dim),
            split_layer: Some(spec.split_layer),
            layers: Some(spec.layers),
            mean: spec.input.mean,
            std: spec.input.std,
            heads: None,
            model_id: None,
        }
    }
}

/// Embedding model factored at `split_layer`.
///
/// Implementations must return the same values whether calls are made
/// concurrently or one at a time.
pub trait SplitEncoder: Send + Sync {
    fn model_id(&self) -> &str;

    fn spec(&self) -> &SplitEncoderSpec;

    /// `[3, S, S]` input to the class token and token grid entering the split layer.
    fn encode_prefix(&self, input: &Tensor) -> Result<TokenGrid>;

    /// `[1 + P, d_model]` sequence to the normalized embedding.
    fn encode_suffix(&self, sequence: &Tensor) -> Result<UnitVector>;

    /// Full forward pass.
    fn encode_image(&self, input: &Tensor) -> Result<UnitVector> {
        let grid = self.encode_prefix(input)?;
        self.encode_suffix(&assemble_crop_sequence(grid.cls(), &grid.tokens_tensor())?)
    }

    fn encode_images(&self, inputs: &[Tensor]) -> Result<Vec<UnitVector>> {
        inputs.iter().map(|t| self.encode_image(t)).collect()
    }

    fn encode_suffix_batch(&self, sequences: &[Tensor]) -> Result<Vec<UnitVector>> {
        sequences.iter().map(|s| self.encode_suffix(s)).collect()
    }
}

/// Model providing last-layer class-token attention.
pub trait AttentionSource: Send + Sync {
    fn model_id(&self) -> &str;

    fn input_spec(&self) -> &EncoderInputSpec;

    /// Per-head class-token attention over patches, after softmax and without
    /// the class column.
    fn cls_attention(&self, input: &Tensor) -> Result<MultiHeadClsAttention>;
}

pub(crate) fn check_image_input(model: &str, input: &Tensor, spec: &EncoderInputSpec) -> Result<()> {
    let s = spec.input_size;
    if input.shape() != [3, s, s] {
        return Err(Error::argument(format!(
            "{model} expects a [3, {s}, {s}] input, got {:?}",
            input.shape()
        )));
    }
    input.ensure_finite()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Pixel crop encoded by the whole model.
    Raw,
    /// Token-grid crop fed through the suffix.
    Feature,
    /// The uncropped image.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub branch: Branch,
    pub anchor: Option<PatchIndex>,
    pub crop: CropBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_box: Option<TokenBox>,
}

/// Unit-norm image embeddings with the crop each one came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingSet {
    rows: Vec<UnitVector>,
    provenance: Vec<Provenance>,
}

impl EmbeddingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: UnitVector, provenance: Provenance) -> Result<()> {
        if let Some(first) = self.rows.first() {
            if first.dim() != row.dim() {
                return Err(Error::argument(format!(
                    "embedding dim {} does not match set dim {}",
                    row.dim(),
                    first.dim()
                )));
            }
        }
        self.rows.push(row);
        self.provenance.push(provenance);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.rows.first().map(UnitVector::dim)
    }

    pub fn rows(&self) -> &[UnitVector] {
        &self.rows
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn iter(&self) -> impl Iterator<Item = (&UnitVector, &Provenance)> {
        self.rows.iter().zip(&self.provenance)
    }
}

impl FromIterator<UnitVector> for EmbeddingSet {
    /// Rows without crop information, tagged as full-image embeddings.
    fn from_iter<I: IntoIterator<Item = UnitVector>>(iter: I) -> Self {
        let mut set = EmbeddingSet::new();
        for row in iter {
            set.rows.push(row);
            set.provenance.push(Provenance {
                branch: Branch::Full,
                anchor: None,
                crop: CropBox {
                    x0: 0,
                    y0: 0,
                    width: 1,
                    height: 1,
                    anchor: None,
                    fx: 1.0,
                    fy: 1.0,
                },
                token_box: None,
            });
        }
        set
    }
}
