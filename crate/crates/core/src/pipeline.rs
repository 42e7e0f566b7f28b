//! Per-image orchestration.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{AttentionSource, Branch, EmbeddingSet, Provenance, SplitEncoder};
use crate::catalog::DescriptionCatalog;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::feat_select::{feature_crop_sequence, TokenBox};
use crate::raw_select::{crop_and_preprocess, patch_center_pixels, preprocess_full, propose_crop_box, CropBox, ImageTensor};
use crate::rng::{mix64, stable_hash, SampleRng, RNG_ALGORITHM};
use crate::sampler::{AnchorSampler, AttentionGrid, PatchIndex};
use crate::scoring::{aggregate_scores, ScoreTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub anchor: PatchIndex,
    #[serde(rename = "box")]
    pub bbox: CropBox,
    pub token_box: Option<TokenBox>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub crop_preprocess_ms: f64,
    pub encoding_ms: f64,
    pub scoring_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub predicted_class: String,
    pub predicted_index: usize,
    pub margin: f64,
    pub scores: Vec<ClassScore>,
    pub crops: Vec<CropRecord>,
    /// Per-image generator seed and algorithm.
    pub seed: u64,
    pub rng: String,
    pub timing: Timing,
    pub config: RunConfig,
}

impl ImageResult {
    pub fn is_correct(&self) -> Option<bool> {
        self.label.as_ref().map(|l| *l == self.predicted_class)
    }

    /// Copy with timings zeroed, for comparisons that must be bit-stable.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Timing::default(),
            ..self.clone()
        }
    }
}

/// Everything `run_image` computed, for callers that need more than the summary.
#[derive(Debug, Clone)]
pub struct ImageRun {
    pub result: ImageResult,
    pub attention: AttentionGrid,
    pub embeddings: EmbeddingSet,
    pub table: ScoreTable,
}

/// Seed of the generator used for one image: depends on the run seed and the
/// image's relative path only.
pub fn image_seed(global_seed: u64, image_id: &str) -> u64 {
    mix64(global_seed, stable_hash(image_id.as_bytes()))
}

/// Backends, catalog and configuration shared by every image of a run.
#[derive(Clone)]
pub struct Engine {
    config: RunConfig,
    encoder: Arc<dyn SplitEncoder>,
    attention: Arc<dyn AttentionSource>,
    catalog: Arc<DescriptionCatalog>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("encoder", &self.encoder.model_id())
            .field("attention", &self.attention.model_id())
            .field("classes", &self.catalog.num_classes())
            .finish()
    }
}

impl Engine {
    pub fn new(
        config: RunConfig,
        encoder: Arc<dyn SplitEncoder>,
        attention: Arc<dyn AttentionSource>,
        catalog: Arc<DescriptionCatalog>,
    ) -> Result<Self> {
        config.validate()?;
        let spec = encoder.spec();
        if let Some(split) = config.split_layer {
            if split != spec.split_layer {
                return Err(Error::Config(format!(
                    "config asks for split layer {split} but {} is split at {}",
                    encoder.model_id(),
                    spec.split_layer
                )));
            }
        }
        if spec.embed_dim != catalog.dim() {
            return Err(Error::Config(format!(
                "encoder embeds to {} dims but the catalog holds {}-dim rows",
                spec.embed_dim,
                catalog.dim()
            )));
        }
        if catalog.num_classes() < 2 {
            return Err(Error::Config("catalog needs at least 2 classes".into()));
        }
        Ok(Self {
            config,
            encoder,
            attention,
            catalog,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn catalog(&self) -> &DescriptionCatalog {
        &self.catalog
    }

    pub fn encoder(&self) -> &dyn SplitEncoder {
        self.encoder.as_ref()
    }

    pub fn attention_source(&self) -> &dyn AttentionSource {
        self.attention.as_ref()
    }

    /// Attention grid and crop boxes for one image, consuming `rng` in the
    /// fixed order: anchors first, then `fx, fy` per anchor.
    pub fn propose_crops(&self, image: &ImageTensor, rng: &mut SampleRng) -> Result<(AttentionGrid, Vec<CropBox>)> {
        let attn_input = preprocess_full(image, self.attention.input_spec())?;
        let attn = self.attention.cls_attention(&attn_input)?;
        let sampler = AnchorSampler {
            k: self.config.k,
            n: self.config.n_crops,
            temperature: self.config.patch_temperature,
        };
        let (grid, anchors) = sampler.sample(&attn, rng)?;
        let (w, h) = image.dims();
        let boxes = anchors
            .iter()
            .map(|a| {
                let center = patch_center_pixels(a.patch, grid.grid(), w, h);
                let mut b = propose_crop_box(center, self.config.alpha, self.config.beta, (w, h), rng)?;
                b.anchor = Some(a.patch);
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((grid, boxes))
    }

    /// Classifies one image with the generator seeded by [`image_seed`].
    pub fn run_image(&self, image: &ImageTensor, image_id: &str) -> Result<ImageRun> {
        self.run_image_seeded(image, image_id, image_seed(self.config.seed, image_id))
    }

    pub fn run_image_seeded(&self, image: &ImageTensor, image_id: &str, seed: u64) -> Result<ImageRun> {
        let start = Instant::now();
        let mut rng = SampleRng::new(seed);
        let mut timing = Timing::default();
        let (w, h) = image.dims();
        let branches = self.config.branches;
        let spec = self.encoder.spec().input.clone();

        let mut prep = Instant::now();
        let (grid, boxes) = self.propose_crops(image, &mut rng)?;
        let raw_inputs = if branches.raw() {
            boxes
                .iter()
                .map(|b| crop_and_preprocess(image, b, &spec))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let full_input = if branches.feature() || self.config.include_full_image {
            Some(preprocess_full(image, &spec)?)
        } else {
            None
        };
        timing.crop_preprocess_ms += ms(prep);

        let mut enc = Instant::now();
        let raw_embeddings = self.encoder.encode_images(&raw_inputs)?;
        let tokens = match (&full_input, branches.feature()) {
            (Some(input), true) => Some(self.encoder.encode_prefix(input)?),
            _ => None,
        };
        timing.encoding_ms += ms(enc);

        let mut token_boxes = vec![None; boxes.len()];
        let mut feature_embeddings = Vec::new();
        if let Some(tokens) = &tokens {
            prep = Instant::now();
            let mut sequences = Vec::with_capacity(boxes.len());
            for (b, slot) in boxes.iter().zip(token_boxes.iter_mut()) {
                let (tb, seq) = feature_crop_sequence(tokens, b, (w, h))?;
                *slot = Some(tb);
                sequences.push(seq);
            }
            timing.crop_preprocess_ms += ms(prep);
            enc = Instant::now();
            feature_embeddings = self.encoder.encode_suffix_batch(&sequences)?;
            timing.encoding_ms += ms(enc);
        }

        let full_embedding = match (&full_input, self.config.include_full_image) {
            (Some(input), true) => {
                enc = Instant::now();
                let e = self.encoder.encode_image(input)?;
                timing.encoding_ms += ms(enc);
                Some(e)
            }
            _ => None,
        };

        let mut set = EmbeddingSet::new();
        for (e, b) in raw_embeddings.into_iter().zip(&boxes) {
            set.push(
                e,
                Provenance {
                    branch: Branch::Raw,
                    anchor: b.anchor,
                    crop: *b,
                    token_box: None,
                },
            )?;
        }
        for ((e, b), tb) in feature_embeddings.into_iter().zip(&boxes).zip(&token_boxes) {
            set.push(
                e,
                Provenance {
                    branch: Branch::Feature,
                    anchor: b.anchor,
                    crop: *b,
                    token_box: *tb,
                },
            )?;
        }
        if let Some(e) = full_embedding {
            set.push(
                e,
                Provenance {
                    branch: Branch::Full,
                    anchor: None,
                    crop: image.full_box(),
                    token_box: None,
                },
            )?;
        }

        let score_start = Instant::now();
        let table = aggregate_scores(&set, &self.catalog, self.config.tau)?;
        timing.scoring_ms = ms(score_start);
        timing.total_ms = ms(start);

        let crops = boxes
            .iter()
            .zip(&token_boxes)
            .map(|(b, tb)| CropRecord {
                anchor: b.anchor.expect("anchors are set on every proposed box"),
                bbox: *b,
                token_box: *tb,
            })
            .collect();
        let result = ImageResult {
            image_id: image_id.to_string(),
            label: None,
            predicted_class: self.catalog.class_name(table.predicted).to_string(),
            predicted_index: table.predicted,
            margin: table.margin,
            scores: table
                .scores
                .iter()
                .enumerate()
                .map(|(k, &score)| ClassScore {
                    class: self.catalog.class_name(k).to_string(),
                    score,
                })
                .collect(),
            crops,
            seed,
            rng: RNG_ALGORITHM.to_string(),
            timing,
            config: self.config.clone(),
        };
        Ok(ImageRun {
            result,
            attention: grid,
            embeddings: set,
            table,
        })
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}
