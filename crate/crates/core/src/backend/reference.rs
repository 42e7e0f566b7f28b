//! A small seeded vision transformer used as a deterministic test double.
//!
//! Architecture: non-overlapping patches → linear embedding → class token and
//! learned positions → pre-norm blocks (multi-head self-attention, GELU MLP)
//! → final layer norm on the class token → linear projection → L2 norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_image_input, AttentionSource, SplitEncoder, SplitEncoderSpec};
use crate::error::{Error, Result};
use crate::feat_select::TokenGrid;
use crate::numeric::{l2_normalize, UnitVector};
use crate::raw_select::EncoderInputSpec;
use crate::sampler::{GridDims, MultiHeadClsAttention};
use crate::tensor::Tensor;

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
struct Linear {
    inputs: usize,
    outputs: usize,
    /// `[outputs, inputs]`
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Linear {
    fn random(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, bias: bool) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = if bias {
            (0..outputs).map(|_| rng.random_range(-bound..bound)).collect()
        } else {
            vec![0.0; outputs]
        };
        Self {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    /// Applies to every row of a `[n, inputs]` buffer.
    fn forward(&self, x: &[f32]) -> Vec<f32> {
        let n = x.len() / self.inputs;
        let mut out = Vec::with_capacity(n * self.outputs);
        for row in x.chunks_exact(self.inputs) {
            for o in 0..self.outputs {
                let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                let acc: f32 = w.iter().zip(row).map(|(a, b)| a * b).sum();
                out.push(acc + self.bias[o]);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gamma: Vec<f32>,
    beta: Vec<f32>,
}

impl LayerNorm {
    fn random(rng: &mut ChaCha8Rng, width: usize) -> Self {
        Self {
            gamma: (0..width).map(|_| 1.0 + rng.random_range(-0.1..0.1)).collect(),
            beta: (0..width).map(|_| rng.random_range(-0.1..0.1)).collect(),
        }
    }

    fn forward(&self, x: &[f32]) -> Vec<f32> {
        let d = self.gamma.len();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (i, v) in row.iter().enumerate() {
                out.push((v - mean) * inv * self.gamma[i] + self.beta[i]);
            }
        }
        out
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn random(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            norm1: LayerNorm::random(rng, d),
            qkv: Linear::random(rng, d, 3 * d, true),
            proj: Linear::random(rng, d, d, true),
            norm2: LayerNorm::random(rng, d),
            fc1: Linear::random(rng, d, 4 * d, true),
            fc2: Linear::random(rng, 4 * d, d, true),
        }
    }

    /// Returns the updated `[n, d]` sequence and the attention probabilities
    /// `[heads, n, n]`.
    fn forward(&self, x: &[f32], d: usize, heads: usize) -> (Vec<f32>, Vec<f32>) {
        let n = x.len() / d;
        let hd = d / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let qkv = self.qkv.forward(&self.norm1.forward(x));

        let mut attn = vec![0f32; heads * n * n];
        let mut mixed = vec![0f32; n * d];
        for h in 0..heads {
            let q = |i: usize| &qkv[i * 3 * d + h * hd..i * 3 * d + (h + 1) * hd];
            let k = |j: usize| &qkv[j * 3 * d + d + h * hd..j * 3 * d + d + (h + 1) * hd];
            let v = |j: usize| &qkv[j * 3 * d + 2 * d + h * hd..j * 3 * d + 2 * d + (h + 1) * hd];
            for i in 0..n {
                let row = &mut attn[(h * n + i) * n..(h * n + i + 1) * n];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = q(i).iter().zip(k(j)).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for r in row.iter_mut() {
                    *r /= sum;
                }
                let out = &mut mixed[i * d + h * hd..i * d + (h + 1) * hd];
                for (j, &p) in row.iter().enumerate() {
                    for (o, vv) in out.iter_mut().zip(v(j)) {
                        *o += p * vv;
                    }
                }
            }
        }

        let mut y: Vec<f32> = x
            .iter()
            .zip(self.proj.forward(&mixed))
            .map(|(a, b)| a + b)
            .collect();
        let hidden: Vec<f32> = self
            .fc1
            .forward(&self.norm2.forward(&y))
            .into_iter()
            .map(gelu)
            .collect();
        for (a, b) in y.iter_mut().zip(self.fc2.forward(&hidden)) {
            *a += b;
        }
        (y, attn)
    }
}

/// Deterministic tiny transformer implementing both encoder roles.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    id: String,
    spec: SplitEncoderSpec,
    heads: usize,
    patch_embed: Linear,
    cls_token: Vec<f32>,
    /// `[1 + P, d_model]`
    positions: Vec<f32>,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    projection: Linear,
}

impl ReferenceEncoder {
    /// Draws every weight from a ChaCha8 stream seeded with `seed`.
    pub fn new(seed: u64, spec: SplitEncoderSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model;
        let heads = if d % 2 == 0 { 2 } else { 1 };
        let p = spec.input.patch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_embed = Linear::random(&mut rng, 3 * p * p, d, true);
        let cls_token = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let positions = (0..(1 + spec.patches()) * d)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let blocks = (0..spec.layers).map(|_| Block::random(&mut rng, d)).collect();
        let final_norm = LayerNorm::random(&mut rng, d);
        let projection = Linear::random(&mut rng, d, spec.embed_dim, false);
        Ok(Self {
            id: format!("reference-vit-seed{seed}"),
            spec,
            heads,
            patch_embed,
            cls_token,
            positions,
            blocks,
            final_norm,
            projection,
        })
    }

    /// The small configuration used throughout the test suite:
    /// 32 px input, 8 px patches (4×4 grid), width 16, 8-dim embedding, two layers.
    pub fn tiny_spec() -> SplitEncoderSpec {
        SplitEncoderSpec {
            input: EncoderInputSpec {
                input_size: 32,
                patch_size: 8,
                grid: GridDims::square(4),
                mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
                std: [0.268_629_54, 0.261_302_58, 0.275_777_1],
            },
            d_model: 16,
            embed_dim: 8,
            split_layer: 1,
            layers: 2,
        }
    }

    pub fn tiny(seed: u64) -> Self {
        Self::new(seed, Self::tiny_spec()).expect("tiny spec is valid")
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Every weight as a named tensor, for exporting the model to other runtimes.
    ///
    /// Linear weights are `[outputs, inputs]`; the patch embedding reads each
    /// patch flattened as `[channel, dy, dx]`. Names: `patch_embed.{weight,bias}`,
    /// `cls_token`, `positions` (`[1 + P, d_model]`), `blocks.{i}.{norm1,qkv,proj,norm2,fc1,fc2}.{weight,bias}`,
    /// `final_norm.{weight,bias}`, `projection.{weight,bias}`.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        fn vector(v: &[f32]) -> Tensor {
            Tensor::from_f32(vec![v.len()], v.to_vec()).expect("length matches")
        }
        fn linear(out: &mut Vec<(String, Tensor)>, name: &str, l: &Linear) {
            let w = Tensor::from_f32(vec![l.outputs, l.inputs], l.weight.clone()).expect("shape matches");
            out.push((format!("{name}.weight"), w));
            out.push((format!("{name}.bias"), vector(&l.bias)));
        }
        fn norm(out: &mut Vec<(String, Tensor)>, name: &str, n: &LayerNorm) {
            out.push((format!("{name}.weight"), vector(&n.gamma)));
            out.push((format!("{name}.bias"), vector(&n.beta)));
        }
        let mut out = Vec::new();
        linear(&mut out, "patch_embed", &self.patch_embed);
        out.push(("cls_token".into(), vector(&self.cls_token)));
        let positions = Tensor::from_f32(vec![1 + self.spec.patches(), self.spec.d_model], self.positions.clone())
            .expect("shape matches");
        out.push(("positions".into(), positions));
        for (i, b) in self.blocks.iter().enumerate() {
            norm(&mut out, &format!("blocks.{i}.norm1"), &b.norm1);
            linear(&mut out, &format!("blocks.{i}.qkv"), &b.qkv);
            linear(&mut out, &format!("blocks.{i}.proj"), &b.proj);
            norm(&mut out, &format!("blocks.{i}.norm2"), &b.norm2);
            linear(&mut out, &format!("blocks.{i}.fc1"), &b.fc1);
            linear(&mut out, &format!("blocks.{i}.fc2"), &b.fc2);
        }
        norm(&mut out, "final_norm", &self.final_norm);
        linear(&mut out, "projection", &self.projection);
        out
    }

    /// `[1 + P, d_model]` sequence entering layer 0.
    fn embed(&self, input: &Tensor) -> Result<Vec<f32>> {
        check_image_input(&self.id, input, &self.spec.input)?;
        let pixels = input.as_f32()?;
        let s = self.spec.input.input_size;
        let p = self.spec.input.patch_size;
        let grid = self.spec.grid();
        let d = self.spec.d_model;

        let mut patches = Vec::with_capacity(grid.cells() * 3 * p * p);
        for pr in 0..grid.rows {
            for pc in 0..grid.cols {
                for c in 0..3 {
                    for dy in 0..p {
                        let row = c * s * s + (pr * p + dy) * s + pc * p;
                        patches.extend_from_slice(&pixels[row..row + p]);
                    }
                }
            }
        }
        let tokens = self.patch_embed.forward(&patches);
        let mut seq = Vec::with_capacity((1 + grid.cells()) * d);
        seq.extend_from_slice(&self.cls_token);
        seq.extend_from_slice(&tokens);
        for (x, pos) in seq.iter_mut().zip(&self.positions) {
            *x += pos;
        }
        Ok(seq)
    }

    fn run_blocks(&self, mut seq: Vec<f32>, layers: std::ops::Range<usize>) -> (Vec<f32>, Vec<f32>) {
        let mut last_attn = Vec::new();
        for block in &self.blocks[layers] {
            let (next, attn) = block.forward(&seq, self.spec.d_model, self.heads);
            seq = next;
            last_attn = attn;
        }
        (seq, last_attn)
    }

    fn head_output(&self, seq: &[f32]) -> Result<UnitVector> {
        let cls = &seq[..self.spec.d_model];
        let projected = self.projection.forward(&self.final_norm.forward(cls));
        l2_normalize(&projected).map_err(|e| Error::Backend {
            model: self.id.clone(),
            detail: e.to_string(),
        })
    }

    fn check_sequence(&self, sequence: &Tensor) -> Result<()> {
        let want = [1 + self.spec.patches(), self.spec.d_model];
        if sequence.shape() != want {
            return Err(Error::argument(format!(
                "{} suffix expects a {want:?} sequence, got {:?}",
                self.id,
                sequence.shape()
            )));
        }
        sequence.ensure_finite()
    }
}

impl SplitEncoder for ReferenceEncoder {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn spec(&self) -> &SplitEncoderSpec {
        &self.spec
    }

    fn encode_prefix(&self, input: &Tensor) -> Result<TokenGrid> {
        let seq = self.embed(input)?;
        let (seq, _) = self.run_blocks(seq, 0..self.spec.split_layer);
        let d = self.spec.d_model;
        TokenGrid::new(
            self.spec.grid(),
            d,
            seq[d..].to_vec(),
            seq[..d].to_vec(),
            self.spec.split_layer,
        )
    }

    fn encode_suffix(&self, sequence: &Tensor) -> Result<UnitVector> {
        self.check_sequence(sequence)?;
        let (seq, _) = self.run_blocks(
            sequence.as_f32()?.to_vec(),
            self.spec.split_layer..self.spec.layers,
        );
        self.head_output(&seq)
    }

    fn encode_image(&self, input: &Tensor) -> Result<UnitVector> {
        let seq = self.embed(input)?;
        let (seq, _) = self.run_blocks(seq, 0..self.spec.layers);
        self.head_output(&seq)
    }
}

impl AttentionSource for ReferenceEncoder {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn input_spec(&self) -> &EncoderInputSpec {
        &self.spec.input
    }

    fn cls_attention(&self, input: &Tensor) -> Result<MultiHeadClsAttention> {
        let seq = self.embed(input)?;
        let (_, attn) = self.run_blocks(seq, 0..self.spec.layers);
        let n = 1 + self.spec.patches();
        let mut values = Vec::with_capacity(self.heads * (n - 1));
        for h in 0..self.heads {
            // query row of the class token, key columns of the patches
            let row = &attn[h * n * n..h * n * n + n];
            values.extend_from_slice(&row[1..]);
        }
        MultiHeadClsAttention::new(self.heads, self.spec.grid(), values)
    }
}
