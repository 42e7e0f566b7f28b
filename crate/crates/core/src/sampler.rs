//! Attention-guided anchor sampling.
//!
//! Per-head class-token attention is averaged into a single grid, the `k`
//! strongest patches are kept, and crop anchors are drawn from a softmax over
//! their attention values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::softmax_f64;
use crate::rng::SampleRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub rows: usize,
    pub cols: usize,
}

impl GridDims {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn square(side: usize) -> Self {
        Self::new(side, side)
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchIndex {
    pub row: usize,
    pub col: usize,
}

impl PatchIndex {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn flat(&self, grid: GridDims) -> usize {
        self.row * grid.cols + self.col
    }
}

/// Class-token attention of every head laid out on the patch grid, `[heads, rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadClsAttention {
    heads: usize,
    grid: GridDims,
    values: Vec<f32>,
}

impl MultiHeadClsAttention {
    pub fn new(heads: usize, grid: GridDims, values: Vec<f32>) -> Result<Self> {
        if heads == 0 || grid.cells() == 0 {
            return Err(Error::argument(format!(
                "attention needs at least one head and one patch, got {heads} heads on {grid:?}"
            )));
        }
        if values.len() != heads * grid.cells() {
            return Err(Error::argument(format!(
                "attention holds {} values, expected {heads}x{}x{}",
                values.len(),
                grid.rows,
                grid.cols
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invariant(format!(
                "attention values must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self {
            heads,
            grid,
            values,
        })
    }

    /// Accepts `[heads, rows, cols]`, or `[rows, cols]` as a single head.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (heads, grid) = match *t.shape() {
            [r, c] => (1, GridDims::new(r, c)),
            [h, r, c] => (h, GridDims::new(r, c)),
            _ => {
                return Err(Error::argument(format!(
                    "attention tensor must be [h, rows, cols] or [rows, cols], got {:?}",
                    t.shape()
                )))
            }
        };
        Self::new(heads, grid, t.as_f32()?.to_vec())
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn grid(&self) -> GridDims {
        self.grid
    }

    pub fn head(&self, i: usize) -> &[f32] {
        let n = self.grid.cells();
        &self.values[i * n..(i + 1) * n]
    }
}

/// Head-averaged attention over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrid {
    grid: GridDims,
    values: Vec<f32>,
}

impl AttentionGrid {
    pub fn new(grid: GridDims, values: Vec<f32>) -> Result<Self> {
        // one head is exactly an averaged grid
        let single = MultiHeadClsAttention::new(1, grid, values)?;
        Ok(Self {
            grid,
            values: single.values,
        })
    }

    pub fn grid(&self) -> GridDims {
        self.grid
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, p: PatchIndex) -> f32 {
        self.values[p.flat(self.grid)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSample {
    pub patch: PatchIndex,
    /// Head-averaged attention at this patch.
    pub value: f32,
    /// Selection probability; zero until [`patch_probabilities`] fills it.
    pub probability: f32,
}

pub fn average_heads(attn: &MultiHeadClsAttention) -> AttentionGrid {
    let n = attn.grid.cells();
    let mut acc = vec![0f64; n];
    for h in 0..attn.heads {
        for (a, &v) in acc.iter_mut().zip(attn.head(h)) {
            *a += v as f64;
        }
    }
    let scale = 1.0 / attn.heads as f64;
    AttentionGrid {
        grid: attn.grid,
        values: acc.into_iter().map(|a| (a * scale) as f32).collect(),
    }
}

/// The `k` highest-attention patches, strongest first; equal values keep
/// row-major order.
pub fn select_top_k(grid: &AttentionGrid, k: usize) -> Result<Vec<PatchSample>> {
    let n = grid.grid.cells();
    if k == 0 || k > n {
        return Err(Error::argument(format!(
            "top-k needs 1 <= k <= {n}, got {k}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // values are finite, so total_cmp agrees with numeric order
    order.sort_by(|&a, &b| {
        grid.values[b]
            .total_cmp(&grid.values[a])
            .then(a.cmp(&b))
    });
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| PatchSample {
            patch: PatchIndex::new(i / grid.grid.cols, i % grid.grid.cols),
            value: grid.values[i],
            probability: 0.0,
        })
        .collect())
}

/// Fills `probability` with a softmax over the attention values.
pub fn patch_probabilities(topk: &[PatchSample], temperature: f32) -> Result<Vec<PatchSample>> {
    let values: Vec<f64> = topk.iter().map(|p| p.value as f64).collect();
    let probs = softmax_f64(&values, temperature as f64)?;
    Ok(topk
        .iter()
        .zip(probs)
        .map(|(p, prob)| PatchSample {
            probability: prob as f32,
            ..*p
        })
        .collect())
}

/// Draws `n` patches with replacement by inverse CDF over the list order.
///
/// Each draw consumes exactly one `uniform()` value from `rng`.
pub fn sample_patches(
    candidates: &[PatchSample],
    n: usize,
    rng: &mut SampleRng,
) -> Result<Vec<PatchSample>> {
    if candidates.is_empty() {
        return Err(Error::argument("cannot sample from an empty patch list"));
    }
    if n == 0 {
        return Err(Error::argument("sample count must be at least 1"));
    }
    if let Some(p) = candidates
        .iter()
        .find(|p| !(p.probability > 0.0 && p.probability <= 1.0))
    {
        return Err(Error::argument(format!(
            "patch {:?} has probability {} outside (0, 1]",
            p.patch, p.probability
        )));
    }

    let mut cdf = Vec::with_capacity(candidates.len());
    let mut total = 0f64;
    for p in candidates {
        total += p.probability as f64;
        cdf.push(total);
    }

    Ok((0..n)
        .map(|_| {
            let u = rng.uniform() * total;
            let i = cdf.partition_point(|&c| c <= u).min(candidates.len() - 1);
            candidates[i]
        })
        .collect())
}

/// Averages heads, keeps the top `k` and draws `n` anchors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorSampler {
    pub k: usize,
    pub n: usize,
    pub temperature: f32,
}

impl AnchorSampler {
    pub fn sample(
        &self,
        attn: &MultiHeadClsAttention,
        rng: &mut SampleRng,
    ) -> Result<(AttentionGrid, Vec<PatchSample>)> {
        let grid = average_heads(attn);
        // grids smaller than k contribute every patch
        let k = self.k.min(grid.grid.cells());
        let mut top = select_top_k(&grid, k)?;
        // patches with zero attention are never anchors unless nothing else is left
        if top[0].value > 0.0 {
            top.retain(|p| p.value > 0.0);
        }
        let weighted = patch_probabilities(&top, self.temperature)?;
        let anchors = sample_patches(&weighted, self.n, rng)?;
        Ok((grid, anchors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_attention(seed: u64, heads: usize, grid: GridDims) -> MultiHeadClsAttention {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values = (0..heads * grid.cells())
            .map(|_| rng.random_range(0.0..0.05))
            .collect();
        MultiHeadClsAttention::new(heads, grid, values).unwrap()
    }

    #[test]
    fn single_head_average_is_identity() {
        let a = random_attention(1, 1, GridDims::square(5));
        assert_eq!(average_heads(&a).values(), a.head(0));
    }

    #[test]
    fn zeros_and_ones_average_to_half() {
        let g = GridDims::new(2, 3);
        let mut values = vec![0.0; 6];
        values.extend(vec![1.0; 6]);
        let a = MultiHeadClsAttention::new(2, g, values).unwrap();
        assert!(average_heads(&a).values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn six_head_average_matches_loop() {
        let g = GridDims::square(14);
        let a = random_attention(2, 6, g);
        let avg = average_heads(&a);
        for r in 0..14 {
            for c in 0..14 {
                let mut s = 0.0f64;
                for h in 0..6 {
                    s += a.head(h)[r * 14 + c] as f64;
                }
                let want = s / 6.0;
                assert!((avg.get(PatchIndex::new(r, c)) as f64 - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn rejects_negative_attention() {
        assert!(MultiHeadClsAttention::new(1, GridDims::square(1), vec![-0.1]).is_err());
        assert!(MultiHeadClsAttention::new(1, GridDims::square(2), vec![0.1]).is_err());
        assert!(MultiHeadClsAttention::new(0, GridDims::square(1), vec![]).is_err());
    }

    #[test]
    fn ties_break_row_major() {
        let grid = AttentionGrid::new(GridDims::square(4), vec![0.5; 16]).unwrap();
        let top = select_top_k(&grid, 3).unwrap();
        let idx: Vec<_> = top.iter().map(|p| p.patch).collect();
        assert_eq!(
            idx,
            vec![PatchIndex::new(0, 0), PatchIndex::new(0, 1), PatchIndex::new(0, 2)]
        );
    }

    #[test]
    fn single_max_found() {
        let mut v = vec![0.1; 14 * 14];
        v[5 * 14 + 7] = 0.9;
        let grid = AttentionGrid::new(GridDims::square(14), v).unwrap();
        let top = select_top_k(&grid, 1).unwrap();
        assert_eq!(top[0].patch, PatchIndex::new(5, 7));
    }

    #[test]
    fn top_k_matches_full_sort() {
        let a = random_attention(3, 1, GridDims::square(14));
        let grid = average_heads(&a);
        let top = select_top_k(&grid, 20).unwrap();
        let mut all: Vec<(f32, usize)> = grid
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, i))
            .collect();
        // stable sort keeps ascending index among equal values
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for (p, (v, i)) in top.iter().zip(all) {
            assert_eq!(p.patch.flat(grid.grid()), i);
            assert_eq!(p.value, v);
        }
    }

    #[test]
    fn top_k_range_checked() {
        let grid = AttentionGrid::new(GridDims::square(2), vec![0.1; 4]).unwrap();
        assert!(matches!(select_top_k(&grid, 0), Err(Error::Argument(_))));
        assert!(matches!(select_top_k(&grid, 5), Err(Error::Argument(_))));
        assert_eq!(select_top_k(&grid, 4).unwrap().len(), 4);
    }

    #[test]
    fn probabilities_trivial_cases() {
        let one = [PatchSample {
            patch: PatchIndex::new(0, 0),
            value: 0.3,
            probability: 0.0,
        }];
        assert_eq!(patch_probabilities(&one, 1.0).unwrap()[0].probability, 1.0);
        let two = [one[0], one[0]];
        let p = patch_probabilities(&two, 1.0).unwrap();
        assert_eq!((p[0].probability, p[1].probability), (0.5, 0.5));
        assert!(patch_probabilities(&[], 1.0).is_err());
    }

    #[test]
    fn probabilities_match_wide_softmax() {
        let a = random_attention(4, 6, GridDims::square(14));
        let top = select_top_k(&average_heads(&a), 20).unwrap();
        let p = patch_probabilities(&top, 1.0).unwrap();
        // oracle: exp(v_i) / sum exp(v_j) without max subtraction
        let denom: f64 = top.iter().map(|t| (t.value as f64).exp()).sum();
        for (s, t) in p.iter().zip(&top) {
            let want = (t.value as f64).exp() / denom;
            assert!((s.probability as f64 - want).abs() <= 1e-7);
        }
        let sum: f64 = p.iter().map(|s| s.probability as f64).sum();
        assert!((sum - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn degenerate_distribution_repeats() {
        let only = [PatchSample {
            patch: PatchIndex::new(2, 3),
            value: 1.0,
            probability: 1.0,
        }];
        let mut rng = SampleRng::new(9);
        let s = sample_patches(&only, 60, &mut rng).unwrap();
        assert_eq!(s.len(), 60);
        assert!(s.iter().all(|p| p.patch == PatchIndex::new(2, 3)));
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = random_attention(5, 3, GridDims::square(14));
        let sampler = AnchorSampler {
            k: 20,
            n: 60,
            temperature: 1.0,
        };
        let (_, s1) = sampler.sample(&a, &mut SampleRng::new(11)).unwrap();
        let (_, s2) = sampler.sample(&a, &mut SampleRng::new(11)).unwrap();
        assert_eq!(s1, s2);
        let (_, s3) = sampler.sample(&a, &mut SampleRng::new(12)).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn one_hot_attention_pins_every_anchor() {
        let g = GridDims::square(14);
        let mut v = vec![0.0; g.cells()];
        v[3 * 14 + 9] = 1.0;
        let a = MultiHeadClsAttention::new(1, g, v).unwrap();
        let sampler = AnchorSampler {
            k: 20,
            n: 60,
            temperature: 1.0,
        };
        let (_, s) = sampler.sample(&a, &mut SampleRng::new(1)).unwrap();
        assert!(s.iter().all(|p| p.patch == PatchIndex::new(3, 9)));
    }

    #[test]
    fn all_zero_attention_falls_back_to_top_k() {
        let a = MultiHeadClsAttention::new(1, GridDims::square(3), vec![0.0; 9]).unwrap();
        let sampler = AnchorSampler {
            k: 4,
            n: 50,
            temperature: 1.0,
        };
        let (_, s) = sampler.sample(&a, &mut SampleRng::new(1)).unwrap();
        assert!(s.iter().all(|p| p.patch.flat(GridDims::square(3)) < 4));
    }

    #[test]
    fn sampling_rejects_bad_input() {
        let bad = [PatchSample {
            patch: PatchIndex::new(0, 0),
            value: 1.0,
            probability: 0.0,
        }];
        let mut rng = SampleRng::new(0);
        assert!(sample_patches(&bad, 1, &mut rng).is_err());
        assert!(sample_patches(&[], 1, &mut rng).is_err());
    }

    #[test]
    fn inverse_cdf_boundaries() {
        let c = |row, probability| PatchSample {
            patch: PatchIndex::new(row, 0),
            value: 0.0,
            probability,
        };
        let list = [c(0, 0.5), c(1, 0.25), c(2, 0.25)];
        // replay the generator to know which bucket each draw should hit
        let mut probe = SampleRng::new(77);
        let us: Vec<f64> = (0..200).map(|_| probe.uniform()).collect();
        let got = sample_patches(&list, 200, &mut SampleRng::new(77)).unwrap();
        for (u, s) in us.iter().zip(got) {
            let want = if *u < 0.5 { 0 } else if *u < 0.75 { 1 } else { 2 };
            assert_eq!(s.patch.row, want, "u = {u}");
        }
    }

    proptest! {
        #[test]
        fn head_order_does_not_matter(seed in any::<u64>(), heads in 1usize..6) {
            let g = GridDims::new(3, 4);
            let a = random_attention(seed, heads, g);
            let mut reversed = Vec::new();
            for h in (0..heads).rev() {
                reversed.extend_from_slice(a.head(h));
            }
            let b = MultiHeadClsAttention::new(heads, g, reversed).unwrap();
            let (x, y) = (average_heads(&a), average_heads(&b));
            for (p, q) in x.values().iter().zip(y.values()) {
                prop_assert!((p - q).abs() <= 1e-7);
            }
        }

        #[test]
        fn full_top_k_is_sorted_permutation(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
            let a = random_attention(seed, 1, GridDims::new(rows, cols));
            let grid = average_heads(&a);
            let top = select_top_k(&grid, rows * cols).unwrap();
            let mut seen: Vec<usize> = top.iter().map(|p| p.patch.flat(grid.grid())).collect();
            prop_assert!(top.windows(2).all(|w| w[0].value >= w[1].value));
            seen.sort();
            prop_assert_eq!(seen, (0..rows * cols).collect::<Vec<_>>());
        }

        #[test]
        fn positive_scaling_keeps_order(seed in any::<u64>(), scale in 0.01f32..100.0) {
            let a = random_attention(seed, 1, GridDims::square(6));
            let grid = average_heads(&a);
            let scaled = AttentionGrid::new(
                grid.grid(),
                grid.values().iter().map(|v| v * scale).collect(),
            ).unwrap();
            let p: Vec<_> = select_top_k(&grid, 10).unwrap().iter().map(|s| s.patch).collect();
            let q: Vec<_> = select_top_k(&scaled, 10).unwrap().iter().map(|s| s.patch).collect();
            // distinct values keep their relative order under positive scaling
            let distinct = {
                let mut v = grid.values().to_vec();
                v.sort_by(f32::total_cmp);
                v.windows(2).all(|w| w[0] < w[1])
            };
            if distinct {
                prop_assert_eq!(p, q);
            }
        }

        #[test]
        fn samples_come_from_top_k(seed in any::<u64>(), k in 1usize..20, n in 1usize..100) {
            let a = random_attention(seed, 2, GridDims::square(5));
            let sampler = AnchorSampler { k, n, temperature: 1.0 };
            let grid = average_heads(&a);
            let top = select_top_k(&grid, k).unwrap();
            let (_, s) = sampler.sample(&a, &mut SampleRng::new(seed)).unwrap();
            prop_assert_eq!(s.len(), n);
            for p in s {
                prop_assert!(top.iter().any(|t| t.patch == p.patch));
            }
        }
    }
}
