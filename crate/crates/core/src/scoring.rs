//! Soft-matched class scores.
//!
//! For every crop embedding the cosine similarity to all `T` catalog rows is
//! computed, a softmax over that whole row gives per-description weights, and
//! each class collects `Σ_crops Σ_{descriptions of the class} weight · similarity`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::EmbeddingSet;
use crate::catalog::DescriptionCatalog;
use crate::error::{Error, Result};
use crate::numeric::{dot, softmax, softmax_f64, UnitVector};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f32 = 0.01;

/// Cosine similarity of `f` to every catalog row.
pub fn similarity_row(f: &UnitVector, catalog: &DescriptionCatalog) -> Result<Vec<f32>> {
    Ok(similarity_row_f64(f, catalog)?
        .into_iter()
        .map(|s| s as f32)
        .collect())
}

fn similarity_row_f64(f: &UnitVector, catalog: &DescriptionCatalog) -> Result<Vec<f64>> {
    let d = catalog.dim();
    if f.dim() != d {
        return Err(Error::argument(format!(
            "embedding dim {} does not match catalog dim {d}",
            f.dim()
        )));
    }
    Ok(catalog
        .embeddings()
        .chunks_exact(d)
        .map(|row| dot(f.as_slice(), row))
        .collect())
}

/// Softmax of one similarity row over all descriptions of all classes.
pub fn description_weights(sim_row: &[f32], tau: f32) -> Result<Vec<f32>> {
    softmax(sim_row, tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    /// `[crops, T]`
    pub similarities: Tensor,
    /// `[crops, T]`, each row a probability vector.
    pub weights: Tensor,
    pub scores: Vec<f64>,
    pub predicted: usize,
    /// Best score minus runner-up.
    pub margin: f64,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn top_two_margin(scores: &[f64], best: usize) -> f64 {
    let runner_up = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    scores[best] - runner_up
}

struct CropTerms {
    sims: Vec<f64>,
    weights: Vec<f64>,
    class_mass: Vec<f64>,
}

pub fn aggregate_scores(set: &EmbeddingSet, catalog: &DescriptionCatalog, tau: f32) -> Result<ScoreTable> {
    if set.is_empty() {
        return Err(Error::argument("cannot score an empty embedding set"));
    }
    let k = catalog.num_classes();
    if k < 2 {
        return Err(Error::argument(format!("need at least 2 classes, catalog has {k}")));
    }
    let classes = catalog.class_of_row();

    // Rows are independent; the reduction below runs in crop order so the
    // result does not depend on scheduling.
    let terms: Vec<CropTerms> = set
        .rows()
        .par_iter()
        .map(|f| {
            let sims = similarity_row_f64(f, catalog)?;
            let weights = softmax_f64(&sims, tau as f64)?;
            let mut class_mass = vec![0f64; k];
            for ((&s, &w), &c) in sims.iter().zip(&weights).zip(classes) {
                class_mass[c] += w * s;
            }
            Ok(CropTerms {
                sims,
                weights,
                class_mass,
            })
        })
        .collect::<Result<_>>()?;

    let mut scores = vec![0f64; k];
    for t in &terms {
        for (s, m) in scores.iter_mut().zip(&t.class_mass) {
            *s += m;
        }
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invariant(format!("class score {bad} is not finite")));
    }
    let predicted = argmax(&scores);
    let margin = top_two_margin(&scores, predicted);

    let shape = vec![terms.len(), catalog.rows()];
    let similarities = Tensor::from_f32(
        shape.clone(),
        terms.iter().flat_map(|t| t.sims.iter().map(|&v| v as f32)).collect(),
    )?;
    let weights = Tensor::from_f32(
        shape,
        terms.iter().flat_map(|t| t.weights.iter().map(|&v| v as f32)).collect(),
    )?;
    Ok(ScoreTable {
        similarities,
        weights,
        scores,
        predicted,
        margin,
    })
}

/// Plain cosine score of one image embedding against one embedding per class.
pub fn baseline_clip_score(f: &UnitVector, class_embeddings: &[UnitVector]) -> Result<Vec<f64>> {
    class_embeddings
        .iter()
        .map(|c| {
            if c.dim() != f.dim() {
                return Err(Error::argument(format!(
                    "class embedding dim {} does not match image dim {}",
                    c.dim(),
                    f.dim()
                )));
            }
            Ok(f.dot(c.as_slice()))
        })
        .collect()
}

/// Compact per-image score summary for result files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub scores: Vec<f64>,
    pub predicted: usize,
    pub margin: f64,
}

impl From<&ScoreTable> for ScoreSummary {
    fn from(t: &ScoreTable) -> Self {
        Self {
            scores: t.scores.clone(),
            predicted: t.predicted,
            margin: t.margin,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::l2_normalize;

    fn unit(v: &[f32]) -> UnitVector {
        l2_normalize(v).unwrap()
    }

    fn two_class() -> DescriptionCatalog {
        DescriptionCatalog::from_classes(
            "t",
            vec![
                ("a".into(), vec![unit(&[1.0, 0.0])]),
                ("b".into(), vec![unit(&[0.0, 1.0])]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn similarity_trivia() {
        let c = two_class();
        let s = similarity_row(&unit(&[1.0, 0.0]), &c).unwrap();
        assert!((s[0] - 1.0).abs() <= 1e-6);
        assert!(s[1].abs() <= 1e-6);
        assert!(similarity_row(&unit(&[1.0, 0.0, 0.0]), &c).is_err());
    }

    #[test]
    fn similarity_matches_loop() {
        let rows: Vec<UnitVector> = (0..5)
            .map(|i| unit(&[(i as f32).sin(), (i as f32 * 1.7).cos(), 0.3 + i as f32]))
            .collect();
        let c = DescriptionCatalog::from_classes(
            "t",
            vec![("x".into(), rows[..2].to_vec()), ("y".into(), rows[2..].to_vec())],
        )
        .unwrap();
        let f = unit(&[0.2, -0.7, 0.4]);
        let s = similarity_row(&f, &c).unwrap();
        for (t, r) in rows.iter().enumerate() {
            let mut acc = 0.0f32;
            for i in 0..3 {
                acc += f.as_slice()[i] * r.as_slice()[i];
            }
            assert!((s[t] - acc).abs() <= 1e-6);
        }
    }

    #[test]
    fn uniform_weights_for_equal_sims() {
        let w = description_weights(&[0.3; 6], 0.01).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-7));
    }

    #[test]
    fn sharp_temperature_concentrates() {
        let row = [0.1f32, 0.35, 0.12, 0.1, 0.15];
        let tau = (0.35 - 0.1) / 20.0;
        let w = description_weights(&row, tau).unwrap();
        assert!(w[1] > 0.99, "{w:?}");
    }

    #[test]
    fn closed_form_single_crop() {
        let c = two_class();
        let set: EmbeddingSet = [unit(&[1.0, 0.0])].into_iter().collect();
        let t = aggregate_scores(&set, &c, 1.0).unwrap();
        let sigma = 1f64.exp() / (1f64.exp() + 1.0);
        assert!((t.scores[0] - sigma).abs() < 1e-6);
        assert!(t.scores[1].abs() < 1e-6);
        assert_eq!(t.predicted, 0);
        assert!((t.margin - sigma).abs() < 1e-6);
    }

    #[test]
    fn identical_crops_add_up() {
        let c = DescriptionCatalog::from_classes(
            "t",
            vec![
                ("a".into(), vec![unit(&[1.0, 0.2, 0.0]), unit(&[0.5, 0.5, 0.5])]),
                ("b".into(), vec![unit(&[0.0, 1.0, 0.1])]),
                ("c".into(), vec![unit(&[0.1, 0.1, 1.0])]),
            ],
        )
        .unwrap();
        let f = unit(&[0.4, 0.5, 0.2]);
        let one = aggregate_scores(&[f.clone()].into_iter().collect(), &c, 0.01).unwrap();
        let many = aggregate_scores(&vec![f; 8].into_iter().collect(), &c, 0.01).unwrap();
        for (a, b) in one.scores.iter().zip(&many.scores) {
            assert!((8.0 * a - b).abs() < 1e-9);
        }
        assert_eq!(one.predicted, many.predicted);
    }

    #[test]
    fn rejects_empty_set() {
        let c = two_class();
        assert!(matches!(
            aggregate_scores(&EmbeddingSet::new(), &c, 0.01),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn baseline_scores() {
        let classes = [unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0]), unit(&[0.0, 0.0, 1.0])];
        let s = baseline_clip_score(&classes[0], &classes).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-7);
        assert_eq!(argmax(&s), 0);
        let mid = unit(&[1.0, 1.0, 0.0]);
        let s = baseline_clip_score(&mid, &classes).unwrap();
        assert_eq!(s[0], s[1]);
        assert_eq!(argmax(&s), 0);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.5]), 0);
    }
}
