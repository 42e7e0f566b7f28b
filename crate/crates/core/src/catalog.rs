//! Per-class description embeddings.
//!
//! On disk a catalog is a pair of files sharing a stem:
//!
//! * `<stem>.json`: source model id, embedding dim and the ordered class list,
//!   each entry carrying its name, description count, row offset and
//!   (optionally) the description texts;
//! * `<stem>.abst`: a `[T, d]` f32 tensor of unit-norm rows, class blocks in
//!   the order of the JSON list.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, UnitVector, UNIT_NORM_TOLERANCE};
use crate::tensor::{read_tensor, write_tensor, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogClass {
    pub name: String,
    pub count: usize,
    pub offset: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub descriptions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogManifest {
    pub source_model: String,
    pub embed_dim: usize,
    pub classes: Vec<CatalogClass>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionCatalog {
    manifest: CatalogManifest,
    /// `[T, d]`, row-major.
    embeddings: Vec<f32>,
    class_of_row: Vec<usize>,
}

impl DescriptionCatalog {
    /// Builds a catalog from per-class rows. Rows must already be unit norm.
    pub fn from_classes(
        source_model: impl Into<String>,
        classes: Vec<(String, Vec<UnitVector>)>,
    ) -> Result<Self> {
        let embed_dim = classes
            .iter()
            .flat_map(|(_, rows)| rows.first())
            .map(UnitVector::dim)
            .next()
            .ok_or_else(|| Error::Catalog("catalog has no rows".into()))?;
        let mut manifest = CatalogManifest {
            source_model: source_model.into(),
            embed_dim,
            classes: Vec::with_capacity(classes.len()),
        };
        let mut embeddings = Vec::new();
        let mut offset = 0;
        for (name, rows) in classes {
            for r in &rows {
                embeddings.extend_from_slice(r.as_slice());
            }
            manifest.classes.push(CatalogClass {
                name,
                count: rows.len(),
                offset,
                descriptions: Vec::new(),
            });
            offset += rows.len();
        }
        Self::from_parts(manifest, embeddings)
    }

    pub fn from_parts(manifest: CatalogManifest, embeddings: Vec<f32>) -> Result<Self> {
        let d = manifest.embed_dim;
        if d == 0 {
            return Err(Error::Catalog("embedding dim must be positive".into()));
        }
        if manifest.classes.len() < 2 {
            return Err(Error::Catalog(format!(
                "classification needs at least 2 classes, catalog has {}",
                manifest.classes.len()
            )));
        }
        let mut seen = HashSet::new();
        let mut class_of_row = Vec::new();
        for (k, c) in manifest.classes.iter().enumerate() {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Catalog(format!("duplicate class name `{}`", c.name)));
            }
            if c.count == 0 {
                return Err(Error::Catalog(format!("class `{}` has no descriptions", c.name)));
            }
            if c.offset != class_of_row.len() {
                return Err(Error::Catalog(format!(
                    "class `{}` starts at row {}, expected {}",
                    c.name,
                    c.offset,
                    class_of_row.len()
                )));
            }
            if !c.descriptions.is_empty() && c.descriptions.len() != c.count {
                return Err(Error::Catalog(format!(
                    "class `{}` lists {} texts for {} rows",
                    c.name,
                    c.descriptions.len(),
                    c.count
                )));
            }
            class_of_row.extend(std::iter::repeat_n(k, c.count));
        }
        if embeddings.len() != class_of_row.len() * d {
            return Err(Error::Catalog(format!(
                "catalog lists {} rows of dim {d} but embeddings hold {} values",
                class_of_row.len(),
                embeddings.len()
            )));
        }
        for (t, row) in embeddings.chunks_exact(d).enumerate() {
            let norm = dot(row, row).sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
                return Err(Error::Catalog(format!(
                    "row {t} (class `{}`) has norm {norm}",
                    manifest.classes[class_of_row[t]].name
                )));
            }
        }
        Ok(Self {
            manifest,
            embeddings,
            class_of_row,
        })
    }

    /// Loads `<stem>.json` and `<stem>.abst`; `path` may name either file or the stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (json, abst) = pair_paths(path.as_ref());
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: CatalogManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Catalog(format!("{}: {e}", json.display())))?;
        let tensor = read_tensor(&abst)?;
        if tensor.rank() != 2 || tensor.shape()[1] != manifest.embed_dim {
            return Err(Error::Catalog(format!(
                "{} has shape {:?}, expected [T, {}]",
                abst.display(),
                tensor.shape(),
                manifest.embed_dim
            )));
        }
        Self::from_parts(manifest, tensor.into_f32()?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (json, abst) = pair_paths(path.as_ref());
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
        let t = Tensor::from_f32(vec![self.rows(), self.dim()], self.embeddings.clone())?;
        write_tensor(&t, abst)
    }

    pub fn manifest(&self) -> &CatalogManifest {
        &self.manifest
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.manifest.classes.iter().map(|c| c.name.as_str())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.manifest.classes.iter().position(|c| c.name == name)
    }

    pub fn class_name(&self, k: usize) -> &str {
        &self.manifest.classes[k].name
    }

    /// Total description count T.
    pub fn rows(&self) -> usize {
        self.class_of_row.len()
    }

    pub fn dim(&self) -> usize {
        self.manifest.embed_dim
    }

    pub fn row(&self, t: usize) -> &[f32] {
        let d = self.dim();
        &self.embeddings[t * d..(t + 1) * d]
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn class_of_row(&self) -> &[usize] {
        &self.class_of_row
    }

    /// Mean of each class's rows, renormalized. Used for the plain cosine baseline.
    pub fn class_centroids(&self) -> Result<Vec<UnitVector>> {
        let d = self.dim();
        self.manifest
            .classes
            .iter()
            .map(|c| {
                let mut acc = vec![0f64; d];
                for t in c.offset..c.offset + c.count {
                    for (a, &v) in acc.iter_mut().zip(self.row(t)) {
                        *a += v as f64;
                    }
                }
                let v: Vec<f32> = acc.iter().map(|&a| a as f32).collect();
                crate::numeric::l2_normalize(&v)
            })
            .collect()
    }
}

fn pair_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("abst") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("json"), with("abst"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> UnitVector {
        crate::numeric::l2_normalize(v).unwrap()
    }

    fn small() -> DescriptionCatalog {
        DescriptionCatalog::from_classes(
            "test",
            vec![
                ("cat".into(), vec![unit(&[1.0, 0.0, 0.0]), unit(&[1.0, 1.0, 0.0])]),
                ("dog".into(), vec![unit(&[0.0, 0.0, 1.0])]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn rows_and_offsets() {
        let c = small();
        assert_eq!(c.rows(), 3);
        assert_eq!(c.class_of_row(), &[0, 0, 1]);
        assert_eq!(c.manifest().classes[1].offset, 2);
        assert_eq!(c.class_index("dog"), Some(1));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let c = small();
        c.save(dir.path().join("catalog")).unwrap();
        assert!(dir.path().join("catalog.json").exists());
        assert!(dir.path().join("catalog.abst").exists());
        assert_eq!(DescriptionCatalog::load(dir.path().join("catalog.json")).unwrap(), c);
        assert_eq!(DescriptionCatalog::load(dir.path().join("catalog")).unwrap(), c);
    }

    #[test]
    fn reads_handwritten_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let json = r#"{
            "source_model": "clip-vit-b32",
            "embed_dim": 2,
            "classes": [
                {"name": "banded", "count": 1, "offset": 0, "descriptions": ["stripes"]},
                {"name": "dotted", "count": 2, "offset": 1, "descriptions": ["dots", "spots"]}
            ]
        }"#;
        fs::write(dir.path().join("catalog.json"), json).unwrap();
        let t = Tensor::from_f32(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap();
        write_tensor(&t, dir.path().join("catalog.abst")).unwrap();
        let c = DescriptionCatalog::load(dir.path().join("catalog.json")).unwrap();
        assert_eq!(c.class_of_row(), &[0, 1, 1]);
        assert_eq!(c.manifest().classes[1].descriptions[1], "spots");
    }

    #[test]
    fn rejects_non_unit_rows() {
        let manifest = small().manifest().clone();
        let mut emb = small().embeddings().to_vec();
        emb[0] = 2.0;
        assert!(matches!(
            DescriptionCatalog::from_parts(manifest, emb),
            Err(Error::Catalog(_))
        ));
    }

    #[test]
    fn rejects_structural_problems() {
        let good = small();
        let mut m = good.manifest().clone();
        m.classes[1].name = "cat".into();
        assert!(DescriptionCatalog::from_parts(m, good.embeddings().to_vec()).is_err());

        let mut m = good.manifest().clone();
        m.classes[1].offset = 1;
        assert!(DescriptionCatalog::from_parts(m, good.embeddings().to_vec()).is_err());

        let mut m = good.manifest().clone();
        m.classes.truncate(1);
        m.classes[0].count = 3;
        assert!(DescriptionCatalog::from_parts(m, good.embeddings().to_vec()).is_err());

        let mut m = good.manifest().clone();
        m.classes[1].descriptions = vec!["a".into(), "b".into()];
        assert!(DescriptionCatalog::from_parts(m, good.embeddings().to_vec()).is_err());
    }

    #[test]
    fn centroids_are_unit() {
        for c in small().class_centroids().unwrap() {
            assert!((dot(c.as_slice(), c.as_slice()) - 1.0).abs() < 1e-6);
        }
    }
}
