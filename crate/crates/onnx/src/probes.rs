//! Verification records written next to exported graphs.
//!
//! `probes.json` lists probe inputs (`[3,S,S]` ABST) and the embedding the
//! unsplit source model produced for each (`[d]` ABST), recorded at export
//! time. Loading a backend and replaying the probes bounds the drift between
//! the exported split graphs and the original model.

use std::fs;
use std::path::Path;

use abs_core::backend::SplitEncoder;
use abs_core::numeric::l2_normalize;
use abs_core::selftest::Check;
use abs_core::{read_tensor, write_tensor, Error, Result, Tensor};
use serde::{Deserialize, Serialize};

pub const PROBES_FILE: &str = "probes.json";
pub const PROBE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub input: String,
    pub embedding: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub probes: Vec<Probe>,
}

/// Replays `probes.json` from `dir` through `suffix ∘ prefix`; `None` when
/// the directory has no record.
pub fn check_recorded_probes(encoder: &dyn SplitEncoder, dir: &Path) -> Result<Option<Check>> {
    let path = dir.join(PROBES_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let record: ProbeRecord =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut worst = 0f64;
    for probe in &record.probes {
        let mut input = read_tensor(dir.join(&probe.input))?;
        if input.rank() == 4 && input.shape()[0] == 1 {
            let shape = input.shape()[1..].to_vec();
            input = input.reshape(shape)?;
        }
        let recorded = l2_normalize(read_tensor(dir.join(&probe.embedding))?.as_f32()?)?;
        let grid = encoder.encode_prefix(&input)?;
        let seq = abs_core::feat_select::assemble_crop_sequence(grid.cls(), &grid.tokens_tensor())?;
        let ours = encoder.encode_suffix(&seq)?;
        if ours.dim() != recorded.dim() {
            return Err(Error::Config(format!(
                "probe {} records a {}-dim embedding, the encoder produces {}",
                probe.embedding,
                recorded.dim(),
                ours.dim()
            )));
        }
        for (a, b) in ours.as_slice().iter().zip(recorded.as_slice()) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    Ok(Some(Check {
        name: "recorded probes".into(),
        passed: worst <= PROBE_TOLERANCE,
        detail: format!(
            "{} probes, max |split - recorded unsplit| = {worst:.3e}",
            record.probes.len()
        ),
    }))
}

/// Records `count` random probes and `encoder`'s unsplit embeddings into
/// `dir`, as an exporter would next to its graphs.
pub fn write_probes(encoder: &dyn SplitEncoder, dir: &Path, count: usize, seed: u64) -> Result<ProbeRecord> {
    let mut probes = Vec::with_capacity(count);
    for (i, input) in abs_core::selftest::random_inputs(encoder, count, seed).into_iter().enumerate() {
        let embedding = encoder.encode_image(&input)?;
        let probe = Probe {
            input: format!("probe_{i:02}_input.abst"),
            embedding: format!("probe_{i:02}_embedding.abst"),
        };
        write_tensor(&input, dir.join(&probe.input))?;
        let e = Tensor::from_f32(vec![embedding.dim()], embedding.into_inner())?;
        write_tensor(&e, dir.join(&probe.embedding))?;
        probes.push(probe);
    }
    let record = ProbeRecord { probes };
    let path = dir.join(PROBES_FILE);
    fs::write(&path, serde_json::to_string_pretty(&record)? + "\n").map_err(|e| Error::Io { path, source: e })?;
    Ok(record)
}
