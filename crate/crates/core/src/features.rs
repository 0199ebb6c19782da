//! Visual side information: grid features and concept embeddings, the
//! `SIMTFEAT1` file format, projection, and synthetic oracle concepts.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimtError};
use crate::tape::mat_mul;
use crate::vocab::RESERVED;

pub const FEATURE_MAGIC: &[u8; 9] = b"SIMTFEAT1";
pub const CONCEPT_SLOTS: usize = 72;
pub const CONCEPT_DIM: usize = 100;
pub const FILLED_SLOTS: usize = 36;
pub const GRID_REGIONS: usize = 64;
pub const GRID_DIM: usize = 2048;
const DISTRACTOR_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    Grid,
    Concepts,
}

impl FeatureKind {
    pub fn tag(self) -> u8 {
        match self {
            FeatureKind::Grid => 0,
            FeatureKind::Concepts => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(FeatureKind::Grid),
            1 => Some(FeatureKind::Concepts),
            _ => None,
        }
    }
}

/// Expected shape of every feature matrix a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGeometry {
    pub kind: FeatureKind,
    pub rows: usize,
    pub cols: usize,
}

impl FeatureGeometry {
    pub fn concepts() -> Self {
        FeatureGeometry {
            kind: FeatureKind::Concepts,
            rows: CONCEPT_SLOTS,
            cols: CONCEPT_DIM,
        }
    }

    pub fn grid(rows: usize, cols: usize) -> Self {
        FeatureGeometry {
            kind: FeatureKind::Grid,
            rows,
            cols,
        }
    }

    pub fn flat_len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub kind: FeatureKind,
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(kind: FeatureKind, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SimtError::Shape {
                op: "features",
                detail: format!("{} values for {rows}x{cols}", data.len()),
            });
        }
        if kind == FeatureKind::Concepts && (rows, cols) != (CONCEPT_SLOTS, CONCEPT_DIM) {
            return Err(SimtError::Shape {
                op: "features",
                detail: format!("concepts must be {CONCEPT_SLOTS}x{CONCEPT_DIM}, got {rows}x{cols}"),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(SimtError::NonFinite(format!("feature value {i} = {}", data[i])));
        }
        Ok(FeatureSet { kind, rows, cols, data })
    }

    pub fn zeros(geometry: FeatureGeometry) -> Self {
        FeatureSet {
            kind: geometry.kind,
            rows: geometry.rows,
            cols: geometry.cols,
            data: vec![0.0; geometry.flat_len()],
        }
    }

    pub fn geometry(&self) -> FeatureGeometry {
        FeatureGeometry {
            kind: self.kind,
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Row-major flattening.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn check(&self, expected: &FeatureGeometry) -> Result<()> {
        if self.geometry() != *expected {
            return Err(SimtError::Shape {
                op: "features",
                detail: format!("got {:?}, model expects {:?}", self.geometry(), expected),
            });
        }
        Ok(())
    }
}

/// Row-wise linear map without bias: `[rows, D] x [D, out]`.
pub fn project(features: &FeatureSet, weights: &[f64], out: usize) -> Result<Vec<f64>> {
    if weights.len() != features.cols * out {
        return Err(SimtError::Shape {
            op: "project",
            detail: format!("{} weights for {} -> {out}", weights.len(), features.cols),
        });
    }
    Ok(mat_mul(features.rows, features.cols, out, &features.data, weights))
}

pub fn features_to_bytes(kind: FeatureKind, rows: usize, cols: usize, sets: &[FeatureSet]) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(22 + sets.len() * rows * cols * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.push(kind.tag());
    for v in [sets.len(), rows, cols] {
        let v = u32::try_from(v).map_err(|_| SimtError::Contract(format!("{v} does not fit in u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in sets {
        if s.kind != kind || s.rows != rows || s.cols != cols {
            return Err(SimtError::Shape {
                op: "write_features",
                detail: format!("sample {:?} in a {kind:?} {rows}x{cols} file", s.geometry()),
            });
        }
        for x in &s.data {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_features(path: &Path, sets: &[FeatureSet]) -> Result<()> {
    let first = sets.first().ok_or_else(|| SimtError::Empty("feature list".into()))?;
    fs::write(path, features_to_bytes(first.kind, first.rows, first.cols, sets)?)?;
    Ok(())
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<Vec<FeatureSet>> {
    const HEADER: usize = 9 + 1 + 12;
    if bytes.len() < HEADER {
        return Err(SimtError::Parse {
            offset: bytes.len(),
            detail: format!("header needs {HEADER} bytes, file has {}", bytes.len()),
        });
    }
    if &bytes[..9] != FEATURE_MAGIC {
        return Err(SimtError::Parse {
            offset: 0,
            detail: "bad feature file magic".into(),
        });
    }
    let kind = FeatureKind::from_tag(bytes[9]).ok_or_else(|| SimtError::Parse {
        offset: 9,
        detail: format!("unknown variant tag {}", bytes[9]),
    })?;
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let (count, rows, cols) = (u32_at(10), u32_at(14), u32_at(18));
    let expected = HEADER + count * rows * cols * 4;
    if bytes.len() != expected {
        return Err(SimtError::Parse {
            offset: HEADER,
            detail: format!("expected {expected} bytes for {count} samples of {rows}x{cols}, found {}", bytes.len()),
        });
    }
    bytes[HEADER..]
        .chunks_exact((rows * cols * 4).max(1))
        .take(count)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            FeatureSet::new(kind, rows, cols, data)
        })
        .collect()
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureSet>> {
    features_from_bytes(&fs::read(path)?)
}

/// Word vectors indexed by target vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptTable {
    pub dim: usize,
    vectors: Vec<f64>,
}

impl ConceptTable {
    /// Random Gaussian vectors scaled to roughly unit norm.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let vectors = (0..vocab_size * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        ConceptTable { dim, vectors }
    }

    /// Parses word vectors in the common text format (a token followed by
    /// its floats on each line). Vocabulary entries without a vector get a
    /// random one.
    pub fn from_text(text: &str, words: &[String], dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut table = Self::random(words.len() + RESERVED.len(), dim, rng);
        let index: std::collections::HashMap<&str, usize> =
            words.iter().enumerate().map(|(i, w)| (w.as_str(), i + RESERVED.len())).collect();
        let mut offset = 0;
        for line in text.lines() {
            let mut parts = line.split_whitespace();
            if let Some(tok) = parts.next() {
                let values = parts
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| SimtError::Parse {
                        offset,
                        detail: format!("word vector for {tok:?}: {e}"),
                    })?;
                if values.len() != dim {
                    return Err(SimtError::Parse {
                        offset,
                        detail: format!("{tok:?} has {} values, expected {dim}", values.len()),
                    });
                }
                if let Some(&id) = index.get(tok) {
                    table.vectors[id * dim..(id + 1) * dim].copy_from_slice(&values);
                }
            }
            offset += line.len() + 1;
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }
}

/// Oracle concepts plus the slots that hold sentence tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleConcepts {
    pub features: FeatureSet,
    pub filled: Vec<usize>,
}

/// Concept features for a target sentence: up to 36 slots carry the
/// embeddings of the sentence's content tokens, the rest carry embeddings
/// of other tokens, never ones listed in `avoid`. Every slot gets Gaussian noise of standard deviation
/// `noise_level` (distractors at least a small floor); an infinite noise
/// level yields pure noise. Slot order is shuffled.
pub fn synth_oracle_concepts(
    tgt: &[usize],
    table: &ConceptTable,
    stop: &HashSet<usize>,
    avoid: &HashSet<usize>,
    noise_level: f64,
    rng: &mut impl Rng,
) -> Result<OracleConcepts> {
    if table.dim != CONCEPT_DIM {
        return Err(SimtError::Shape {
            op: "oracle_concepts",
            detail: format!("table dim {} != {CONCEPT_DIM}", table.dim),
        });
    }
    if noise_level.is_nan() || noise_level < 0.0 {
        return Err(SimtError::Config(format!("noise level {noise_level}")));
    }
    let mut content: Vec<usize> = Vec::new();
    for &t in tgt {
        if t >= RESERVED.len() && !stop.contains(&t) && !content.contains(&t) {
            content.push(t);
        }
    }
    content.truncate(FILLED_SLOTS);
    let others: Vec<usize> = (RESERVED.len()..table.len())
        .filter(|t| !content.contains(t) && !avoid.contains(t))
        .collect();
    let mut slots: Vec<(usize, bool)> = content.iter().map(|&t| (t, true)).collect();
    while slots.len() < CONCEPT_SLOTS {
        let t = if others.is_empty() {
            rng.gen_range(0..table.len())
        } else {
            others[rng.gen_range(0..others.len())]
        };
        slots.push((t, false));
    }
    slots.shuffle(rng);
    let mut data = Vec::with_capacity(CONCEPT_SLOTS * CONCEPT_DIM);
    let mut filled = Vec::new();
    let noise_scale = 1.0 / (CONCEPT_DIM as f64).sqrt();
    for (slot, (t, is_content)) in slots.iter().enumerate() {
        if *is_content {
            filled.push(slot);
        }
        let sd = if *is_content { noise_level } else { noise_level.max(DISTRACTOR_NOISE) };
        for &v in table.vector(*t) {
            let eps = rng.sample::<f64, _>(StandardNormal) * noise_scale;
            data.push(if sd.is_infinite() { eps } else { v + sd * eps });
        }
    }
    Ok(OracleConcepts {
        features: FeatureSet::new(FeatureKind::Concepts, CONCEPT_SLOTS, CONCEPT_DIM, data)?,
        filled,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean best cosine between filled slots and the sentence's token vectors,
/// minus the same quantity for distractor slots, averaged over a corpus.
pub fn grounding_gap(samples: &[(&OracleConcepts, &[usize])], table: &ConceptTable) -> f64 {
    let (mut filled_sum, mut filled_n, mut other_sum, mut other_n) = (0.0, 0usize, 0.0, 0usize);
    for (oc, tgt) in samples {
        let words: Vec<&[f64]> = tgt
            .iter()
            .filter(|&&t| t >= RESERVED.len())
            .map(|&t| table.vector(t))
            .collect();
        if words.is_empty() {
            continue;
        }
        for slot in 0..oc.features.rows {
            let row = oc.features.row(slot);
            let best = words.iter().map(|w| cosine(row, w)).fold(f64::NEG_INFINITY, f64::max);
            if oc.filled.contains(&slot) {
                filled_sum += best;
                filled_n += 1;
            } else {
                other_sum += best;
                other_n += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    mean(filled_sum, filled_n) - mean(other_sum, other_n)
}
