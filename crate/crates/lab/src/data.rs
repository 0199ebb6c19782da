//! Synthetic parallel corpora and their oracle visual features.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use simt_core::features::{synth_oracle_concepts, write_features, ConceptTable, FeatureKind, FeatureSet, CONCEPT_DIM};
use simt_core::metrics::corpus_bleu;
use simt_core::vocab::{ParallelText, Vocabulary};
use simt_core::{Result, SimtError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
    /// Some source words have two target realizations chosen uniformly.
    Ambiguous,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "ambiguous" => Ok(Task::Ambiguous),
            _ => Err(SimtError::Config(format!("unknown task {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Ambiguous => "ambiguous",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    /// Plain source words.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Ambiguous source words (ambiguous task only).
    pub ambiguous_words: usize,
    /// Probability that a position holds an ambiguous word.
    pub ambiguity_rate: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            task: Task::Copy,
            vocab_size: 50,
            min_len: 3,
            max_len: 10,
            train: 2000,
            valid: 200,
            test: 200,
            ambiguous_words: 10,
            ambiguity_rate: 0.3,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimtError::Config(m.into()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("lengths must satisfy 1 <= min_len <= max_len");
        }
        if self.train == 0 || self.valid == 0 || self.test == 0 {
            return bad("every split needs at least one pair");
        }
        if self.task == Task::Ambiguous {
            if self.ambiguous_words == 0 {
                return bad("the ambiguous task needs ambiguous words");
            }
            if !(self.ambiguity_rate > 0.0 && self.ambiguity_rate <= 1.0) {
                return bad("ambiguity_rate must be in (0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: ParallelText,
    pub valid: ParallelText,
    pub test: ParallelText,
}

impl Corpus {
    pub fn splits(&self) -> [(&'static str, &ParallelText); 3] {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test)]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, text) in self.splits() {
            text.save(&dir.join(format!("{name}.src")), &dir.join(format!("{name}.tgt")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |name: &str| ParallelText::load(&dir.join(format!("{name}.src")), &dir.join(format!("{name}.tgt")));
        Ok(Corpus {
            train: load("train")?,
            valid: load("valid")?,
            test: load("test")?,
        })
    }

    /// Source and target vocabularies of the training split. Held-out
    /// tokens outside them map to UNK.
    pub fn vocabularies(&self) -> Result<(Vocabulary, Vocabulary)> {
        Ok((Vocabulary::build(&self.train.src)?, Vocabulary::build(&self.train.tgt)?))
    }
}

fn plain(i: usize) -> String {
    format!("w{i}")
}

fn ambiguous(j: usize) -> String {
    format!("x{j}")
}

/// The two target realizations of an ambiguous source word.
pub fn realizations(source: &str) -> Option<[String; 2]> {
    let rest = source.strip_prefix('x')?;
    rest.parse::<usize>().ok()?;
    Some([format!("{source}a"), format!("{source}b")])
}

/// The other realization of an ambiguous target word.
pub fn alternative(target: &str) -> Option<String> {
    let stem = target.strip_prefix('x')?;
    let (num, last) = stem.split_at(stem.len().checked_sub(1)?);
    num.parse::<usize>().ok()?;
    match last {
        "a" => Some(format!("x{num}b")),
        "b" => Some(format!("x{num}a")),
        _ => None,
    }
}

fn sentence(spec: &TaskSpec, rng: &mut impl Rng) -> (String, String) {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let mut src = Vec::with_capacity(len);
    let mut tgt = Vec::with_capacity(len);
    for _ in 0..len {
        if spec.task == Task::Ambiguous && rng.gen_bool(spec.ambiguity_rate) {
            let s = ambiguous(rng.gen_range(0..spec.ambiguous_words));
            let [a, b] = realizations(&s).expect("generated ambiguous word");
            tgt.push(if rng.gen_bool(0.5) { a } else { b });
            src.push(s);
        } else {
            let w = plain(rng.gen_range(0..spec.vocab_size));
            tgt.push(w.clone());
            src.push(w);
        }
    }
    if spec.task == Task::Reverse {
        tgt.reverse();
    }
    (src.join(" "), tgt.join(" "))
}

pub fn make_corpus(spec: &TaskSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |n: usize| -> Result<ParallelText> {
        let (src, tgt) = (0..n).map(|_| sentence(spec, &mut rng)).unzip();
        ParallelText::new(src, tgt)
    };
    Ok(Corpus {
        train: split(spec.train)?,
        valid: split(spec.valid)?,
        test: split(spec.test)?,
    })
}

/// Corpus BLEU of the best translator that cannot see which realization
/// was drawn: every ambiguous word gets its first realization.
pub fn blind_ceiling(text: &ParallelText) -> Result<f64> {
    let hyps: Vec<Vec<String>> = text
        .src
        .iter()
        .map(|s| {
            s.split_whitespace()
                .map(|w| realizations(w).map_or_else(|| w.to_string(), |[a, _]| a))
                .collect()
        })
        .collect();
    let refs: Vec<Vec<String>> = text.tgt.iter().map(|t| t.split_whitespace().map(String::from).collect()).collect();
    corpus_bleu(&hyps, &refs)
}

/// Fraction of target tokens that are ambiguous realizations.
pub fn ambiguity_share(text: &ParallelText) -> f64 {
    let (mut amb, mut total) = (0usize, 0usize);
    for t in &text.tgt {
        for w in t.split_whitespace() {
            total += 1;
            amb += usize::from(alternative(w).is_some());
        }
    }
    amb as f64 / total.max(1) as f64
}

/// Oracle concept features for every pair of a split. The alternative
/// realization of each ambiguous word is never used as a distractor.
pub fn oracle_features(
    text: &ParallelText,
    tgt_vocab: &Vocabulary,
    table: &ConceptTable,
    noise_level: f64,
    rng: &mut impl Rng,
) -> Result<Vec<FeatureSet>> {
    let stop = HashSet::new();
    text.tgt
        .iter()
        .map(|line| {
            let ids = tgt_vocab.encode(line);
            let avoid: HashSet<usize> = line
                .split_whitespace()
                .filter_map(alternative)
                .map(|w| tgt_vocab.id(&w))
                .collect();
            synth_oracle_concepts(&ids, table, &stop, &avoid, noise_level, rng).map(|oc| oc.features)
        })
        .collect()
}

/// Grid-shaped features: each region mixes the sentence's token vectors
/// with random weights, so individual words are not separable by slot.
pub fn oracle_grid(
    text: &ParallelText,
    tgt_vocab: &Vocabulary,
    table: &ConceptTable,
    regions: usize,
    noise_level: f64,
    rng: &mut impl Rng,
) -> Result<Vec<FeatureSet>> {
    let dim = table.dim;
    text.tgt
        .iter()
        .map(|line| {
            let ids = tgt_vocab.encode(line);
            let mut data = vec![0.0; regions * dim];
            for r in 0..regions {
                let row = &mut data[r * dim..(r + 1) * dim];
                for &id in &ids {
                    let w: f64 = rng.gen_range(0.0..1.0) / ids.len() as f64;
                    row.iter_mut().zip(table.vector(id)).for_each(|(x, v)| *x += w * v);
                }
                for x in row.iter_mut() {
                    let eps: f64 = rng.sample(rand_distr::StandardNormal);
                    *x = if noise_level.is_infinite() {
                        eps / (dim as f64).sqrt()
                    } else {
                        *x + noise_level * eps / (dim as f64).sqrt()
                    };
                }
            }
            FeatureSet::new(FeatureKind::Grid, regions, dim, data)
        })
        .collect()
}

/// Word vectors in the common text format, one line per non-reserved token.
pub fn concept_vectors_text(table: &ConceptTable, tgt_vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for (i, w) in tgt_vocab.words().iter().enumerate() {
        let id = i + simt_core::vocab::RESERVED.len();
        out.push_str(w);
        for v in table.vector(id) {
            let _ = write!(out, " {v:.6}");
        }
        out.push('\n');
    }
    out
}

/// Random concept table over the target vocabulary.
pub fn concept_table(tgt_vocab: &Vocabulary, seed: u64) -> ConceptTable {
    ConceptTable::random(tgt_vocab.len(), CONCEPT_DIM, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn save_features(path: &Path, sets: &[FeatureSet]) -> Result<()> {
    write_features(path, sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_and_reverse_definitions() {
        let spec = TaskSpec {
            train: 100,
            valid: 5,
            test: 5,
            ..Default::default()
        };
        let c = make_corpus(&spec, 7).unwrap();
        assert_eq!(c.train.src, c.train.tgt);
        let r = make_corpus(&TaskSpec { task: Task::Reverse, ..spec }, 7).unwrap();
        for (s, t) in r.train.src.iter().zip(&r.train.tgt) {
            let mut w: Vec<&str> = s.split_whitespace().collect();
            w.reverse();
            assert_eq!(w.join(" "), *t);
        }
    }

    #[test]
    fn ambiguous_ceiling_is_below_100() {
        let spec = TaskSpec {
            task: Task::Ambiguous,
            train: 300,
            ..Default::default()
        };
        let c = make_corpus(&spec, 1).unwrap();
        let share = ambiguity_share(&c.train);
        assert!((share - 0.3).abs() < 0.05, "{share}");
        let ceiling = blind_ceiling(&c.train).unwrap();
        assert!(ceiling < 100.0);
        // Brute force over both fixed choices per word gives no better rule.
        let flipped = ParallelText::new(
            c.train.src.clone(),
            c.train
                .tgt
                .iter()
                .map(|t| t.split_whitespace().map(|w| alternative(w).unwrap_or_else(|| w.to_string())).collect::<Vec<_>>().join(" "))
                .collect(),
        )
        .unwrap();
        let other = blind_ceiling(&flipped).unwrap();
        assert!((ceiling - other).abs() < 10.0, "{ceiling} vs {other}");
        // Without ambiguity the ceiling is perfect.
        let copy = make_corpus(&TaskSpec { train: 50, ..Default::default() }, 1).unwrap();
        assert_eq!(blind_ceiling(&copy.train).unwrap(), 100.0);
    }

    #[test]
    fn realization_names() {
        assert_eq!(realizations("x3"), Some(["x3a".to_string(), "x3b".to_string()]));
        assert_eq!(realizations("w3"), None);
        assert_eq!(alternative("x12a").as_deref(), Some("x12b"));
        assert_eq!(alternative("w5"), None);
    }

    #[test]
    fn invalid_specs_error() {
        assert!(make_corpus(&TaskSpec { min_len: 0, ..Default::default() }, 0).is_err());
        assert!(make_corpus(&TaskSpec { train: 0, ..Default::default() }, 0).is_err());
        let amb = TaskSpec {
            task: Task::Ambiguous,
            ambiguity_rate: 0.0,
            ..Default::default()
        };
        assert!(make_corpus(&amb, 0).is_err());
    }

    #[test]
    fn oracle_features_never_show_the_other_realization() {
        let spec = TaskSpec {
            task: Task::Ambiguous,
            train: 20,
            valid: 1,
            test: 1,
            ..Default::default()
        };
        let c = make_corpus(&spec, 3).unwrap();
        let (_, tv) = c.vocabularies().unwrap();
        let table = concept_table(&tv, 5);
        let feats = oracle_features(&c.train, &tv, &table, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (f, line) in feats.iter().zip(&c.train.tgt) {
            for w in line.split_whitespace() {
                let id = tv.id(w);
                assert!((0..f.rows).any(|r| f.row(r) == table.vector(id)));
                if let Some(alt) = alternative(w) {
                    if !line.split_whitespace().any(|x| x == alt) {
                        let alt_id = tv.id(&alt);
                        assert!((0..f.rows).all(|r| f.row(r) != table.vector(alt_id)));
                    }
                }
            }
        }
    }
}
