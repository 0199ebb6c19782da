//! Word vocabularies and parallel corpora.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Result, SimtError};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(SimtError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Builds a vocabulary from training sentences. Tokens are ordered by
    /// descending frequency, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(sentences: &[S]) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for tok in s.as_ref().split_whitespace() {
                if !RESERVED.contains(&tok) {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its non-reserved tokens in id order.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.iter().map(|w| w.as_ref().to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(SimtError::Index {
            index: id,
            size: self.tokens.len(),
        })
    }

    pub fn check(&self, id: usize) -> Result<()> {
        if id < self.tokens.len() {
            Ok(())
        } else {
            Err(SimtError::Index {
                index: id,
                size: self.tokens.len(),
            })
        }
    }

    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    pub fn decode_string(&self, ids: &[usize]) -> Result<String> {
        Ok(self.decode(ids)?.join(" "))
    }
}

/// A sentence pair as token ids, without BOS/EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Raw parallel text, one tokenized sentence per line.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParallelText {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl ParallelText {
    pub fn new(src: Vec<String>, tgt: Vec<String>) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(SimtError::Contract(format!(
                "{} source lines for {} target lines",
                src.len(),
                tgt.len()
            )));
        }
        Ok(ParallelText { src, tgt })
    }

    pub fn load(src_path: &Path, tgt_path: &Path) -> Result<Self> {
        let read = |p: &Path| -> Result<Vec<String>> {
            Ok(fs::read_to_string(p)?
                .lines()
                .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
                .collect())
        };
        Self::new(read(src_path)?, read(tgt_path)?)
    }

    pub fn save(&self, src_path: &Path, tgt_path: &Path) -> Result<()> {
        let join = |lines: &[String]| {
            let mut s = lines.join("\n");
            s.push('\n');
            s
        };
        fs::write(src_path, join(&self.src))?;
        fs::write(tgt_path, join(&self.tgt))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn encode(&self, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Vec<Pair> {
        self.src
            .iter()
            .zip(&self.tgt)
            .map(|(s, t)| Pair {
                src: src_vocab.encode(s),
                tgt: tgt_vocab.encode(t),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::build(&["b a b", "c"]).unwrap();
        assert_eq!(v.token(PAD).unwrap(), "<pad>");
        assert_eq!(v.token(BOS).unwrap(), "<bos>");
        assert_eq!(v.token(EOS).unwrap(), "<eos>");
        assert_eq!(v.token(UNK).unwrap(), "<unk>");
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.words(), &["b", "a", "c"]);
    }

    #[test]
    fn bijective_round_trip() {
        let v = Vocabulary::build(&["x y z", "y z", "z"]).unwrap();
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i).unwrap()), i);
        }
        let again = Vocabulary::from_words(v.words()).unwrap();
        assert_eq!(again, v);
        assert!(v.token(v.len()).is_err());
        assert!(Vocabulary::from_words(&["a", "a"]).is_err());
    }

    #[test]
    fn parallel_text_requires_alignment() {
        assert!(ParallelText::new(vec!["a".into()], vec![]).is_err());
        let p = ParallelText::new(vec!["a b".into()], vec!["c".into()]).unwrap();
        let sv = Vocabulary::build(&p.src).unwrap();
        let tv = Vocabulary::build(&p.tgt).unwrap();
        let pairs = p.encode(&sv, &tv);
        assert_eq!(pairs[0].src.len(), 2);
        assert_eq!(pairs[0].tgt, vec![4]);
    }
}
