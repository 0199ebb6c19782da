//! Teacher-forced training of the consecutive translation model with
//! validation-BLEU early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DecoderInit, EnvModel, DEFAULT_EMB_DIM, DEFAULT_HIDDEN_DIM};
use crate::adam::{AdamConfig, AdamState};
use crate::error::{Result, SimtError};
use crate::features::{FeatureGeometry, FeatureSet};
use crate::metrics::corpus_bleu;
use crate::tape::Tape;
use crate::vocab::{Pair, Vocabulary, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvTrainConfig {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without validation-BLEU improvement before stopping.
    pub patience: usize,
    pub clip_norm: Option<f64>,
    /// Validate on at most this many pairs.
    pub valid_limit: Option<usize>,
    /// Stop as soon as validation BLEU reaches this value.
    pub target_bleu: Option<f64>,
    pub decoder_init: DecoderInit,
    pub seed: u64,
}

impl Default for EnvTrainConfig {
    fn default() -> Self {
        EnvTrainConfig {
            emb_dim: DEFAULT_EMB_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            batch_size: 64,
            lr: 0.0004,
            max_epochs: 100,
            patience: 10,
            clip_norm: Some(5.0),
            valid_limit: None,
            target_bleu: None,
            decoder_init: DecoderInit::Zero,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_bleu: f64,
    /// Mean per-token training loss before any update.
    pub initial_loss: f64,
    pub train_loss: Vec<f64>,
    pub valid_bleu: Vec<f64>,
}

/// Training data with optional per-pair visual features.
pub struct Split<'a> {
    pub pairs: &'a [Pair],
    pub features: Option<&'a [FeatureSet]>,
}

impl Split<'_> {
    fn check(&self, name: &str) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(SimtError::Empty(format!("{name} split")));
        }
        if let Some(f) = self.features {
            if f.len() != self.pairs.len() {
                return Err(SimtError::Contract(format!(
                    "{name}: {} feature sets for {} pairs",
                    f.len(),
                    self.pairs.len()
                )));
            }
        }
        Ok(())
    }
}

pub fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

/// Corpus BLEU of greedy full-source translations.
pub fn evaluate_bleu(model: &EnvModel, split: &Split<'_>, limit: Option<usize>) -> Result<f64> {
    let n = limit.unwrap_or(split.pairs.len()).min(split.pairs.len());
    let mut hyps = Vec::with_capacity(n);
    let mut refs = Vec::with_capacity(n);
    for i in 0..n {
        let visual = match split.features {
            Some(f) => Some(model.visual_memory(&f[i])?),
            None => None,
        };
        let out = model.translate_full(&split.pairs[i].src, visual.as_ref())?;
        hyps.push(strip_eos(&out).to_vec());
        refs.push(split.pairs[i].tgt.clone());
    }
    corpus_bleu(&hyps, &refs)
}

pub fn train_consecutive(
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    train: &Split<'_>,
    valid: &Split<'_>,
    visual: Option<FeatureGeometry>,
    cfg: &EnvTrainConfig,
) -> Result<(EnvModel, TrainingRecord)> {
    train.check("training")?;
    valid.check("validation")?;
    if visual.is_some() != train.features.is_some() || visual.is_some() != valid.features.is_some() {
        return Err(SimtError::Config("visual features must accompany every split of a multimodal model".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || !(cfg.lr > 0.0) {
        return Err(SimtError::Config("batch size, epochs and learning rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = EnvModel::with_decoder_init(src_vocab, tgt_vocab, cfg.emb_dim, cfg.hidden_dim, visual, cfg.decoder_init, &mut rng)?;
    let initial_loss = model.mean_loss(train.pairs, train.features, cfg.batch_size)?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &model.params,
    );
    let mut best = model.params.clone();
    let mut record = TrainingRecord {
        epochs: 0,
        best_epoch: 0,
        best_bleu: f64::NEG_INFINITY,
        initial_loss,
        train_loss: Vec::new(),
        valid_bleu: Vec::new(),
    };
    let mut order: Vec<usize> = (0..train.pairs.len()).collect();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let pairs: Vec<&Pair> = batch.iter().map(|&i| &train.pairs[i]).collect();
            let feats: Option<Vec<&FeatureSet>> = train.features.map(|f| batch.iter().map(|&i| &f[i]).collect());
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, true);
            let (loss, n) = model.batch_loss(&mut tape, &b, &pairs, feats.as_deref())?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(SimtError::NonFinite(format!("training loss {value} in epoch {epoch}")));
            }
            loss_sum += value;
            tokens += n;
            let mean = tape.scale(loss, 1.0 / n as f64);
            tape.backward(mean)?;
            model.params.zero_grad();
            model.params.accumulate(&tape, &b)?;
            if let Some(c) = cfg.clip_norm {
                model.params.clip_grad_norm(c);
            }
            adam.step(&mut model.params)?;
        }
        record.epochs = epoch;
        record.train_loss.push(loss_sum / tokens as f64);
        let bleu = evaluate_bleu(&model, valid, cfg.valid_limit)?;
        record.valid_bleu.push(bleu);
        log::info!("epoch {epoch}: loss {:.4} valid BLEU {bleu:.2}", loss_sum / tokens as f64);
        if bleu > record.best_bleu {
            record.best_bleu = bleu;
            record.best_epoch = epoch;
            best = model.params.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience || cfg.target_bleu.is_some_and(|t| bleu >= t) {
            break;
        }
    }
    model.params = best;
    model.params.zero_grad();
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_epoch_lowers_loss() {
        let lines: Vec<String> = (0..40).map(|i| format!("w{} w{} w{}", i % 7, (i + 1) % 7, (i + 3) % 7)).collect();
        let v = Vocabulary::build(&lines).unwrap();
        let pairs: Vec<Pair> = lines
            .iter()
            .map(|l| Pair {
                src: v.encode(l),
                tgt: v.encode(l),
            })
            .collect();
        let cfg = EnvTrainConfig {
            emb_dim: 8,
            hidden_dim: 12,
            batch_size: 8,
            lr: 0.01,
            max_epochs: 1,
            ..Default::default()
        };
        let split = Split { pairs: &pairs, features: None };
        let (model, record) = train_consecutive(v.clone(), v, &split, &split, None, &cfg).unwrap();
        assert_eq!(record.epochs, 1);
        let after = model.mean_loss(&pairs, None, 8).unwrap();
        assert!(after < record.initial_loss, "{after} vs {}", record.initial_loss);
    }

    #[test]
    fn empty_or_mismatched_inputs_error() {
        let v = Vocabulary::build(&["a"]).unwrap();
        let cfg = EnvTrainConfig::default();
        let empty = Split { pairs: &[], features: None };
        assert!(train_consecutive(v.clone(), v.clone(), &empty, &empty, None, &cfg).is_err());
        let bad = vec![Pair { src: vec![99], tgt: vec![4] }];
        let split = Split { pairs: &bad, features: None };
        let small = EnvTrainConfig {
            emb_dim: 2,
            hidden_dim: 2,
            ..Default::default()
        };
        assert!(matches!(
            train_consecutive(v.clone(), v, &split, &split, None, &small),
            Err(SimtError::Vocabulary(_))
        ));
    }
}
