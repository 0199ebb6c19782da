//! Environment checkpoints: `SIMTCKPT1` parameters plus a key-value
//! metadata block.
//!
//! ```text
//! format = simt-env-1
//! emb_dim = 200
//! hidden_dim = 320
//! visual = none | grid ROWSxCOLS | concepts ROWSxCOLS
//! decoder_init = zero | last
//! src_vocab = tok tok ...
//! tgt_vocab = tok tok ...
//! ```
//!
//! Vocabulary lines list the non-reserved tokens in id order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{DecoderInit, EnvModel};
use crate::checkpoint::{params_from_bytes, params_to_bytes};
use crate::error::{Result, SimtError};
use crate::features::{FeatureGeometry, FeatureKind};
use crate::vocab::Vocabulary;

const FORMAT: &str = "simt-env-1";

pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut offset = 0;
    for line in text.lines() {
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let (k, v) = trimmed.split_once('=').ok_or_else(|| SimtError::Parse {
                offset,
                detail: format!("expected key = value, got {trimmed:?}"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        offset += line.len() + 1;
    }
    Ok(map)
}

pub fn format_visual(v: Option<FeatureGeometry>) -> String {
    match v {
        None => "none".into(),
        Some(g) => {
            let kind = match g.kind {
                FeatureKind::Grid => "grid",
                FeatureKind::Concepts => "concepts",
            };
            format!("{kind} {}x{}", g.rows, g.cols)
        }
    }
}

pub fn parse_visual(s: &str) -> Result<Option<FeatureGeometry>> {
    if s == "none" {
        return Ok(None);
    }
    let bad = || SimtError::Config(format!("bad visual geometry {s:?}"));
    let (kind, dims) = s.split_once(' ').ok_or_else(bad)?;
    let (r, c) = dims.split_once('x').ok_or_else(bad)?;
    let rows = r.parse().map_err(|_| bad())?;
    let cols = c.parse().map_err(|_| bad())?;
    let kind = match kind {
        "grid" => FeatureKind::Grid,
        "concepts" => FeatureKind::Concepts,
        _ => return Err(bad()),
    };
    Ok(Some(FeatureGeometry { kind, rows, cols }))
}

pub fn metadata(model: &EnvModel) -> String {
    format!(
        "format = {FORMAT}\nemb_dim = {}\nhidden_dim = {}\nvisual = {}\ndecoder_init = {}\nsrc_vocab = {}\ntgt_vocab = {}\n",
        model.emb_dim,
        model.hidden_dim,
        format_visual(model.visual),
        model.decoder_init.name(),
        model.src_vocab.words().join(" "),
        model.tgt_vocab.words().join(" "),
    )
}

pub fn save_env(model: &EnvModel, params_path: &Path, meta_path: &Path) -> Result<()> {
    fs::write(params_path, params_to_bytes(&model.params))?;
    fs::write(meta_path, metadata(model))?;
    Ok(())
}

pub fn env_from_parts(meta: &str, params: &[u8]) -> Result<EnvModel> {
    let kv = parse_key_values(meta)?;
    let get = |k: &str| kv.get(k).ok_or_else(|| SimtError::Config(format!("metadata lacks {k}")));
    if get("format")? != FORMAT {
        return Err(SimtError::Config(format!("unknown environment format {:?}", get("format")?)));
    }
    let dim = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| SimtError::Config(format!("{k} is not an integer")))
    };
    let words = |k: &str| -> Result<Vocabulary> {
        let list: Vec<&str> = get(k)?.split_whitespace().collect();
        Vocabulary::from_words(&list)
    };
    let skeleton = EnvModel::with_decoder_init(
        words("src_vocab")?,
        words("tgt_vocab")?,
        dim("emb_dim")?,
        dim("hidden_dim")?,
        parse_visual(get("visual")?)?,
        DecoderInit::parse(get("decoder_init")?)?,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    skeleton.with_params(&params_from_bytes(params)?)
}

pub fn load_env(params_path: &Path, meta_path: &Path) -> Result<EnvModel> {
    env_from_parts(&fs::read_to_string(meta_path)?, &fs::read(params_path)?)
}
