//! The experiment commands. Each runs under an output-directory lock and
//! leaves a manifest before and after its work.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use simt_core::agent::{log_csv, load_agent, save_agent, train_agent, ActionMode, AgentNetwork, AgentPolicy, AgentSpec};
use simt_core::checkpoint::params_to_bytes;
use simt_core::env::{evaluate_bleu, load_env, save_env, train_consecutive, EnvModel, Split};
use simt_core::features::{load_features, FeatureKind, FeatureSet};
use simt_core::metrics::{
    attention_norm_profile, average_lagging, bootstrap_significance, effective_delays, histogram_csv, lag_histogram,
    LatencyStats,
};
use simt_core::policy::{read_log, simulate, write_log, Consecutive, Policy, Transcript, TranscriptRecord, WaitK};
use simt_core::vocab::{Pair, ParallelText, Vocabulary, RESERVED, UNK};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, FeatureSource, Preset};
use crate::data::{concept_table, make_corpus, oracle_features, oracle_grid, save_features, Corpus};
use crate::error::{LabError, LabResult};
use crate::manifest::{artifact, Artifact, DirLock, RunManifest, Status};

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];
pub const ENV_CKPT: &str = "env.ckpt";
pub const ENV_META: &str = "env.meta";
pub const TRANSCRIPTS: &str = "transcripts.jsonl";
pub const REPORT: &str = "report.json";

const FEATURE_STREAM: u64 = 100;
const CONCEPT_SEED_OFFSET: u64 = 7919;

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    MakeData,
    Pretrain,
    RlTrain,
    /// Optionally compared against another system's transcript log.
    Evaluate { against: Option<PathBuf> },
    /// `attention` demands attention data in every log.
    Report { logs: Vec<PathBuf>, attention: bool },
    Compare { a: PathBuf, b: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeData => "make-data",
            Command::Pretrain => "pretrain",
            Command::RlTrain => "rl-train",
            Command::Evaluate { .. } => "evaluate",
            Command::Report { .. } => "report",
            Command::Compare { .. } => "compare",
        }
    }
}

/// What a command produced: files relative to the output directory, the
/// files it consumed, and its metrics.
#[derive(Debug, Default)]
struct Outcome {
    artifacts: Vec<String>,
    inputs: Vec<Artifact>,
    metrics: Value,
}

/// Runs `command` into `out`. The manifest is written when the run starts
/// and again when it completes or fails.
pub fn run(command: &Command, cfg: &ExperimentConfig, out: &Path) -> LabResult<RunManifest> {
    let _lock = DirLock::acquire(out)?;
    let mut manifest = RunManifest::new(command.name(), cfg.seed, cfg.snapshot.clone());
    manifest.write(out)?;
    let start = Instant::now();
    let result = match command {
        Command::MakeData => make_data(cfg, out),
        Command::Pretrain => pretrain(cfg, out),
        Command::RlTrain => rl_train(cfg, out),
        Command::Evaluate { against } => evaluate(cfg, out, against.as_deref()),
        Command::Report { logs, attention } => report(cfg, out, logs, *attention),
        Command::Compare { a, b } => compare(cfg, out, a, b),
    };
    manifest.wall_clock_secs = Some(start.elapsed().as_secs_f64());
    let result = result.and_then(|o| {
        let hashed = o.artifacts.iter().map(|a| artifact(out, a)).collect::<LabResult<Vec<_>>>()?;
        Ok((o, hashed))
    });
    match result {
        Ok((o, hashed)) => {
            manifest.status = Status::Completed;
            manifest.artifacts = hashed;
            manifest.inputs = o.inputs;
            manifest.metrics = o.metrics;
            manifest.write(out)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.status = Status::Failed;
            manifest.error = Some(e.to_string());
            manifest.write(out)?;
            Err(e)
        }
    }
}

/// Encoded splits and their optional features.
pub struct Data {
    pub corpus: Corpus,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub pairs: [Vec<Pair>; 3],
    pub features: Option<[Vec<FeatureSet>; 3]>,
}

impl Data {
    fn index(name: &str) -> LabResult<usize> {
        SPLITS
            .iter()
            .position(|s| *s == name)
            .ok_or_else(|| LabError::Config(format!("unknown split {name:?}")))
    }

    pub fn split(&self, name: &str) -> LabResult<Split<'_>> {
        let i = Data::index(name)?;
        Ok(Split {
            pairs: &self.pairs[i],
            features: self.features.as_ref().map(|f| f[i].as_slice()),
        })
    }

    pub fn text(&self, name: &str) -> LabResult<&ParallelText> {
        Ok(self.corpus.splits()[Data::index(name)?].1)
    }
}

fn corpus(cfg: &ExperimentConfig) -> LabResult<Corpus> {
    match &cfg.corpus_dir {
        Some(dir) => Ok(Corpus::load(dir)?),
        None => Ok(make_corpus(&cfg.spec, cfg.seed)?),
    }
}

fn synth_features(cfg: &ExperimentConfig, corpus: &Corpus, tgt_vocab: &Vocabulary, noise: f64) -> LabResult<[Vec<FeatureSet>; 3]> {
    let table = concept_table(tgt_vocab, cfg.seed.wrapping_add(CONCEPT_SEED_OFFSET));
    let splits = corpus.splits();
    let mut sets = splits.iter().enumerate().map(|(k, (_, text))| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(FEATURE_STREAM + k as u64);
        match cfg.geometry.kind {
            FeatureKind::Concepts => oracle_features(text, tgt_vocab, &table, noise, &mut rng),
            FeatureKind::Grid => oracle_grid(text, tgt_vocab, &table, cfg.geometry.rows, noise, &mut rng),
        }
    });
    Ok([sets.next().unwrap()?, sets.next().unwrap()?, sets.next().unwrap()?])
}

fn file_features(cfg: &ExperimentConfig, dir: &Path, corpus: &Corpus) -> LabResult<[Vec<FeatureSet>; 3]> {
    let mut out = Vec::with_capacity(3);
    for (name, text) in corpus.splits() {
        let path = dir.join(format!("{name}.feat"));
        let sets = load_features(&path)?;
        if sets.len() != text.len() {
            return Err(LabError::Data(format!("{}: {} feature sets for {} sentences", path.display(), sets.len(), text.len())));
        }
        if let Some(f) = sets.first() {
            if f.kind != cfg.geometry.kind {
                return Err(LabError::Config(format!("{}: {:?} features, configuration needs {:?}", path.display(), f.kind, cfg.geometry.kind)));
            }
        }
        out.push(sets);
    }
    let mut it = out.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

/// Loads or synthesizes the corpus and features. `vocabularies` fixes the
/// encoding, e.g. to that of a trained environment.
pub fn load_data(cfg: &ExperimentConfig, vocabularies: Option<(Vocabulary, Vocabulary)>) -> LabResult<Data> {
    let corpus = corpus(cfg)?;
    let (src_vocab, tgt_vocab) = match vocabularies {
        Some(v) => v,
        None => corpus.vocabularies()?,
    };
    let features = match (cfg.features, &cfg.feature_dir) {
        (FeatureSource::None, _) => None,
        (FeatureSource::Oracle(noise), _) => Some(synth_features(cfg, &corpus, &tgt_vocab, noise)?),
        (FeatureSource::File, Some(dir)) => Some(file_features(cfg, dir, &corpus)?),
        (FeatureSource::File, None) => return Err(LabError::Config("features = file needs feature_dir".into())),
    };
    let pairs = [
        corpus.train.encode(&src_vocab, &tgt_vocab),
        corpus.valid.encode(&src_vocab, &tgt_vocab),
        corpus.test.encode(&src_vocab, &tgt_vocab),
    ];
    Ok(Data {
        corpus,
        src_vocab,
        tgt_vocab,
        pairs,
        features,
    })
}

fn make_data(cfg: &ExperimentConfig, out: &Path) -> LabResult<Outcome> {
    if cfg.task.is_none() {
        return Err(LabError::Config("make-data needs a synthetic task".into()));
    }
    if cfg.features == FeatureSource::File {
        return Err(LabError::Config("make-data writes oracle features; features = file reads them".into()));
    }
    let data = load_data(cfg, None)?;
    data.corpus.save(&out.join("corpus"))?;
    let mut artifacts: Vec<String> = SPLITS
        .iter()
        .flat_map(|s| [format!("corpus/{s}.src"), format!("corpus/{s}.tgt")])
        .collect();
    if let Some(f) = &data.features {
        fs::create_dir_all(out.join("features"))?;
        for (name, sets) in SPLITS.iter().zip(f) {
            let rel = format!("features/{name}.feat");
            save_features(&out.join(&rel), sets)?;
            artifacts.push(rel);
        }
    }
    let mut metrics = json!({
        "task": cfg.spec.task.name(),
        "train": data.corpus.train.len(),
        "valid": data.corpus.valid.len(),
        "test": data.corpus.test.len(),
        "src_vocab": data.src_vocab.len(),
        "tgt_vocab": data.tgt_vocab.len(),
    });
    if cfg.task == Some(crate::data::Task::Ambiguous) {
        metrics["blind_ceiling_test"] = json!(crate::data::blind_ceiling(&data.corpus.test)?);
        metrics["ambiguous_share_test"] = json!(crate::data::ambiguity_share(&data.corpus.test));
    }
    Ok(Outcome {
        artifacts,
        inputs: Vec::new(),
        metrics,
    })
}

fn pretrain(cfg: &ExperimentConfig, out: &Path) -> LabResult<Outcome> {
    let data = load_data(cfg, None)?;
    let multimodal = cfg.preset.multimodal_env();
    let visual = match (&data.features, multimodal) {
        (Some(f), true) => Some(f[0][0].geometry()),
        (None, true) => return Err(LabError::Config(format!("{} needs visual features", cfg.preset))),
        (_, false) => None,
    };
    let with = |name: &str| -> LabResult<Split<'_>> {
        let s = data.split(name)?;
        Ok(Split {
            pairs: s.pairs,
            features: if multimodal { s.features } else { None },
        })
    };
    let (model, record) = train_consecutive(
        data.src_vocab.clone(),
        data.tgt_vocab.clone(),
        &with("train")?,
        &with("valid")?,
        visual,
        &cfg.env,
    )?;
    save_env(&model, &out.join(ENV_CKPT), &out.join(ENV_META))?;
    let mut curve = String::from("epoch,train_loss,valid_bleu\n");
    for (i, (l, b)) in record.train_loss.iter().zip(&record.valid_bleu).enumerate() {
        curve.push_str(&format!("{},{l},{b}\n", i + 1));
    }
    fs::write(out.join("curve.csv"), curve)?;
    let test_bleu = evaluate_bleu(&model, &with("test")?, None)?;
    Ok(Outcome {
        artifacts: vec![ENV_CKPT.into(), ENV_META.into(), "curve.csv".into()],
        inputs: Vec::new(),
        metrics: json!({
            "multimodal": multimodal,
            "epochs": record.epochs,
            "best_epoch": record.best_epoch,
            "best_valid_bleu": record.best_bleu,
            "initial_loss": record.initial_loss,
            "test_bleu": test_bleu,
        }),
    })
}

pub fn load_env_dir(dir: &Path) -> LabResult<EnvModel> {
    Ok(load_env(&dir.join(ENV_CKPT), &dir.join(ENV_META))?)
}

fn env_inputs(dir: &Path) -> LabResult<Vec<Artifact>> {
    [ENV_CKPT, ENV_META]
        .iter()
        .map(|f| {
            Ok(Artifact {
                path: format!("env/{f}"),
                sha256: crate::manifest::sha256_file(&dir.join(f))?,
            })
        })
        .collect()
}

fn params_hash(env: &EnvModel) -> String {
    hex::encode(Sha256::digest(params_to_bytes(&env.params)))
}

/// The environment named by the configuration, checked against the preset.
fn environment(cfg: &ExperimentConfig) -> LabResult<(EnvModel, PathBuf)> {
    let dir = cfg.env_dir.clone().ok_or_else(|| LabError::Config("env_dir is not set".into()))?;
    let env = load_env_dir(&dir)?;
    if cfg.preset.is_learned() && cfg.preset.multimodal_env() != env.is_multimodal() {
        return Err(LabError::Config(format!(
            "{} needs a {} environment",
            cfg.preset,
            if cfg.preset.multimodal_env() { "multimodal" } else { "text-only" }
        )));
    }
    Ok((env, dir))
}

fn agent_spec(cfg: &ExperimentConfig, env: &EnvModel, data: &Data) -> LabResult<AgentSpec> {
    let geometry = data.features.as_ref().map(|f| f[0][0].geometry());
    let pick = |on: bool| -> LabResult<_> {
        if !on {
            return Ok(None);
        }
        geometry
            .map(Some)
            .ok_or_else(|| LabError::Config(format!("{} needs visual features", cfg.preset)))
    };
    Ok(AgentSpec::for_env(env, cfg.rl.hidden_dim, pick(cfg.preset.agent_init())?, pick(cfg.preset.agent_attend())?))
}

pub fn replica_dir(i: usize) -> String {
    format!("replica-{i}")
}

fn rl_train(cfg: &ExperimentConfig, out: &Path) -> LabResult<Outcome> {
    if !cfg.preset.is_learned() {
        return Err(LabError::Config(format!("{} has nothing to train", cfg.preset)));
    }
    let (env, env_dir) = environment(cfg)?;
    let inputs = env_inputs(&env_dir)?;
    let data = load_data(cfg, Some((env.src_vocab.clone(), env.tgt_vocab.clone())))?;
    let spec = agent_spec(cfg, &env, &data)?;
    let before = params_hash(&env);
    let (train, valid) = (data.split("train")?, data.split("valid")?);
    let mut artifacts = Vec::new();
    let mut runs = Vec::new();
    for i in 0..cfg.replicas {
        let rl = simt_core::agent::RLTrainConfig {
            seed: cfg.seed + i as u64,
            ..cfg.rl.clone()
        };
        let (agent, baseline, record) = train_agent(&env, spec, &train, &valid, &rl)?;
        let rel = replica_dir(i);
        let dir = out.join(&rel);
        fs::create_dir_all(&dir)?;
        save_agent(&agent, &baseline, &dir)?;
        fs::write(dir.join("log.csv"), log_csv(&record.log))?;
        for f in ["agent.ckpt", "baseline.ckpt", "agent.meta", "log.csv"] {
            artifacts.push(format!("{rel}/{f}"));
        }
        let best = record
            .log
            .iter()
            .find(|r| r.epoch == record.best_epoch)
            .ok_or_else(|| LabError::Other("no validation epoch was recorded".into()))?;
        runs.push(json!({
            "seed": rl.seed,
            "best_epoch": record.best_epoch,
            "epochs": record.log.len(),
            "updates": record.updates,
            "episodes": record.episodes,
            "valid_bleu": best.mean_bleu,
            "valid_avl": best.mean_avl,
            "valid_avp": best.mean_avp,
        }));
    }
    let after = params_hash(&env);
    if before != after {
        return Err(LabError::Other("environment parameters changed during RL".into()));
    }
    Ok(Outcome {
        artifacts,
        inputs,
        metrics: json!({
            "config": cfg.preset.name(),
            "env_params_sha256": after,
            "replicas": runs,
        }),
    })
}

enum System {
    Fixed(Preset, usize),
    Agent(AgentNetwork),
}

impl System {
    fn name(&self) -> String {
        match self {
            System::Fixed(Preset::WaitK, k) => format!("wait-{k}"),
            System::Fixed(p, _) => p.name().to_string(),
            System::Agent(_) => "agent".into(),
        }
    }
}

/// Greedy transcripts of `system` over a split, one thread per sentence.
pub fn transcripts_for(env: &EnvModel, agent: Option<&AgentNetwork>, fixed: Option<Preset>, wait_k: usize, split: &Split<'_>) -> LabResult<Vec<Transcript>> {
    if let Some(a) = agent {
        simt_core::agent::train::check_split(env, &a.spec, split, "evaluation")?;
    }
    (0..split.pairs.len())
        .into_par_iter()
        .map(|i| -> LabResult<Transcript> {
            let f = split.features.map(|f| &f[i]);
            let visual = if env.is_multimodal() {
                let f = f.ok_or_else(|| LabError::Config("multimodal environment needs features".into()))?;
                Some(env.visual_memory(f)?)
            } else {
                None
            };
            let mut consecutive = Consecutive;
            let mut wait;
            let mut learned;
            let policy: &mut dyn Policy = match (agent, fixed) {
                (Some(a), _) => {
                    learned = AgentPolicy::new(a, a.spec.features().and(f), ActionMode::Greedy)?;
                    &mut learned
                }
                (None, Some(Preset::WaitK)) => {
                    wait = WaitK::new(wait_k)?;
                    &mut wait
                }
                (None, _) => &mut consecutive,
            };
            Ok(simulate(policy, env, &split.pairs[i].src, visual.as_ref())?)
        })
        .collect()
}

#[derive(Serialize)]
struct Report<'a> {
    system: String,
    split: &'a str,
    sentences: usize,
    bleu: f64,
    avl_mean: f64,
    avp_mean: f64,
    cw_max_mean: f64,
    cw_max_max: usize,
    per_sentence: &'a [simt_core::metrics::SentenceMetrics],
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap: Option<Value>,
}

fn read_records(path: &Path) -> LabResult<Vec<TranscriptRecord>> {
    let file = fs::File::open(path).map_err(|e| LabError::Data(format!("{}: {e}", path.display())))?;
    Ok(read_log(BufReader::new(file))?)
}

/// Checks that `records` translate exactly the sentences of `text`. A logged
/// `<unk>` stands for any out-of-vocabulary word.
fn check_alignment(records: &[TranscriptRecord], text: &ParallelText, what: &str) -> LabResult<()> {
    if records.len() != text.len() {
        return Err(LabError::Data(format!("{what}: {} transcripts for {} sentences", records.len(), text.len())));
    }
    for (i, (r, s)) in records.iter().zip(&text.src).enumerate() {
        let logged: Vec<&str> = r.src.split_whitespace().collect();
        let raw: Vec<&str> = s.split_whitespace().collect();
        let same = logged.len() == raw.len() && logged.iter().zip(&raw).all(|(l, w)| l == w || *l == RESERVED[UNK]);
        if !same {
            return Err(LabError::Data(format!("{what}: transcript {i} translates {:?}, expected {s:?}", r.src)));
        }
    }
    Ok(())
}

/// One-sided paired bootstrap: does `b` improve on `a`?
fn bootstrap(cfg: &ExperimentConfig, a: &[TranscriptRecord], b: &[TranscriptRecord], text: &ParallelText) -> LabResult<Value> {
    let words = |r: &TranscriptRecord| r.hyp_tokens().into_iter().map(String::from).collect::<Vec<_>>();
    let ha: Vec<Vec<String>> = a.iter().map(words).collect();
    let hb: Vec<Vec<String>> = b.iter().map(words).collect();
    let refs: Vec<Vec<String>> = text.tgt.iter().map(|t| t.split_whitespace().map(String::from).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = bootstrap_significance(&ha, &hb, &refs, cfg.bootstrap_resamples, &mut rng)?;
    Ok(json!({
        "bleu_a": simt_core::metrics::corpus_bleu(&ha, &refs)?,
        "bleu_b": simt_core::metrics::corpus_bleu(&hb, &refs)?,
        "p_value": p,
        "significant": p <= 0.05,
        "resamples": cfg.bootstrap_resamples,
    }))
}

fn evaluate(cfg: &ExperimentConfig, out: &Path, against: Option<&Path>) -> LabResult<Outcome> {
    let (env, env_dir) = environment(cfg)?;
    let mut inputs = env_inputs(&env_dir)?;
    let system = if cfg.preset.is_learned() {
        let dir = cfg.agent_dir.clone().ok_or_else(|| LabError::Config("agent_dir is not set".into()))?;
        for f in ["agent.ckpt", "agent.meta"] {
            inputs.push(Artifact {
                path: format!("agent/{f}"),
                sha256: crate::manifest::sha256_file(&dir.join(f))?,
            });
        }
        System::Agent(load_agent(&dir)?.0)
    } else {
        System::Fixed(cfg.preset, cfg.wait_k)
    };
    let data = load_data(cfg, Some((env.src_vocab.clone(), env.tgt_vocab.clone())))?;
    let split = data.split(&cfg.split)?;
    let transcripts = match &system {
        System::Agent(a) => transcripts_for(&env, Some(a), None, cfg.wait_k, &split)?,
        System::Fixed(p, k) => transcripts_for(&env, None, Some(*p), *k, &split)?,
    };
    let stats: LatencyStats = simt_core::agent::score_transcripts(&transcripts, &split)?;
    let records = transcripts
        .iter()
        .map(|t| TranscriptRecord::from_transcript(t, &data.src_vocab, &data.tgt_vocab))
        .collect::<simt_core::Result<Vec<_>>>()?;
    let mut file = Vec::new();
    write_log(&mut file, &records)?;
    fs::write(out.join(TRANSCRIPTS), file)?;
    let text = data.text(&cfg.split)?;
    let comparison = match against {
        Some(path) => {
            let other = read_records(path)?;
            check_alignment(&other, text, &path.display().to_string())?;
            let mut v = bootstrap(cfg, &other, &records, text)?;
            v["against"] = json!(path.file_name().map(|n| n.to_string_lossy().into_owned()));
            Some(v)
        }
        None => None,
    };
    let report = Report {
        system: system.name(),
        split: &cfg.split,
        sentences: transcripts.len(),
        bleu: stats.bleu,
        avl_mean: stats.avl_mean,
        avp_mean: stats.avp_mean,
        cw_max_mean: stats.cw_max_mean,
        cw_max_max: stats.per_sentence.iter().map(|s| s.cw_max).max().unwrap_or(0),
        per_sentence: &stats.per_sentence,
        bootstrap: comparison.clone(),
    };
    fs::write(out.join(REPORT), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut metrics = json!({
        "system": report.system,
        "bleu": stats.bleu,
        "avl_mean": stats.avl_mean,
        "avp_mean": stats.avp_mean,
        "cw_max_mean": stats.cw_max_mean,
    });
    if let Some(c) = comparison {
        metrics["bootstrap"] = c;
    }
    Ok(Outcome {
        artifacts: vec![TRANSCRIPTS.into(), REPORT.into()],
        inputs,
        metrics,
    })
}

/// Average lagging of one logged sentence.
pub fn record_lag(r: &TranscriptRecord) -> LabResult<f64> {
    let actions = r.actions()?;
    let g = effective_delays(&actions, r.hyp_tokens().len())?;
    Ok(average_lagging(&g, r.src_len(), g.len())?)
}

/// Token-aligned trace: one row per action with the committed token and,
/// for agent steps, the attention weights.
pub fn trace_dump(records: &[TranscriptRecord]) -> LabResult<String> {
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        let actions = r.actions()?;
        if let Some(att) = &r.attention {
            if att.len() + 1 != actions.len() {
                return Err(LabError::Data(format!("sentence {i}: {} attention rows for {} actions", att.len(), actions.len())));
            }
        }
        let src: Vec<&str> = r.src.split_whitespace().collect();
        let hyp = r.hyp_tokens();
        out.push_str(&format!("# sentence {i}\n# src: {}\n# hyp: {}\n", r.src, r.hyp));
        out.push_str("step\taction\tread\twritten\ttoken\tattention\n");
        let (mut read, mut written) = (0usize, 0usize);
        for (t, a) in actions.iter().enumerate() {
            let token = match a {
                simt_core::metrics::Action::Read => {
                    read += 1;
                    src.get(read - 1).copied().unwrap_or("")
                }
                simt_core::metrics::Action::Write => {
                    written += 1;
                    hyp.get(written - 1).copied().unwrap_or("</s>")
                }
            };
            let attention = match (&r.attention, t) {
                (Some(att), t) if t > 0 => att[t - 1].iter().map(|w| format!("{w:.4}")).collect::<Vec<_>>().join(" "),
                _ => String::new(),
            };
            out.push_str(&format!("{t}\t{}\t{read}\t{written}\t{token}\t{attention}\n", a.symbol()));
        }
    }
    Ok(out)
}

/// Per-sentence attention norms, or `None` when no attention was logged.
pub fn attention_norms(records: &[TranscriptRecord], required: bool) -> LabResult<Option<Vec<f64>>> {
    if records.iter().all(|r| r.attention.is_none()) && !required {
        return Ok(None);
    }
    let mut norms = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let att = r
            .attention
            .as_ref()
            .ok_or_else(|| LabError::Data(format!("sentence {i} has no attention record")))?;
        if att.len() >= 2 {
            norms.push(attention_norm_profile(att)?);
        }
    }
    Ok(Some(norms))
}

fn report(cfg: &ExperimentConfig, out: &Path, logs: &[PathBuf], attention: bool) -> LabResult<Outcome> {
    if logs.is_empty() {
        return Err(LabError::Config("report needs at least one transcript log".into()));
    }
    let mut artifacts = Vec::new();
    let mut inputs = Vec::new();
    let mut metrics = serde_json::Map::new();
    for (k, path) in logs.iter().enumerate() {
        let records = read_records(path)?;
        if records.is_empty() {
            return Err(LabError::Data(format!("{} holds no transcripts", path.display())));
        }
        inputs.push(Artifact {
            path: format!("log-{k}"),
            sha256: crate::manifest::sha256_file(path)?,
        });
        let stem = format!("log-{k}");
        let lags = records.iter().map(record_lag).collect::<LabResult<Vec<_>>>()?;
        let bins = lag_histogram(&lags, &cfg.hist_edges)?;
        fs::write(out.join(format!("{stem}.lag_hist.csv")), histogram_csv(&bins))?;
        artifacts.push(format!("{stem}.lag_hist.csv"));
        fs::write(out.join(format!("{stem}.trace.tsv")), trace_dump(&records)?)?;
        artifacts.push(format!("{stem}.trace.tsv"));
        let mut entry = json!({
            "sentences": records.len(),
            "avl_mean": lags.iter().sum::<f64>() / lags.len() as f64,
            "lag_counts": bins.iter().map(|b| b.count).collect::<Vec<_>>(),
            "steps": records.iter().map(|r| r.actions.len()).sum::<usize>(),
        });
        if let Some(norms) = attention_norms(&records, attention)? {
            let mut csv = String::from("sentence,norm\n");
            for (i, n) in norms.iter().enumerate() {
                csv.push_str(&format!("{i},{n}\n"));
            }
            fs::write(out.join(format!("{stem}.attention_norms.csv")), csv)?;
            artifacts.push(format!("{stem}.attention_norms.csv"));
            entry["attention_norm_mean"] = json!(norms.iter().sum::<f64>() / norms.len().max(1) as f64);
        }
        metrics.insert(stem, entry);
    }
    Ok(Outcome {
        artifacts,
        inputs,
        metrics: Value::Object(metrics),
    })
}

fn compare(cfg: &ExperimentConfig, out: &Path, a: &Path, b: &Path) -> LabResult<Outcome> {
    let corpus = corpus(cfg)?;
    let text = corpus.splits()[Data::index(&cfg.split)?].1;
    let (ra, rb) = (read_records(a)?, read_records(b)?);
    check_alignment(&ra, text, &a.display().to_string())?;
    check_alignment(&rb, text, &b.display().to_string())?;
    let result = bootstrap(cfg, &ra, &rb, text)?;
    fs::write(out.join("compare.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    Ok(Outcome {
        artifacts: vec!["compare.json".into()],
        inputs: vec![
            Artifact {
                path: "a".into(),
                sha256: crate::manifest::sha256_file(a)?,
            },
            Artifact {
                path: "b".into(),
                sha256: crate::manifest::sha256_file(b)?,
            },
        ],
        metrics: result,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(src: &str, hyp: &str, actions: &str, attention: Option<Vec<Vec<f64>>>) -> TranscriptRecord {
        TranscriptRecord {
            src: src.into(),
            hyp: hyp.into(),
            actions: actions.into(),
            g: Vec::new(),
            rewards: Vec::new(),
            attention,
        }
    }

    #[test]
    fn lag_histogram_counts_match_hand_binning() {
        // Lags 1 (wait-1), 2 (wait-2) and 3 (consecutive on 3 tokens).
        let records = [
            record("a b c", "a b c", "RWRWRWW", None),
            record("a b c", "a b c", "RRWRWWW", None),
            record("a b c", "a b c", "RRRWWWW", None),
        ];
        let lags: Vec<f64> = records.iter().map(|r| record_lag(r).unwrap()).collect();
        assert_eq!(lags, vec![1.0, 2.0, 3.0]);
        let bins = lag_histogram(&lags, &[0.0, 1.5, 2.5, 10.0]).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 1, 1]);
    }

    #[test]
    fn constant_attention_is_a_point_mass_at_zero() {
        let att = vec![vec![0.25, 0.75]; 4];
        let records = [record("a b", "a b", "RRWWW", Some(att.clone())), record("a b", "a b", "RWRWW", Some(att))];
        assert_eq!(attention_norms(&records, true).unwrap(), Some(vec![0.0, 0.0]));
    }

    #[test]
    fn attention_reports_need_attention() {
        let records = [record("a b", "a b", "RRWWW", None)];
        assert_eq!(attention_norms(&records, false).unwrap(), None);
        assert!(matches!(attention_norms(&records, true), Err(LabError::Data(_))));
    }

    #[test]
    fn trace_has_one_row_per_action() {
        let att = vec![vec![0.5, 0.5]; 4];
        let records = [record("a b", "x y", "RRWWW", Some(att)), record("a b c", "x", "RWRRW", None)];
        let dump = trace_dump(&records).unwrap();
        let rows = dump.lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).count();
        assert_eq!(rows, 10);
        assert!(dump.contains("2\tW\t2\t1\tx\t0.5000 0.5000"));
        let bad = [record("a b", "x y", "RRWWW", Some(vec![vec![1.0]; 2]))];
        assert!(matches!(trace_dump(&bad), Err(LabError::Data(_))));
    }

    #[test]
    fn misaligned_logs_are_data_errors() {
        let text = ParallelText::new(vec!["a b".into(), "c".into()], vec!["a b".into(), "c".into()]).unwrap();
        let ok = [record("a b", "a b", "RRWWW", None), record("c", "c", "RWW", None)];
        check_alignment(&ok, &text, "log").unwrap();
        assert!(matches!(check_alignment(&ok[..1], &text, "log"), Err(LabError::Data(_))));
        let swapped = [ok[1].clone(), ok[0].clone()];
        assert!(matches!(check_alignment(&swapped, &text, "log"), Err(LabError::Data(_))));
        let unknown = [record("a <unk>", "a b", "RRWWW", None), ok[1].clone()];
        check_alignment(&unknown, &text, "log").unwrap();
        let short = [record("a", "a b", "RWWW", None), ok[1].clone()];
        assert!(matches!(check_alignment(&short, &text, "log"), Err(LabError::Data(_))));
    }
}
