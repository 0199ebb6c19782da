//! Flat `key = value` experiment configuration.
//!
//! Files hold one assignment per line; `#` starts a comment. Command-line
//! overrides are applied after the file. Every key must appear in [`KEYS`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use simt_core::agent::RLTrainConfig;
use simt_core::env::{DecoderInit, EnvTrainConfig};
use simt_core::features::{FeatureGeometry, FeatureKind, CONCEPT_SLOTS};
use simt_core::metrics::RewardConfig;

use crate::data::{Task, TaskSpec};
use crate::error::{LabError, LabResult};

/// Key, default value, description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("config", "RL-base", "preset: RL-base, RL-init, RL-att-OC, RL-att-VC, RL-init-att, RL-env, RL-env-init-att, wait-k, consecutive"),
    ("wait_k", "3", "k for the wait-k preset"),
    ("seed", "1", "seed for data, environment and agent"),
    ("replicas", "1", "RL runs with seeds seed, seed+1, ..."),
    ("task", "copy", "copy, reverse, ambiguous or external"),
    ("corpus_dir", "", "directory with {train,valid,test}.{src,tgt}; empty synthesizes the task"),
    ("vocab_size", "50", "plain words in a synthetic corpus"),
    ("min_len", "3", "shortest synthetic sentence"),
    ("max_len", "10", "longest synthetic sentence"),
    ("train_size", "2000", "synthetic training pairs"),
    ("valid_size", "200", "synthetic validation pairs"),
    ("test_size", "200", "synthetic test pairs"),
    ("ambiguous_words", "10", "ambiguous source words (ambiguous task)"),
    ("ambiguity_rate", "0.3", "probability of an ambiguous word per position"),
    ("features", "none", "none, oracle or file"),
    ("feature_dir", "", "directory with {train,valid,test}.feat when features = file"),
    ("feature_kind", "auto", "concepts, grid, or auto (grid for RL-att-OC, else concepts)"),
    ("noise_level", "0", "oracle feature noise; inf makes features independent of the sentence"),
    ("grid_regions", "16", "rows of oracle grid features"),
    ("env_dir", "", "directory holding env.ckpt and env.meta"),
    ("agent_dir", "", "directory holding a trained agent"),
    ("emb_dim", "200", "environment embedding size"),
    ("hidden_dim", "320", "environment GRU size"),
    ("decoder_init", "zero", "environment decoder start state: zero or last"),
    ("env_lr", "0.0004", "environment learning rate"),
    ("env_batch_size", "64", "environment batch size"),
    ("env_max_epochs", "100", "environment epoch limit"),
    ("env_patience", "10", "environment epochs without improvement before stopping"),
    ("env_target_bleu", "none", "stop pretraining once validation BLEU reaches this"),
    ("env_valid_limit", "none", "validate the environment on at most this many pairs"),
    ("agent_hidden", "320", "agent GRU size"),
    ("lr", "0.0004", "agent and baseline learning rate"),
    ("batch_size", "6", "sentence pairs per update"),
    ("trajectories", "5", "sampled trajectories per pair"),
    ("entropy_weight", "0.001", "entropy bonus"),
    ("tau", "1", "Gumbel-Softmax temperature"),
    ("gamma", "0.95", "return discount"),
    ("reward", "penalizing", "penalizing (alpha = -0.025) or bonus (alpha = +0.025)"),
    ("alpha", "auto", "wait coefficient; auto takes it from the reward preset"),
    ("beta", "-1", "proportion hinge coefficient"),
    ("target_wait", "2", "tolerated consecutive wait"),
    ("target_proportion", "0.3", "tolerated average proportion"),
    ("quality_scale", "0.01", "multiplier of BLEU-point rewards"),
    ("running_proportion", "false", "score the proportion hinge at every WRITE"),
    ("patience", "5", "validations without a better BLEU/AVP before stopping"),
    ("max_epochs", "50", "RL epoch limit"),
    ("epoch_pairs", "all", "training pairs per RL epoch"),
    ("valid_limit", "none", "RL validation pairs"),
    ("clip_norm", "5", "gradient norm clip, or none"),
    ("split", "test", "split evaluated by evaluate"),
    ("bootstrap_resamples", "1000", "paired bootstrap resamples"),
    ("hist_edges", "-2,0,1,2,3,4,5,6,8,10,15", "lag histogram bin edges"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    RlBase,
    RlInit,
    RlAttOc,
    RlAttVc,
    RlInitAtt,
    RlEnv,
    RlEnvInitAtt,
    WaitK,
    Consecutive,
}

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::RlBase,
        Preset::RlInit,
        Preset::RlAttOc,
        Preset::RlAttVc,
        Preset::RlInitAtt,
        Preset::RlEnv,
        Preset::RlEnvInitAtt,
        Preset::WaitK,
        Preset::Consecutive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::RlBase => "RL-base",
            Preset::RlInit => "RL-init",
            Preset::RlAttOc => "RL-att-OC",
            Preset::RlAttVc => "RL-att-VC",
            Preset::RlInitAtt => "RL-init-att",
            Preset::RlEnv => "RL-env",
            Preset::RlEnvInitAtt => "RL-env-init-att",
            Preset::WaitK => "wait-k",
            Preset::Consecutive => "consecutive",
        }
    }

    pub fn parse(s: &str) -> LabResult<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown configuration {s:?}")))
    }

    pub fn is_learned(self) -> bool {
        !matches!(self, Preset::WaitK | Preset::Consecutive)
    }

    /// Agent state initialized from the features.
    pub fn agent_init(self) -> bool {
        matches!(self, Preset::RlInit | Preset::RlInitAtt | Preset::RlEnvInitAtt)
    }

    /// Agent attends over the features at every step.
    pub fn agent_attend(self) -> bool {
        matches!(self, Preset::RlAttOc | Preset::RlAttVc | Preset::RlInitAtt | Preset::RlEnvInitAtt)
    }

    pub fn multimodal_env(self) -> bool {
        matches!(self, Preset::RlEnv | Preset::RlEnvInitAtt)
    }

    pub fn needs_features(self) -> bool {
        self.agent_init() || self.agent_attend() || self.multimodal_env()
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureSource {
    None,
    /// Synthesized from the target side with this noise level.
    Oracle(f64),
    File,
}

/// Raw settings: every registry key mapped to its current text value.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Settings {
    /// Defaults overridden by a config file's assignments.
    pub fn from_text(text: &str) -> LabResult<Self> {
        let mut s = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            s.set(k.trim(), v.trim())
                .map_err(|e| LabError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) -> LabResult<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(LabError::Config(format!("unknown key {key:?}"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> LabResult<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| LabError::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.values.clone()
    }

    /// The settings as a config file.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> LabResult<T> {
        let v = self.get(key);
        v.parse().map_err(|_| LabError::Config(format!("{key}: cannot parse {v:?}")))
    }

    fn optional<T: std::str::FromStr>(&self, key: &str, none: &str) -> LabResult<Option<T>> {
        if self.get(key) == none {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn resolve(&self) -> LabResult<ExperimentConfig> {
        let preset = Preset::parse(self.get("config"))?;
        let task = match self.get("task") {
            "external" => None,
            t => Some(Task::parse(t)?),
        };
        let corpus_dir = self.path("corpus_dir");
        if task.is_none() && corpus_dir.is_none() {
            return Err(LabError::Config("task = external needs corpus_dir".into()));
        }
        let spec = TaskSpec {
            task: task.unwrap_or(Task::Copy),
            vocab_size: self.parse("vocab_size")?,
            min_len: self.parse("min_len")?,
            max_len: self.parse("max_len")?,
            train: self.parse("train_size")?,
            valid: self.parse("valid_size")?,
            test: self.parse("test_size")?,
            ambiguous_words: self.parse("ambiguous_words")?,
            ambiguity_rate: self.parse("ambiguity_rate")?,
        };
        if task.is_some() {
            spec.validate()?;
        }

        let noise: f64 = self.parse("noise_level")?;
        if !(noise >= 0.0) {
            return Err(LabError::Config(format!("noise_level {noise} must be non-negative")));
        }
        let features = match self.get("features") {
            "none" => FeatureSource::None,
            "oracle" => FeatureSource::Oracle(noise),
            "file" => FeatureSource::File,
            f => return Err(LabError::Config(format!("unknown feature source {f:?}"))),
        };
        let feature_dir = self.path("feature_dir");
        if features == FeatureSource::File && feature_dir.is_none() {
            return Err(LabError::Config("features = file needs feature_dir".into()));
        }
        if matches!(features, FeatureSource::Oracle(_)) && task.is_none() {
            return Err(LabError::Config("oracle features need a synthetic task".into()));
        }
        if preset.needs_features() && features == FeatureSource::None {
            return Err(LabError::Config(format!("{preset} needs visual features")));
        }
        let kind = match self.get("feature_kind") {
            "auto" if preset == Preset::RlAttOc => FeatureKind::Grid,
            "auto" | "concepts" => FeatureKind::Concepts,
            "grid" => FeatureKind::Grid,
            k => return Err(LabError::Config(format!("unknown feature kind {k:?}"))),
        };
        match (preset, kind) {
            (Preset::RlAttOc, FeatureKind::Concepts) => return Err(LabError::Config("RL-att-OC attends over grid features".into())),
            (Preset::RlAttVc, FeatureKind::Grid) => return Err(LabError::Config("RL-att-VC attends over concept features".into())),
            _ => {}
        }
        let grid_regions: usize = self.parse("grid_regions")?;
        let geometry = match kind {
            FeatureKind::Grid => FeatureGeometry::grid(grid_regions, simt_core::features::CONCEPT_DIM),
            FeatureKind::Concepts => FeatureGeometry::concepts(),
        };
        if kind == FeatureKind::Grid && grid_regions == 0 {
            return Err(LabError::Config("grid_regions must be positive".into()));
        }
        debug_assert!(kind == FeatureKind::Grid || geometry.rows == CONCEPT_SLOTS);

        let decoder_init = DecoderInit::parse(self.get("decoder_init"))?;
        let env = EnvTrainConfig {
            emb_dim: self.parse("emb_dim")?,
            hidden_dim: self.parse("hidden_dim")?,
            batch_size: self.parse("env_batch_size")?,
            lr: self.parse("env_lr")?,
            max_epochs: self.parse("env_max_epochs")?,
            patience: self.parse("env_patience")?,
            clip_norm: self.optional("clip_norm", "none")?,
            valid_limit: self.optional("env_valid_limit", "none")?,
            target_bleu: self.optional("env_target_bleu", "none")?,
            decoder_init,
            seed: self.parse("seed")?,
        };

        let mut reward = match self.get("reward") {
            "penalizing" => RewardConfig::penalizing(),
            "bonus" => RewardConfig::default(),
            r => return Err(LabError::Config(format!("unknown reward preset {r:?}"))),
        };
        if let Some(a) = self.optional("alpha", "auto")? {
            reward.alpha = a;
        }
        reward.beta = self.parse("beta")?;
        reward.target_wait = self.parse("target_wait")?;
        reward.target_proportion = self.parse("target_proportion")?;
        reward.quality_scale = self.parse("quality_scale")?;
        reward.running_proportion = self.parse("running_proportion")?;

        let rl = RLTrainConfig {
            hidden_dim: self.parse("agent_hidden")?,
            lr: self.parse("lr")?,
            batch_size: self.parse("batch_size")?,
            trajectories: self.parse("trajectories")?,
            entropy_weight: self.parse("entropy_weight")?,
            tau: self.parse("tau")?,
            gamma: self.parse("gamma")?,
            reward,
            patience: self.parse("patience")?,
            max_epochs: self.parse("max_epochs")?,
            epoch_pairs: self.optional("epoch_pairs", "all")?,
            valid_limit: self.optional("valid_limit", "none")?,
            clip_norm: self.optional("clip_norm", "none")?,
            seed: self.parse("seed")?,
        };
        rl.validate()?;

        let wait_k: usize = self.parse("wait_k")?;
        if wait_k == 0 {
            return Err(LabError::Config("wait_k must be positive".into()));
        }
        let replicas: usize = self.parse("replicas")?;
        if replicas == 0 {
            return Err(LabError::Config("replicas must be positive".into()));
        }
        let split = match self.get("split") {
            s @ ("train" | "valid" | "test") => s.to_string(),
            s => return Err(LabError::Config(format!("unknown split {s:?}"))),
        };
        let hist_edges = self
            .get("hist_edges")
            .split(',')
            .map(|e| e.trim().parse::<f64>().map_err(|_| LabError::Config(format!("hist_edges: bad edge {e:?}"))))
            .collect::<LabResult<Vec<f64>>>()?;

        Ok(ExperimentConfig {
            preset,
            wait_k,
            seed: self.parse("seed")?,
            replicas,
            task,
            spec,
            corpus_dir,
            features,
            feature_dir,
            geometry,
            env_dir: self.path("env_dir"),
            agent_dir: self.path("agent_dir"),
            env,
            rl,
            split,
            bootstrap_resamples: self.parse("bootstrap_resamples")?,
            hist_edges,
            snapshot: self.snapshot(),
        })
    }
}

/// Typed, validated settings.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub wait_k: usize,
    pub seed: u64,
    pub replicas: usize,
    /// `None` for an external corpus.
    pub task: Option<Task>,
    pub spec: TaskSpec,
    pub corpus_dir: Option<PathBuf>,
    pub features: FeatureSource,
    pub feature_dir: Option<PathBuf>,
    pub geometry: FeatureGeometry,
    pub env_dir: Option<PathBuf>,
    pub agent_dir: Option<PathBuf>,
    pub env: EnvTrainConfig,
    pub rl: RLTrainConfig,
    pub split: String,
    pub bootstrap_resamples: usize,
    pub hist_edges: Vec<f64>,
    pub snapshot: BTreeMap<String, String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = Settings::default().resolve().unwrap();
        assert_eq!(c.preset, Preset::RlBase);
        assert_eq!(c.env.emb_dim, 200);
        assert_eq!(c.env.hidden_dim, 320);
        assert_eq!(c.rl.hidden_dim, 320);
        assert_eq!(c.rl.batch_size, 6);
        assert_eq!(c.rl.trajectories, 5);
        assert_eq!(c.rl.reward.alpha, -0.025);
        assert_eq!(c.rl.reward.beta, -1.0);
        assert_eq!(c.rl.lr, 0.0004);
        assert_eq!(c.rl.entropy_weight, 0.001);
        assert_eq!(c.rl.epoch_pairs, None);
    }

    #[test]
    fn exactly_nine_presets() {
        for p in Preset::ALL {
            assert_eq!(Preset::parse(p.name()).unwrap(), p);
        }
        for bad in ["RL-env-att", "rl-base", "wait-3", "RL-att", ""] {
            assert!(matches!(Preset::parse(bad), Err(LabError::Config(_))), "{bad}");
        }
        assert_eq!(Preset::ALL.iter().filter(|p| p.is_learned()).count(), 7);
    }

    #[test]
    fn file_then_overrides() {
        let mut s = Settings::from_text("# comment\ntask = reverse\nlr = 0.01  # inline\n\nreward = bonus\n").unwrap();
        s.apply("lr=0.02").unwrap();
        let c = s.resolve().unwrap();
        assert_eq!(c.task, Some(Task::Reverse));
        assert_eq!(c.rl.lr, 0.02);
        assert_eq!(c.rl.reward.alpha, 0.025);
        s.apply("alpha=-0.5").unwrap();
        assert_eq!(s.resolve().unwrap().rl.reward.alpha, -0.5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(Settings::from_text("colour = red"), Err(LabError::Config(_))));
        assert!(matches!(Settings::from_text("no equals sign"), Err(LabError::Config(_))));
        let mut s = Settings::default();
        s.set("lr", "fast").unwrap();
        assert!(matches!(s.resolve(), Err(LabError::Config(_))));
        let mut s = Settings::default();
        s.set("config", "RL-env").unwrap();
        assert!(matches!(s.resolve(), Err(LabError::Config(_))), "RL-env without features");
        s.set("features", "oracle").unwrap();
        assert!(s.resolve().is_ok());
        s.set("config", "RL-att-VC").unwrap();
        s.set("feature_kind", "grid").unwrap();
        assert!(matches!(s.resolve(), Err(LabError::Config(_))));
    }

    #[test]
    fn feature_kind_follows_the_preset() {
        let mut s = Settings::default();
        s.set("features", "oracle").unwrap();
        s.set("config", "RL-att-OC").unwrap();
        assert_eq!(s.resolve().unwrap().geometry.kind, FeatureKind::Grid);
        s.set("config", "RL-att-VC").unwrap();
        assert_eq!(s.resolve().unwrap().geometry, FeatureGeometry::concepts());
        s.set("noise_level", "inf").unwrap();
        assert_eq!(s.resolve().unwrap().features, FeatureSource::Oracle(f64::INFINITY));
    }

    #[test]
    fn text_round_trip() {
        let mut s = Settings::default();
        s.apply("task=ambiguous").unwrap();
        assert_eq!(Settings::from_text(&s.to_text()).unwrap(), s);
    }

    proptest::proptest! {
        #[test]
        fn random_settings_survive_the_text_form(seed in 0u64..1_000_000, lr in 1e-6f64..1.0, wait_k in 1usize..20, preset in 0usize..9) {
            let mut s = Settings::default();
            s.set("seed", &seed.to_string()).unwrap();
            s.set("lr", &lr.to_string()).unwrap();
            s.set("wait_k", &wait_k.to_string()).unwrap();
            s.set("config", Preset::ALL[preset].name()).unwrap();
            s.set("features", "oracle").unwrap();
            let back = Settings::from_text(&s.to_text()).unwrap();
            proptest::prop_assert_eq!(back.snapshot(), s.snapshot());
            let (a, b) = (s.resolve().unwrap(), back.resolve().unwrap());
            proptest::prop_assert_eq!(a.rl.lr, lr);
            proptest::prop_assert_eq!(b.rl.lr, lr);
            proptest::prop_assert_eq!(b.seed, seed);
            proptest::prop_assert_eq!(b.preset, Preset::ALL[preset]);
        }
    }
}
