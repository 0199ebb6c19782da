//! The recurrent READ/WRITE agent, its scalar baseline, and Gumbel-Softmax
//! action sampling.

use rand::Rng;
use rand_distr::Gumbel;

use crate::env::EnvModel;
use crate::error::{shape_err, Result, SimtError};
use crate::features::{project, FeatureGeometry, FeatureSet};
use crate::nn::{gru_cell, GruParams, Linear};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tape::{mat_mul, Tape, Var};

pub const AGENT_HIDDEN_DIM: usize = 320;

/// Shape of an agent: the environment dims it observes and which visual
/// switches are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentSpec {
    /// Width of the environment's textual context.
    pub text_dim: usize,
    /// Width of the environment's target embeddings.
    pub emb_dim: usize,
    pub hidden_dim: usize,
    /// Initialise the recurrent state from these features.
    pub init: Option<FeatureGeometry>,
    /// Attend over these features at every step.
    pub attend: Option<FeatureGeometry>,
}

impl AgentSpec {
    pub fn for_env(env: &EnvModel, hidden_dim: usize, init: Option<FeatureGeometry>, attend: Option<FeatureGeometry>) -> Self {
        AgentSpec {
            text_dim: env.hidden_dim,
            emb_dim: env.emb_dim,
            hidden_dim,
            init,
            attend,
        }
    }

    pub fn observation_dim(&self) -> usize {
        self.text_dim + self.emb_dim + 2 + if self.attend.is_some() { self.text_dim } else { 0 }
    }

    /// The feature geometry the agent consumes, if any.
    pub fn features(&self) -> Option<FeatureGeometry> {
        self.init.or(self.attend)
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_dim == 0 || self.emb_dim == 0 || self.hidden_dim == 0 {
            return Err(SimtError::Config("agent dims must be positive".into()));
        }
        if let (Some(a), Some(b)) = (self.init, self.attend) {
            if a != b {
                return Err(SimtError::Config(
                    "initialisation and attention must use the same features".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn check_features(&self, features: Option<&FeatureSet>) -> Result<()> {
        match (self.features(), features) {
            (None, _) => Ok(()),
            (Some(g), Some(f)) => f.check(&g),
            (Some(_), None) => Err(SimtError::Config("this agent needs visual features".into())),
        }
    }
}

/// What the agent sees at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub text_context: Vec<f64>,
    /// Embedding of the environment's proposed token.
    pub token_embedding: Vec<f64>,
    /// `[p_read, p_write]` fed back from the previous step.
    pub prev_action: [f64; 2],
    pub visual_context: Option<Vec<f64>>,
}

impl Observation {
    pub fn assemble(&self, spec: &AgentSpec) -> Result<Vec<f64>> {
        let visual_len = self.visual_context.as_ref().map_or(0, Vec::len);
        let expect_visual = if spec.attend.is_some() { spec.text_dim } else { 0 };
        if self.text_context.len() != spec.text_dim
            || self.token_embedding.len() != spec.emb_dim
            || visual_len != expect_visual
            || spec.attend.is_some() != self.visual_context.is_some()
        {
            return Err(shape_err(
                "observation",
                format!(
                    "parts {}+{}+2+{visual_len} for expected width {}",
                    self.text_context.len(),
                    self.token_embedding.len(),
                    spec.observation_dim()
                ),
            ));
        }
        let total: f64 = self.prev_action.iter().sum();
        if self.prev_action.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-9 {
            return Err(SimtError::Contract(format!("previous action {:?} is not a distribution", self.prev_action)));
        }
        let mut out = Vec::with_capacity(spec.observation_dim());
        out.extend_from_slice(&self.text_context);
        out.extend_from_slice(&self.token_embedding);
        out.extend_from_slice(&self.prev_action);
        if let Some(v) = &self.visual_context {
            out.extend_from_slice(v);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct Core {
    gru: GruParams,
    head: Linear,
    init: Option<ParamId>,
}

impl Core {
    fn new(store: &mut ParamStore, prefix: &str, spec: &AgentSpec, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let h = spec.hidden_dim;
        Ok(Core {
            gru: GruParams::new(store, &format!("{prefix}.gru"), spec.observation_dim(), h, rng)?,
            head: Linear::new(store, &format!("{prefix}.head"), h, outputs, true, rng)?,
            init: match spec.init {
                Some(g) => Some(store.uniform(format!("{prefix}.init"), vec![g.flat_len(), h], rng)?),
                None => None,
            },
        })
    }

    fn initial_state(&self, spec: &AgentSpec, store: &ParamStore, features: Option<&FeatureSet>) -> Result<Vec<f64>> {
        let (Some(g), Some(w)) = (spec.init, self.init) else {
            return Ok(vec![0.0; spec.hidden_dim]);
        };
        let f = features.ok_or_else(|| SimtError::Config("visual initialisation needs features".into()))?;
        f.check(&g)?;
        Ok(mat_mul(1, g.flat_len(), spec.hidden_dim, f.data(), store.get(w).data()))
    }

    fn initial_var(&self, spec: &AgentSpec, tape: &mut Tape, b: &Binding, features: Option<&FeatureSet>) -> Result<Var> {
        let (Some(g), Some(w)) = (spec.init, self.init) else {
            return Ok(tape.row(vec![0.0; spec.hidden_dim]));
        };
        let f = features.ok_or_else(|| SimtError::Config("visual initialisation needs features".into()))?;
        f.check(&g)?;
        let flat = tape.row(f.flatten());
        tape.matmul(flat, b[w])
    }
}

/// Projected features the agent attends over: keys `[1, R, emb]` and
/// values `[1, R, text]`.
#[derive(Debug, Clone, Copy)]
pub struct AgentMemory {
    pub keys: Var,
    pub values: Var,
    pub rows: usize,
}

/// Plain-valued [`AgentMemory`] computed once per episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryValues {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub rows: usize,
}

impl MemoryValues {
    pub fn bind(&self, tape: &mut Tape, spec: &AgentSpec) -> Result<AgentMemory> {
        Ok(AgentMemory {
            keys: tape.constant(vec![1, self.rows, spec.emb_dim], self.keys.clone())?,
            values: tape.constant(vec![1, self.rows, spec.text_dim], self.values.clone())?,
            rows: self.rows,
        })
    }
}

/// Dot-product attention of a `[1, emb]` query over the memory keys,
/// returning `(context [1, text], weights [1, R])`.
pub fn agent_visual_attention(tape: &mut Tape, memory: &AgentMemory, query: Var) -> Result<(Var, Var)> {
    if memory.rows == 0 {
        return Err(SimtError::EmptyKeys);
    }
    let scores = tape.scores(memory.keys, query)?;
    let weights = tape.masked_softmax(scores, &[memory.rows])?;
    let ctx = tape.context(weights, memory.values)?;
    Ok((ctx, weights))
}

/// Tape handles produced by one agent step.
#[derive(Debug, Clone, Copy)]
pub struct AgentStep {
    pub hidden: Var,
    pub logits: Var,
    pub visual_context: Option<Var>,
    pub attention: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct AgentNetwork {
    pub spec: AgentSpec,
    pub params: ParamStore,
    core: Core,
    keys: Option<ParamId>,
    values: Option<ParamId>,
}

impl AgentNetwork {
    pub fn new(spec: AgentSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let core = Core::new(&mut params, "agent", &spec, 2, rng)?;
        let (keys, values) = match spec.attend {
            Some(g) => (
                Some(params.uniform("agent.keys", vec![g.cols, spec.emb_dim], rng)?),
                Some(params.uniform("agent.values", vec![g.cols, spec.text_dim], rng)?),
            ),
            None => (None, None),
        };
        Ok(AgentNetwork {
            spec,
            params,
            core,
            keys,
            values,
        })
    }

    pub fn with_params(mut self, params: &ParamStore) -> Result<Self> {
        self.params.load_from(params)?;
        Ok(self)
    }

    pub fn head(&self) -> &Linear {
        &self.core.head
    }

    /// Starting recurrent state: zero, or a bias-free projection of the
    /// flattened features when visual initialisation is on.
    pub fn initial_state(&self, features: Option<&FeatureSet>) -> Result<Vec<f64>> {
        self.core.initial_state(&self.spec, &self.params, features)
    }

    pub fn initial_var(&self, tape: &mut Tape, b: &Binding, features: Option<&FeatureSet>) -> Result<Var> {
        self.core.initial_var(&self.spec, tape, b, features)
    }

    /// Projects features into attention keys and values, or `None` when the
    /// agent does not attend.
    pub fn memory_values(&self, features: Option<&FeatureSet>) -> Result<Option<MemoryValues>> {
        let (Some(g), Some(k), Some(v)) = (self.spec.attend, self.keys, self.values) else {
            return Ok(None);
        };
        let f = features.ok_or_else(|| SimtError::Config("visual attention needs features".into()))?;
        f.check(&g)?;
        if f.rows == 0 {
            return Err(SimtError::EmptyKeys);
        }
        Ok(Some(MemoryValues {
            keys: project(f, self.params.get(k).data(), self.spec.emb_dim)?,
            values: project(f, self.params.get(v).data(), self.spec.text_dim)?,
            rows: f.rows,
        }))
    }

    /// The same projections on the tape, so they can be trained.
    pub fn memory_vars(&self, tape: &mut Tape, b: &Binding, features: Option<&FeatureSet>) -> Result<Option<AgentMemory>> {
        let (Some(g), Some(k), Some(v)) = (self.spec.attend, self.keys, self.values) else {
            return Ok(None);
        };
        let f = features.ok_or_else(|| SimtError::Config("visual attention needs features".into()))?;
        f.check(&g)?;
        let raw = tape.constant(vec![f.rows, f.cols], f.data().to_vec())?;
        let keys = tape.matmul(raw, b[k])?;
        let keys = tape.reshape(keys, vec![1, f.rows, self.spec.emb_dim])?;
        let values = tape.matmul(raw, b[v])?;
        let values = tape.reshape(values, vec![1, f.rows, self.spec.text_dim])?;
        Ok(Some(AgentMemory {
            keys,
            values,
            rows: f.rows,
        }))
    }

    /// One recurrent step. `obs.visual_context` is ignored: the visual
    /// context is recomputed from `memory` with the token embedding as query.
    pub fn step(&self, tape: &mut Tape, b: &Binding, memory: Option<&AgentMemory>, obs: &Observation, hidden: Var) -> Result<AgentStep> {
        if memory.is_some() != self.spec.attend.is_some() {
            return Err(SimtError::Config("attention memory does not match the agent".into()));
        }
        let text = tape.row(obs.text_context.clone());
        let query = tape.row(obs.token_embedding.clone());
        let prev = tape.row(obs.prev_action.to_vec());
        let (input, visual_context, attention) = match memory {
            Some(m) => {
                let (ctx, w) = agent_visual_attention(tape, m, query)?;
                (tape.concat(&[text, query, prev, ctx])?, Some(ctx), Some(w))
            }
            None => (tape.concat(&[text, query, prev])?, None, None),
        };
        if tape.shape(input)[1] != self.spec.observation_dim() {
            return Err(shape_err(
                "agent step",
                format!("observation width {} != {}", tape.shape(input)[1], self.spec.observation_dim()),
            ));
        }
        let hidden = gru_cell(tape, b, &self.core.gru, input, hidden)?;
        let logits = self.core.head.forward(tape, b, hidden)?;
        Ok(AgentStep {
            hidden,
            logits,
            visual_context,
            attention,
        })
    }
}

/// Scalar return predictor with the agent's recurrent structure. It reads
/// the agent's assembled observations as constants.
#[derive(Debug, Clone)]
pub struct BaselineNetwork {
    pub spec: AgentSpec,
    pub params: ParamStore,
    core: Core,
}

impl BaselineNetwork {
    pub fn new(spec: AgentSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let core = Core::new(&mut params, "baseline", &spec, 1, rng)?;
        Ok(BaselineNetwork { spec, params, core })
    }

    pub fn with_params(mut self, params: &ParamStore) -> Result<Self> {
        self.params.load_from(params)?;
        Ok(self)
    }

    pub fn initial_state(&self, features: Option<&FeatureSet>) -> Result<Vec<f64>> {
        self.core.initial_state(&self.spec, &self.params, features)
    }

    pub fn initial_var(&self, tape: &mut Tape, b: &Binding, features: Option<&FeatureSet>) -> Result<Var> {
        self.core.initial_var(&self.spec, tape, b, features)
    }

    /// Returns `(hidden, value [1, 1])`.
    pub fn step(&self, tape: &mut Tape, b: &Binding, obs: &Observation, hidden: Var) -> Result<(Var, Var)> {
        let x = tape.row(obs.assemble(&self.spec)?);
        let hidden = gru_cell(tape, b, &self.core.gru, x, hidden)?;
        let value = self.core.head.forward(tape, b, hidden)?;
        Ok((hidden, value))
    }

    /// Predicted returns for an observation sequence.
    pub fn predict(&self, features: Option<&FeatureSet>, observations: &[Observation]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let mut h = self.initial_var(&mut tape, &b, features)?;
        let mut out = Vec::with_capacity(observations.len());
        for obs in observations {
            let (next, v) = self.step(&mut tape, &b, obs, h)?;
            out.push(tape.scalar(v));
            h = next;
        }
        Ok(out)
    }
}

/// `softmax((logits + noise) / tau)` and its argmax.
pub fn gumbel_softmax_with_noise(logits: &[f64], noise: &[f64], tau: f64) -> Result<(Vec<f64>, usize)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(SimtError::Config(format!("Gumbel temperature {tau} must be positive")));
    }
    if logits.len() != noise.len() || logits.is_empty() {
        return Err(shape_err("gumbel_softmax", format!("{} logits, {} noise draws", logits.len(), noise.len())));
    }
    let scaled: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / tau).collect();
    let probs = crate::nn::softmax(&scaled);
    let hard = crate::nn::argmax(&probs);
    Ok((probs, hard))
}

pub fn gumbel_softmax_sample(logits: &[f64], tau: f64, rng: &mut impl Rng) -> Result<(Vec<f64>, usize)> {
    let dist = Gumbel::new(0.0, 1.0).expect("standard Gumbel parameters are valid");
    let noise: Vec<f64> = logits.iter().map(|_| rng.sample(dist)).collect();
    gumbel_softmax_with_noise(logits, &noise, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(init: bool, attend: bool) -> AgentSpec {
        let g = FeatureGeometry::grid(3, 4);
        AgentSpec {
            text_dim: 5,
            emb_dim: 4,
            hidden_dim: 6,
            init: init.then_some(g),
            attend: attend.then_some(g),
        }
    }

    fn features(seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSet::new(FeatureKind::Grid, 3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn observation_widths_at_full_size() {
        let mut s = AgentSpec {
            text_dim: 320,
            emb_dim: 200,
            hidden_dim: AGENT_HIDDEN_DIM,
            init: None,
            attend: None,
        };
        assert_eq!(s.observation_dim(), 522);
        s.attend = Some(FeatureGeometry::concepts());
        assert_eq!(s.observation_dim(), 842);
    }

    #[test]
    fn observation_assembly_checks_widths() {
        let s = spec(false, true);
        let mut obs = Observation {
            text_context: vec![0.1; 5],
            token_embedding: vec![0.2; 4],
            prev_action: [1.0, 0.0],
            visual_context: Some(vec![0.3; 5]),
        };
        assert_eq!(obs.assemble(&s).unwrap().len(), 16);
        obs.visual_context = None;
        assert!(obs.assemble(&s).is_err());
        obs.visual_context = Some(vec![0.3; 5]);
        obs.prev_action = [0.7, 0.7];
        assert!(obs.assemble(&s).is_err());
    }

    #[test]
    fn initial_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plain = AgentNetwork::new(spec(false, false), &mut rng).unwrap();
        assert_eq!(plain.initial_state(None).unwrap(), vec![0.0; 6]);
        let init = AgentNetwork::new(spec(true, false), &mut rng).unwrap();
        let zero = FeatureSet::zeros(spec(true, false).init.unwrap());
        assert_eq!(init.initial_state(Some(&zero)).unwrap(), vec![0.0; 6]);
        let a = init.initial_state(Some(&features(1))).unwrap();
        let b = init.initial_state(Some(&features(2))).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, init.initial_state(Some(&features(1))).unwrap());
        assert!(init.initial_state(None).is_err());
        let wrong = FeatureSet::zeros(FeatureGeometry::grid(2, 2));
        assert!(init.initial_state(Some(&wrong)).is_err());
        // Tape and plain paths agree.
        let mut tape = Tape::new();
        let bind = init.params.bind(&mut tape, false);
        let v = init.initial_var(&mut tape, &bind, Some(&features(1))).unwrap();
        for (x, y) in tape.value(v).iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn attention_weights(keys: Vec<f64>, rows: usize, query: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let d = query.len();
        let values: Vec<f64> = (0..rows * 2).map(|i| i as f64).collect();
        let m = AgentMemory {
            keys: tape.constant(vec![1, rows, d], keys).unwrap(),
            values: tape.constant(vec![1, rows, 2], values).unwrap(),
            rows,
        };
        let q = tape.row(query);
        let (c, w) = agent_visual_attention(&mut tape, &m, q).unwrap();
        (tape.value(c).to_vec(), tape.value(w).to_vec())
    }

    #[test]
    fn attention_examples() {
        let (c, w) = attention_weights(vec![0.3, -0.2], 1, vec![1.0, 2.0]);
        assert_eq!(w, vec![1.0]);
        assert_eq!(c, vec![0.0, 1.0]);
        let (_, w) = attention_weights(vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5], 3, vec![1.0, -1.0]);
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        // The row aligned with the query dominates.
        let (_, w) = attention_weights(vec![0.1, 0.0, 2.0, 1.0, 0.0, 0.3], 3, vec![2.0, 1.0]);
        assert_eq!(crate::nn::argmax(&w), 1);
        let mut tape = Tape::new();
        let m = AgentMemory {
            keys: tape.constant(vec![1, 0, 2], vec![]).unwrap(),
            values: tape.constant(vec![1, 0, 2], vec![]).unwrap(),
            rows: 0,
        };
        let q = tape.row(vec![1.0, 0.0]);
        assert!(matches!(agent_visual_attention(&mut tape, &m, q), Err(SimtError::EmptyKeys)));
    }

    #[test]
    fn step_distribution_and_memory_paths_agree() {
        let s = spec(true, true);
        let agent = AgentNetwork::new(s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let f = features(4);
        let obs = Observation {
            text_context: vec![0.1, -0.2, 0.3, 0.0, 0.5],
            token_embedding: vec![0.4, 0.1, -0.3, 0.2],
            prev_action: [1.0, 0.0],
            visual_context: None,
        };
        let mut outs = Vec::new();
        for plain in [true, false] {
            let mut tape = Tape::new();
            let b = agent.params.bind(&mut tape, false);
            let m = if plain {
                agent.memory_values(Some(&f)).unwrap().unwrap().bind(&mut tape, &s).unwrap()
            } else {
                agent.memory_vars(&mut tape, &b, Some(&f)).unwrap().unwrap()
            };
            let h = agent.initial_var(&mut tape, &b, Some(&f)).unwrap();
            let st = agent.step(&mut tape, &b, Some(&m), &obs, h).unwrap();
            let p = crate::nn::softmax(tape.value(st.logits));
            assert_eq!(p.len(), 2);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            outs.push(tape.value(st.logits).to_vec());
        }
        for (a, b) in outs[0].iter().zip(&outs[1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_examples() {
        let (p, _) = gumbel_softmax_with_noise(&[0.3, 0.3], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(gumbel_softmax_with_noise(&[0.0, 1.0], &[0.0, 0.0], 0.0).is_err());
        assert!(gumbel_softmax_sample(&[0.0, 1.0], -1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let (p, _) = gumbel_softmax_with_noise(&[0.4, 0.35], &[0.0, 0.0], 0.01).unwrap();
        assert!(p[0] >= 0.99);
        // Sharpening fails only when the noisy gap is within 4.6 tau of zero.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dist = Gumbel::new(0.0, 1.0).unwrap();
        let mut total = 0.0;
        for _ in 0..2000 {
            let noise = [rng.sample(dist), rng.sample(dist)];
            let (p, hard) = gumbel_softmax_with_noise(&[0.4, -0.2], &noise, 0.01).unwrap();
            if ((0.4 + noise[0]) - (-0.2 + noise[1])).abs() > 0.0461 {
                assert!(p[hard] >= 0.99);
            }
            total += p[hard];
        }
        assert!(total / 2000.0 >= 0.99);
    }

    #[test]
    fn baseline_predicts_one_value_per_step() {
        let s = spec(false, false);
        let base = BaselineNetwork::new(s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let obs = Observation {
            text_context: vec![0.0; 5],
            token_embedding: vec![0.0; 4],
            prev_action: [0.0, 1.0],
            visual_context: None,
        };
        assert_eq!(base.predict(None, &[obs.clone(), obs]).unwrap().len(), 2);
    }
}
