//! The READ/WRITE simulation loop and deterministic baseline policies.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{max_output_len, EnvModel, Proposal, VisualMemory};
use crate::error::{Result, SimtError};
use crate::metrics::{actions_to_string, delays_from_actions, parse_actions, Action};
use crate::vocab::{Vocabulary, EOS};

/// What a policy sees before choosing an action.
pub struct StepContext<'a> {
    pub src_len: usize,
    pub read: usize,
    pub written: usize,
    pub proposal: &'a Proposal,
    /// Set when only one action is legal; the policy's answer is ignored.
    pub forced: Option<Action>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    /// Agent-side visual attention for this step, if any.
    pub attention: Option<Vec<f64>>,
}

impl From<Action> for Decision {
    fn from(action: Action) -> Self {
        Decision { action, attention: None }
    }
}

pub trait Policy {
    fn reset(&mut self, src: &[usize]) -> Result<()>;

    /// Called at every step after the initial READ, including forced steps.
    fn decide(&mut self, ctx: &StepContext<'_>) -> Result<Decision>;
}

/// Reads the whole source before writing.
#[derive(Debug, Clone, Default)]
pub struct Consecutive;

impl Policy for Consecutive {
    fn reset(&mut self, _src: &[usize]) -> Result<()> {
        Ok(())
    }

    fn decide(&mut self, _ctx: &StepContext<'_>) -> Result<Decision> {
        Ok(Action::Read.into())
    }
}

/// Reads `k` tokens, then alternates WRITE and READ.
#[derive(Debug, Clone)]
pub struct WaitK {
    k: usize,
}

impl WaitK {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(SimtError::Config("wait-k needs k >= 1".into()));
        }
        Ok(WaitK { k })
    }
}

impl Policy for WaitK {
    fn reset(&mut self, _src: &[usize]) -> Result<()> {
        Ok(())
    }

    fn decide(&mut self, ctx: &StepContext<'_>) -> Result<Decision> {
        Ok(if ctx.read >= self.k + ctx.written {
            Action::Write
        } else {
            Action::Read
        }
        .into())
    }
}

/// Uniformly random actions, for robustness checks.
pub struct RandomPolicy<R: Rng> {
    pub rng: R,
    pub write_prob: f64,
}

impl<R: Rng> Policy for RandomPolicy<R> {
    fn reset(&mut self, _src: &[usize]) -> Result<()> {
        Ok(())
    }

    fn decide(&mut self, _ctx: &StepContext<'_>) -> Result<Decision> {
        Ok(if self.rng.gen_bool(self.write_prob) {
            Action::Write
        } else {
            Action::Read
        }
        .into())
    }
}

/// One simultaneous decoding episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub src: Vec<usize>,
    /// Committed tokens, ending with EOS when the episode ended on it.
    pub hyp: Vec<usize>,
    pub actions: Vec<Action>,
    /// Source tokens read when each content token was committed.
    pub g: Vec<usize>,
    pub rewards: Vec<f64>,
    pub attention: Option<Vec<Vec<f64>>>,
    /// Whether each action was forced rather than chosen.
    pub forced: Vec<bool>,
}

impl Transcript {
    /// Hypothesis without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        match self.hyp.last() {
            Some(&EOS) => &self.hyp[..self.hyp.len() - 1],
            _ => &self.hyp,
        }
    }

    pub fn reads(&self) -> usize {
        self.actions.iter().filter(|a| **a == Action::Read).count()
    }

    pub fn writes(&self) -> usize {
        self.actions.iter().filter(|a| **a == Action::Write).count()
    }

    pub fn check(&self) -> Result<()> {
        let fail = |m: String| Err(SimtError::Contract(m));
        if self.writes() != self.hyp.len() {
            return fail(format!("{} WRITEs for {} committed tokens", self.writes(), self.hyp.len()));
        }
        if self.reads() > self.src.len() {
            return fail(format!("{} READs for {} source tokens", self.reads(), self.src.len()));
        }
        if self.g.len() != self.content().len() {
            return fail(format!("{} delays for {} content tokens", self.g.len(), self.content().len()));
        }
        if self.g.iter().any(|&d| d == 0 || d > self.src.len()) || self.g.windows(2).any(|w| w[1] < w[0]) {
            return fail(format!("invalid delays {:?}", self.g));
        }
        if delays_from_actions(&self.actions)[..self.g.len()] != self.g[..] {
            return fail("delays disagree with the action string".into());
        }
        if self.forced.len() != self.actions.len() {
            return fail("forced flags do not match actions".into());
        }
        Ok(())
    }
}

/// Runs `policy` against the environment on one source sentence. The first
/// action is always READ, an exhausted source forces WRITE, and the episode
/// ends on EOS or at the output-length cap. EOS is only proposed once the
/// whole source has been read.
pub fn simulate(policy: &mut dyn Policy, env: &EnvModel, src: &[usize], visual: Option<&VisualMemory>) -> Result<Transcript> {
    if src.is_empty() {
        return Err(SimtError::Empty("source sentence".into()));
    }
    policy.reset(src)?;
    let cap = max_output_len(src.len());
    let mut enc = env.encode_next(&env.empty_encoder(), src[0])?;
    let mut dec = env.start_decoder();
    let mut t = Transcript {
        src: src.to_vec(),
        hyp: Vec::new(),
        actions: vec![Action::Read],
        g: Vec::new(),
        rewards: Vec::new(),
        attention: None,
        forced: vec![true],
    };
    let mut attention: Vec<Vec<f64>> = Vec::new();
    let propose = |dec: &_, enc: &crate::env::EncoderState| -> Result<Proposal> {
        let p = env.propose_next(dec, enc, visual)?;
        if enc.read() < src.len() {
            env.suppress_eos(p)
        } else {
            Ok(p)
        }
    };
    let mut proposal = propose(&dec, &enc)?;
    while !dec.finished() && t.hyp.len() < cap {
        let forced = (enc.read() == src.len()).then_some(Action::Write);
        let ctx = StepContext {
            src_len: src.len(),
            read: enc.read(),
            written: t.hyp.len(),
            proposal: &proposal,
            forced,
        };
        let decision = policy.decide(&ctx)?;
        if let Some(a) = decision.attention {
            attention.push(a);
        }
        let action = match forced {
            Some(f) => {
                if decision.action != f {
                    log::trace!("policy chose {:?} with the source exhausted; forcing {f:?}", decision.action);
                }
                f
            }
            None => decision.action,
        };
        t.actions.push(action);
        t.forced.push(forced.is_some());
        match action {
            Action::Read => {
                enc = env.encode_next(&enc, src[enc.read()])?;
            }
            Action::Write => {
                dec = env.commit(&dec, &proposal, &enc)?;
                t.hyp.push(proposal.token);
                if proposal.token != EOS {
                    t.g.push(enc.read());
                }
            }
        }
        if !dec.finished() && t.hyp.len() < cap {
            proposal = propose(&dec, &enc)?;
        }
    }
    if !attention.is_empty() {
        t.attention = Some(attention);
    }
    Ok(t)
}

/// One line of a transcript log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub src: String,
    pub hyp: String,
    pub actions: String,
    pub g: Vec<usize>,
    pub rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<f64>>>,
}

impl TranscriptRecord {
    pub fn from_transcript(t: &Transcript, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Result<Self> {
        Ok(TranscriptRecord {
            src: src_vocab.decode_string(&t.src)?,
            hyp: tgt_vocab.decode_string(t.content())?,
            actions: actions_to_string(&t.actions),
            g: t.g.clone(),
            rewards: t.rewards.clone(),
            attention: t.attention.clone(),
        })
    }

    pub fn actions(&self) -> Result<Vec<Action>> {
        parse_actions(&self.actions)
    }

    pub fn src_len(&self) -> usize {
        self.src.split_whitespace().count()
    }

    pub fn hyp_tokens(&self) -> Vec<&str> {
        self.hyp.split_whitespace().collect()
    }
}

pub fn write_log(out: &mut impl Write, records: &[TranscriptRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_log(input: impl BufRead) -> Result<Vec<TranscriptRecord>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| SimtError::Parse {
                offset,
                detail: format!("transcript line: {e}"),
            })?);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}
