//! The frozen encoder-decoder used as the simultaneous translation
//! environment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimtError};
use crate::features::{FeatureGeometry, FeatureSet};
use crate::nn::{attend, gru_cell, GruParams, Linear};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::vocab::{Pair, Vocabulary, BOS, EOS, PAD};

pub const DEFAULT_EMB_DIM: usize = 200;
pub const DEFAULT_HIDDEN_DIM: usize = 320;

/// Upper bound on committed target tokens, EOS included.
pub fn max_output_len(src_len: usize) -> usize {
    2 * src_len + 5
}

#[derive(Debug, Clone)]
struct Layout {
    src_emb: ParamId,
    tgt_emb: ParamId,
    enc: [GruParams; 2],
    init: Option<Linear>,
    dec1: GruParams,
    dec2: GruParams,
    out: Linear,
    visual: Option<ParamId>,
}

/// How the decoder state is set before the first target token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderInit {
    /// Zero state. The decoder learns nothing about source length from its
    /// start state, so committed states stay valid as more source arrives.
    Zero,
    /// `tanh(W h_last + b)` from the last encoder row read so far.
    LastState,
}

impl DecoderInit {
    pub fn name(self) -> &'static str {
        match self {
            DecoderInit::Zero => "zero",
            DecoderInit::LastState => "last",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(DecoderInit::Zero),
            "last" => Ok(DecoderInit::LastState),
            _ => Err(SimtError::Config(format!("unknown decoder init {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnvModel {
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub visual: Option<FeatureGeometry>,
    pub decoder_init: DecoderInit,
    pub params: ParamStore,
    layout: Layout,
}

/// Encoder state after reading a source prefix. `rows` holds the top-layer
/// states row-major, one row per token read.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    layers: [Vec<f64>; 2],
    rows: Vec<f64>,
    read: usize,
}

impl EncoderState {
    pub fn read(&self) -> usize {
        self.read
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let h = self.layers[0].len();
        &self.rows[i * h..(i + 1) * h]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    first: Vec<f64>,
    second: Vec<f64>,
    last: usize,
    committed: usize,
    finished: bool,
}

impl DecoderState {
    pub fn committed(&self) -> usize {
        self.committed
    }

    pub fn last_token(&self) -> usize {
        self.last
    }

    pub fn finished(&self) -> bool {
        self.finished
    }
}

/// Visual memory: features projected into the decoder's hidden space.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualMemory {
    rows: usize,
    data: Vec<f64>,
}

impl VisualMemory {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub token: usize,
    pub probs: Vec<f64>,
    pub text_context: Vec<f64>,
    pub visual_context: Option<Vec<f64>>,
    /// Textual attention over the source rows read so far.
    pub attention: Vec<f64>,
    /// Target-side embedding of `token`.
    pub token_embedding: Vec<f64>,
    next: DecoderState,
    read: usize,
}

impl EnvModel {
    /// A model with a zero decoder start state.
    pub fn new(
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        emb_dim: usize,
        hidden_dim: usize,
        visual: Option<FeatureGeometry>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::with_decoder_init(src_vocab, tgt_vocab, emb_dim, hidden_dim, visual, DecoderInit::Zero, rng)
    }

    pub fn with_decoder_init(
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        emb_dim: usize,
        hidden_dim: usize,
        visual: Option<FeatureGeometry>,
        decoder_init: DecoderInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if emb_dim == 0 || hidden_dim == 0 {
            return Err(SimtError::Config("model dims must be positive".into()));
        }
        let mut p = ParamStore::new();
        let layout = Layout {
            src_emb: p.uniform("env.src_emb", vec![src_vocab.len(), emb_dim], rng)?,
            tgt_emb: p.uniform("env.tgt_emb", vec![tgt_vocab.len(), emb_dim], rng)?,
            enc: [
                GruParams::new(&mut p, "env.enc0", emb_dim, hidden_dim, rng)?,
                GruParams::new(&mut p, "env.enc1", hidden_dim, hidden_dim, rng)?,
            ],
            init: match decoder_init {
                DecoderInit::LastState => Some(Linear::new(&mut p, "env.init", hidden_dim, hidden_dim, true, rng)?),
                DecoderInit::Zero => None,
            },
            dec1: GruParams::new(&mut p, "env.dec1", emb_dim, hidden_dim, rng)?,
            dec2: GruParams::new(&mut p, "env.dec2", hidden_dim, hidden_dim, rng)?,
            out: Linear::new(&mut p, "env.out", emb_dim + 2 * hidden_dim, tgt_vocab.len(), true, rng)?,
            visual: match visual {
                Some(g) => Some(p.uniform("env.visual", vec![g.cols, hidden_dim], rng)?),
                None => None,
            },
        };
        Ok(EnvModel {
            src_vocab,
            tgt_vocab,
            emb_dim,
            hidden_dim,
            visual,
            decoder_init,
            params: p,
            layout,
        })
    }

    pub fn is_multimodal(&self) -> bool {
        self.visual.is_some()
    }

    pub fn visual_projection(&self) -> Option<ParamId> {
        self.layout.visual
    }

    pub fn target_embedding(&self, token: usize) -> Result<Vec<f64>> {
        self.tgt_vocab.check(token)?;
        let e = self.params.get(self.layout.tgt_emb).data();
        Ok(e[token * self.emb_dim..(token + 1) * self.emb_dim].to_vec())
    }

    pub fn visual_memory(&self, features: &FeatureSet) -> Result<VisualMemory> {
        let (Some(geometry), Some(proj)) = (self.visual, self.layout.visual) else {
            return Err(SimtError::Config("unimodal environment given visual features".into()));
        };
        features.check(&geometry)?;
        let data = crate::features::project(features, self.params.get(proj).data(), self.hidden_dim)?;
        Ok(VisualMemory {
            rows: features.rows,
            data,
        })
    }

    pub fn empty_encoder(&self) -> EncoderState {
        EncoderState {
            layers: [vec![0.0; self.hidden_dim], vec![0.0; self.hidden_dim]],
            rows: Vec::new(),
            read: 0,
        }
    }

    pub fn encode_next(&self, state: &EncoderState, token: usize) -> Result<EncoderState> {
        self.src_vocab.check(token)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.gather(b[self.layout.src_emb], &[token])?;
        let h0 = tape.row(state.layers[0].clone());
        let h1 = tape.row(state.layers[1].clone());
        let h0 = gru_cell(&mut tape, &b, &self.layout.enc[0], x, h0)?;
        let h1 = gru_cell(&mut tape, &b, &self.layout.enc[1], h0, h1)?;
        let top = tape.value(h1).to_vec();
        let mut rows = state.rows.clone();
        rows.extend_from_slice(&top);
        Ok(EncoderState {
            layers: [tape.value(h0).to_vec(), top],
            rows,
            read: state.read + 1,
        })
    }

    pub fn encode(&self, src: &[usize]) -> Result<EncoderState> {
        let mut s = self.empty_encoder();
        for &t in src {
            s = self.encode_next(&s, t)?;
        }
        Ok(s)
    }

    pub fn start_decoder(&self) -> DecoderState {
        DecoderState {
            first: Vec::new(),
            second: Vec::new(),
            last: BOS,
            committed: 0,
            finished: false,
        }
    }

    fn check_visual(&self, visual: Option<&VisualMemory>) -> Result<()> {
        match (self.visual, visual) {
            (Some(_), None) => Err(SimtError::Config("multimodal environment needs visual features".into())),
            (None, Some(_)) => Err(SimtError::Config("unimodal environment given visual features".into())),
            (Some(g), Some(v)) if v.rows != g.rows => Err(SimtError::Shape {
                op: "visual_memory",
                detail: format!("{} rows, model expects {}", v.rows, g.rows),
            }),
            _ => Ok(()),
        }
    }

    /// Next-token proposal given the committed prefix and the source read
    /// so far. Neither state is modified. Before the first commit the
    /// decoder starts from a projection of the latest encoder row.
    pub fn propose_next(&self, dec: &DecoderState, enc: &EncoderState, visual: Option<&VisualMemory>) -> Result<Proposal> {
        if enc.read == 0 {
            return Err(SimtError::EmptyKeys);
        }
        if dec.finished {
            return Err(SimtError::Contract("decoder already committed EOS".into()));
        }
        self.check_visual(visual)?;
        let hd = self.hidden_dim;
        let l = &self.layout;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let (d1, d2) = if dec.committed == 0 {
            let init = match &l.init {
                Some(init) => {
                    let last = tape.row(enc.row(enc.read - 1).to_vec());
                    let s = init.forward(&mut tape, &b, last)?;
                    tape.tanh(s)
                }
                None => tape.row(vec![0.0; hd]),
            };
            (init, init)
        } else {
            (tape.row(dec.first.clone()), tape.row(dec.second.clone()))
        };
        let x = tape.gather(b[l.tgt_emb], &[dec.last])?;
        let d1 = gru_cell(&mut tape, &b, &l.dec1, x, d1)?;
        let mem = tape.constant(vec![1, enc.read, hd], enc.rows.clone())?;
        let (text, weights) = attend(&mut tape, mem, d1, &[enc.read])?;
        let mut ctx = text;
        let mut visual_context = None;
        if let Some(v) = visual {
            let vmem = tape.constant(vec![1, v.rows, hd], v.data.clone())?;
            let (cv, _) = attend(&mut tape, vmem, d1, &[v.rows])?;
            visual_context = Some(tape.value(cv).to_vec());
            ctx = tape.add(text, cv)?;
        }
        let d2 = gru_cell(&mut tape, &b, &l.dec2, ctx, d2)?;
        let feats = tape.concat(&[x, ctx, d2])?;
        let logits = l.out.forward(&mut tape, &b, feats)?;
        let probs = tape.softmax(logits)?;
        let probs = tape.value(probs).to_vec();
        let token = crate::nn::argmax(&probs);
        Ok(Proposal {
            token,
            token_embedding: self.target_embedding(token)?,
            probs,
            text_context: tape.value(text).to_vec(),
            visual_context,
            attention: tape.value(weights).to_vec(),
            next: DecoderState {
                first: tape.value(d1).to_vec(),
                second: tape.value(d2).to_vec(),
                last: token,
                committed: dec.committed + 1,
                finished: token == EOS,
            },
            read: enc.read,
        })
    }

    /// Replaces an EOS proposal with the most probable other token. Used while
    /// source tokens remain unread, since a consecutive model has only ever
    /// seen EOS after the full sentence.
    pub fn suppress_eos(&self, mut p: Proposal) -> Result<Proposal> {
        if p.token != EOS {
            return Ok(p);
        }
        let token = p
            .probs
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != EOS)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .ok_or_else(|| SimtError::Contract("target vocabulary has only EOS".into()))?;
        p.token = token;
        p.token_embedding = self.target_embedding(token)?;
        p.next.last = token;
        p.next.finished = false;
        Ok(p)
    }

    /// Advances the decoder with a proposal made against `dec` and `enc`.
    pub fn commit(&self, dec: &DecoderState, proposal: &Proposal, enc: &EncoderState) -> Result<DecoderState> {
        if dec.finished {
            return Err(SimtError::Contract("cannot commit after EOS".into()));
        }
        if proposal.next.committed != dec.committed + 1 || proposal.read != enc.read {
            return Err(SimtError::Contract("proposal is stale".into()));
        }
        Ok(proposal.next.clone())
    }

    /// Greedy decoding with the whole source read. The result ends with
    /// EOS unless the length cap was reached first.
    pub fn translate_full(&self, src: &[usize], visual: Option<&VisualMemory>) -> Result<Vec<usize>> {
        self.check_visual(visual)?;
        if src.is_empty() {
            return Ok(vec![EOS]);
        }
        let enc = self.encode(src)?;
        let mut dec = self.start_decoder();
        let mut out = Vec::new();
        while out.len() < max_output_len(src.len()) && !dec.finished {
            let p = self.propose_next(&dec, &enc, visual)?;
            dec = self.commit(&dec, &p, &enc)?;
            out.push(p.token);
        }
        Ok(out)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        self.params.bind(tape, trainable)
    }

    /// Batched encoder: returns the stacked top-layer memory `[B, S, H]`,
    /// each sentence's final top-layer state `[B, H]`, and the source lengths.
    pub fn encode_batch(&self, tape: &mut Tape, b: &Binding, pairs: &[&Pair]) -> Result<(Var, Var, Vec<usize>)> {
        let bsz = pairs.len();
        let hd = self.hidden_dim;
        let l = &self.layout;
        let lens: Vec<usize> = pairs.iter().map(|p| p.src.len()).collect();
        let s_max = *lens.iter().max().expect("nonempty batch");

        let mut h0 = tape.constant(vec![bsz, hd], vec![0.0; bsz * hd])?;
        let mut h1 = h0;
        let mut rows = Vec::with_capacity(s_max);
        let mut last: Option<Var> = None;
        for s in 0..s_max {
            let ids: Vec<usize> = pairs.iter().map(|p| *p.src.get(s).unwrap_or(&PAD)).collect();
            let x = tape.gather(b[l.src_emb], &ids)?;
            h0 = gru_cell(tape, b, &l.enc[0], x, h0)?;
            h1 = gru_cell(tape, b, &l.enc[1], h0, h1)?;
            rows.push(h1);
            // Keep each sentence's final state.
            let mask: Vec<f64> = lens
                .iter()
                .flat_map(|&n| std::iter::repeat(if n == s + 1 { 1.0 } else { 0.0 }).take(hd))
                .collect();
            let mask = tape.constant(vec![bsz, hd], mask)?;
            let picked = tape.mul(h1, mask)?;
            last = Some(match last {
                Some(acc) => tape.add(acc, picked)?,
                None => picked,
            });
        }
        let mem = tape.stack(&rows)?;
        Ok((mem, last.expect("nonempty source"), lens))
    }

    /// Summed teacher-forced cross-entropy over a batch and the number of
    /// predicted tokens (EOS included). `features[b]` must accompany every
    /// pair for multimodal models.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        b: &Binding,
        pairs: &[&Pair],
        features: Option<&[&FeatureSet]>,
    ) -> Result<(Var, usize)> {
        let bsz = pairs.len();
        if bsz == 0 {
            return Err(SimtError::Empty("batch".into()));
        }
        if pairs.iter().any(|p| p.src.is_empty()) {
            return Err(SimtError::Empty("source sentence".into()));
        }
        for p in pairs {
            for &t in &p.src {
                self.src_vocab.check(t).map_err(|_| SimtError::Vocabulary(format!("source id {t}")))?;
            }
            for &t in &p.tgt {
                self.tgt_vocab.check(t).map_err(|_| SimtError::Vocabulary(format!("target id {t}")))?;
            }
        }
        let hd = self.hidden_dim;
        let l = &self.layout;
        let (mem, last, lens) = self.encode_batch(tape, b, pairs)?;
        let init = match &l.init {
            Some(init) => {
                let s = init.forward(tape, b, last)?;
                tape.tanh(s)
            }
            None => tape.constant(vec![bsz, hd], vec![0.0; bsz * hd])?,
        };
        let (mut d1, mut d2) = (init, init);

        let vmem = match (self.visual, l.visual, features) {
            (Some(g), Some(proj), Some(fs)) => {
                if fs.len() != bsz {
                    return Err(SimtError::Contract(format!("{} feature sets for {bsz} pairs", fs.len())));
                }
                let mut flat = Vec::with_capacity(bsz * g.flat_len());
                for f in fs {
                    f.check(&g)?;
                    flat.extend_from_slice(f.data());
                }
                let f = tape.constant(vec![bsz * g.rows, g.cols], flat)?;
                let v = tape.matmul(f, b[proj])?;
                Some((tape.reshape(v, vec![bsz, g.rows, hd])?, g.rows))
            }
            (Some(_), _, None) => return Err(SimtError::Config("multimodal environment needs visual features".into())),
            (None, _, Some(_)) => return Err(SimtError::Config("unimodal environment given visual features".into())),
            _ => None,
        };

        let t_max = pairs.iter().map(|p| p.tgt.len()).max().unwrap_or(0) + 1;
        let mut total: Option<Var> = None;
        let mut count = 0;
        for t in 0..t_max {
            let inputs: Vec<usize> = pairs
                .iter()
                .map(|p| if t == 0 { BOS } else { *p.tgt.get(t - 1).unwrap_or(&PAD) })
                .collect();
            let targets: Vec<Option<usize>> = pairs
                .iter()
                .map(|p| match t.cmp(&p.tgt.len()) {
                    std::cmp::Ordering::Less => Some(p.tgt[t]),
                    std::cmp::Ordering::Equal => Some(EOS),
                    std::cmp::Ordering::Greater => None,
                })
                .collect();
            count += targets.iter().flatten().count();
            let x = tape.gather(b[l.tgt_emb], &inputs)?;
            d1 = gru_cell(tape, b, &l.dec1, x, d1)?;
            let (mut ctx, _) = attend(tape, mem, d1, &lens)?;
            if let Some((v, r)) = vmem {
                let (cv, _) = attend(tape, v, d1, &vec![r; bsz])?;
                ctx = tape.add(ctx, cv)?;
            }
            d2 = gru_cell(tape, b, &l.dec2, ctx, d2)?;
            let feats = tape.concat(&[x, ctx, d2])?;
            let logits = l.out.forward(tape, b, feats)?;
            let ce = tape.cross_entropy(logits, &targets)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        Ok((total.expect("at least one decoder step"), count))
    }

    /// Mean per-token cross-entropy over `pairs`, without gradients.
    pub fn mean_loss(&self, pairs: &[Pair], features: Option<&[FeatureSet]>, batch_size: usize) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0;
        for (i, chunk) in pairs.chunks(batch_size.max(1)).enumerate() {
            let refs: Vec<&Pair> = chunk.iter().collect();
            let feats: Option<Vec<&FeatureSet>> =
                features.map(|f| f[i * batch_size..i * batch_size + chunk.len()].iter().collect());
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, false);
            let (loss, n) = self.batch_loss(&mut tape, &b, &refs, feats.as_deref())?;
            sum += tape.scalar(loss);
            count += n;
        }
        if count == 0 {
            return Err(SimtError::Empty("loss corpus".into()));
        }
        Ok(sum / count as f64)
    }

    /// Rebuilds the layout for `params` loaded from a checkpoint.
    pub fn with_params(mut self, params: &ParamStore) -> Result<Self> {
        self.params.load_from(params)?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(visual: Option<FeatureGeometry>, seed: u64) -> EnvModel {
        let sv = Vocabulary::build(&["a b c d e f g h"]).unwrap();
        let tv = Vocabulary::build(&["a b c d e f g h"]).unwrap();
        EnvModel::new(sv, tv, 6, 8, visual, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn incremental_encoding_appends_rows() {
        let m = model(None, 0);
        let s = m.encode_next(&m.empty_encoder(), 5).unwrap();
        assert_eq!(s.read(), 1);
        assert_eq!(s.rows().len(), 8);

        let src = [4, 5, 6, 7, 8, 9, 10, 11];
        let full = m.encode(&src).unwrap();
        let prefix = m.encode(&src[..3]).unwrap();
        assert_eq!(&full.rows()[..24], prefix.rows());
        assert!(m.encode_next(&full, 99).is_err());
    }

    #[test]
    fn incremental_matches_batch_encoder() {
        let m = model(None, 1);
        let src = vec![4, 6, 8, 5, 7];
        let pair = Pair { src: src.clone(), tgt: vec![4] };
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let (mem, last, _) = m.encode_batch(&mut tape, &b, &[&pair]).unwrap();
        let enc = m.encode(&src).unwrap();
        assert_eq!(tape.value(mem), enc.rows());
        assert_eq!(tape.value(last), enc.row(4));
    }

    #[test]
    fn proposals_are_pure_and_need_source() {
        let m = model(None, 2);
        let dec = m.start_decoder();
        assert!(matches!(m.propose_next(&dec, &m.empty_encoder(), None), Err(SimtError::EmptyKeys)));
        let enc = m.encode(&[4]).unwrap();
        let p1 = m.propose_next(&dec, &enc, None).unwrap();
        let p2 = m.propose_next(&dec, &enc, None).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.attention, vec![1.0]);
        assert!((p1.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p1.token, crate::nn::argmax(&p1.probs));
    }

    #[test]
    fn commit_bookkeeping() {
        let mut m = model(None, 3);
        let out_b = m.params.id("env.out.b").unwrap();
        m.params.get_mut(out_b).data_mut()[EOS] = -1e3;
        let enc = m.encode(&[4, 5]).unwrap();
        let dec = m.start_decoder();
        let p = m.propose_next(&dec, &enc, None).unwrap();
        let dec2 = m.commit(&dec, &p, &enc).unwrap();
        assert_eq!(dec2.committed(), 1);
        assert_eq!(dec2.last_token(), p.token);
        assert_eq!(m.target_embedding(dec2.last_token()).unwrap(), p.token_embedding);
        // A proposal made against an older state cannot be committed again.
        assert!(m.commit(&dec2, &p, &enc).is_err());
        let enc3 = m.encode(&[4, 5, 6]).unwrap();
        let q = m.propose_next(&dec2, &enc, None).unwrap();
        assert!(m.commit(&dec2, &q, &enc3).is_err());
    }

    #[test]
    fn eos_is_terminal() {
        let mut m = model(None, 4);
        // Force EOS via the output bias.
        let out_b = m.params.id("env.out.b").unwrap();
        m.params.get_mut(out_b).data_mut()[EOS] = 1e3;
        let enc = m.encode(&[4]).unwrap();
        let dec = m.start_decoder();
        let p = m.propose_next(&dec, &enc, None).unwrap();
        assert_eq!(p.token, EOS);
        let done = m.commit(&dec, &p, &enc).unwrap();
        assert!(done.finished());
        assert!(m.propose_next(&done, &enc, None).is_err());
        assert!(m.commit(&done, &p, &enc).is_err());
        assert_eq!(m.translate_full(&[4, 5], None).unwrap(), vec![EOS]);
    }

    #[test]
    fn empty_source_and_length_cap() {
        let mut m = model(None, 5);
        assert_eq!(m.translate_full(&[], None).unwrap(), vec![EOS]);
        let out_b = m.params.id("env.out.b").unwrap();
        m.params.get_mut(out_b).data_mut()[6] = 1e3;
        let hyp = m.translate_full(&[4, 5, 6], None).unwrap();
        assert_eq!(hyp.len(), max_output_len(3));
        assert!(hyp.iter().all(|&t| t == 6));
    }

    #[test]
    fn zero_visual_projection_matches_unimodal() {
        let geometry = FeatureGeometry::grid(4, 3);
        let uni = model(None, 6);
        let mut multi = model(Some(geometry), 6);
        for (name, t) in uni.params.iter() {
            let id = multi.params.id(name).unwrap();
            *multi.params.get_mut(id).data_mut() = t.data().to_vec();
        }
        let proj = multi.visual_projection().unwrap();
        multi.params.get_mut(proj).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let feats = FeatureSet::new(crate::features::FeatureKind::Grid, 4, 3, (0..12).map(|i| i as f64).collect()).unwrap();
        let vm = multi.visual_memory(&feats).unwrap();

        let enc = uni.encode(&[4, 5, 6]).unwrap();
        let a = uni.propose_next(&uni.start_decoder(), &enc, None).unwrap();
        let b = multi.propose_next(&multi.start_decoder(), &enc, Some(&vm)).unwrap();
        assert_eq!(a.probs, b.probs);
        assert!(multi.propose_next(&multi.start_decoder(), &enc, None).is_err());
        assert!(uni.propose_next(&uni.start_decoder(), &enc, Some(&vm)).is_err());
    }

    #[test]
    fn batch_loss_ignores_padding() {
        let m = model(None, 7);
        let short = Pair { src: vec![4, 5], tgt: vec![6] };
        let long = Pair { src: vec![4, 5, 6, 7], tgt: vec![6, 7, 8] };
        let single = |p: &Pair| {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape, false);
            let (l, n) = m.batch_loss(&mut tape, &b, &[p], None).unwrap();
            (tape.scalar(l), n)
        };
        let (ls, ns) = single(&short);
        let (ll, nl) = single(&long);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let (l, n) = m.batch_loss(&mut tape, &b, &[&short, &long], None).unwrap();
        assert_eq!(n, ns + nl);
        assert!((tape.scalar(l) - (ls + ll)).abs() < 1e-10);
    }

    #[test]
    fn incremental_decoding_matches_batch_loss() {
        for init in [DecoderInit::Zero, DecoderInit::LastState] {
            let v = Vocabulary::build(&["a b c d e f g h"]).unwrap();
            let m = EnvModel::with_decoder_init(v.clone(), v, 6, 8, None, init, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert_eq!(m.params.id("env.init.w").is_some(), init == DecoderInit::LastState);
            let src = [4, 5, 6];
            let enc = m.encode(&src).unwrap();
            let dec = m.start_decoder();
            let first = m.propose_next(&dec, &enc, None).unwrap();
            let mut expected = -first.probs[first.token].ln();
            let pair = if first.token == EOS {
                Pair { src: src.to_vec(), tgt: vec![] }
            } else {
                let dec = m.commit(&dec, &first, &enc).unwrap();
                let second = m.propose_next(&dec, &enc, None).unwrap();
                expected -= second.probs[EOS].ln();
                Pair { src: src.to_vec(), tgt: vec![first.token] }
            };
            let mut tape = Tape::new();
            let b = m.bind(&mut tape, false);
            let (loss, _) = m.batch_loss(&mut tape, &b, &[&pair], None).unwrap();
            assert!((tape.scalar(loss) - expected).abs() < 1e-10, "{init:?}");
        }
    }
}
