//! Layers built from tape primitives: GRU cell, linear maps, dot attention.

use rand::Rng;

use crate::error::{shape_err, Result, SimtError};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// GRU weights with gates packed as `[reset | update | candidate]`.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b_x: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(GruParams {
            w_x: store.uniform(format!("{prefix}.w_x"), vec![input, 3 * hidden], rng)?,
            w_h: store.uniform(format!("{prefix}.w_h"), vec![hidden, 3 * hidden], rng)?,
            b_x: store.uniform(format!("{prefix}.b_x"), vec![3 * hidden], rng)?,
            b_h: store.uniform(format!("{prefix}.b_h"), vec![3 * hidden], rng)?,
            input,
            hidden,
        })
    }
}

/// One GRU step over a batch: `x: [B, input]`, `h: [B, hidden]`.
///
/// `h' = (1 - z) * h + z * n` with `n = tanh(W_xn x + b_xn + r * (W_hn h + b_hn))`,
/// so a saturated-low update gate keeps the previous state.
pub fn gru_cell(tape: &mut Tape, b: &Binding, p: &GruParams, x: Var, h: Var) -> Result<Var> {
    let xs = tape.shape(x);
    let hs = tape.shape(h);
    if xs.len() != 2 || xs[1] != p.input || hs.len() != 2 || hs[1] != p.hidden || xs[0] != hs[0] {
        return Err(shape_err(
            "gru_cell",
            format!("x {xs:?}, h {hs:?} for input {} hidden {}", p.input, p.hidden),
        ));
    }
    let hd = p.hidden;
    let gx = tape.matmul(x, b[p.w_x])?;
    let gx = tape.add_row(gx, b[p.b_x])?;
    let gh = tape.matmul(h, b[p.w_h])?;
    let gh = tape.add_row(gh, b[p.b_h])?;
    let x_rz = tape.slice_cols(gx, 0, 2 * hd)?;
    let h_rz = tape.slice_cols(gh, 0, 2 * hd)?;
    let rz = tape.add(x_rz, h_rz)?;
    let rz = tape.sigmoid(rz);
    let r = tape.slice_cols(rz, 0, hd)?;
    let z = tape.slice_cols(rz, hd, hd)?;
    let x_n = tape.slice_cols(gx, 2 * hd, hd)?;
    let h_n = tape.slice_cols(gh, 2 * hd, hd)?;
    let rh = tape.mul(r, h_n)?;
    let n = tape.add(x_n, rh)?;
    let n = tape.tanh(n);
    let delta = tape.sub(n, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.uniform(format!("{name}.w"), vec![input, output], rng)?;
        let b = if bias {
            Some(store.uniform(format!("{name}.b"), vec![output], rng)?)
        } else {
            None
        };
        Ok(Linear { w, b, input, output })
    }

    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, binding[self.w])?;
        match self.b {
            Some(b) => tape.add_row(y, binding[b]),
            None => Ok(y),
        }
    }
}

/// Batched dot-product attention. `mem: [B, S, d]`, `query: [B, d]`, and
/// `lens[b]` is the number of valid memory rows for batch element `b`.
/// Returns `(context [B, d], weights [B, S])`.
pub fn attend(tape: &mut Tape, mem: Var, query: Var, lens: &[usize]) -> Result<(Var, Var)> {
    let scores = tape.scores(mem, query)?;
    let weights = tape.masked_softmax(scores, lens)?;
    let ctx = tape.context(weights, mem)?;
    Ok((ctx, weights))
}

/// Single-query attention over an `S x d` key/value matrix given as a
/// `[S, d]` variable and a `[1, d]` query.
pub fn dot_attention(tape: &mut Tape, keys_values: Var, query: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(keys_values).to_vec();
    let [s, d] = shape[..] else {
        return Err(shape_err("dot_attention", format!("keys {shape:?}")));
    };
    if s == 0 {
        return Err(SimtError::EmptyKeys);
    }
    if tape.shape(query) != [1, d] {
        return Err(shape_err("dot_attention", format!("query {:?} for d={d}", tape.shape(query))));
    }
    let mem = tape.reshape(keys_values, vec![1, s, d])?;
    attend(tape, mem, query, &[s])
}

/// `-log softmax(logits)[target]` for a `[1, K]` logit row.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    tape.cross_entropy(logits, &[Some(target)])
}

/// Numerically stable softmax of a plain slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_zero_params_is_a_fixed_point() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GruParams::new(&mut store, "g", 3, 4, &mut rng).unwrap();
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let x = tape.row(vec![0.0; 3]);
        let h = tape.row(vec![0.0; 4]);
        let out = gru_cell(&mut tape, &b, &p, x, h).unwrap();
        assert_eq!(tape.value(out), &[0.0; 4]);
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GruParams::new(&mut store, "g", 3, 4, &mut rng).unwrap();
        let bx = store.get_mut(p.b_x).data_mut();
        bx[4..8].iter_mut().for_each(|v| *v = -20.0);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let x = tape.row(vec![0.7, -0.3, 0.9]);
        let h_prev = vec![0.5, -0.25, 0.1, 0.8];
        let h = tape.row(h_prev.clone());
        let out = gru_cell(&mut tape, &b, &p, x, h).unwrap();
        // z <= sigmoid(-20 + 0.16 + small) ~ 2.5e-9, and |n - h| < 2.
        for (a, e) in tape.value(out).iter().zip(&h_prev) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn gru_rejects_bad_dims() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GruParams::new(&mut store, "g", 3, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let x = tape.row(vec![0.0; 2]);
        let h = tape.row(vec![0.0; 4]);
        assert!(matches!(gru_cell(&mut tape, &b, &p, x, h), Err(SimtError::Shape { .. })));
    }

    #[test]
    fn attention_examples() {
        let mut tape = Tape::new();
        let kv = tape.constant(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let q = tape.row(vec![1.0, 1.0]);
        let (ctx, w) = dot_attention(&mut tape, kv, q).unwrap();
        assert_eq!(tape.value(w), &[1.0]);
        assert_eq!(tape.value(ctx), &[3.0, 4.0]);

        let kv = tape.constant(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let (_, w) = dot_attention(&mut tape, kv, q).unwrap();
        assert_eq!(tape.value(w), &[0.5, 0.5]);

        let kv = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let q = tape.row(vec![10.0, 0.0]);
        let (_, w) = dot_attention(&mut tape, kv, q).unwrap();
        // softmax(10, 0) = (1/(1+e^-10), e^-10/(1+e^-10))
        let expected = 1.0 / (1.0 + (-10f64).exp());
        assert!((tape.value(w)[0] - expected).abs() < 1e-15);
        assert!((tape.value(w)[0] - 0.99995).abs() < 1e-5);

        let empty = tape.constant(vec![0, 2], vec![]).unwrap();
        assert!(matches!(dot_attention(&mut tape, empty, q), Err(SimtError::EmptyKeys)));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let u = tape.row(vec![0.3; 4]);
        let l = softmax_cross_entropy(&mut tape, u, 2).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);

        let s = tape.row(vec![0.0, 50.0, 0.0]);
        let l = softmax_cross_entropy(&mut tape, s, 1).unwrap();
        assert!(tape.scalar(l) < 1e-20);

        let x = tape.row(vec![1.0, 2.0, 3.0]);
        let l = softmax_cross_entropy(&mut tape, x, 0).unwrap();
        let expected = -1.0 + (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((tape.scalar(l) - expected).abs() < 1e-12);
        assert!((tape.scalar(l) - 2.4076).abs() < 1e-4);
        assert!(matches!(softmax_cross_entropy(&mut tape, x, 3), Err(SimtError::Index { .. })));
    }

    #[test]
    fn plain_softmax_is_normalized() {
        let p = softmax(&[1000.0, 999.0, 990.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|x| *x > 0.0));
        assert_eq!(argmax(&p), 0);
    }
}
