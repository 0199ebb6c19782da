//! Central-difference checks of the tape's reverse-mode gradients on the
//! model's building blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use crate::agent::{AgentNetwork, AgentSpec, Observation};
use crate::error::Result;
use crate::features::{FeatureGeometry, FeatureKind, FeatureSet};
use crate::nn::{attend, gru_cell, GruParams, Linear};
use crate::params::{Binding, ParamStore};
use crate::tape::{Tape, Var};

pub const H: f64 = 1e-5;

pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn random_input(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Input {
    let n = shape.iter().product();
    Input {
        shape,
        data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

/// Spreads parameters over (-1, 1) so the nonlinearities leave their
/// near-linear range.
fn widen(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut().iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
}

/// Central differences at `H` carry round-off near 1e-11, so gradients
/// below `FLOOR` are compared on that scale rather than their own.
pub const FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Largest relative error between backprop and central differences over
/// every parameter and input coordinate of `f`, which maps the bound
/// parameters and input variables to a scalar.
pub fn max_error<F>(store: &ParamStore, inputs: &[Input], f: F) -> f64
where
    F: Fn(&mut Tape, &Binding, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Input]| -> f64 {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let vars: Vec<Var> = inputs.iter().map(|i| tape.constant(i.shape.clone(), i.data.clone()).unwrap()).collect();
        let out = f(&mut tape, &b, &vars).unwrap();
        tape.scalar(out)
    };

    let mut tape = Tape::new();
    let b = store.bind(&mut tape, true);
    let vars: Vec<Var> = inputs.iter().map(|i| tape.leaf(i.shape.clone(), i.data.clone(), true).unwrap()).collect();
    let out = f(&mut tape, &b, &vars).unwrap();
    tape.backward(out).unwrap();
    let mut analytic = ParamStore::new();
    for (name, t) in store.iter() {
        analytic.insert(name, t.clone()).unwrap();
    }
    analytic.zero_grad();
    analytic.accumulate(&tape, &b).unwrap();

    let mut worst: f64 = 0.0;
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let id = store.id(name).unwrap();
        let grad = analytic.get(id).grad().expect("every parameter receives a gradient").to_vec();
        for (k, &g) in grad.iter().enumerate() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[k] += H;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[k] -= H;
            let numeric = (eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * H);
            worst = worst.max(relative_error(g, numeric));
        }
    }
    for (i, v) in vars.iter().enumerate() {
        let grad = tape.grad(*v).expect("every input receives a gradient").to_vec();
        for (k, &g) in grad.iter().enumerate() {
            let mut shifted: Vec<Input> = inputs.iter().map(|x| Input { shape: x.shape.clone(), data: x.data.clone() }).collect();
            shifted[i].data[k] += H;
            let up = eval(store, &shifted);
            shifted[i].data[k] -= 2.0 * H;
            let down = eval(store, &shifted);
            worst = worst.max(relative_error(g, (up - down) / (2.0 * H)));
        }
    }
    worst
}

/// Reduces a variable to a scalar with fixed random weights, so every
/// output coordinate contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, v: Var, rng_seed: u64) -> Result<Var> {
    let n = tape.value(v).len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    tape.dot_const(v, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// GRU cell output.
pub fn gru_cell_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (input, hidden, batch) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..3));
    let mut store = ParamStore::new();
    let p = GruParams::new(&mut store, "gru", input, hidden, &mut rng).unwrap();
    widen(&mut store, &mut rng);
    let inputs = [random_input(&mut rng, vec![batch, input]), random_input(&mut rng, vec![batch, hidden])];
    max_error(&store, &inputs, |tape, b, v| {
        let h = gru_cell(tape, b, &p, v[0], v[1])?;
        weighted_sum(tape, h, seed)
    })
}

/// Masked dot-product attention: context and weights.
pub fn attention_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let (batch, rows, dim): (usize, usize, usize) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..5));
    // Later batch elements mask out trailing rows.
    let lens: Vec<usize> = (0..batch).map(|i| rows.saturating_sub(i).max(1)).collect();
    let inputs = [random_input(&mut rng, vec![batch, rows, dim]), random_input(&mut rng, vec![batch, dim])];
    max_error(&ParamStore::new(), &inputs, |tape, _, v| {
        let (ctx, weights) = attend(tape, v[0], v[1], &lens)?;
        let a = weighted_sum(tape, ctx, seed)?;
        let w = weighted_sum(tape, weights, seed + 1)?;
        tape.add(a, w)
    })
}

/// Linear layers with and without bias around a tanh.
pub fn projection_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    let (input, output, batch) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..4));
    let mut store = ParamStore::new();
    let with_bias = Linear::new(&mut store, "a", input, output, true, &mut rng).unwrap();
    let without = Linear::new(&mut store, "b", output, output, false, &mut rng).unwrap();
    widen(&mut store, &mut rng);
    let inputs = [random_input(&mut rng, vec![batch, input])];
    max_error(&store, &inputs, |tape, b, v| {
        let y = with_bias.forward(tape, b, v[0])?;
        let y = tape.tanh(y);
        let y = without.forward(tape, b, y)?;
        weighted_sum(tape, y, seed)
    })
}

/// Cross-entropy with a padded target.
pub fn cross_entropy_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
    let (batch, classes) = (rng.gen_range(1..5), rng.gen_range(2..8));
    let mut targets: Vec<Option<usize>> = (0..batch).map(|_| Some(rng.gen_range(0..classes))).collect();
    if batch > 1 {
        // A padded position contributes nothing.
        targets[batch - 1] = None;
    }
    let mut input = random_input(&mut rng, vec![batch, classes]);
    input.data.iter_mut().for_each(|x| *x *= 3.0);
    max_error(&ParamStore::new(), &[input], |tape, _, v| tape.cross_entropy(v[0], &targets))
}

/// Two recurrent agent steps with policy-gradient and entropy terms.
pub fn composed_agent_step_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
    let (rows, cols) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let geometry = FeatureGeometry::grid(rows, cols);
    let spec = AgentSpec {
        text_dim: rng.gen_range(1..4),
        emb_dim: rng.gen_range(1..4),
        hidden_dim: rng.gen_range(1..4),
        init: Some(geometry),
        attend: Some(geometry),
    };
    let mut agent = AgentNetwork::new(spec.clone(), &mut rng).unwrap();
    widen(&mut agent.params, &mut rng);
    let features =
        FeatureSet::new(FeatureKind::Grid, rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let observations: Vec<Observation> = (0..2)
        .map(|_| {
            let p = rng.gen_range(0.0..1.0);
            Observation {
                text_context: (0..spec.text_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                token_embedding: (0..spec.emb_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                prev_action: [p, 1.0 - p],
                visual_context: None,
            }
        })
        .collect();
    let actions: Vec<usize> = (0..2).map(|_| rng.gen_range(0..2)).collect();
    let advantages: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    max_error(&agent.params, &[], |tape, b, _| {
        // Two recurrent steps with a policy-gradient term and an
        // entropy term, as in the REINFORCE loss.
        let memory = agent.memory_vars(tape, b, Some(&features))?;
        let mut hidden = agent.initial_var(tape, b, Some(&features))?;
        let mut terms = Vec::new();
        for (t, obs) in observations.iter().enumerate() {
            let step = agent.step(tape, b, memory.as_ref(), obs, hidden)?;
            hidden = step.hidden;
            let logp = tape.log_softmax(step.logits)?;
            let mut pick = vec![0.0; 2];
            pick[actions[t]] = -advantages[t];
            terms.push(tape.dot_const(logp, pick)?);
            let p = tape.softmax(step.logits)?;
            let plogp = tape.mul(p, logp)?;
            terms.push(tape.dot_const(plogp, vec![0.01, 0.01])?);
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = tape.add(total, *t)?;
        }
        Ok(total)
    })
}

/// Every check with its label.
pub const CASES: [(&str, fn(u64) -> f64); 5] = [
    ("gru_cell", gru_cell_error),
    ("attention", attention_error),
    ("projection", projection_error),
    ("cross_entropy", cross_entropy_error),
    ("agent step", composed_agent_step_error),
];
