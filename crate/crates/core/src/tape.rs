//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every operation appends one node holding its value and the indices of its
//! inputs, so the tape is topologically ordered by construction. `backward`
//! walks it once in reverse. Gradients are only materialized for nodes that
//! (transitively) depend on a leaf created with `requires_grad`.

use std::sync::Arc;

use crate::error::{shape_err, Result, SimtError};
use crate::tensor::numel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Storage {
    Owned(Vec<f64>),
    Shared(Arc<Vec<f64>>),
}

impl Storage {
    fn as_slice(&self) -> &[f64] {
        match self {
            Storage::Owned(v) => v,
            Storage::Shared(v) => v,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Stack(Vec<Var>),
    Reshape(Var),
    Scores { mem: Var, query: Var },
    MaskedSoftmax { lens: Vec<usize> },
    Context { weights: Var, mem: Var },
    LogSoftmax(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Sum(Var),
    DotConst(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Storage,
    op: Op,
    // MaskedSoftmax keeps its input here; every other op stores parents in `op`.
    aux: Option<Var>,
    requires_grad: bool,
}

/// A single-threaded computation tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(shape_err(op, format!("expected a matrix, got shape {shape:?}"))),
    }
}

fn dims3(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [b, s, d] => Ok((*b, *s, *d)),
        _ => Err(shape_err(op, format!("expected rank 3, got shape {shape:?}"))),
    }
}

/// `c += op(a) * op(b)` where op is an optional transpose of the stored matrix.
/// `a` is logically `[m, k]` and `b` is `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the logical dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain row-major product of an `[m, k]` and a `[k, n]` matrix.
pub fn mat_mul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), m * k, "left operand size");
    assert_eq!(b.len(), k * n, "right operand size");
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, a, false, b, false, &mut c);
    c
}

/// Gradient buffer of a parent node, or `None` if it needs no gradient.
fn parent_grad<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.as_slice().len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.node(v).value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Storage::Owned(value),
            op,
            aux: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(shape_err("leaf", format!("shape {shape:?} vs {} values", data.len())));
        }
        self.nodes.push(Node {
            shape,
            value: Storage::Owned(data),
            op: Op::Leaf,
            aux: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    /// Row vector `[1, n]`.
    pub fn row(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.leaf(vec![1, n], data, false).expect("row shape")
    }

    /// Leaf sharing an existing buffer (parameters) without copying it.
    pub fn shared(&mut self, shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(shape_err("shared", format!("shape {shape:?} vs {} values", data.len())));
        }
        self.nodes.push(Node {
            shape,
            value: Storage::Shared(data),
            op: Op::Leaf,
            aux: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a), false, self.value(b), false, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a bias vector (any shape with `n` elements) to every row of `[m, n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "add_row")?;
        if self.value(bias).len() != n {
            return Err(shape_err("add_row", format!("bias of {} for width {n}", self.value(bias).len())));
        }
        let bv = self.value(bias);
        let mut out = self.value(a).to_vec();
        for r in 0..m {
            out[r * n..(r + 1) * n].iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(vec![m, n], out, Op::AddRow(a, bias), &[a, bias]))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let (m, _) = dims2(self.shape(parts[0]), "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (mi, ni) = dims2(self.shape(*p), "concat")?;
            if mi != m {
                return Err(shape_err("concat", format!("row counts {m} vs {mi}")));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(vec![m, total], out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "slice_cols")?;
        if start + len > n {
            return Err(shape_err("slice_cols", format!("{start}..{} of width {n}", start + len)));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        Ok(self.push(vec![m, len], out, Op::Slice { src: a, start }, &[a]))
    }

    /// Embedding lookup: rows `ids` of a `[V, E]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, e) = dims2(self.shape(table), "gather")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(SimtError::Index { index: id, size: v });
            }
            out.extend_from_slice(&tv[id * e..(id + 1) * e]);
        }
        Ok(self.push(
            vec![ids.len(), e],
            out,
            Op::Gather { table, ids: ids.to_vec() },
            &[table],
        ))
    }

    /// Stacks `S` matrices of shape `[B, d]` into a `[B, S, d]` memory.
    pub fn stack(&mut self, steps: &[Var]) -> Result<Var> {
        if steps.is_empty() {
            return Err(SimtError::EmptyKeys);
        }
        let (b, d) = dims2(self.shape(steps[0]), "stack")?;
        for s in steps {
            if self.shape(*s) != [b, d] {
                return Err(shape_err("stack", format!("{:?} vs [{b},{d}]", self.shape(*s))));
            }
        }
        let s_len = steps.len();
        let mut out = vec![0.0; b * s_len * d];
        for (si, s) in steps.iter().enumerate() {
            let v = self.value(*s);
            for bi in 0..b {
                out[(bi * s_len + si) * d..(bi * s_len + si + 1) * d].copy_from_slice(&v[bi * d..(bi + 1) * d]);
            }
        }
        Ok(self.push(vec![b, s_len, d], out, Op::Stack(steps.to_vec()), steps))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape, out, Op::Reshape(a), &[a]))
    }

    /// Dot-product scores of each memory row against the per-batch query: `[B, S]`.
    pub fn scores(&mut self, mem: Var, query: Var) -> Result<Var> {
        let (b, s, d) = dims3(self.shape(mem), "scores")?;
        if self.shape(query) != [b, d] {
            return Err(shape_err("scores", format!("query {:?} for memory [{b},{s},{d}]", self.shape(query))));
        }
        if s == 0 {
            return Err(SimtError::EmptyKeys);
        }
        let mv = self.value(mem);
        let qv = self.value(query);
        let mut out = vec![0.0; b * s];
        for bi in 0..b {
            let q = &qv[bi * d..(bi + 1) * d];
            for si in 0..s {
                let row = &mv[(bi * s + si) * d..(bi * s + si + 1) * d];
                out[bi * s + si] = row.iter().zip(q).map(|(x, y)| x * y).sum();
            }
        }
        Ok(self.push(vec![b, s], out, Op::Scores { mem, query }, &[mem, query]))
    }

    /// Row softmax restricted to the first `lens[b]` columns; masked entries are 0.
    pub fn masked_softmax(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let (b, s) = dims2(self.shape(x), "masked_softmax")?;
        if lens.len() != b {
            return Err(shape_err("masked_softmax", format!("{} lengths for {b} rows", lens.len())));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; b * s];
        for bi in 0..b {
            let l = lens[bi];
            if l == 0 {
                return Err(SimtError::EmptyKeys);
            }
            if l > s {
                return Err(shape_err("masked_softmax", format!("length {l} > width {s}")));
            }
            let row = &xv[bi * s..bi * s + l];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for si in 0..l {
                let e = (row[si] - max).exp();
                out[bi * s + si] = e;
                total += e;
            }
            out[bi * s..bi * s + l].iter_mut().for_each(|v| *v /= total);
        }
        let v = self.push(vec![b, s], out, Op::MaskedSoftmax { lens: lens.to_vec() }, &[x]);
        self.nodes[v.0].aux = Some(x);
        Ok(v)
    }

    /// Weighted sum of memory rows: `[B, S] x [B, S, d] -> [B, d]`.
    pub fn context(&mut self, weights: Var, mem: Var) -> Result<Var> {
        let (b, s, d) = dims3(self.shape(mem), "context")?;
        if self.shape(weights) != [b, s] {
            return Err(shape_err("context", format!("weights {:?} for memory [{b},{s},{d}]", self.shape(weights))));
        }
        let wv = self.value(weights);
        let mv = self.value(mem);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for si in 0..s {
                let w = wv[bi * s + si];
                if w == 0.0 {
                    continue;
                }
                let row = &mv[(bi * s + si) * d..(bi * s + si + 1) * d];
                o.iter_mut().zip(row).for_each(|(a, r)| *a += w * r);
            }
        }
        Ok(self.push(vec![b, d], out, Op::Context { weights, mem }, &[weights, mem]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (b, k) = dims2(self.shape(x), "log_softmax")?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(b * k);
        for bi in 0..b {
            let row = &xv[bi * k..(bi + 1) * k];
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        Ok(self.push(vec![b, k], out, Op::LogSoftmax(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let l = self.log_softmax(x)?;
        Ok(self.exp(l))
    }

    /// Summed cross-entropy of row-wise softmax against target indices.
    /// Rows whose target is `None` are padding and contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (b, k) = dims2(self.shape(logits), "cross_entropy")?;
        if targets.len() != b {
            return Err(shape_err("cross_entropy", format!("{} targets for {b} rows", targets.len())));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (bi, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= k {
                return Err(SimtError::Index { index: t, size: k });
            }
            let row = &lv[bi * k..(bi + 1) * k];
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            for j in 0..k {
                probs[bi * k + j] = (row[j] - lse).exp();
            }
        }
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// `sum(a * c)` for a constant coefficient buffer `c`.
    pub fn dot_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(shape_err("dot_const", format!("{} coefficients for {} values", c.len(), self.value(a).len())));
        }
        let s = self.value(a).iter().zip(&c).map(|(x, y)| x * y).sum();
        Ok(self.push(vec![1], vec![s], Op::DotConst(a, c), &[a]))
    }

    /// Populates gradients of `loss` with respect to every node that requires
    /// them. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss).iter().product::<usize>() != 1 {
            return Err(SimtError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        macro_rules! with {
            ($v:expr, |$ga:ident| $body:block) => {
                if let Some($ga) = parent_grad(nodes, grads, $v) $body
            };
        }
        let val = |v: Var| nodes[v.0].value.as_slice();
        let out = node.value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                with!(*a, |ga| { gemm_acc(m, n, k, g, false, val(*b), true, ga) });
                with!(*b, |gb| { gemm_acc(k, m, n, val(*a), true, g, false, gb) });
            }
            Op::Add(a, b) => {
                with!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
                with!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
            }
            Op::Sub(a, b) => {
                with!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
                with!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y) });
            }
            Op::Mul(a, b) => {
                with!(*a, |ga| {
                    for ((x, y), bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *x += y * bv;
                    }
                });
                with!(*b, |gb| {
                    for ((x, y), av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *x += y * av;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                let n = node.shape[1];
                with!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
                with!(*bias, |gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Scale(a, c) => {
                with!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y) });
            }
            Op::Sigmoid(a) => {
                with!(*a, |ga| {
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * o * (1.0 - o);
                    }
                });
            }
            Op::Tanh(a) => {
                with!(*a, |ga| {
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * (1.0 - o * o);
                    }
                });
            }
            Op::Exp(a) => {
                with!(*a, |ga| {
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * o;
                    }
                });
            }
            Op::Concat(parts) => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1];
                    with!(*p, |gp| {
                        for r in 0..m {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { src, start } => {
                let (m, len) = (node.shape[0], node.shape[1]);
                let n = nodes[src.0].shape[1];
                with!(*src, |gs| {
                    for r in 0..m {
                        let dst = &mut gs[r * n + start..r * n + start + len];
                        dst.iter_mut().zip(&g[r * len..(r + 1) * len]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let e = node.shape[1];
                with!(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * e..(id + 1) * e];
                        dst.iter_mut().zip(&g[r * e..(r + 1) * e]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Stack(steps) => {
                let (b, s_len, d) = (node.shape[0], node.shape[1], node.shape[2]);
                for (si, s) in steps.iter().enumerate() {
                    with!(*s, |gs| {
                        for bi in 0..b {
                            let src = &g[(bi * s_len + si) * d..(bi * s_len + si + 1) * d];
                            gs[bi * d..(bi + 1) * d].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                with!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
            }
            Op::Scores { mem, query } => {
                let (b, s, d) = (nodes[mem.0].shape[0], nodes[mem.0].shape[1], nodes[mem.0].shape[2]);
                let mv = val(*mem);
                let qv = val(*query);
                with!(*mem, |gm| {
                    for bi in 0..b {
                        let q = &qv[bi * d..(bi + 1) * d];
                        for si in 0..s {
                            let w = g[bi * s + si];
                            let dst = &mut gm[(bi * s + si) * d..(bi * s + si + 1) * d];
                            dst.iter_mut().zip(q).for_each(|(x, y)| *x += w * y);
                        }
                    }
                });
                with!(*query, |gq| {
                    for bi in 0..b {
                        let dst = &mut gq[bi * d..(bi + 1) * d];
                        for si in 0..s {
                            let w = g[bi * s + si];
                            let row = &mv[(bi * s + si) * d..(bi * s + si + 1) * d];
                            dst.iter_mut().zip(row).for_each(|(x, y)| *x += w * y);
                        }
                    }
                });
            }
            Op::MaskedSoftmax { lens } => {
                let x = node.aux.expect("masked softmax input");
                let s = node.shape[1];
                with!(x, |gx| {
                    for (bi, &l) in lens.iter().enumerate() {
                        let y = &out[bi * s..bi * s + l];
                        let gy = &g[bi * s..bi * s + l];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for si in 0..l {
                            gx[bi * s + si] += y[si] * (gy[si] - dot);
                        }
                    }
                });
            }
            Op::Context { weights, mem } => {
                let (b, s, d) = (nodes[mem.0].shape[0], nodes[mem.0].shape[1], nodes[mem.0].shape[2]);
                let wv = val(*weights);
                let mv = val(*mem);
                with!(*weights, |gw| {
                    for bi in 0..b {
                        let go = &g[bi * d..(bi + 1) * d];
                        for si in 0..s {
                            let row = &mv[(bi * s + si) * d..(bi * s + si + 1) * d];
                            gw[bi * s + si] += row.iter().zip(go).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                with!(*mem, |gm| {
                    for bi in 0..b {
                        let go = &g[bi * d..(bi + 1) * d];
                        for si in 0..s {
                            let w = wv[bi * s + si];
                            let dst = &mut gm[(bi * s + si) * d..(bi * s + si + 1) * d];
                            dst.iter_mut().zip(go).for_each(|(x, y)| *x += w * y);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let k = node.shape[1];
                with!(*x, |gx| {
                    for (r, (orow, grow)) in out.chunks(k).zip(g.chunks(k)).enumerate() {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..k {
                            gx[r * k + j] += grow[j] - orow[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = nodes[logits.0].shape[1];
                let scale = g[0];
                with!(*logits, |gl| {
                    for (bi, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..k {
                            gl[bi * k + j] += scale * probs[bi * k + j];
                        }
                        gl[bi * k + t] -= scale;
                    }
                });
            }
            Op::Sum(a) => {
                with!(*a, |ga| { ga.iter_mut().for_each(|x| *x += g[0]) });
            }
            Op::DotConst(a, c) => {
                with!(*a, |ga| { ga.iter_mut().zip(c).for_each(|(x, y)| *x += g[0] * y) });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_loss_has_unit_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1], vec![4.0], true).unwrap();
        t.backward(x).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1], vec![2.0], true).unwrap();
        let y = t.leaf(vec![1], vec![3.0], true).unwrap();
        let z = t.mul(x, y).unwrap();
        t.backward(z).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0]);
        assert_eq!(t.grad(y).unwrap(), &[2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1], vec![3.0], true).unwrap();
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        t.backward(z).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(t.backward(x), Err(SimtError::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 2], vec![1.0, 2.0], true).unwrap();
        let c = t.constant(vec![1, 2], vec![5.0, 6.0]).unwrap();
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[5.0, 6.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn matmul_matches_naive() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = t.constant(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[58., 64., 139., 154.]);
        assert!(t.matmul(a, a).is_err());
    }

    #[test]
    fn masked_softmax_ignores_padding() {
        let mut t = Tape::new();
        let x = t.constant(vec![2, 3], vec![0.0, 0.0, 100.0, 1.0, 2.0, 3.0]).unwrap();
        let y = t.masked_softmax(x, &[2, 3]).unwrap();
        let v = t.value(y);
        assert_eq!(&v[..3], &[0.5, 0.5, 0.0]);
        let s: f64 = v[3..].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_skips_padding_rows() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2, 2], vec![0.0, 0.0, 5.0, -5.0], true).unwrap();
        let l = t.cross_entropy(x, &[Some(0), None]).unwrap();
        assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-12);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[-0.5, 0.5, 0.0, 0.0]);
        assert!(matches!(t.cross_entropy(x, &[Some(2), None]), Err(SimtError::Index { .. })));
    }
}
