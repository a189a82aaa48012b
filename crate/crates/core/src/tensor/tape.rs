use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{dot, mm_nn, mm_nt, mm_tn, softmax_in_place};
use super::Tensor;
use crate::error::{DopError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Visibility rules for [`Tape::attention`].
///
/// Keys are laid out as `prefix_len` prefix rows followed by content rows.
/// Prefix rows are always visible; content key `j` is visible to query `i`
/// when `j <= i + offset` (if causal) and `key_padding[j]` (if given).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionMask {
    pub prefix_len: usize,
    pub causal_offset: Option<usize>,
    pub key_padding: Option<Vec<bool>>,
}

impl AttentionMask {
    pub fn with_prefix(prefix_len: usize) -> Self {
        Self {
            prefix_len,
            ..Self::default()
        }
    }

    pub fn causal(prefix_len: usize, offset: usize) -> Self {
        Self {
            prefix_len,
            causal_offset: Some(offset),
            key_padding: None,
        }
    }

    fn visible(&self, query: usize, key: usize) -> bool {
        if key < self.prefix_len {
            return true;
        }
        let content = key - self.prefix_len;
        if let Some(off) = self.causal_offset {
            if content > query + off {
                return false;
            }
        }
        match &self.key_padding {
            Some(pad) => pad[content],
            None => true,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ConcatRows(Vec<usize>),
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding { table: usize, ids: Vec<usize> },
    Tanh(usize),
    Relu(usize),
    Gelu(usize),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

impl Node {
    fn rows(&self) -> usize {
        self.shape[0]
    }
    fn cols(&self) -> usize {
        self.shape[1]
    }
}

/// Dynamic tape: nodes are appended in execution order, so every node's
/// inputs precede it and a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    named: HashMap<String, Var>,
    named_order: Vec<(String, Var)>,
    grads: Vec<Option<Vec<f64>>>,
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> &'a mut Vec<f64> {
    let len = nodes[i].value.len();
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn two_d(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(DopError::shape(op, format!("expected a 2-D tensor, got {shape:?}")));
    }
    Ok((shape[0], shape[1]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.push_shared(shape, Arc::new(value), op, requires_grad)
    }

    fn push_shared(
        &mut self,
        shape: Vec<usize>,
        value: Arc<Vec<f64>>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves -------------------------------------------------------

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_shared(t.shape.clone(), t.shared_values(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.constant(&t))
    }

    /// Records a leaf that tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_shared(t.shape.clone(), t.shared_values(), Op::Leaf, t.requires_grad)
    }

    /// Binds a named parameter; binding the same name twice returns the
    /// existing node so shared weights accumulate a single gradient.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.leaf(t);
        self.named.insert(name.to_string(), v);
        self.named_order.push((name.to_string(), v));
        v
    }

    pub fn named(&self, name: &str) -> Option<Var> {
        self.named.get(name).copied()
    }

    // ---- accessors ----------------------------------------------------

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Snapshot of a node's value as a gradient-free tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_shared(n.shape.clone(), Arc::clone(&n.value))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Gradient of the last [`Tape::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every named parameter that tracks gradients.
    pub fn named_grads(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.named_order
            .iter()
            .filter_map(move |(name, v)| self.grad(*v).map(|g| (name.as_str(), g)))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = two_d("matmul", self.shape(a))?;
        let (k2, n) = two_d("matmul", self.shape(b))?;
        if k != k2 {
            return Err(DopError::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        mm_nn(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a.0, b.0), rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = two_d("matmul_nt", self.shape(a))?;
        let (n, k2) = two_d("matmul_nt", self.shape(b))?;
        if k != k2 {
            return Err(DopError::shape(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        mm_nt(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a.0, b.0), rg))
    }

    // ---- elementwise --------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(DopError::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a.0, b.0), rg))
    }

    /// Adds a length-`n` row vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = two_d("add_row", self.shape(a))?;
        if self.value(row).len() != n {
            return Err(DopError::shape(
                "add_row",
                format!("{:?} + row {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n]
                .iter_mut()
                .zip(r)
                .for_each(|(o, x)| *o += x);
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(vec![m, n], out, Op::AddRow(a.0, row.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(DopError::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a.0, s), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        self.unary(a, out, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.max(0.0)).collect();
        self.unary(a, out, Op::Relu(a.0))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        self.unary(a, out, Op::Gelu(a.0))
    }

    fn unary(&mut self, a: Var, out: Vec<f64>, op: Op) -> Var {
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
    }

    // ---- structural ---------------------------------------------------

    /// Stacks 2-D blocks vertically. Zero-row blocks are allowed.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| DopError::shape("concat_rows", "no inputs"))?;
        let (_, cols) = two_d("concat_rows", self.shape(*first))?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = two_d("concat_rows", self.shape(p))?;
            if c != cols {
                return Err(DopError::shape(
                    "concat_rows",
                    format!("{:?} vs {:?}", self.shape(*first), self.shape(p)),
                ));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::ConcatRows(parts.iter().map(|v| v.0).collect()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = two_d("slice_cols", self.shape(a))?;
        if start + len > n {
            return Err(DopError::shape(
                "slice_cols",
                format!("cols {start}..{} of {:?}", start + len, self.shape(a)),
            ));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, len], out, Op::SliceCols { a: a.0, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = two_d("slice_rows", self.shape(a))?;
        if start + len > m {
            return Err(DopError::shape(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, self.shape(a)),
            ));
        }
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![len, n], out, Op::SliceRows { a: a.0, start }, rg))
    }

    /// Gathers rows of `table` (`V × d`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = two_d("embedding", self.shape(table))?;
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(DopError::Index(format!(
                    "token id {id} outside vocabulary of {vocab}"
                )));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    // ---- normalisation ------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = two_d("softmax_rows", self.shape(a))?;
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            softmax_in_place(&mut out[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, n], out, Op::SoftmaxRows(a.0), rg))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = two_d("layer_norm", self.shape(x))?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(DopError::shape(
                "layer_norm",
                format!(
                    "input {:?} with gain {:?} and bias {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- reductions and losses ------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Mean(a.0), rg)
    }

    /// Mean of squared elementwise differences.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(DopError::shape(
                "mse_loss",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let p = self.value(pred);
        let t = self.value(target);
        let n = p.len().max(1) as f64;
        let s = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(vec![1], vec![s], Op::Mse(pred.0, target.0), rg))
    }

    /// Mean over rows of `-log softmax(logits)[t, targets[t]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t_len, vocab) = two_d("cross_entropy", self.shape(logits))?;
        if targets.len() != t_len || t_len == 0 {
            return Err(DopError::shape(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), self.shape(logits)),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(DopError::Index(format!(
                "target id {bad} outside vocabulary of {vocab}"
            )));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (i, &tgt) in targets.iter().enumerate() {
            let row = &mut probs[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[tgt];
            softmax_in_place(row);
        }
        loss /= t_len as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- attention ----------------------------------------------------

    /// Multi-head scaled dot-product attention over already projected
    /// queries `q` (`m × d`), keys `k` and values `v` (`n × d`).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let (m, d) = two_d("attention", self.shape(q))?;
        let (n, dk) = two_d("attention", self.shape(k))?;
        let (nv, dv) = two_d("attention", self.shape(v))?;
        if dk != d || dv != d || nv != n {
            return Err(DopError::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(DopError::shape(
                "attention",
                format!("width {d} not divisible into {heads} heads"),
            ));
        }
        if mask.prefix_len > n {
            return Err(DopError::shape(
                "attention",
                format!("prefix of {} rows exceeds {n} keys", mask.prefix_len),
            ));
        }
        if let Some(pad) = &mask.key_padding {
            if pad.len() != n - mask.prefix_len {
                return Err(DopError::shape(
                    "attention",
                    format!(
                        "padding mask of {} entries for {} content keys",
                        pad.len(),
                        n - mask.prefix_len
                    ),
                ));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = self.value(q);
        let ks = self.value(k);
        let vs = self.value(v);
        let mut probs = vec![0.0; heads * m * n];
        let mut out = vec![0.0; m * d];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..m {
                let qrow = &qs[i * d + c0..i * d + c0 + dh];
                let prow = &mut probs[(h * m + i) * n..(h * m + i + 1) * n];
                for (j, p) in prow.iter_mut().enumerate() {
                    *p = if mask.visible(i, j) {
                        scale * dot(qrow, &ks[j * d + c0..j * d + c0 + dh])
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_in_place(prow);
                let orow = &mut out[i * d + c0..i * d + c0 + dh];
                for (j, &p) in prow.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vrow = &vs[j * d + c0..j * d + c0 + dh];
                    orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += p * x);
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![m, d],
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node,
    /// laid out `heads × m × n`.
    pub fn attention_probs(&self, out: Var) -> Option<&[f64]> {
        match &self.node(out).op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ---- reverse sweep ------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Afterwards every leaf that
    /// tracks gradients has one, zero-filled if it did not participate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(DopError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |i: usize| nodes[i].requires_grad;
        macro_rules! acc {
            ($i:expr) => {
                grad_slot(grads, nodes, $i)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].rows(), nodes[*a].cols());
                let n = nodes[*b].cols();
                if needs(*a) {
                    mm_nt(g, &nodes[*b].value, m, n, k, acc!(*a));
                }
                if needs(*b) {
                    mm_tn(&nodes[*a].value, g, m, k, n, acc!(*b));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (nodes[*a].rows(), nodes[*a].cols());
                let n = nodes[*b].rows();
                if needs(*a) {
                    mm_nn(g, &nodes[*b].value, m, n, k, acc!(*a));
                }
                if needs(*b) {
                    mm_tn(g, &nodes[*a].value, m, n, k, acc!(*b));
                }
            }
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if needs(i) {
                        acc!(i).iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if needs(*row) {
                    let n = nodes[*row].value.len();
                    let r = acc!(*row);
                    for chunk in g.chunks(n) {
                        r.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = &nodes[*b].value;
                    acc!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(bv.iter()))
                        .for_each(|(o, (x, y))| *o += x * y);
                }
                if needs(*b) {
                    let av = &nodes[*a].value;
                    acc!(*b)
                        .iter_mut()
                        .zip(g.iter().zip(av.iter()))
                        .for_each(|(o, (x, y))| *o += x * y);
                }
            }
            Op::Scale(a, s) => {
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(o, x)| *o += s * x);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if needs(p) {
                        acc!(p)
                            .iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(o, x)| *o += x);
                    }
                    off += len;
                }
            }
            Op::SliceCols { a, start } => {
                if needs(*a) {
                    let n = nodes[*a].cols();
                    let len = node.cols();
                    let ga = acc!(*a);
                    for (i, chunk) in g.chunks(len.max(1)).enumerate().take(node.rows()) {
                        ga[i * n + start..i * n + start + len]
                            .iter_mut()
                            .zip(chunk)
                            .for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if needs(*a) {
                    let n = nodes[*a].cols();
                    acc!(*a)[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, x)| *o += x);
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(*a) {
                    let n = node.cols();
                    let y = &node.value;
                    let ga = acc!(*a);
                    for i in 0..node.rows() {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let s = dot(yr, gr);
                        for j in 0..n {
                            ga[i * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = (node.rows(), node.cols());
                if needs(*gamma) {
                    let gg = acc!(*gamma);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = acc!(*beta);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
                if needs(*x) {
                    let gam = &nodes[*gamma].value;
                    let gx = acc!(*x);
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let xr = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = g[i * n + j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / nf;
                        let mean_dx = dot(&dxhat, xr) / nf;
                        for j in 0..n {
                            gx[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let d = node.cols();
                    let gt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    let y = &node.value;
                    acc!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(y.iter()))
                        .for_each(|(o, (gi, yi))| *o += gi * (1.0 - yi * yi));
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let xv = &nodes[*a].value;
                    acc!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(xv.iter()))
                        .for_each(|(o, (gi, xi))| {
                            if *xi > 0.0 {
                                *o += gi
                            }
                        });
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let xv = &nodes[*a].value;
                    acc!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(xv.iter()))
                        .for_each(|(o, (gi, &x))| {
                            let u = GELU_C * (x + 0.044715 * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            *o += gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                        });
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    acc!(*a).iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let ga = acc!(*a);
                    let s = g[0] / ga.len().max(1) as f64;
                    ga.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Mse(p, t) => {
                let pv = &nodes[*p].value;
                let tv = &nodes[*t].value;
                let c = 2.0 * g[0] / pv.len().max(1) as f64;
                if needs(*p) {
                    acc!(*p)
                        .iter_mut()
                        .zip(pv.iter().zip(tv.iter()))
                        .for_each(|(o, (a, b))| *o += c * (a - b));
                }
                if needs(*t) {
                    acc!(*t)
                        .iter_mut()
                        .zip(pv.iter().zip(tv.iter()))
                        .for_each(|(o, (a, b))| *o -= c * (a - b));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if needs(*logits) {
                    let vocab = nodes[*logits].cols();
                    let c = g[0] / targets.len() as f64;
                    let gl = acc!(*logits);
                    for (i, &tgt) in targets.iter().enumerate() {
                        for j in 0..vocab {
                            gl[i * vocab + j] += c * probs[i * vocab + j];
                        }
                        gl[i * vocab + tgt] -= c;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(node, g, *q, *k, *v, *heads, probs, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node,
        g: &[f64],
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (m, d) = (node.rows(), node.cols());
        let n = nodes[k].rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = &nodes[q].value;
        let ks = &nodes[k].value;
        let vs = &nodes[v].value;
        let (need_q, need_k, need_v) = (
            nodes[q].requires_grad,
            nodes[k].requires_grad,
            nodes[v].requires_grad,
        );
        let mut dq = vec![0.0; if need_q { m * d } else { 0 }];
        let mut dk = vec![0.0; if need_k { n * d } else { 0 }];
        let mut dv = vec![0.0; if need_v { n * d } else { 0 }];
        let mut ds = vec![0.0; n];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..m {
                let prow = &probs[(h * m + i) * n..(h * m + i + 1) * n];
                let grow = &g[i * d + c0..i * d + c0 + dh];
                // dP_ij = <dO_i, V_j>; dS = P ∘ (dP - <P, dP>)
                let mut pdp = 0.0;
                for j in 0..n {
                    let dp = if prow[j] == 0.0 {
                        0.0
                    } else {
                        dot(grow, &vs[j * d + c0..j * d + c0 + dh])
                    };
                    ds[j] = dp;
                    pdp += prow[j] * dp;
                }
                for j in 0..n {
                    ds[j] = prow[j] * (ds[j] - pdp);
                }
                if need_v {
                    for j in 0..n {
                        let p = prow[j];
                        if p == 0.0 {
                            continue;
                        }
                        dv[j * d + c0..j * d + c0 + dh]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(o, x)| *o += p * x);
                    }
                }
                if need_q {
                    let dqrow = &mut dq[i * d + c0..i * d + c0 + dh];
                    for j in 0..n {
                        let s = ds[j] * scale;
                        if s == 0.0 {
                            continue;
                        }
                        dqrow
                            .iter_mut()
                            .zip(&ks[j * d + c0..j * d + c0 + dh])
                            .for_each(|(o, x)| *o += s * x);
                    }
                }
                if need_k {
                    let qrow = &qs[i * d + c0..i * d + c0 + dh];
                    for j in 0..n {
                        let s = ds[j] * scale;
                        if s == 0.0 {
                            continue;
                        }
                        dk[j * d + c0..j * d + c0 + dh]
                            .iter_mut()
                            .zip(qrow)
                            .for_each(|(o, x)| *o += s * x);
                    }
                }
            }
        }
        for (idx, local, need) in [(q, dq, need_q), (k, dk, need_k), (v, dv, need_v)] {
            if !need {
                continue;
            }
            let len = nodes[idx].value.len();
            let slot = grads[idx].get_or_insert_with(|| vec![0.0; len]);
            slot.iter_mut().zip(&local).for_each(|(o, x)| *o += x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let id = tape.constant(&Tensor::identity(2));
        let m = tape.constant(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(id, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]));
        let b = tape.constant(&t(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[5.0, 6.0, 0.0, 0.0]);

        let z = tape.constant(&Tensor::zeros(vec![3, 4]));
        let any = tape.constant(&t(vec![4, 2], (0..8).map(f64::from).collect()));
        let out = tape.matmul(z, any).unwrap();
        assert_eq!(tape.shape(out), &[3, 2]);
        assert!(tape.value(out).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape
            .constant_from(
                vec![3, 2],
                vec![0.0, 0.0, 2f64.ln(), 0.0, 1000.0, 1000.0],
            )
            .unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        assert_eq!(&v[0..2], &[0.5, 0.5]);
        assert_abs_diff_eq!(v[2], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[3], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(&v[4..6], &[0.5, 0.5]);
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = tape.constant_from(vec![2], vec![0.0, 0.0]).unwrap();
        let b = tape.constant_from(vec![2], vec![2.0, 0.0]).unwrap();
        let l = tape.mse_loss(a, b).unwrap();
        assert_eq!(tape.scalar(l), 2.0);
        let a = tape.constant_from(vec![1], vec![1.0]).unwrap();
        let b = tape.constant_from(vec![1], vec![-1.0]).unwrap();
        let l = tape.mse_loss(a, b).unwrap();
        assert_eq!(tape.scalar(l), 4.0);
        let l = tape.mse_loss(a, a).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let c = tape.constant_from(vec![3], vec![0.0; 3]).unwrap();
        assert!(matches!(tape.mse_loss(a, c), Err(DopError::Shape { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let confident = tape
            .constant_from(vec![1, 3], vec![0.0, 1000.0, 0.0])
            .unwrap();
        let l = tape.cross_entropy(confident, &[1]).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);

        let uniform = tape.constant_from(vec![1, 4], vec![0.3; 4]).unwrap();
        let l = tape.cross_entropy(uniform, &[2]).unwrap();
        assert_abs_diff_eq!(tape.scalar(l), 4f64.ln(), epsilon = 1e-12);

        let two = tape.constant_from(vec![2, 2], vec![0.0; 4]).unwrap();
        let l = tape.cross_entropy(two, &[0, 1]).unwrap();
        assert_abs_diff_eq!(tape.scalar(l), 2f64.ln(), epsilon = 1e-12);

        assert!(matches!(
            tape.cross_entropy(two, &[0, 2]),
            Err(DopError::Index(_))
        ));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![0.5, -1.0, 2.0]).with_requires_grad(true));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![2.0]).with_requires_grad(true));
        let idle = tape.leaf(&t(vec![2], vec![7.0, 7.0]).with_requires_grad(true));
        let zero = tape.constant(&Tensor::zeros(vec![1]));
        let l = tape.mse_loss(x, zero).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
        assert_eq!(tape.grad(idle).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(DopError::Contract(_))));
    }

    #[test]
    fn concat_rows_preserves_blocks() {
        let mut tape = Tape::new();
        let a = tape.constant_from(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant_from(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let empty = tape.constant(&Tensor::zeros(vec![0, 2]));
        let c = tape.concat_rows(&[empty, a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn shared_parameter_binds_once() {
        let mut tape = Tape::new();
        let w = Tensor::full(vec![2], 1.0).with_requires_grad(true);
        let a = tape.param("w", &w);
        let b = tape.param("w", &w);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        let grads: Vec<_> = tape.named_grads().collect();
        assert_eq!(grads, vec![("w", &[2.0, 2.0][..])]);
    }

    #[test]
    fn attention_causal_mask_hides_future() {
        let mut tape = Tape::new();
        let q = tape.constant_from(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let kv = tape
            .constant_from(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let out = tape
            .attention(q, kv, kv, 1, &AttentionMask::causal(0, 0))
            .unwrap();
        // the first query can only see the first key
        assert_eq!(&tape.value(out)[0..2], &[1.0, 2.0]);
        let probs = tape.attention_probs(out).unwrap();
        assert_eq!(probs[1], 0.0);
    }

    #[test]
    fn attention_rejects_bad_padding_mask() {
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::zeros(vec![1, 4]));
        let k = tape.constant(&Tensor::zeros(vec![3, 4]));
        let mask = AttentionMask {
            prefix_len: 1,
            causal_offset: None,
            key_padding: Some(vec![true; 3]),
        };
        assert!(tape.attention(q, k, k, 2, &mask).is_err());
    }
}
