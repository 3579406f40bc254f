use std::cell::{Ref, RefCell};

use super::{Result, Tensor, TensorError};

/// Records primitive operations in creation order, so parents always precede
/// children and a single reverse sweep is a valid topological traversal.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    /// True when some `requires_grad` leaf feeds this node.
    tracked: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Maximum(usize, usize),
    Minimum(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Relu(usize),
    Abs(usize),
    Pow(usize, f64),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Reshape(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every tracked leaf.
pub struct Gradients {
    leaves: Vec<(usize, Vec<usize>, Vec<f64>)>,
}

impl Gradients {
    /// Gradient for `leaf`, or `None` if the leaf does not require grad.
    pub fn get(&self, leaf: Var<'_>) -> Option<Tensor> {
        self.leaves
            .iter()
            .find(|(id, _, _)| *id == leaf.id)
            .map(|(_, shape, g)| Tensor {
                shape: shape.clone(),
                data: g.clone(),
            })
    }

    pub fn take(&mut self, leaf: Var<'_>) -> Option<Tensor> {
        let pos = self.leaves.iter().position(|(id, _, _)| *id == leaf.id)?;
        let (_, shape, data) = self.leaves.swap_remove(pos);
        Some(Tensor { shape, data })
    }
}

fn same_or_scalar(op: &'static str, a: &[usize], b: &[usize], na: usize, nb: usize) -> Result<Vec<usize>> {
    if a == b || nb == 1 {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (shape[..shape.len() - 1].iter().product(), *shape.last().unwrap()),
    }
}

/// `out += a (m×k) · b (k×n)`
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a (m×n) · bᵀ` where `b` is `k×n`. Transposes `b` once so the
/// inner loop is the same vectorizable row update as [`matmul_acc`].
fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul_acc(a, &bt, out, m, n, k);
}

/// `out += aᵀ · c` where `a` is `m×k`, `c` is `m×n`.
fn matmul_at_acc(a: &[f64], c: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += aip * cv;
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives gradient.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(t.shape, t.data, Op::Leaf, requires_grad)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    fn binary(
        &self,
        op: &'static str,
        a: usize,
        b: usize,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'_>> {
        let nodes = self.nodes();
        let (x, y) = (&nodes[a], &nodes[b]);
        let shape = same_or_scalar(op, &x.shape, &y.shape, x.value.len(), y.value.len())?;
        let value: Vec<f64> = if x.value.len() == y.value.len() {
            x.value.iter().zip(&y.value).map(|(&p, &q)| f(p, q)).collect()
        } else if y.value.len() == 1 {
            let q = y.value[0];
            x.value.iter().map(|&p| f(p, q)).collect()
        } else {
            let p = x.value[0];
            y.value.iter().map(|&q| f(p, q)).collect()
        };
        let tracked = x.tracked || y.tracked;
        drop(nodes);
        Ok(self.push(shape, value, mk(a, b), tracked))
    }

    fn unary(&self, a: usize, f: impl Fn(f64) -> f64, op: Op) -> Var<'_> {
        let nodes = self.nodes();
        let x = &nodes[a];
        let value = x.value.iter().map(|&v| f(v)).collect();
        let (shape, tracked) = (x.shape.clone(), x.tracked);
        drop(nodes);
        self.push(shape, value, op, tracked)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].tracked
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes()[self.id].value)
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes()[self.id].value[0]
    }

    pub fn all_finite(&self) -> bool {
        self.with_data(|d| d.iter().all(|v| v.is_finite()))
    }

    /// Same values, no gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(&self.value())
    }

    pub fn add(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary("add", self.id, o.id, |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary("sub", self.id, o.id, |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary("mul", self.id, o.id, |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary("div", self.id, o.id, |a, b| a / b, Op::Div)
    }

    pub fn maximum(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary("maximum", self.id, o.id, |a, b| if a >= b { a } else { b }, Op::Maximum)
    }

    pub fn minimum(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary("minimum", self.id, o.id, |a, b| if a <= b { a } else { b }, Op::Minimum)
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let (x, b) = (&nodes[self.id], &nodes[row.id]);
        let (r, c) = dims2(&x.shape);
        if b.value.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: x.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let mut value = x.value.clone();
        for i in 0..r {
            for (v, &bv) in value[i * c..(i + 1) * c].iter_mut().zip(&b.value) {
                *v += bv;
            }
        }
        let (shape, tracked) = (x.shape.clone(), x.tracked || b.tracked);
        drop(nodes);
        Ok(self.tape.push(shape, value, Op::AddRow(self.id, row.id), tracked))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.tape.unary(self.id, |v| v * s, Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn shift(&self, s: f64) -> Var<'t> {
        self.tape.unary(self.id, |v| v + s, Op::Shift(self.id))
    }

    /// `1 - self`
    pub fn one_minus(&self) -> Var<'t> {
        self.neg().shift(1.0)
    }

    pub fn matmul(&self, o: Var<'t>) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let (x, y) = (&nodes[self.id], &nodes[o.id]);
        if x.shape.len() != 2 || y.shape.len() != 2 || x.shape[1] != y.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: x.shape.clone(),
                rhs: y.shape.clone(),
            });
        }
        let (m, k, n) = (x.shape[0], x.shape[1], y.shape[1]);
        let mut value = vec![0.0; m * n];
        matmul_acc(&x.value, &y.value, &mut value, m, k, n);
        let tracked = x.tracked || y.tracked;
        drop(nodes);
        Ok(self.tape.push(vec![m, n], value, Op::MatMul(self.id, o.id), tracked))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        if x.shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected rank 2, got {:?}", x.shape),
            });
        }
        let (r, c) = (x.shape[0], x.shape[1]);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = x.value[i * c + j];
            }
        }
        let tracked = x.tracked;
        drop(nodes);
        Ok(self.tape.push(vec![c, r], value, Op::Transpose(self.id), tracked))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        if shape.iter().product::<usize>() != x.value.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: x.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let (value, tracked) = (x.value.clone(), x.tracked);
        drop(nodes);
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape(self.id), tracked))
    }

    pub fn exp(&self) -> Var<'t> {
        self.tape.unary(self.id, f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Var<'t> {
        self.tape.unary(self.id, f64::ln, Op::Log(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.tape.unary(self.id, sigmoid, Op::Sigmoid(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.tape.unary(self.id, |v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        self.tape.unary(self.id, f64::abs, Op::Abs(self.id))
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.tape.unary(self.id, |v| v.powf(p), Op::Pow(self.id, p))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        let (_, c) = dims2(&x.shape);
        let value: Vec<f64> = x.value.chunks(c).flat_map(super::softmax).collect();
        let (shape, tracked) = (x.shape.clone(), x.tracked);
        drop(nodes);
        self.tape.push(shape, value, Op::SoftmaxRows(self.id), tracked)
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        let (_, c) = dims2(&x.shape);
        let value: Vec<f64> = x.value.chunks(c).flat_map(super::log_softmax).collect();
        let (shape, tracked) = (x.shape.clone(), x.tracked);
        drop(nodes);
        self.tape.push(shape, value, Op::LogSoftmaxRows(self.id), tracked)
    }

    pub fn sum(&self) -> Var<'t> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        let (s, tracked) = (x.value.iter().sum(), x.tracked);
        drop(nodes);
        self.tape.push(vec![1], vec![s], Op::Sum(self.id), tracked)
    }

    pub fn mean(&self) -> Var<'t> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        let s = x.value.iter().sum::<f64>() / x.value.len() as f64;
        let tracked = x.tracked;
        drop(nodes);
        self.tape.push(vec![1], vec![s], Op::Mean(self.id), tracked)
    }

    /// Per-row sums: `r×c -> r×1`.
    pub fn sum_rows(&self) -> Var<'t> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        let (r, c) = dims2(&x.shape);
        let value: Vec<f64> = x.value.chunks(c).map(|row| row.iter().sum()).collect();
        let tracked = x.tracked;
        drop(nodes);
        self.tape.push(vec![r, 1], value, Op::SumRows(self.id), tracked)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        let (r, c) = dims2(&x.shape);
        if start >= end || end > r {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{end} out of bounds for shape {:?}", x.shape),
            });
        }
        let value = x.value[start * c..end * c].to_vec();
        let tracked = x.tracked;
        drop(nodes);
        Ok(self.tape.push(vec![end - start, c], value, Op::SliceRows(self.id, start), tracked))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        let (r, c) = dims2(&x.shape);
        if start >= end || end > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{end} out of bounds for shape {:?}", x.shape),
            });
        }
        let w = end - start;
        let mut value = Vec::with_capacity(r * w);
        for row in x.value.chunks(c) {
            value.extend_from_slice(&row[start..end]);
        }
        let tracked = x.tracked;
        drop(nodes);
        Ok(self.tape.push(vec![r, w], value, Op::SliceCols(self.id, start), tracked))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        let (r, c) = dims2(&x.shape);
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("indices {idx:?} invalid for shape {:?}", x.shape),
            });
        }
        let mut value = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            value.extend_from_slice(&x.value[i * c..(i + 1) * c]);
        }
        let tracked = x.tracked;
        drop(nodes);
        Ok(self
            .tape
            .push(vec![idx.len(), c], value, Op::GatherRows(self.id, idx.to_vec()), tracked))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or(TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            })?
            .tape;
        let nodes = tape.nodes();
        let c = dims2(&nodes[parts[0].id].shape).1;
        let mut value = Vec::new();
        let mut rows = 0;
        let mut tracked = false;
        for p in parts {
            let n = &nodes[p.id];
            let (r, pc) = dims2(&n.shape);
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: nodes[parts[0].id].shape.clone(),
                    rhs: n.shape.clone(),
                });
            }
            value.extend_from_slice(&n.value);
            rows += r;
            tracked |= n.tracked;
        }
        drop(nodes);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(vec![rows, c], value, Op::ConcatRows(ids), tracked))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or(TensorError::Invalid {
                op: "concat_cols",
                msg: "no inputs".into(),
            })?
            .tape;
        let nodes = tape.nodes();
        let r = dims2(&nodes[parts[0].id].shape).0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut tracked = false;
        for p in parts {
            let n = &nodes[p.id];
            let (pr, pc) = dims2(&n.shape);
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: nodes[parts[0].id].shape.clone(),
                    rhs: n.shape.clone(),
                });
            }
            widths.push(pc);
            tracked |= n.tracked;
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&nodes[p.id].value[i * w..(i + 1) * w]);
            }
        }
        drop(nodes);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(vec![r, total], value, Op::ConcatCols(ids), tracked))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `c`.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let nodes = self.tape.nodes();
        let (x, g, b) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
        let (r, c) = dims2(&x.shape);
        if g.value.len() != c || b.value.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape.clone(),
                rhs: g.shape.clone(),
            });
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &x.value[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[i * c + j] = h;
                value[i * c + j] = h * g.value[j] + b.value[j];
            }
        }
        let (shape, tracked) = (x.shape.clone(), x.tracked || g.tracked || b.tracked);
        drop(nodes);
        Ok(self.tape.push(
            shape,
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    /// Reverse sweep from this scalar. Returns gradients for every leaf
    /// registered with `requires_grad`.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes();
        let out = &nodes[self.id];
        if out.value.len() != 1 {
            return Err(TensorError::NonScalarOutput(out.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=self.id).map(|_| None).collect();
        grads[self.id] = Some(vec![1.0]);
        let mut leaves = Vec::new();

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => leaves.push((id, node.shape.clone(), g)),
                op => backprop(op, node, &g, &nodes, &mut grads),
            }
        }
        leaves.reverse();
        Ok(Gradients { leaves })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].tracked {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

/// Accumulate `g` into a binary operand, summing when it was a broadcast scalar.
fn acc_binary(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: impl Iterator<Item = f64>) {
    if let Some(dst) = acc(grads, nodes, id) {
        if dst.len() == 1 {
            dst[0] += g.sum::<f64>();
        } else {
            dst.iter_mut().zip(g).for_each(|(d, v)| *d += v);
        }
    }
}

fn bval(nodes: &[Node], id: usize, i: usize) -> f64 {
    let v = &nodes[id].value;
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn backprop(op: &Op, node: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let n = g.len();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_binary(grads, nodes, *a, g.iter().copied());
            acc_binary(grads, nodes, *b, g.iter().copied());
        }
        Op::Sub(a, b) => {
            acc_binary(grads, nodes, *a, g.iter().copied());
            acc_binary(grads, nodes, *b, g.iter().map(|v| -v));
        }
        Op::Mul(a, b) => {
            acc_binary(grads, nodes, *a, (0..n).map(|i| g[i] * bval(nodes, *b, i)));
            acc_binary(grads, nodes, *b, (0..n).map(|i| g[i] * bval(nodes, *a, i)));
        }
        Op::Div(a, b) => {
            acc_binary(grads, nodes, *a, (0..n).map(|i| g[i] / bval(nodes, *b, i)));
            acc_binary(
                grads,
                nodes,
                *b,
                (0..n).map(|i| -g[i] * node.value[i] / bval(nodes, *b, i)),
            );
        }
        Op::Maximum(a, b) | Op::Minimum(a, b) => {
            // Ties route the gradient to the first operand.
            let pick_a: Vec<bool> = (0..n).map(|i| bval(nodes, *a, i) == node.value[i]).collect();
            acc_binary(grads, nodes, *a, (0..n).map(|i| if pick_a[i] { g[i] } else { 0.0 }));
            acc_binary(grads, nodes, *b, (0..n).map(|i| if pick_a[i] { 0.0 } else { g[i] }));
        }
        Op::AddRow(a, b) => {
            if let Some(d) = acc(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            if let Some(d) = acc(grads, nodes, *b) {
                let c = d.len();
                for row in g.chunks(c) {
                    d.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(d) = acc(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, v)| *d += v * s);
            }
        }
        Op::Shift(a) | Op::Reshape(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let nn = nodes[*b].shape[1];
            if nodes[*a].tracked {
                let bv = &nodes[*b].value;
                let d = acc(grads, nodes, *a).unwrap();
                matmul_bt_acc(g, bv, d, m, nn, k);
            }
            if nodes[*b].tracked {
                let av = &nodes[*a].value;
                let d = acc(grads, nodes, *b).unwrap();
                matmul_at_acc(av, g, d, m, k, nn);
            }
        }
        Op::Transpose(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Exp(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                for i in 0..n {
                    d[i] += g[i] * node.value[i];
                }
            }
        }
        Op::Log(a) => {
            let x = &nodes[*a].value;
            if let Some(d) = acc(grads, nodes, *a) {
                for i in 0..n {
                    d[i] += g[i] / x[i];
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                for i in 0..n {
                    let s = node.value[i];
                    d[i] += g[i] * s * (1.0 - s);
                }
            }
        }
        Op::Relu(a) => {
            let x = &nodes[*a].value;
            if let Some(d) = acc(grads, nodes, *a) {
                for i in 0..n {
                    if x[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            }
        }
        Op::Abs(a) => {
            // Subgradient at zero is zero.
            let x = &nodes[*a].value;
            if let Some(d) = acc(grads, nodes, *a) {
                for i in 0..n {
                    if x[i] > 0.0 {
                        d[i] += g[i];
                    } else if x[i] < 0.0 {
                        d[i] -= g[i];
                    }
                }
            }
        }
        Op::Pow(a, p) => {
            let x = &nodes[*a].value;
            if let Some(d) = acc(grads, nodes, *a) {
                for i in 0..n {
                    if x[i] == 0.0 && *p <= 1.0 {
                        continue;
                    }
                    d[i] += g[i] * p * x[i].powf(p - 1.0);
                }
            }
        }
        Op::SoftmaxRows(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                let c = dims2(&node.shape).1;
                for ((drow, grow), prow) in d.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                    let dot: f64 = grow.iter().zip(prow).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        drow[j] += prow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmaxRows(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                let c = dims2(&node.shape).1;
                for ((drow, grow), lrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                    let gs: f64 = grow.iter().sum();
                    for j in 0..c {
                        drow[j] += grow[j] - lrow[j].exp() * gs;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                d.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|v| *v += s);
            }
        }
        Op::SumRows(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                let c = dims2(&nodes[*a].shape).1;
                for (drow, &gv) in d.chunks_mut(c).zip(g) {
                    drow.iter_mut().for_each(|v| *v += gv);
                }
            }
        }
        Op::SliceRows(a, start) => {
            if let Some(d) = acc(grads, nodes, *a) {
                let c = dims2(&nodes[*a].shape).1;
                d[start * c..start * c + n].iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
        Op::SliceCols(a, start) => {
            if let Some(d) = acc(grads, nodes, *a) {
                let c = dims2(&nodes[*a].shape).1;
                let w = dims2(&node.shape).1;
                for (i, grow) in g.chunks(w).enumerate() {
                    d[i * c + start..i * c + start + w]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(d, v)| *d += v);
                }
            }
        }
        Op::GatherRows(a, idx) => {
            if let Some(d) = acc(grads, nodes, *a) {
                let c = dims2(&nodes[*a].shape).1;
                for (k, &i) in idx.iter().enumerate() {
                    d[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[k * c..(k + 1) * c])
                        .for_each(|(d, v)| *d += v);
                }
            }
        }
        Op::ConcatRows(ids) => {
            let mut off = 0;
            for &p in ids {
                let len = nodes[p].value.len();
                if let Some(d) = acc(grads, nodes, p) {
                    d.iter_mut().zip(&g[off..off + len]).for_each(|(d, v)| *d += v);
                }
                off += len;
            }
        }
        Op::ConcatCols(ids) => {
            let total = dims2(&node.shape).1;
            let mut off = 0;
            for &p in ids {
                let w = dims2(&nodes[p].shape).1;
                if let Some(d) = acc(grads, nodes, p) {
                    for (i, drow) in d.chunks_mut(w).enumerate() {
                        drow.iter_mut()
                            .zip(&g[i * total + off..i * total + off + w])
                            .for_each(|(d, v)| *d += v);
                    }
                }
                off += w;
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = dims2(&node.shape).1;
            let gam = &nodes[*gamma].value;
            if let Some(d) = acc(grads, nodes, *beta) {
                for row in g.chunks(c) {
                    d.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
            }
            if let Some(d) = acc(grads, nodes, *gamma) {
                for (row, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        d[j] += row[j] * hrow[j];
                    }
                }
            }
            if let Some(d) = acc(grads, nodes, *x) {
                let cf = c as f64;
                for (i, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        let dh = grow[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                    }
                    for j in 0..c {
                        let dh = grow[j] * gam[j];
                        d[i * c + j] += rstd[i] * (dh - sum_dh / cf - hrow[j] * sum_dh_h / cf);
                    }
                }
            }
        }
    }
}
