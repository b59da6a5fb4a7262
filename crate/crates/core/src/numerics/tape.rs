//! Reverse-mode gradient tape over vector-valued nodes.
//!
//! Binary elementwise operations broadcast a length-1 operand against the
//! other side. Scalars are length-1 vectors.

use crate::error::{invalid, numeric, Error, Result};
use crate::numerics::vecops;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Param,
    Const,
    Slice {
        a: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Affine {
        w: Var,
        b: Var,
        x: Var,
        rows: usize,
        cols: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sin(Var),
    Square(Var),
    Sum(Var),
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    Opaque {
        name: String,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a computation so its scalar output can be differentiated with
/// respect to every `param` leaf.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Trainable leaf. Gradients are returned in creation order.
    pub fn param(&mut self, values: &[f64]) -> Var {
        let v = self.push(values.to_vec(), Op::Param, true);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, values: &[f64]) -> Var {
        self.push(values.to_vec(), Op::Const, false)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a)[start..start + len].to_vec();
        let ng = self.ng(a);
        self.push(value, Op::Slice { a, start }, ng)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let value: Vec<f64> = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::Concat(parts.to_vec()), ng)
    }

    /// `W x + b`, `W` row-major `rows x cols`.
    pub fn affine(&mut self, w: Var, b: Var, x: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.value(w).len() != rows * cols || self.value(b).len() != rows || self.value(x).len() != cols {
            return Err(invalid(format!(
                "affine shape mismatch: w {} b {} x {} for {rows}x{cols}",
                self.value(w).len(),
                self.value(b).len(),
                self.value(x).len()
            )));
        }
        let value = vecops::affine(self.value(w), self.value(b), self.value(x), rows, cols);
        let ng = self.ng(w) || self.ng(b) || self.ng(x);
        Ok(self.push(value, Op::Affine { w, b, x, rows, cols }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let n = broadcast_len(va.len(), vb.len())?;
        let value = (0..n).map(|i| f(at(va, i), at(vb, i))).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Squared Euclidean distance as a length-1 node.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.sum(sq))
    }

    /// Softmax of `-d / tau`. The minimum is subtracted as a constant, which
    /// leaves the function (and its gradient) unchanged.
    pub fn softmax_neg_scaled(&mut self, d: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {tau}")));
        }
        let dmin = self.value(d).iter().copied().fold(f64::INFINITY, f64::min);
        let shifted = self.offset(d, -dmin);
        let logits = self.scale(shifted, -1.0 / tau);
        let e = self.exp(logits);
        let z = self.sum(e);
        self.div(e, z)
    }

    /// Forward-only operation. Any gradient that reaches it is an error.
    pub fn opaque(&mut self, name: &str, a: Var, f: impl Fn(&[f64]) -> Vec<f64>) -> Var {
        let value = f(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::Opaque { name: name.to_owned() }, ng)
    }

    /// Gradients of the length-1 node `loss` with respect to each param leaf.
    pub fn backward(&self, loss: Var) -> Result<Vec<Vec<f64>>> {
        if self.value(loss).len() != 1 {
            return Err(invalid(format!(
                "loss must be a scalar, got length {}",
                self.value(loss).len()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param = node.op {
                adj[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut adj)?;
        }
        Ok(self
            .params
            .iter()
            .map(|p| {
                adj.get(p.0)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| vec![0.0; self.value(*p).len()])
            })
            .collect())
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(usize) -> f64, n_out: usize) {
        if !self.ng(v) {
            return;
        }
        let len = self.value(v).len();
        let slot = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
        if len == n_out {
            for (i, s) in slot.iter_mut().enumerate() {
                *s += f(i);
            }
        } else {
            // broadcast operand: gradient sums over the output
            slot[0] += (0..n_out).map(f).sum::<f64>();
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| self.value(v);
        let mut acc = |v: Var, f: &dyn Fn(usize) -> f64, n_out: usize| self.accumulate(adj, v, f, n_out);
        let n = g.len();
        match &node.op {
            Op::Param | Op::Const => {}
            Op::Slice { a, start } => {
                if self.ng(*a) {
                    let len = val(*a).len();
                    let slot = adj[a.0].get_or_insert_with(|| vec![0.0; len]);
                    for (i, gi) in g.iter().enumerate() {
                        slot[start + i] += gi;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    if self.ng(*p) {
                        let slot = adj[p.0].get_or_insert_with(|| vec![0.0; len]);
                        for (s, gi) in slot.iter_mut().zip(&g[off..off + len]) {
                            *s += gi;
                        }
                    }
                    off += len;
                }
            }
            Op::Affine { w, b, x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                if self.ng(*w) {
                    let xv = val(*x);
                    let slot = adj[w.0].get_or_insert_with(|| vec![0.0; rows * cols]);
                    for r in 0..rows {
                        for c in 0..cols {
                            slot[r * cols + c] += g[r] * xv[c];
                        }
                    }
                }
                if self.ng(*b) {
                    let slot = adj[b.0].get_or_insert_with(|| vec![0.0; rows]);
                    for (s, gi) in slot.iter_mut().zip(g) {
                        *s += gi;
                    }
                }
                if self.ng(*x) {
                    let wv = val(*w);
                    let slot = adj[x.0].get_or_insert_with(|| vec![0.0; cols]);
                    for r in 0..rows {
                        for c in 0..cols {
                            slot[c] += g[r] * wv[r * cols + c];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                acc(*a, &|i| g[i], n);
                acc(*b, &|i| g[i], n);
            }
            Op::Sub(a, b) => {
                acc(*a, &|i| g[i], n);
                acc(*b, &|i| -g[i], n);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|i| g[i] * at(vb, i), n);
                acc(*b, &|i| g[i] * at(va, i), n);
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|i| g[i] / at(vb, i), n);
                acc(*b, &|i| -g[i] * at(va, i) / (at(vb, i) * at(vb, i)), n);
            }
            Op::Min(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|i| if at(va, i) <= at(vb, i) { g[i] } else { 0.0 }, n);
                acc(*b, &|i| if at(va, i) <= at(vb, i) { 0.0 } else { g[i] }, n);
            }
            Op::Scale(a, c) => acc(*a, &|i| g[i] * c, n),
            Op::Offset(a) => acc(*a, &|i| g[i], n),
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &|i| g[i] * (1.0 - y[i] * y[i]), n);
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &|i| g[i] * y[i], n);
            }
            Op::Ln(a) => {
                let va = val(*a);
                acc(*a, &|i| g[i] / va[i], n);
            }
            Op::Sin(a) => {
                let va = val(*a);
                acc(*a, &|i| g[i] * va[i].cos(), n);
            }
            Op::Square(a) => {
                let va = val(*a);
                acc(*a, &|i| 2.0 * va[i] * g[i], n);
            }
            Op::Sum(a) => {
                let len = val(*a).len();
                acc(*a, &|_| g[0], len);
            }
            Op::Clamp { a, lo, hi } => {
                let va = val(*a);
                acc(*a, &|i| if va[i] >= *lo && va[i] <= *hi { g[i] } else { 0.0 }, n);
            }
            Op::Opaque { name } => {
                return Err(Error::UnsupportedOperation(format!(
                    "no derivative for forward-only op `{name}`"
                )));
            }
        }
        Ok(())
    }
}

#[inline]
fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn broadcast_len(a: usize, b: usize) -> Result<usize> {
    match (a, b) {
        _ if a == b => Ok(a),
        (1, n) | (n, 1) => Ok(n),
        _ => Err(invalid(format!("length mismatch: {a} vs {b}"))),
    }
}

/// Value and exact gradient of a scalar loss built on a fresh tape from the
/// flat parameter vector `params`.
pub fn grad<F>(params: &[f64], loss_fn: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = tape.param(params);
    let loss = loss_fn(&mut tape, p)?;
    let value = *tape.value(loss).first().ok_or_else(|| invalid("empty loss"))?;
    if !value.is_finite() {
        return Err(numeric(format!("loss is not finite: {value}")));
    }
    let mut grads = tape.backward(loss)?;
    Ok((value, grads.swap_remove(0)))
}
