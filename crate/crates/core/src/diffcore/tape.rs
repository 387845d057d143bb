//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Nodes are vector-valued and stored in one value arena in creation order,
//! so every node's inputs precede it and a single reverse sweep suffices.
//! Forward-mode tangents are expressed with ordinary tape ops
//! ([`Tape::tanh_tangent`], [`Tape::relu_tangent`]), which keeps Jacobian
//! columns themselves differentiable.

use crate::diffcore::tensor::dot;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Affine {
        p: Var,
        w_off: usize,
        b_off: Option<usize>,
        rows: usize,
        cols: usize,
        x: Var,
    },
    MatVec {
        m: Var,
        x: Var,
        rows: usize,
        cols: usize,
    },
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    TanhTangent {
        y: Var,
        t: Var,
    },
    ReluTangent {
        z: Var,
        t: Var,
    },
    Sum(Var),
    Dot(Var, Var),
    Slice {
        a: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Affine { .. } => "affine",
            Op::MatVec { .. } => "matvec",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::TanhTangent { .. } => "tanh_tangent",
            Op::ReluTangent { .. } => "relu_tangent",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::Slice { .. } => "slice",
            Op::Concat(_) => "concat",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    off: usize,
    len: usize,
}

/// Append-only record of primitive operations with cached forward values.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    adj: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes while keeping allocated capacity.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.adj.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `f64` slots held for forward values.
    pub fn value_slots(&self) -> usize {
        self.vals.len()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        &self.vals[n.off..n.off + n.len]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn width(&self, v: Var) -> usize {
        self.nodes[v.0].len
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Adjoint of `v` after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        &self.adj[n.off..n.off + n.len]
    }

    fn push(&mut self, op: Op, values: impl IntoIterator<Item = f64>) -> Var {
        let off = self.vals.len();
        self.vals.extend(values);
        let len = self.vals.len() - off;
        self.nodes.push(Node { op, off, len });
        Var(self.nodes.len() - 1)
    }

    fn push_with(&mut self, op: Op, len: usize, fill: impl FnOnce(&[f64], &mut [f64])) -> Var {
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        let (before, after) = self.vals.split_at_mut(off);
        fill(before, after);
        self.nodes.push(Node { op, off, len });
        Var(self.nodes.len() - 1)
    }

    fn range(&self, v: Var) -> std::ops::Range<usize> {
        let n = &self.nodes[v.0];
        n.off..n.off + n.len
    }

    pub fn leaf(&mut self, values: &[f64]) -> Var {
        self.push(Op::Leaf, values.iter().copied())
    }

    pub fn constant(&mut self, values: &[f64]) -> Var {
        self.push(Op::Const, values.iter().copied())
    }

    fn same_len(&self, a: Var, b: Var) {
        assert_eq!(
            self.width(a),
            self.width(b),
            "elementwise op on widths {} and {}",
            self.width(a),
            self.width(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let (ra, rb) = (self.range(a), self.range(b));
        self.push_with(Op::Add(a, b), ra.len(), |v, out| {
            for ((o, x), y) in out.iter_mut().zip(&v[ra]).zip(&v[rb]) {
                *o = x + y;
            }
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let (ra, rb) = (self.range(a), self.range(b));
        self.push_with(Op::Sub(a, b), ra.len(), |v, out| {
            for ((o, x), y) in out.iter_mut().zip(&v[ra]).zip(&v[rb]) {
                *o = x - y;
            }
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let (ra, rb) = (self.range(a), self.range(b));
        self.push_with(Op::Mul(a, b), ra.len(), |v, out| {
            for ((o, x), y) in out.iter_mut().zip(&v[ra]).zip(&v[rb]) {
                *o = x * y;
            }
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ra = self.range(a);
        self.push_with(Op::Scale(a, c), ra.len(), |v, out| {
            for (o, x) in out.iter_mut().zip(&v[ra]) {
                *o = c * x;
            }
        })
    }

    /// `W·x (+ b)` where `W` (row-major `rows × cols`) and `b` live inside node `p`.
    pub fn affine(
        &mut self,
        p: Var,
        w_off: usize,
        b_off: Option<usize>,
        rows: usize,
        cols: usize,
        x: Var,
    ) -> Var {
        assert_eq!(self.width(x), cols, "affine input width");
        let rp = self.range(p);
        assert!(
            w_off + rows * cols <= rp.len(),
            "affine weights out of range"
        );
        if let Some(b) = b_off {
            assert!(b + rows <= rp.len(), "affine bias out of range");
        }
        let rx = self.range(x);
        self.push_with(
            Op::Affine {
                p,
                w_off,
                b_off,
                rows,
                cols,
                x,
            },
            rows,
            |v, out| {
                let pv = &v[rp];
                let xv = &v[rx];
                for (i, o) in out.iter_mut().enumerate() {
                    let w = &pv[w_off + i * cols..w_off + (i + 1) * cols];
                    *o = dot(w, xv) + b_off.map_or(0.0, |b| pv[b + i]);
                }
            },
        )
    }

    /// Matrix–vector product with the matrix held in node `m`.
    pub fn matvec(&mut self, m: Var, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.width(m), rows * cols, "matvec matrix size");
        assert_eq!(self.width(x), cols, "matvec vector size");
        let (rm, rx) = (self.range(m), self.range(x));
        self.push_with(Op::MatVec { m, x, rows, cols }, rows, |v, out| {
            let mv = &v[rm];
            let xv = &v[rx];
            for (i, o) in out.iter_mut().enumerate() {
                *o = dot(&mv[i * cols..(i + 1) * cols], xv);
            }
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ra = self.range(a);
        self.push_with(Op::Tanh(a), ra.len(), |v, out| {
            for (o, x) in out.iter_mut().zip(&v[ra]) {
                *o = x.tanh();
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ra = self.range(a);
        self.push_with(Op::Relu(a), ra.len(), |v, out| {
            for (o, x) in out.iter_mut().zip(&v[ra]) {
                *o = x.max(0.0);
            }
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ra = self.range(a);
        self.push_with(Op::Exp(a), ra.len(), |v, out| {
            for (o, x) in out.iter_mut().zip(&v[ra]) {
                *o = x.exp();
            }
        })
    }

    /// `(1 − y²) ⊙ t`: pushes tangent `t` through a tanh whose output is `y`.
    pub fn tanh_tangent(&mut self, y: Var, t: Var) -> Var {
        self.same_len(y, t);
        let (ry, rt) = (self.range(y), self.range(t));
        self.push_with(Op::TanhTangent { y, t }, ry.len(), |v, out| {
            for ((o, yv), tv) in out.iter_mut().zip(&v[ry]).zip(&v[rt]) {
                *o = (1.0 - yv * yv) * tv;
            }
        })
    }

    /// `t ⊙ [z > 0]`: pushes tangent `t` through a relu with pre-activation `z`.
    pub fn relu_tangent(&mut self, z: Var, t: Var) -> Var {
        self.same_len(z, t);
        let (rz, rt) = (self.range(z), self.range(t));
        self.push_with(Op::ReluTangent { z, t }, rz.len(), |v, out| {
            for ((o, zv), tv) in out.iter_mut().zip(&v[rz]).zip(&v[rt]) {
                *o = if *zv > 0.0 { *tv } else { 0.0 };
            }
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        self.push(Op::Sum(a), [s])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let d = dot(self.value(a), self.value(b));
        self.push(Op::Dot(a, b), [d])
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ra = self.range(a);
        assert!(start + len <= ra.len(), "slice out of range");
        self.push_with(Op::Slice { a, start }, len, |v, out| {
            out.copy_from_slice(&v[ra.start + start..ra.start + start + len]);
        })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let ranges: Vec<_> = parts.iter().map(|&p| self.range(p)).collect();
        let len = ranges.iter().map(|r| r.len()).sum();
        self.push_with(Op::Concat(parts.to_vec()), len, |v, out| {
            let mut c = 0;
            for r in ranges {
                out[c..c + r.len()].copy_from_slice(&v[r.clone()]);
                c += r.len();
            }
        })
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let ra = self.range(a);
        self.push_with(Op::Softmax(a), ra.len(), |v, out| {
            let x = &v[ra];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, xi) in out.iter_mut().zip(x) {
                *o = (xi - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        })
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ra = self.range(a);
        self.push_with(Op::LogSoftmax(a), ra.len(), |v, out| {
            let x = &v[ra];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + x.iter().map(|xi| (xi - m).exp()).sum::<f64>().ln();
            for (o, xi) in out.iter_mut().zip(x) {
                *o = xi - lse;
            }
        })
    }

    /// Reverse sweep from a scalar node; afterwards [`Tape::grad`] holds
    /// `∂seed/∂node` for every node created before `seed`.
    pub fn backward(&mut self, seed: Var) -> Result<()> {
        self.backward_with(seed, &[1.0])
    }

    /// Reverse sweep seeded with an arbitrary cotangent on `out`
    /// (a vector–Jacobian product).
    pub fn backward_with(&mut self, out: Var, cotangent: &[f64]) -> Result<()> {
        let r = self.range(out);
        if cotangent.len() != r.len() {
            if r.len() != 1 && cotangent.len() == 1 {
                return Err(Error::Contract(format!(
                    "backward seed must be scalar, node `{}` has width {}",
                    self.op_name(out),
                    r.len()
                )));
            }
            return Err(Error::dim("backward cotangent", r.len(), cotangent.len()));
        }
        self.adj.clear();
        self.adj.resize(self.vals.len(), 0.0);
        self.adj[r].copy_from_slice(cotangent);
        for i in (0..=out.0).rev() {
            self.backprop_node(i);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) {
        let Node { off, len, .. } = self.nodes[i];
        let (adj_lo, adj_hi) = self.adj.split_at_mut(off);
        let g = &adj_hi[..len];
        if g.iter().all(|&x| x == 0.0) {
            return;
        }
        let vals = &self.vals;
        let nodes = &self.nodes;
        let rng = |v: &Var| {
            let n = &nodes[v.0];
            n.off..n.off + n.len
        };
        let own = &vals[off..off + len];
        match &nodes[i].op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                for (d, gi) in adj_lo[rng(a)].iter_mut().zip(g) {
                    *d += gi;
                }
                for (d, gi) in adj_lo[rng(b)].iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Sub(a, b) => {
                for (d, gi) in adj_lo[rng(a)].iter_mut().zip(g) {
                    *d += gi;
                }
                for (d, gi) in adj_lo[rng(b)].iter_mut().zip(g) {
                    *d -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (ra, rb) = (rng(a), rng(b));
                for k in 0..len {
                    let (va, vb) = (vals[ra.start + k], vals[rb.start + k]);
                    adj_lo[ra.start + k] += g[k] * vb;
                    adj_lo[rb.start + k] += g[k] * va;
                }
            }
            Op::Scale(a, c) => {
                for (d, gi) in adj_lo[rng(a)].iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
            Op::Affine {
                p,
                w_off,
                b_off,
                rows,
                cols,
                x,
            } => {
                let (rp, rx) = (rng(p), rng(x));
                for r in 0..*rows {
                    let gr = g[r];
                    if gr == 0.0 {
                        continue;
                    }
                    let w0 = rp.start + w_off + r * cols;
                    for c in 0..*cols {
                        adj_lo[w0 + c] += gr * vals[rx.start + c];
                        adj_lo[rx.start + c] += gr * vals[w0 + c];
                    }
                    if let Some(b) = b_off {
                        adj_lo[rp.start + b + r] += gr;
                    }
                }
            }
            Op::MatVec { m, x, rows, cols } => {
                let (rm, rx) = (rng(m), rng(x));
                for r in 0..*rows {
                    let gr = g[r];
                    let m0 = rm.start + r * cols;
                    for c in 0..*cols {
                        adj_lo[m0 + c] += gr * vals[rx.start + c];
                        adj_lo[rx.start + c] += gr * vals[m0 + c];
                    }
                }
            }
            Op::Tanh(a) => {
                for ((d, gi), y) in adj_lo[rng(a)].iter_mut().zip(g).zip(own) {
                    *d += gi * (1.0 - y * y);
                }
            }
            Op::Relu(a) => {
                let ra = rng(a);
                for k in 0..len {
                    if vals[ra.start + k] > 0.0 {
                        adj_lo[ra.start + k] += g[k];
                    }
                }
            }
            Op::Exp(a) => {
                for ((d, gi), y) in adj_lo[rng(a)].iter_mut().zip(g).zip(own) {
                    *d += gi * y;
                }
            }
            Op::TanhTangent { y, t } => {
                let (ry, rt) = (rng(y), rng(t));
                for k in 0..len {
                    let (yv, tv) = (vals[ry.start + k], vals[rt.start + k]);
                    adj_lo[ry.start + k] += -2.0 * yv * tv * g[k];
                    adj_lo[rt.start + k] += (1.0 - yv * yv) * g[k];
                }
            }
            Op::ReluTangent { z, t } => {
                let (rz, rt) = (rng(z), rng(t));
                for k in 0..len {
                    if vals[rz.start + k] > 0.0 {
                        adj_lo[rt.start + k] += g[k];
                    }
                }
            }
            Op::Sum(a) => {
                for d in adj_lo[rng(a)].iter_mut() {
                    *d += g[0];
                }
            }
            Op::Dot(a, b) => {
                let (ra, rb) = (rng(a), rng(b));
                for k in 0..ra.len() {
                    let (va, vb) = (vals[ra.start + k], vals[rb.start + k]);
                    adj_lo[ra.start + k] += g[0] * vb;
                    adj_lo[rb.start + k] += g[0] * va;
                }
            }
            Op::Slice { a, start } => {
                let ra = rng(a);
                for (d, gi) in adj_lo[ra.start + start..ra.start + start + len]
                    .iter_mut()
                    .zip(g)
                {
                    *d += gi;
                }
            }
            Op::Concat(parts) => {
                let mut c = 0;
                for p in parts {
                    let rp = rng(p);
                    let w = rp.len();
                    for (d, gi) in adj_lo[rp].iter_mut().zip(&g[c..c + w]) {
                        *d += gi;
                    }
                    c += w;
                }
            }
            Op::Softmax(a) => {
                let s: f64 = g.iter().zip(own).map(|(gi, y)| gi * y).sum();
                for ((d, gi), y) in adj_lo[rng(a)].iter_mut().zip(g).zip(own) {
                    *d += y * (gi - s);
                }
            }
            Op::LogSoftmax(a) => {
                let gs: f64 = g.iter().sum();
                for ((d, gi), y) in adj_lo[rng(a)].iter_mut().zip(g).zip(own) {
                    *d += gi - y.exp() * gs;
                }
            }
        }
    }
}
