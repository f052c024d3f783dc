//! Eager, vector-valued reverse-mode tape.
//!
//! Each node holds a small vector of `f64` values in a shared arena. Building
//! a node computes its value immediately; [`Tape::backward`] then walks the
//! recorded ops once in reverse, so its cost is linear in tape length.
//! Parameter-touching ops ([`Tape::param`], [`Tape::affine`], [`Tape::gather`],
//! [`Tape::interp_x`]) read weights from the [`ParamStore`] and scatter their
//! gradients straight back into it.
//!
//! Subgradient conventions at kinks: `abs`, `relu`, and `sqrt` use 0 at the
//! non-differentiable point, and `min` routes the gradient to its first
//! argument on ties.

use super::store::{BlockId, ParamStore};
use super::DiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Value location in the arena.
#[derive(Debug, Clone, Copy)]
struct Span {
    off: u32,
    len: u32,
}

impl Span {
    fn range(self) -> std::ops::Range<usize> {
        self.off as usize..(self.off + self.len) as usize
    }
}

/// Slice of the tape's `f64` payload pool (constant vectors, interpolation
/// weights, reflection signs).
#[derive(Debug, Clone, Copy)]
struct PoolF {
    off: u32,
    len: u32,
}

/// Slice of the tape's `u32` payload pool (node lists, table row offsets).
#[derive(Debug, Clone, Copy)]
struct PoolU {
    off: u32,
    len: u32,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Const,
    /// Copy of a parameter block.
    Param { block: BlockId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Relu(NodeId),
    Min(NodeId, NodeId),
    /// `a * c` with a scalar constant.
    Scale(NodeId, f64),
    /// `a + v` with a constant vector (the constant is folded in eagerly).
    AddVec(NodeId),
    /// Scalar node times a constant vector.
    ScalarMulVec(NodeId, PoolF),
    Dot(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat { parts: PoolU },
    /// `W x + b` reading `W` (row-major) and `b` from the store.
    Affine { w: BlockId, b: BlockId, x: NodeId },
    /// Fixed-weight combination of block rows: `out[j] = sum_c w[c] * block[rows[c] + j]`.
    Gather { block: BlockId, rows: PoolU, weights: PoolF },
    /// Like `Gather`, but the weights came from interpolating at node `x`;
    /// `dwdx[c*m + a]` carries their derivatives so gradient also flows to `x`.
    InterpX { block: BlockId, x: NodeId, rows: PoolU, weights: PoolF, dwdx: PoolF },
    /// Sinusoidal positional encoding of `x`, differentiable in `x`.
    FourierX { x: NodeId, num_freq: u32, include_input: bool },
    /// Boundary reflection of `x`; `signs` records the fold orientation taken
    /// per axis during the forward pass.
    Reflect { x: NodeId, signs: PoolF },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param { .. } => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Relu(..) => "relu",
            Op::Min(..) => "min",
            Op::Scale(..) => "scale",
            Op::AddVec(_) => "add_vec",
            Op::ScalarMulVec(..) => "scalar_mul_vec",
            Op::Dot(..) => "dot",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat { .. } => "concat",
            Op::Affine { .. } => "affine",
            Op::Gather { .. } => "gather",
            Op::InterpX { .. } => "interp_x",
            Op::FourierX { .. } => "fourier_x",
            Op::Reflect { .. } => "reflect",
        }
    }
}

/// Expression recorder. Reusable across steps via [`Tape::reset`], which
/// keeps allocations.
#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    spans: Vec<Span>,
    needs: Vec<bool>,
    vals: Vec<f64>,
    grads: Vec<f64>,
    fpool: Vec<f64>,
    upool: Vec<u32>,
    last_visits: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Clears all nodes but keeps buffer capacity.
    pub fn reset(&mut self) {
        self.ops.clear();
        self.spans.clear();
        self.needs.clear();
        self.vals.clear();
        self.grads.clear();
        self.fpool.clear();
        self.upool.clear();
    }

    /// Value of a node.
    pub fn val(&self, id: NodeId) -> &[f64] {
        &self.vals[self.spans[id.idx()].range()]
    }

    /// Value of a single-component node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let s = self.spans[id.idx()];
        assert_eq!(s.len, 1, "node is not scalar");
        self.vals[s.off as usize]
    }

    /// Gradient of the last backward pass with respect to a node.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[self.spans[id.idx()].range()]
    }

    /// Nodes visited by the most recent backward pass.
    pub fn last_backward_visits(&self) -> usize {
        self.last_visits
    }

    fn push(&mut self, op: Op, needs: bool, len: usize) -> (NodeId, usize) {
        let off = self.vals.len();
        assert!(off + len <= u32::MAX as usize, "tape arena overflow");
        self.vals.resize(off + len, 0.0);
        self.ops.push(op);
        self.spans.push(Span { off: off as u32, len: len as u32 });
        self.needs.push(needs);
        ((NodeId((self.ops.len() - 1) as u32)), off)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.needs[id.idx()]
    }

    fn len_of(&self, id: NodeId) -> usize {
        self.spans[id.idx()].len as usize
    }

    fn pool_f(&mut self, data: &[f64]) -> PoolF {
        let off = self.fpool.len() as u32;
        self.fpool.extend_from_slice(data);
        PoolF { off, len: data.len() as u32 }
    }

    fn pool_u(&mut self, data: &[u32]) -> PoolU {
        let off = self.upool.len() as u32;
        self.upool.extend_from_slice(data);
        PoolU { off, len: data.len() as u32 }
    }

    // ---- leaf constructors ----

    pub fn const_vec(&mut self, values: &[f64]) -> NodeId {
        let (id, off) = self.push(Op::Const, false, values.len());
        self.vals[off..off + values.len()].copy_from_slice(values);
        id
    }

    pub fn const_scalar(&mut self, v: f64) -> NodeId {
        self.const_vec(&[v])
    }

    /// Loads a parameter block as a node (gradient flows back to the store).
    pub fn param(&mut self, store: &ParamStore, block: BlockId) -> NodeId {
        let n = store.block_len(block);
        let (id, off) = self.push(Op::Param { block }, true, n);
        self.vals[off..off + n].copy_from_slice(store.block(block));
        id
    }

    // ---- elementwise and reductions ----

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        make: fn(NodeId, NodeId) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> NodeId {
        let (sa, sb) = (self.spans[a.idx()], self.spans[b.idx()]);
        assert_eq!(sa.len, sb.len, "elementwise length mismatch");
        let needs = self.needs(a) || self.needs(b);
        let (id, off) = self.push(make(a, b), needs, sa.len as usize);
        for i in 0..sa.len as usize {
            self.vals[off + i] = f(self.vals[sa.off as usize + i], self.vals[sb.off as usize + i]);
        }
        id
    }

    fn unary_elementwise(
        &mut self,
        a: NodeId,
        make: fn(NodeId) -> Op,
        f: fn(f64) -> f64,
    ) -> NodeId {
        let sa = self.spans[a.idx()];
        let needs = self.needs(a);
        let (id, off) = self.push(make(a), needs, sa.len as usize);
        for i in 0..sa.len as usize {
            self.vals[off + i] = f(self.vals[sa.off as usize + i]);
        }
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, Op::Div, |x, y| x / y)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, Op::Min, f64::min)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary_elementwise(a, Op::Neg, |x| -x)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary_elementwise(a, Op::Abs, f64::abs)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary_elementwise(a, Op::Square, |x| x * x)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary_elementwise(a, Op::Sqrt, f64::sqrt)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary_elementwise(a, Op::Exp, f64::exp)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary_elementwise(a, Op::Sin, f64::sin)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary_elementwise(a, Op::Cos, f64::cos)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary_elementwise(a, Op::Relu, |x| x.max(0.0))
    }

    /// `a * c` with a scalar constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let sa = self.spans[a.idx()];
        let needs = self.needs(a);
        let (id, off) = self.push(Op::Scale(a, c), needs, sa.len as usize);
        for i in 0..sa.len as usize {
            self.vals[off + i] = self.vals[sa.off as usize + i] * c;
        }
        id
    }

    /// `a + v` with a constant vector `v`.
    pub fn add_vec(&mut self, a: NodeId, v: &[f64]) -> NodeId {
        assert_eq!(self.len_of(a), v.len(), "add_vec length mismatch");
        let sa = self.spans[a.idx()];
        let needs = self.needs(a);
        let (id, off) = self.push(Op::AddVec(a), needs, v.len());
        for i in 0..v.len() {
            self.vals[off + i] = self.vals[sa.off as usize + i] + v[i];
        }
        id
    }

    /// Scalar node `s` times a constant vector `v`.
    pub fn scalar_mul_vec(&mut self, s: NodeId, v: &[f64]) -> NodeId {
        assert_eq!(self.len_of(s), 1, "scalar_mul_vec needs a scalar node");
        let pool = self.pool_f(v);
        let sv = self.vals[self.spans[s.idx()].off as usize];
        let needs = self.needs(s);
        let (id, off) = self.push(Op::ScalarMulVec(s, pool), needs, v.len());
        for i in 0..v.len() {
            self.vals[off + i] = sv * v[i];
        }
        id
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.spans[a.idx()], self.spans[b.idx()]);
        assert_eq!(sa.len, sb.len, "dot length mismatch");
        let needs = self.needs(a) || self.needs(b);
        let (id, off) = self.push(Op::Dot(a, b), needs, 1);
        let mut acc = 0.0;
        for i in 0..sa.len as usize {
            acc += self.vals[sa.off as usize + i] * self.vals[sb.off as usize + i];
        }
        self.vals[off] = acc;
        id
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let sa = self.spans[a.idx()];
        let needs = self.needs(a);
        let (id, off) = self.push(Op::Sum(a), needs, 1);
        self.vals[off] = self.vals[sa.range()].iter().sum();
        id
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let sa = self.spans[a.idx()];
        assert!(sa.len > 0, "mean of an empty node");
        let needs = self.needs(a);
        let (id, off) = self.push(Op::Mean(a), needs, 1);
        self.vals[off] = self.vals[sa.range()].iter().sum::<f64>() / sa.len as f64;
        id
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of no parts");
        let total: usize = parts.iter().map(|&p| self.len_of(p)).sum();
        let needs = parts.iter().any(|&p| self.needs(p));
        let ids: Vec<u32> = parts.iter().map(|p| p.0).collect();
        let pool = self.pool_u(&ids);
        let (id, mut off) = self.push(Op::Concat { parts: pool }, needs, total);
        for &p in parts {
            let sp = self.spans[p.idx()];
            let (lo, hi) = (sp.off as usize, (sp.off + sp.len) as usize);
            self.vals.copy_within(lo..hi, off);
            off += sp.len as usize;
        }
        id
    }

    // ---- parameter-touching ops ----

    /// `W x + b` with `W` row-major of shape `(b.len, x.len)`.
    pub fn affine(&mut self, store: &ParamStore, w: BlockId, b: BlockId, x: NodeId) -> NodeId {
        let rows = store.block_len(b);
        let cols = self.len_of(x);
        assert_eq!(
            store.block_len(w),
            rows * cols,
            "affine: weight block size must be rows*cols"
        );
        let sx = self.spans[x.idx()];
        let (id, off) = self.push(Op::Affine { w, b, x }, true, rows);
        let wv = store.block(w);
        let bv = store.block(b);
        for r in 0..rows {
            let mut acc = bv[r];
            let wrow = &wv[r * cols..(r + 1) * cols];
            for c in 0..cols {
                acc += wrow[c] * self.vals[sx.off as usize + c];
            }
            self.vals[off + r] = acc;
        }
        id
    }

    /// Fixed-weight gather: `out[j] = sum_c weights[c] * block[rows[c] + j]`
    /// for `j < out_len`. `rows` are element offsets into the block.
    pub fn gather(
        &mut self,
        store: &ParamStore,
        block: BlockId,
        rows: &[u32],
        weights: &[f64],
        out_len: usize,
    ) -> NodeId {
        assert_eq!(rows.len(), weights.len(), "gather: rows/weights mismatch");
        let bv = store.block(block);
        for &r in rows {
            assert!(r as usize + out_len <= bv.len(), "gather row out of range");
        }
        let rp = self.pool_u(rows);
        let wp = self.pool_f(weights);
        let (id, off) = self.push(Op::Gather { block, rows: rp, weights: wp }, true, out_len);
        let bv = store.block(block);
        for (c, &r) in rows.iter().enumerate() {
            let w = weights[c];
            for j in 0..out_len {
                self.vals[off + j] += w * bv[r as usize + j];
            }
        }
        id
    }

    /// Interpolated gather whose weights depend on coordinate node `x`:
    /// `dwdx` is row-major `(corners, x.len)` with the weight derivatives, so
    /// backward also produces a gradient for `x`.
    pub fn interp_x(
        &mut self,
        store: &ParamStore,
        block: BlockId,
        x: NodeId,
        rows: &[u32],
        weights: &[f64],
        dwdx: &[f64],
        out_len: usize,
    ) -> NodeId {
        let m = self.len_of(x);
        assert_eq!(rows.len(), weights.len(), "interp_x: rows/weights mismatch");
        assert_eq!(dwdx.len(), rows.len() * m, "interp_x: dwdx shape mismatch");
        let bv = store.block(block);
        for &r in rows {
            assert!(r as usize + out_len <= bv.len(), "interp_x row out of range");
        }
        let rp = self.pool_u(rows);
        let wp = self.pool_f(weights);
        let dp = self.pool_f(dwdx);
        let (id, off) = self.push(
            Op::InterpX { block, x, rows: rp, weights: wp, dwdx: dp },
            true,
            out_len,
        );
        let bv = store.block(block);
        for (c, &r) in rows.iter().enumerate() {
            let w = weights[c];
            for j in 0..out_len {
                self.vals[off + j] += w * bv[r as usize + j];
            }
        }
        id
    }

    /// `[x?, sin(2^0 pi x_j), cos(2^0 pi x_j), ..., sin(2^(L-1) pi x_j), cos(...)]`
    /// per input dimension `j`, with the raw input prepended when requested.
    pub fn fourier_x(&mut self, x: NodeId, num_freq: usize, include_input: bool) -> NodeId {
        let m = self.len_of(x);
        let out_len = m * 2 * num_freq + if include_input { m } else { 0 };
        let sx = self.spans[x.idx()];
        let needs = self.needs(x);
        let (id, off) = self.push(
            Op::FourierX { x, num_freq: num_freq as u32, include_input },
            needs,
            out_len,
        );
        let mut o = off;
        if include_input {
            for j in 0..m {
                self.vals[o] = self.vals[sx.off as usize + j];
                o += 1;
            }
        }
        for j in 0..m {
            let xj = self.vals[sx.off as usize + j];
            let mut freq = std::f64::consts::PI;
            for _ in 0..num_freq {
                let (s, c) = (freq * xj).sin_cos();
                self.vals[o] = s;
                self.vals[o + 1] = c;
                o += 2;
                freq *= 2.0;
            }
        }
        id
    }

    /// Reflects each component of `x` into `[lo, hi]` by folding: out-of-range
    /// values map as if the domain tiled space with mirrored copies. Interior
    /// components pass through bitwise unchanged.
    pub fn reflect(&mut self, x: NodeId, bounds: &[(f64, f64)]) -> NodeId {
        let m = self.len_of(x);
        assert_eq!(m, bounds.len(), "reflect: bounds dimension mismatch");
        let sx = self.spans[x.idx()];
        let mut out = Vec::with_capacity(m);
        let mut signs = Vec::with_capacity(m);
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            let v = self.vals[sx.off as usize + j];
            let (r, s) = reflect_axis(v, lo, hi);
            out.push(r);
            signs.push(s);
        }
        let sp = self.pool_f(&signs);
        let needs = self.needs(x);
        let (id, off) = self.push(Op::Reflect { x, signs: sp }, needs, m);
        self.vals[off..off + m].copy_from_slice(&out);
        id
    }

    // ---- backward ----

    /// Runs reverse-mode accumulation from scalar node `loss`, adding
    /// parameter gradients into `store`. Returns the loss value. Fails if the
    /// loss is not scalar or non-finite; the error names the earliest node
    /// whose value went non-finite.
    pub fn backward(&mut self, store: &mut ParamStore, loss: NodeId) -> Result<f64, DiffError> {
        let ls = self.spans[loss.idx()];
        if ls.len != 1 {
            return Err(DiffError::NonScalarLoss { len: ls.len as usize });
        }
        let loss_val = self.vals[ls.off as usize];
        if !loss_val.is_finite() {
            return Err(self.first_non_finite(loss));
        }

        self.grads.clear();
        self.grads.resize(self.vals.len(), 0.0);
        self.grads[ls.off as usize] = 1.0;

        let ranges: Vec<std::ops::Range<usize>> = store
            .block_ids()
            .map(|(id, _)| store.block_range(id))
            .collect();
        let (pvals, pgrads) = store.split_mut();

        // Disjoint field borrows: values are read, gradients are written.
        let vals = &self.vals;
        let grads = &mut self.grads;
        let spans = &self.spans;
        let fpool = &self.fpool;
        let upool = &self.upool;
        let at = |n: NodeId| spans[n.idx()].off as usize;

        let mut visits = 0usize;
        for i in (0..=loss.idx()).rev() {
            visits += 1;
            if !self.needs[i] {
                continue;
            }
            let out = spans[i];
            let (o0, on) = (out.off as usize, out.len as usize);
            match self.ops[i] {
                Op::Const => {}
                Op::Param { block } => {
                    let r = ranges[block.0 as usize].clone();
                    for j in 0..on {
                        pgrads[r.start + j] += grads[o0 + j];
                    }
                }
                Op::Add(a, b) => {
                    let (a0, b0) = (at(a), at(b));
                    for j in 0..on {
                        let g = grads[o0 + j];
                        grads[a0 + j] += g;
                        grads[b0 + j] += g;
                    }
                }
                Op::Sub(a, b) => {
                    let (a0, b0) = (at(a), at(b));
                    for j in 0..on {
                        let g = grads[o0 + j];
                        grads[a0 + j] += g;
                        grads[b0 + j] -= g;
                    }
                }
                Op::Mul(a, b) => {
                    let (a0, b0) = (at(a), at(b));
                    for j in 0..on {
                        let g = grads[o0 + j];
                        grads[a0 + j] += g * vals[b0 + j];
                        grads[b0 + j] += g * vals[a0 + j];
                    }
                }
                Op::Div(a, b) => {
                    let (a0, b0) = (at(a), at(b));
                    for j in 0..on {
                        let g = grads[o0 + j];
                        let bv = vals[b0 + j];
                        grads[a0 + j] += g / bv;
                        grads[b0 + j] -= g * vals[o0 + j] / bv;
                    }
                }
                Op::Neg(a) => {
                    let a0 = at(a);
                    for j in 0..on {
                        grads[a0 + j] -= grads[o0 + j];
                    }
                }
                Op::Abs(a) => {
                    let a0 = at(a);
                    for j in 0..on {
                        let v = vals[a0 + j];
                        let s = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        grads[a0 + j] += grads[o0 + j] * s;
                    }
                }
                Op::Square(a) => {
                    let a0 = at(a);
                    for j in 0..on {
                        grads[a0 + j] += grads[o0 + j] * 2.0 * vals[a0 + j];
                    }
                }
                Op::Sqrt(a) => {
                    let a0 = at(a);
                    for j in 0..on {
                        let o = vals[o0 + j];
                        if o > 0.0 {
                            grads[a0 + j] += grads[o0 + j] * 0.5 / o;
                        }
                    }
                }
                Op::Exp(a) => {
                    let a0 = at(a);
                    for j in 0..on {
                        grads[a0 + j] += grads[o0 + j] * vals[o0 + j];
                    }
                }
                Op::Sin(a) => {
                    let a0 = at(a);
                    for j in 0..on {
                        grads[a0 + j] += grads[o0 + j] * vals[a0 + j].cos();
                    }
                }
                Op::Cos(a) => {
                    let a0 = at(a);
                    for j in 0..on {
                        grads[a0 + j] -= grads[o0 + j] * vals[a0 + j].sin();
                    }
                }
                Op::Relu(a) => {
                    let a0 = at(a);
                    for j in 0..on {
                        if vals[a0 + j] > 0.0 {
                            grads[a0 + j] += grads[o0 + j];
                        }
                    }
                }
                Op::Min(a, b) => {
                    let (a0, b0) = (at(a), at(b));
                    for j in 0..on {
                        if vals[a0 + j] <= vals[b0 + j] {
                            grads[a0 + j] += grads[o0 + j];
                        } else {
                            grads[b0 + j] += grads[o0 + j];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let a0 = at(a);
                    for j in 0..on {
                        grads[a0 + j] += grads[o0 + j] * c;
                    }
                }
                Op::AddVec(a) => {
                    let a0 = at(a);
                    for j in 0..on {
                        grads[a0 + j] += grads[o0 + j];
                    }
                }
                Op::ScalarMulVec(s, v) => {
                    let s0 = at(s);
                    let vv = &fpool[v.off as usize..(v.off + v.len) as usize];
                    let mut acc = 0.0;
                    for j in 0..on {
                        acc += grads[o0 + j] * vv[j];
                    }
                    grads[s0] += acc;
                }
                Op::Dot(a, b) => {
                    let (a0, b0) = (at(a), at(b));
                    let g = grads[o0];
                    let n = spans[a.idx()].len as usize;
                    for j in 0..n {
                        grads[a0 + j] += g * vals[b0 + j];
                        grads[b0 + j] += g * vals[a0 + j];
                    }
                }
                Op::Sum(a) => {
                    let a0 = at(a);
                    let g = grads[o0];
                    let n = spans[a.idx()].len as usize;
                    for j in 0..n {
                        grads[a0 + j] += g;
                    }
                }
                Op::Mean(a) => {
                    let a0 = at(a);
                    let n = spans[a.idx()].len as usize;
                    let g = grads[o0] / n as f64;
                    for j in 0..n {
                        grads[a0 + j] += g;
                    }
                }
                Op::Concat { parts } => {
                    let ids = &upool[parts.off as usize..(parts.off + parts.len) as usize];
                    let mut cur = o0;
                    for &pid in ids {
                        let sp = spans[pid as usize];
                        let p0 = sp.off as usize;
                        for j in 0..sp.len as usize {
                            grads[p0 + j] += grads[cur + j];
                        }
                        cur += sp.len as usize;
                    }
                }
                Op::Affine { w, b, x } => {
                    let wr = ranges[w.0 as usize].clone();
                    let br = ranges[b.0 as usize].clone();
                    let x0 = at(x);
                    let cols = spans[x.idx()].len as usize;
                    let wv = &pvals[wr.clone()];
                    let x_needs = self.needs[x.idx()];
                    for r in 0..on {
                        let g = grads[o0 + r];
                        if g == 0.0 {
                            continue;
                        }
                        pgrads[br.start + r] += g;
                        let wrow = &wv[r * cols..(r + 1) * cols];
                        let gw = &mut pgrads[wr.start + r * cols..wr.start + (r + 1) * cols];
                        if x_needs {
                            for c in 0..cols {
                                gw[c] += g * vals[x0 + c];
                                grads[x0 + c] += g * wrow[c];
                            }
                        } else {
                            for c in 0..cols {
                                gw[c] += g * vals[x0 + c];
                            }
                        }
                    }
                }
                Op::Gather { block, rows, weights } => {
                    let br = ranges[block.0 as usize].clone();
                    let rs = &upool[rows.off as usize..(rows.off + rows.len) as usize];
                    let ws = &fpool[weights.off as usize..(weights.off + weights.len) as usize];
                    for (c, &row) in rs.iter().enumerate() {
                        let wc = ws[c];
                        let base = br.start + row as usize;
                        for j in 0..on {
                            pgrads[base + j] += wc * grads[o0 + j];
                        }
                    }
                }
                Op::InterpX { block, x, rows, weights, dwdx } => {
                    let br = ranges[block.0 as usize].clone();
                    let rs = &upool[rows.off as usize..(rows.off + rows.len) as usize];
                    let ws = &fpool[weights.off as usize..(weights.off + weights.len) as usize];
                    let dw = &fpool[dwdx.off as usize..(dwdx.off + dwdx.len) as usize];
                    let x0 = at(x);
                    let m = spans[x.idx()].len as usize;
                    let x_needs = self.needs[x.idx()];
                    for (c, &row) in rs.iter().enumerate() {
                        let wc = ws[c];
                        let base = br.start + row as usize;
                        let mut s_c = 0.0;
                        for j in 0..on {
                            let g = grads[o0 + j];
                            pgrads[base + j] += wc * g;
                            s_c += pvals[base + j] * g;
                        }
                        if x_needs {
                            for a in 0..m {
                                grads[x0 + a] += dw[c * m + a] * s_c;
                            }
                        }
                    }
                }
                Op::FourierX { x, num_freq, include_input } => {
                    let x0 = at(x);
                    let m = spans[x.idx()].len as usize;
                    let mut o = o0;
                    if include_input {
                        for j in 0..m {
                            grads[x0 + j] += grads[o + j];
                        }
                        o += m;
                    }
                    for j in 0..m {
                        let mut freq = std::f64::consts::PI;
                        for _ in 0..num_freq {
                            let (sv, cv) = (vals[o], vals[o + 1]);
                            grads[x0 + j] += freq * (grads[o] * cv - grads[o + 1] * sv);
                            o += 2;
                            freq *= 2.0;
                        }
                    }
                }
                Op::Reflect { x, signs } => {
                    let x0 = at(x);
                    let ss = &fpool[signs.off as usize..(signs.off + signs.len) as usize];
                    for j in 0..on {
                        grads[x0 + j] += grads[o0 + j] * ss[j];
                    }
                }
            }
        }
        self.last_visits = visits;
        Ok(loss_val)
    }

    fn first_non_finite(&self, upto: NodeId) -> DiffError {
        for i in 0..=upto.idx() {
            if self.vals[self.spans[i].range()].iter().any(|v| !v.is_finite()) {
                return DiffError::NonFinite { node: i as u32, op: self.ops[i].name() };
            }
        }
        DiffError::NonFinite { node: upto.0, op: self.ops[upto.idx()].name() }
    }
}

/// Folds `v` into `[lo, hi]`, returning the reflected value and the local
/// derivative sign of the fold. Interior values are returned unchanged.
pub(crate) fn reflect_axis(v: f64, lo: f64, hi: f64) -> (f64, f64) {
    if v >= lo && v <= hi {
        return (v, 1.0);
    }
    let w = hi - lo;
    let u = (v - lo) / w;
    let r = u.rem_euclid(2.0);
    // Clamp the folded value: `lo + r*w` can land one ulp past `hi` when
    // `hi - lo` is not exactly representable.
    if r <= 1.0 {
        ((lo + r * w).clamp(lo, hi), 1.0)
    } else {
        ((lo + (2.0 - r) * w).clamp(lo, hi), -1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;

    fn store_with(name: &str, vals: &[f64]) -> (ParamStore, BlockId) {
        let mut store = ParamStore::new();
        let id = store.register(name, vals.to_vec());
        (store, id)
    }

    #[test]
    fn forward_values_compose() {
        let mut t = Tape::new();
        let a = t.const_vec(&[1.0, 2.0, 3.0]);
        let b = t.const_vec(&[4.0, 0.5, -1.0]);
        let prod = t.mul(a, b);
        assert_eq!(t.val(prod), &[4.0, 1.0, -3.0]);
        let s = t.sum(prod);
        assert_eq!(t.scalar(s), 2.0);
        let m = t.mean(prod);
        assert!((t.scalar(m) - 2.0 / 3.0).abs() < 1e-15);
        let d = t.dot(a, b);
        assert_eq!(t.scalar(d), 2.0);
        let cat = t.concat(&[a, b]);
        assert_eq!(t.val(cat), &[1.0, 2.0, 3.0, 4.0, 0.5, -1.0]);
    }

    #[test]
    fn affine_matches_direct_matvec() {
        let mut store = ParamStore::new();
        let w = store.register("w", vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]); // 2x3
        let b = store.register("b", vec![0.5, -0.5]);
        let mut t = Tape::new();
        let x = t.const_vec(&[1.0, -1.0, 2.0]);
        let y = t.affine(&store, w, b, x);
        assert_eq!(t.val(y), &[1.0 - 2.0 + 6.0 + 0.5, 4.0 - 5.0 + 12.0 - 0.5]);
    }

    #[test]
    fn fourier_node_matches_reference_layout() {
        let mut t = Tape::new();
        let x = t.const_vec(&[0.5]);
        let enc = t.fourier_x(x, 2, false);
        let got = t.val(enc);
        let want = [1.0, 0.0, 0.0, -1.0]; // sin/cos at pi/2, then at pi
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12, "got {got:?}");
        }
        let enc2 = t.fourier_x(x, 2, true);
        assert_eq!(t.val(enc2)[0], 0.5);
        assert_eq!(t.val(enc2).len(), 5);
    }

    #[test]
    fn reflect_folds_and_passes_interior_through() {
        let mut t = Tape::new();
        let x = t.const_vec(&[0.5, -0.25, 1.25, 2.5]);
        let r = t.reflect(x, &[(0.0, 1.0); 4]);
        let got = t.val(r);
        assert_eq!(got[0], 0.5);
        assert_eq!(got[1], 0.25);
        assert_eq!(got[2], 0.75);
        assert_eq!(got[3], 0.5);
    }

    #[test]
    fn backward_is_single_pass_over_nodes() {
        let mut store = ParamStore::new();
        let p = store.register("p", vec![0.3, -0.2, 0.9]);
        let mut t = Tape::new();
        let x = t.param(&store, p);
        let mut y = x;
        for _ in 0..10 {
            let s = t.sin(y);
            let c = t.cos(y);
            y = t.mul(s, c);
        }
        let loss = t.sum(y);
        t.backward(&mut store, loss).unwrap();
        assert_eq!(t.last_backward_visits(), t.len());
    }

    #[test]
    fn non_finite_forward_is_diagnosed_at_first_node() {
        let (mut store, p) = store_with("p", &[2.0, 0.0]);
        let mut t = Tape::new();
        let x = t.param(&store, p);
        let num = t.const_vec(&[1.0, 1.0]);
        let q = t.div(num, x); // second component is inf
        let l = t.sum(q);
        let err = t.backward(&mut store, l).unwrap_err();
        match err {
            DiffError::NonFinite { node, op } => {
                assert_eq!(node, q.0);
                assert_eq!(op, "div");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let (mut store, p) = store_with("p", &[1.0, 2.0]);
        let mut t = Tape::new();
        let x = t.param(&store, p);
        let err = t.backward(&mut store, x).unwrap_err();
        assert!(matches!(err, DiffError::NonScalarLoss { len: 2 }));
    }

    /// Every primitive's analytic gradient against central finite differences
    /// on randomized inputs.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, crate::rng::Purpose::Init, 0);

        type Builder = fn(&mut Tape, &ParamStore, BlockId, BlockId) -> NodeId;
        let cases: &[(&str, Builder)] = &[
            ("add", |t, s, p, q| {
                let (a, b) = (t.param(s, p), t.param(s, q));
                t.add(a, b)
            }),
            ("sub", |t, s, p, q| {
                let (a, b) = (t.param(s, p), t.param(s, q));
                t.sub(a, b)
            }),
            ("mul", |t, s, p, q| {
                let (a, b) = (t.param(s, p), t.param(s, q));
                t.mul(a, b)
            }),
            ("div", |t, s, p, q| {
                let (a, b) = (t.param(s, p), t.param(s, q));
                t.div(a, b)
            }),
            ("min", |t, s, p, q| {
                let (a, b) = (t.param(s, p), t.param(s, q));
                t.min(a, b)
            }),
            ("neg", |t, s, p, _| {
                let a = t.param(s, p);
                t.neg(a)
            }),
            ("abs", |t, s, p, _| {
                let a = t.param(s, p);
                t.abs(a)
            }),
            ("square", |t, s, p, _| {
                let a = t.param(s, p);
                t.square(a)
            }),
            ("sqrt", |t, s, p, _| {
                let a = t.param(s, p);
                let sq = t.square(a); // keep the argument positive
                t.sqrt(sq)
            }),
            ("exp", |t, s, p, _| {
                let a = t.param(s, p);
                t.exp(a)
            }),
            ("sin", |t, s, p, _| {
                let a = t.param(s, p);
                t.sin(a)
            }),
            ("cos", |t, s, p, _| {
                let a = t.param(s, p);
                t.cos(a)
            }),
            ("relu", |t, s, p, _| {
                let a = t.param(s, p);
                t.relu(a)
            }),
            ("scale", |t, s, p, _| {
                let a = t.param(s, p);
                t.scale(a, -1.7)
            }),
            ("add_vec", |t, s, p, _| {
                let a = t.param(s, p);
                t.add_vec(a, &[0.4, -0.2, 0.1, 0.9, -1.3])
            }),
            ("dot", |t, s, p, q| {
                let (a, b) = (t.param(s, p), t.param(s, q));
                t.dot(a, b)
            }),
            ("concat+reflect", |t, s, p, q| {
                let (a, b) = (t.param(s, p), t.param(s, q));
                let cat = t.concat(&[a, b]);
                t.reflect(cat, &[(0.0, 1.0); 10])
            }),
            ("fourier", |t, s, p, _| {
                let a = t.param(s, p);
                t.fourier_x(a, 3, true)
            }),
            ("scalar_mul_vec", |t, s, p, _| {
                let a = t.param(s, p);
                let sc = t.mean(a);
                t.scalar_mul_vec(sc, &[1.0, -2.0, 0.5])
            }),
        ];

        for (name, build) in cases {
            for _ in 0..5 {
                let mut store = ParamStore::new();
                let va: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
                let vb: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
                let p = store.register("p", va);
                let q = store.register("q", vb);
                let report = grad_check(&mut store, 1e-6, |t, s| {
                    let out = build(t, s, p, q);
                    // Weighted sum makes per-component gradients distinct.
                    let n = t.val(out).len();
                    let w: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * i as f64).collect();
                    let wn = t.const_vec(&w);
                    t.dot(out, wn)
                });
                assert!(
                    report.max_rel_err < 1e-4,
                    "{name}: rel err {} at {:?}",
                    report.max_rel_err,
                    report.worst
                );
            }
        }
    }

    /// Gather and interp gradients against finite differences, including the
    /// coordinate pathway of `interp_x`.
    #[test]
    fn table_op_gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::stream(12, crate::rng::Purpose::Init, 0);
        for _ in 0..5 {
            let mut store = ParamStore::new();
            let table: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let coord: Vec<f64> = (0..2).map(|_| rng.random_range(0.2..0.8)).collect();
            let tb = store.register("table", table);
            let xb = store.register("x", coord);
            let report = grad_check(&mut store, 1e-6, |t, s| {
                let x = t.param(s, xb);
                let xv = t.val(x).to_vec();
                // Bilinear weights over a 2x2 patch of 2-wide rows.
                let (u, v) = (xv[0], xv[1]);
                let rows = [0u32, 2, 8, 10];
                let w = [
                    (1.0 - u) * (1.0 - v),
                    u * (1.0 - v),
                    (1.0 - u) * v,
                    u * v,
                ];
                let dwdx = [
                    -(1.0 - v), -(1.0 - u),
                    1.0 - v, -u,
                    -v, 1.0 - u,
                    v, u,
                ];
                let g = t.interp_x(s, tb, x, &rows, &w, &dwdx, 2);
                let fixed = t.gather(s, tb, &[4, 6], &[0.3, 0.7], 2);
                let both = t.add(g, fixed);
                let ww = t.const_vec(&[1.0, -0.5]);
                t.dot(both, ww)
            });
            assert!(
                report.max_rel_err < 1e-4,
                "rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }
}
