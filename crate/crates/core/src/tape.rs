//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive operation in execution order. Each
//! operation returns a [`Var`] handle naming its output. [`Tape::backward`]
//! replays the records in strict reverse order and returns one gradient per
//! recorded value; leaves that did not influence the loss get zero.
//!
//! Broadcasting is limited to scalar↔tensor. Every operation checks its output
//! for NaN/Inf and fails with [`Error::NonFinite`] instead of propagating it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Elementwise primitives, for callers that want to dispatch by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
}

/// A fixed sparse linear map `out[o] += src[i]` over flattened tensors.
///
/// Used to route lateral values between lattice cells; its adjoint is the
/// matching scatter-add.
#[derive(Clone, Debug, PartialEq)]
pub struct GatherMap {
    in_len: usize,
    out_shape: Vec<usize>,
    pairs: Vec<(u32, u32)>,
}

impl GatherMap {
    pub fn new(in_len: usize, out_shape: Vec<usize>, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let out_len: usize = out_shape.iter().product();
        let mut packed = Vec::with_capacity(pairs.len());
        for (o, i) in pairs {
            if o >= out_len || i >= in_len {
                return Err(Error::shape(
                    "GatherMap::new",
                    format!("pair ({o}, {i}) outside output {out_len} / input {in_len}"),
                ));
            }
            packed.push((o as u32, i as u32));
        }
        Ok(Self {
            in_len,
            out_shape,
            pairs: packed,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn apply(&self, src: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_shape.iter().product()];
        for &(o, i) in &self.pairs {
            out[o as usize] += src[i as usize];
        }
        out
    }

    fn adjoint_into(&self, grad_out: &[f64], grad_src: &mut [f64]) {
        for &(o, i) in &self.pairs {
            grad_src[i as usize] += grad_out[o as usize];
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    ConcatCols(Vec<usize>),
    SliceCols { src: usize, start: usize },
    Gather { src: usize, map: Arc<GatherMap> },
    Sum(usize),
    Mse(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Single-threaded; independent tapes may live on different threads.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    faulty_sigmoid: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Logistic function in the branch form that never evaluates `exp` of a large positive number.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            faulty_sigmoid: false,
        }
    }

    /// Makes the sigmoid backward rule drop its `(1 - s)` factor.
    ///
    /// Only exists so gradient checks can be shown to catch a broken backward pass.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self) {
        self.faulty_sigmoid = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: [{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(ia, ib), &[ia, ib])
    }

    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            Elementwise::Sigmoid | Elementwise::Tanh => 1,
        };
        if args.len() != arity {
            return Err(Error::shape(
                "elementwise",
                format!("{op:?} takes {arity} argument(s), got {}", args.len()),
            ));
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Sub => self.sub(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Sigmoid => self.sigmoid(args[0]),
            Elementwise::Tanh => self.tanh(args[0]),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let value = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        } else if bv.is_scalar() {
            let y = bv.data()[0];
            Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|&x| f(x, y)).collect())
        } else if av.is_scalar() {
            let x = av.data()[0];
            Tensor::from_parts(bv.shape().to_vec(), bv.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::shape(
                name,
                format!("incompatible shapes {:?} and {:?}", av.shape(), bv.shape()),
            ));
        };
        self.push(name, value, make(ia, ib), &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Multiplies by a fixed real factor.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|x| x * factor).map_err(|_| Error::NonFinite { op: "scale" })?;
        self.push("scale", value, Op::Scale(ia, factor), &[ia])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(sigmoid).map_err(|_| Error::NonFinite { op: "sigmoid" })?;
        self.push("sigmoid", value, Op::Sigmoid(ia), &[ia])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(f64::tanh).map_err(|_| Error::NonFinite { op: "tanh" })?;
        self.push("tanh", value, Op::Tanh(ia), &[ia])
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let mut idx = Vec::with_capacity(parts.len());
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let i = self.check(p)?;
            let (r, c) = self.nodes[i].value.dims2("concat_cols")?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            idx.push(i);
            widths.push(c);
        }
        let rows = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&i, &w) in idx.iter().zip(&widths) {
            let src = self.nodes[i].value.data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::from_parts(vec![rows, total], out);
        let inputs = idx.clone();
        self.push("concat_cols", value, Op::ConcatCols(idx), &inputs)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (rows, cols) = self.nodes[ia].value.dims2("slice_cols")?;
        if start > end || end > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{end} outside {cols} columns"),
            ));
        }
        let w = end - start;
        let src = self.nodes[ia].value.data();
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let value = Tensor::from_parts(vec![rows, w], out);
        self.push("slice_cols", value, Op::SliceCols { src: ia, start }, &[ia])
    }

    /// Applies a [`GatherMap`] to the flattened value of `src`.
    pub fn gather(&mut self, src: Var, map: &Arc<GatherMap>) -> Result<Var> {
        let is = self.check(src)?;
        let sv = &self.nodes[is].value;
        if sv.numel() != map.in_len() {
            return Err(Error::shape(
                "gather",
                format!("map expects {} inputs, tensor has {}", map.in_len(), sv.numel()),
            ));
        }
        let value = Tensor::from_parts(map.out_shape().to_vec(), map.apply(sv.data()));
        self.push(
            "gather",
            value,
            Op::Gather {
                src: is,
                map: Arc::clone(map),
            },
            &[is],
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(ia), &[ia])
    }

    /// Mean squared difference between two same-shape tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ip, it) = (self.check(pred)?, self.check(target)?);
        let (pv, tv) = (&self.nodes[ip].value, &self.nodes[it].value);
        if pv.shape() != tv.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", pv.shape(), tv.shape()),
            ));
        }
        let n = pv.numel().max(1) as f64;
        let s: f64 = pv.data().iter().zip(tv.data()).map(|(p, t)| (p - t) * (p - t)).sum();
        self.push("mse", Tensor::scalar(s / n), Op::Mse(ip, it), &[ip, it])
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Replays the records in reverse order of recording. Accumulators start
    /// at zero and only ever receive additions.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if !self.nodes[il].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.nodes[il].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            let keep = matches!(node.op, Op::Leaf | Op::Constant);
            let g = if keep {
                continue;
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.propagate(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                if matches!(self.nodes[i].op, Op::Leaf) {
                    g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<f64>>], target: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[target].needs_grad {
            return None;
        }
        let slot = &mut grads[target];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[target].value.numel()]);
        }
        slot.as_mut()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if let Some(ga) = self.accumulate(grads, *a) {
                    // dA = dC · Bᵀ
                    let bd = bv.data();
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    // dB = Aᵀ · dC
                    let ad = av.data();
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a_rp = ad[r * k + p];
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for (acc, x) in gbrow.iter_mut().zip(grow) {
                                *acc += a_rp * x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.broadcast_back(grads, *a, g, |_, x| x);
                self.broadcast_back(grads, *b, g, |_, x| sign * x);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let other = |vals: &[f64], j: usize| if vals.len() == 1 { vals[0] } else { vals[j] };
                self.broadcast_back(grads, *a, g, |j, x| x * other(bv, j));
                self.broadcast_back(grads, *b, g, |j, x| x * other(av, j));
            }
            Op::Scale(a, factor) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (acc, x) in ga.iter_mut().zip(g) {
                        *acc += factor * x;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                let faulty = self.faulty_sigmoid;
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((acc, x), s) in ga.iter_mut().zip(g).zip(out) {
                        let d = if faulty { *s } else { s * (1.0 - s) };
                        *acc += x * d;
                    }
                }
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((acc, x), t) in ga.iter_mut().zip(g).zip(out) {
                        *acc += x * (1.0 - t * t);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.shape()[1];
                    if let Some(gp) = self.accumulate(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (acc, x) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *acc += x;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                let (rows, w) = (node.value.shape()[0], node.value.shape()[1]);
                let cols = self.nodes[*src].value.shape()[1];
                let start = *start;
                if let Some(gs) = self.accumulate(grads, *src) {
                    for r in 0..rows {
                        for c in 0..w {
                            gs[r * cols + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::Gather { src, map } => {
                if let Some(gs) = self.accumulate(grads, *src) {
                    map.adjoint_into(g, gs);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for acc in ga.iter_mut() {
                        *acc += g[0];
                    }
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.nodes[*p].value.data(), self.nodes[*t].value.data());
                let coef = 2.0 * g[0] / pv.len().max(1) as f64;
                if let Some(gp) = self.accumulate(grads, *p) {
                    for ((acc, x), y) in gp.iter_mut().zip(pv).zip(tv) {
                        *acc += coef * (x - y);
                    }
                }
                if let Some(gt) = self.accumulate(grads, *t) {
                    for ((acc, x), y) in gt.iter_mut().zip(pv).zip(tv) {
                        *acc -= coef * (x - y);
                    }
                }
            }
        }
    }

    /// Pushes `g` (shaped like the op output) back into `target`, summing over
    /// broadcast positions when `target` is a scalar.
    fn broadcast_back(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: usize,
        g: &[f64],
        local: impl Fn(usize, f64) -> f64,
    ) {
        let scalar = self.nodes[target].value.numel() == 1 && g.len() != 1;
        if let Some(acc) = self.accumulate(grads, target) {
            if scalar {
                acc[0] += g.iter().enumerate().map(|(j, &x)| local(j, x)).sum::<f64>();
            } else {
                for (j, (a, &x)) in acc.iter_mut().zip(g).enumerate() {
                    *a += local(j, x);
                }
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let orow = &mut out[r * n..(r + 1) * n];
        for (p, &x) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zeros if the leaf did not influence the loss.
    pub fn get(&self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape || v.index >= self.shapes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(match self.grads.get(v.index).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.index]),
        })
    }
}
