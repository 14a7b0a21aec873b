use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{invalid, shape_err, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{strides_of, Tensor};

/// Index mapping from a broadcast output position to an operand position.
#[derive(Clone, Debug)]
enum Bcast {
    Same,
    /// Operand repeats along leading dims: `i % len`.
    Mod(usize),
    /// Operand is constant along trailing dims: `i / div`.
    Div(usize),
    General(Vec<usize>),
}

impl Bcast {
    fn new(out: &[usize], inp: &[usize]) -> Self {
        if out == inp {
            return Bcast::Same;
        }
        let pad = out.len() - inp.len();
        let full: Vec<usize> = std::iter::repeat_n(1, pad).chain(inp.iter().copied()).collect();
        let n_in: usize = inp.iter().product();
        // trailing dims equal, leading dims all broadcast
        if let Some(first) = full.iter().position(|&d| d != 1) {
            if full[first..] == out[first..] {
                return Bcast::Mod(n_in);
            }
            let last = full.iter().rposition(|&d| d != 1).unwrap();
            if full[..=last] == out[..=last] && full[last + 1..].iter().all(|&d| d == 1) {
                return Bcast::Div(out[last + 1..].iter().product());
            }
        } else {
            return Bcast::Mod(1);
        }
        let in_strides = strides_of(&full);
        let n_out: usize = out.iter().product();
        let mut map = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; out.len()];
        for _ in 0..n_out {
            let off: usize = idx
                .iter()
                .zip(&full)
                .zip(&in_strides)
                .map(|((&i, &d), &s)| if d == 1 { 0 } else { i * s })
                .sum();
            map.push(off);
            for ax in (0..out.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Bcast::General(map)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Mod(n) => i % n,
            Bcast::Div(d) => i / d,
            Bcast::General(m) => m[i],
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(op, a, b)),
        };
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    Abs,
    Ln,
    Clamp(f32, f32),
    Scale(f32),
    AddScalar(f32),
}

enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Binary(Binary, usize, usize, Bcast, Bcast),
    Unary(Unary, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    SelectRows(usize, Vec<usize>),
    Sum(usize),
    MaskedAbsSum(usize, Arc<Tensor>),
    StraightThrough(usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations. Node ids increase in execution order, so
/// walking ids downwards is a reverse topological traversal.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that never records backward information (inference).
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_arc(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.record,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.push_arc(t.into(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.push_arc(t.into(), false)
    }

    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if xs.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let vals: Vec<Arc<Tensor>> = xs.iter().map(|v| v.value()).collect();
        let s0 = vals[0].shape().to_vec();
        if axis >= s0.len() {
            return Err(invalid("concat", format!("axis {axis} for rank {}", s0.len())));
        }
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != s0.len()
                || s.iter()
                    .zip(&s0)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err("concat", &s0, s));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut shape = s0.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = xs.iter().any(|v| v.requires_grad());
        Ok(self.push(
            Tensor::from_vec(&shape, data)?,
            Op::Concat {
                xs: xs.iter().map(|v| v.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var<'_>) -> Result<Grads> {
        let n = out.value().numel();
        if n != 1 {
            return Err(invalid("backward", format!("output has {n} elements, expected 1")));
        }
        self.backward_with(out, Tensor::full(out.value().shape(), 1.0))
    }

    /// Reverse pass seeded with an explicit output cotangent.
    pub fn backward_with(&self, out: Var<'_>, seed: Tensor) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if seed.shape() != nodes[out.id].value.shape() {
            return Err(shape_err("backward", nodes[out.id].value.shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.id] = Some(seed);
        for id in (0..=out.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, node, &g, &mut grads)?;
            // intermediate grads are not retained
        }
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() && id <= out.id {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn reduce_bcast(g: &Tensor, map: &Bcast, shape: &[usize]) -> Tensor {
    if let Bcast::Same = map {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for (i, &v) in g.data().iter().enumerate() {
        od[map.at(i)] += v;
    }
    out
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let needs = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if needs(*a) {
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                accumulate(grads, nodes, *a, Tensor::from_vec(&[m, k], da)?);
            }
            if needs(*b) {
                let mut db = vec![0.0; k * n];
                kernels::gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                accumulate(grads, nodes, *b, Tensor::from_vec(&[k, n], db)?);
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()?),
        Op::Binary(kind, a, b, ma, mb) => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let ga = match kind {
                    Binary::Add | Binary::Sub => reduce_bcast(g, ma, av.shape()),
                    Binary::Mul => {
                        let prod = Tensor::from_fn(g.shape(), |i| g.data()[i] * bv.data()[mb.at(i)]);
                        reduce_bcast(&prod, ma, av.shape())
                    }
                };
                accumulate(grads, nodes, *a, ga);
            }
            if needs(*b) {
                let gb = match kind {
                    Binary::Add => reduce_bcast(g, mb, bv.shape()),
                    Binary::Sub => reduce_bcast(&g.map(|x| -x), mb, bv.shape()),
                    Binary::Mul => {
                        let prod = Tensor::from_fn(g.shape(), |i| g.data()[i] * av.data()[ma.at(i)]);
                        reduce_bcast(&prod, mb, bv.shape())
                    }
                };
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Unary(kind, a) => {
            let x = val(*a);
            let y = &node.value;
            let d: Vec<f32> = match *kind {
                Unary::Relu => zip3(g, x, y, |g, x, _| if x > 0.0 { g } else { 0.0 }),
                Unary::LeakyRelu(s) => zip3(g, x, y, |g, x, _| if x > 0.0 { g } else { g * s }),
                Unary::Sigmoid => zip3(g, x, y, |g, _, y| g * y * (1.0 - y)),
                Unary::Abs => zip3(g, x, y, |g, x, _| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }),
                Unary::Ln => zip3(g, x, y, |g, x, _| g / x),
                Unary::Clamp(lo, hi) => zip3(g, x, y, |g, x, _| if x >= lo && x <= hi { g } else { 0.0 }),
                Unary::Scale(c) => g.data().iter().map(|v| v * c).collect(),
                Unary::AddScalar(_) => g.data().to_vec(),
            };
            accumulate(grads, nodes, *a, Tensor::from_vec(x.shape(), d)?);
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let wv = val(*w);
            let o = wv.shape()[0];
            let (rows, l) = (geom.col_rows(), geom.col_len());
            if needs(*w) {
                let mut dw = vec![0.0; o * rows];
                kernels::gemm(o, l, rows, g.data(), false, cols, true, &mut dw, false);
                accumulate(grads, nodes, *w, Tensor::from_vec(wv.shape(), dw)?);
            }
            if let Some(b) = b {
                if needs(*b) {
                    let db: Vec<f32> = g.data().chunks(l).map(|r| r.iter().sum()).collect();
                    accumulate(grads, nodes, *b, Tensor::from_vec(&[o], db)?);
                }
            }
            if needs(*x) {
                let mut dcols = vec![0.0; rows * l];
                kernels::gemm(rows, o, l, wv.data(), true, g.data(), false, &mut dcols, false);
                let mut dx = vec![0.0; geom.c * geom.h * geom.w];
                kernels::col2im(&dcols, geom, &mut dx);
                accumulate(grads, nodes, *x, Tensor::from_vec(val(*x).shape(), dx)?);
            }
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let ci = xv.shape()[0];
            let (rows, l) = (geom.col_rows(), geom.col_len());
            let dcols = kernels::im2col(g.data(), geom);
            if needs(*x) {
                let mut dx = vec![0.0; ci * l];
                kernels::gemm(ci, rows, l, wv.data(), false, &dcols, false, &mut dx, false);
                accumulate(grads, nodes, *x, Tensor::from_vec(xv.shape(), dx)?);
            }
            if needs(*w) {
                let mut dw = vec![0.0; ci * rows];
                kernels::gemm(ci, l, rows, xv.data(), false, &dcols, true, &mut dw, false);
                accumulate(grads, nodes, *w, Tensor::from_vec(wv.shape(), dw)?);
            }
            if let Some(b) = b {
                if needs(*b) {
                    let plane = geom.h * geom.w;
                    let db: Vec<f32> = g.data().chunks(plane).map(|r| r.iter().sum()).collect();
                    accumulate(grads, nodes, *b, Tensor::from_vec(&[geom.c], db)?);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = val(*gain);
            let d = gv.numel();
            if needs(*gain) {
                let mut dg = vec![0.0; d];
                for (gr, hr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                    }
                }
                accumulate(grads, nodes, *gain, Tensor::from_vec(gv.shape(), dg)?);
            }
            if needs(*bias) {
                let mut db = vec![0.0; d];
                for gr in g.data().chunks(d) {
                    for j in 0..d {
                        db[j] += gr[j];
                    }
                }
                accumulate(grads, nodes, *bias, Tensor::from_vec(gv.shape(), db)?);
            }
            if needs(*x) {
                let mut dx = vec![0.0; g.numel()];
                for (row, ((gr, hr), dr)) in g
                    .data()
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let gh = gr[j] * gv.data()[j];
                        s1 += gh;
                        s2 += gh * hr[j];
                    }
                    let (m1, m2) = (s1 / d as f32, s2 / d as f32);
                    for j in 0..d {
                        let gh = gr[j] * gv.data()[j];
                        dr[j] = rstd[row] * (gh - m1 - hr[j] * m2);
                    }
                }
                accumulate(grads, nodes, *x, Tensor::from_vec(val(*x).shape(), dx)?);
            }
        }
        Op::Softmax { x, axis } => {
            let y = &node.value;
            let shape = y.shape();
            let outer: usize = shape[..*axis].iter().product();
            let n = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut dx = vec![0.0; y.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut dot = 0.0;
                    for j in 0..n {
                        let p = base + j * inner;
                        dot += g.data()[p] * y.data()[p];
                    }
                    for j in 0..n {
                        let p = base + j * inner;
                        dx[p] = y.data()[p] * (g.data()[p] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::from_vec(shape, dx)?);
        }
        Op::Slice { x, axis, start } => {
            let xs = val(*x).shape();
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let len = g.shape()[*axis];
            let mut dx = Tensor::zeros(xs);
            let dd = dx.data_mut();
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let dst = (o * xs[*axis] + start) * inner;
                dd[dst..dst + len * inner].copy_from_slice(src);
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::Concat { xs, axis } => {
            let gs = g.shape();
            let outer: usize = gs[..*axis].iter().product();
            let inner: usize = gs[axis + 1..].iter().product();
            let total = gs[*axis];
            let mut off = 0;
            for &id in xs {
                let s = val(id).shape();
                let len = s[*axis];
                if needs(id) {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let src = (o * total + off) * inner;
                        d.extend_from_slice(&g.data()[src..src + len * inner]);
                    }
                    accumulate(grads, nodes, id, Tensor::from_vec(s, d)?);
                }
                off += len;
            }
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, g.clone().reshape(val(*x).shape())?),
        Op::SelectRows(x, idx) => {
            let xs = val(*x).shape();
            let row: usize = xs[1..].iter().product();
            let mut dx = Tensor::zeros(xs);
            let dd = dx.data_mut();
            for (k, &r) in idx.iter().enumerate() {
                for j in 0..row {
                    dd[r * row + j] += g.data()[k * row + j];
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::Sum(x) => {
            let gv = g.item();
            accumulate(grads, nodes, *x, Tensor::full(val(*x).shape(), gv));
        }
        Op::MaskedAbsSum(x, mask) => {
            let gv = g.item();
            let xv = val(*x);
            let d = Tensor::from_fn(xv.shape(), |i| {
                let v = xv.data()[i];
                let s = if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                gv * mask.data()[i] * s
            });
            accumulate(grads, nodes, *x, d);
        }
        Op::StraightThrough(soft) => accumulate(grads, nodes, *soft, g.clone()),
    }
    Ok(())
}

fn zip3(g: &Tensor, x: &Tensor, y: &Tensor, f: impl Fn(f32, f32, f32) -> f32) -> Vec<f32> {
    g.data()
        .iter()
        .zip(x.data())
        .zip(y.data())
        .map(|((&g, &x), &y)| f(g, x, y))
        .collect()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        Arc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    pub fn matmul(&self, b: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), b.value());
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), false, &mut c, false);
        let rg = self.requires_grad() || b.requires_grad();
        Ok(self
            .tape
            .push(Tensor::from_vec(&[m, n], c)?, Op::Matmul(self.id, b.id), rg))
    }

    pub fn t(&self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        Ok(self.tape.push(v, Op::Transpose(self.id), self.requires_grad()))
    }

    fn binary(&self, b: Var<'t>, kind: Binary, name: &'static str) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), b.value());
        let shape = broadcast_shape(name, av.shape(), bv.shape())?;
        let ma = Bcast::new(&shape, av.shape());
        let mb = Bcast::new(&shape, bv.shape());
        let (ad, bd) = (av.data(), bv.data());
        let out = match (&ma, &mb) {
            (Bcast::Same, Bcast::Same) => {
                let f = |x: f32, y: f32| match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                };
                ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
            }
            _ => {
                let n: usize = shape.iter().product();
                (0..n)
                    .map(|i| {
                        let (x, y) = (ad[ma.at(i)], bd[mb.at(i)]);
                        match kind {
                            Binary::Add => x + y,
                            Binary::Sub => x - y,
                            Binary::Mul => x * y,
                        }
                    })
                    .collect()
            }
        };
        let rg = self.requires_grad() || b.requires_grad();
        Ok(self.tape.push(
            Tensor::from_vec(&shape, out)?,
            Op::Binary(kind, self.id, b.id, ma, mb),
            rg,
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(b, Binary::Add, "add")
    }

    pub fn sub(&self, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(b, Binary::Sub, "sub")
    }

    pub fn mul(&self, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(b, Binary::Mul, "mul")
    }

    fn unary(&self, kind: Unary) -> Var<'t> {
        let x = self.value();
        let y = x.map(|v| match kind {
            Unary::Relu => v.max(0.0),
            Unary::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    v * s
                }
            }
            Unary::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Unary::Abs => v.abs(),
            Unary::Ln => v.ln(),
            Unary::Clamp(lo, hi) => v.clamp(lo, hi),
            Unary::Scale(c) => v * c,
            Unary::AddScalar(c) => v + c,
        });
        self.tape.push(y, Op::Unary(kind, self.id), self.requires_grad())
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn leaky_relu(&self, slope: f32) -> Var<'t> {
        self.unary(Unary::LeakyRelu(slope))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Unary::Ln)
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Var<'t> {
        self.unary(Unary::Clamp(lo, hi))
    }

    pub fn scale(&self, c: f32) -> Var<'t> {
        self.unary(Unary::Scale(c))
    }

    pub fn add_scalar(&self, c: f32) -> Var<'t> {
        self.unary(Unary::AddScalar(c))
    }

    /// Cross-correlation of `[C_in,H,W]` with `[C_out,C_in,k,k]` weights, zero padding.
    pub fn conv2d(&self, w: Var<'t>, b: Option<Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (xv, wv) = (self.value(), w.value());
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", xs, ws));
        }
        let geom = ConvGeom::forward(xs[0], xs[1], xs[2], ws[2], stride, pad)
            .ok_or_else(|| shape_err("conv2d", xs, ws))?;
        let o = ws[0];
        let cols = kernels::im2col(xv.data(), &geom);
        let l = geom.col_len();
        let mut out = vec![0.0; o * l];
        kernels::gemm(o, geom.col_rows(), l, wv.data(), false, &cols, false, &mut out, false);
        if let Some(b) = b {
            let bv = b.value();
            if bv.shape() != [o] {
                return Err(shape_err("conv2d bias", bv.shape(), &[o]));
            }
            for (row, &bb) in out.chunks_mut(l).zip(bv.data()) {
                row.iter_mut().for_each(|v| *v += bb);
            }
        }
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            Tensor::from_vec(&[o, geom.oh, geom.ow], out)?,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
                cols: if rg && self.tape.record { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Adjoint of [`conv2d`](Self::conv2d) (no padding): `[C_in,H,W]` with
    /// `[C_in,C_out,k,k]` weights gives `[C_out,(H−1)s+k,(W−1)s+k]`.
    pub fn conv_transpose2d(&self, w: Var<'t>, b: Option<Var<'t>>, stride: usize) -> Result<Var<'t>> {
        let (xv, wv) = (self.value(), w.value());
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err("conv_transpose2d", xs, ws));
        }
        let (ci, co, k) = (ws[0], ws[1], ws[2]);
        let (oh, ow) = ((xs[1] - 1) * stride + k, (xs[2] - 1) * stride + k);
        let geom = ConvGeom {
            c: co,
            h: oh,
            w: ow,
            k,
            stride,
            pad: 0,
            oh: xs[1],
            ow: xs[2],
        };
        let (rows, l) = (geom.col_rows(), geom.col_len());
        let mut cols = vec![0.0; rows * l];
        kernels::gemm(rows, ci, l, wv.data(), true, xv.data(), false, &mut cols, false);
        let mut out = vec![0.0; co * oh * ow];
        kernels::col2im(&cols, &geom, &mut out);
        if let Some(b) = b {
            let bv = b.value();
            if bv.shape() != [co] {
                return Err(shape_err("conv_transpose2d bias", bv.shape(), &[co]));
            }
            for (plane, &bb) in out.chunks_mut(oh * ow).zip(bv.data()) {
                plane.iter_mut().for_each(|v| *v += bb);
            }
        }
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            Tensor::from_vec(&[co, oh, ow], out)?,
            Op::ConvTranspose2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
            },
            rg,
        ))
    }

    /// Normalises the last axis to zero mean / unit variance, then applies `gain`, `bias`.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (xv, gv, bv) = (self.value(), gain.value(), bias.value());
        let d = *xv.shape().last().unwrap_or(&1);
        if d < 2 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = vec![0.0; xv.numel()];
        let rstd = kernels::layer_norm_rows(xv.data(), d, &mut xhat);
        let out: Vec<f32> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv.data()[i % d] + bv.data()[i % d])
            .collect();
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            Tensor::from_vec(xv.shape(), out)?,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(invalid("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; xv.numel()];
        if inner == 1 {
            kernels::softmax_rows(xv.data(), n, &mut out);
        } else {
            let outer: usize = shape[..axis].iter().product();
            let mut buf = vec![0.0; n];
            let mut res = vec![0.0; n];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    for j in 0..n {
                        buf[j] = xv.data()[base + j * inner];
                    }
                    kernels::softmax_rows(&buf, n, &mut res);
                    for j in 0..n {
                        out[base + j * inner] = res[j];
                    }
                }
            }
        }
        Ok(self.tape.push(
            Tensor::from_vec(shape, out)?,
            Op::Softmax { x: self.id, axis },
            self.requires_grad(),
        ))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let xs = xv.shape();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(invalid(
                "slice",
                format!("axis {axis} range {start}..{} of {xs:?}", start + len),
            ));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * xs[axis] + start) * inner;
            data.extend_from_slice(&xv.data()[src..src + len * inner]);
        }
        let mut shape = xs.to_vec();
        shape[axis] = len;
        Ok(self.tape.push(
            Tensor::from_vec(&shape, data)?,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Gathers rows (first-axis entries) in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let xv = self.value();
        let xs = xv.shape();
        if xs.is_empty() || idx.is_empty() || idx.iter().any(|&r| r >= xs[0]) {
            return Err(invalid("select_rows", format!("indices out of range for {xs:?}")));
        }
        let row: usize = xs[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &r in idx {
            data.extend_from_slice(&xv.data()[r * row..(r + 1) * row]);
        }
        let mut shape = xs.to_vec();
        shape[0] = idx.len();
        Ok(self.tape.push(
            Tensor::from_vec(&shape, data)?,
            Op::SelectRows(self.id, idx.to_vec()),
            self.requires_grad(),
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum::<f32>();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f32;
        self.sum().scale(1.0 / n)
    }

    /// `Σ mask ⊙ |x|` with a constant, same-shape mask.
    pub fn masked_abs_sum(&self, mask: impl Into<Arc<Tensor>>) -> Result<Var<'t>> {
        let mask = mask.into();
        let xv = self.value();
        if mask.shape() != xv.shape() {
            return Err(shape_err("masked_abs_sum", xv.shape(), mask.shape()));
        }
        let s: f32 = xv.data().iter().zip(mask.data()).map(|(x, m)| m * x.abs()).sum();
        Ok(self.tape.push(
            Tensor::scalar(s),
            Op::MaskedAbsSum(self.id, mask),
            self.requires_grad(),
        ))
    }

    /// Forward value `hard`, backward identity into `self` (straight-through estimator).
    pub fn straight_through(&self, hard: Tensor) -> Result<Var<'t>> {
        if hard.shape() != self.value().shape() {
            return Err(shape_err("straight_through", &self.shape(), hard.shape()));
        }
        Ok(self
            .tape
            .push(hard, Op::StraightThrough(self.id), self.requires_grad()))
    }
}
