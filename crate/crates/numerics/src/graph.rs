//! Tape of recorded operations and the reverse sweep over it.
//!
//! Every forward op appends one node. Node indices are a topological order,
//! so the backward pass is a single reverse scan that visits each node once.

use crate::error::{NumericsError, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    /// `a[.., m, k] x b`. `b` is either a shared `[k, n]` matrix or batched
    /// with the same leading dims as `a`. With `trans_b` the stored `b` is
    /// `[.., n, k]`.
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `b` broadcast over the leading dims of `a`.
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddScalar { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Abs { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Gelu { a: Var },
    Relu { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Embedding { weight: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    SumLast { a: Var },
    GatherLast { a: Var, index: Vec<usize> },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Recording of one forward computation. Not `Sync`-shared; build one per
/// step (or per worker).
#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.push_node(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.requires_grad = true;
        self.push_node(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last `backward` call, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op output after checking it is finite.
    pub(crate) fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        parents: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let value = Tensor {
            shape,
            data,
            requires_grad,
        };
        Ok(self.push_node(value, op, requires_grad))
    }

    /// Reverse-mode sweep from a scalar output. Gradients of shared
    /// subexpressions are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let out = &self.nodes[loss.0].value;
        if out.len() != 1 {
            return Err(NumericsError::NotScalar(out.shape.clone()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&mut self, i: usize, gout: &[f64]) {
        // The op is cloned so parent gradient buffers can be borrowed mutably.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                shared_b,
                batch,
                m,
                k,
                n,
            } => self.backprop_matmul(gout, a, b, trans_b, shared_b, batch, m, k, n),
            Op::Add { a, b } => {
                if let Some(ga) = self.accum(a) {
                    add_into(ga, gout);
                }
                if let Some(gb) = self.accum(b) {
                    let nb = gb.len();
                    for chunk in gout.chunks(nb) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.accum(a) {
                    add_into(ga, gout);
                }
                if let Some(gb) = self.accum(b) {
                    let nb = gb.len();
                    for chunk in gout.chunks(nb) {
                        for (g, d) in gb.iter_mut().zip(chunk) {
                            *g -= d;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                let nb = bv.len();
                if let Some(ga) = self.accum(a) {
                    for (j, g) in ga.iter_mut().enumerate() {
                        *g += gout[j] * bv[j % nb];
                    }
                }
                if let Some(gb) = self.accum(b) {
                    for (j, (go, x)) in gout.iter().zip(&av).enumerate() {
                        gb[j % nb] += go * x;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.accum(a) {
                    for (g, d) in ga.iter_mut().zip(gout) {
                        *g += factor * d;
                    }
                }
            }
            Op::AddScalar { a } => {
                if let Some(ga) = self.accum(a) {
                    add_into(ga, gout);
                }
            }
            Op::Exp { a } => self.unary_from_output(i, a, gout, |y| y),
            Op::Sigmoid { a } => self.unary_from_output(i, a, gout, |y| y * (1.0 - y)),
            Op::Tanh { a } => self.unary_from_output(i, a, gout, |y| 1.0 - y * y),
            Op::Log { a } => self.unary_from_input(a, gout, |x| 1.0 / x),
            Op::Abs { a } => self.unary_from_input(a, gout, |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Relu { a } => self.unary_from_input(a, gout, |x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Clamp { a, lo, hi } => {
                self.unary_from_input(a, gout, |x| if x > lo && x < hi { 1.0 } else { 0.0 })
            }
            Op::Gelu { a } => self.unary_from_input(a, gout, kernels::gelu_grad),
            Op::Softmax { a } => {
                let y = self.nodes[i].value.data.clone();
                let d = self.nodes[i].value.last_dim();
                if let Some(ga) = self.accum(a) {
                    for ((gr, yr), dr) in ga.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(y, g)| y * g).sum();
                        for j in 0..d {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let y = self.nodes[i].value.data.clone();
                let d = self.nodes[i].value.last_dim();
                if let Some(ga) = self.accum(a) {
                    for ((gr, yr), dr) in ga.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)) {
                        let total: f64 = dr.iter().sum();
                        for j in 0..d {
                            gr[j] += dr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let y = self.nodes[i].value.data.clone();
                let d = self.nodes[i].value.last_dim();
                if let Some(ga) = self.accum(a) {
                    for (row, ((gr, yr), dr)) in
                        ga.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)).enumerate()
                    {
                        let mean_g = dr.iter().sum::<f64>() / d as f64;
                        let mean_gy =
                            dr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                        let r = inv_std[row];
                        for j in 0..d {
                            gr[j] += r * (dr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Embedding { weight, ids } => {
                let d = self.nodes[weight.0].value.last_dim();
                if let Some(gw) = self.accum(weight) {
                    for (id, dr) in ids.iter().zip(gout.chunks(d)) {
                        add_into(&mut gw[id * d..(id + 1) * d], dr);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[i].value.shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let width = self.nodes[p.0].value.shape[axis] * inner;
                    if let Some(gp) = self.accum(p) {
                        for o in 0..outer {
                            let src = &gout[o * total + offset..o * total + offset + width];
                            add_into(&mut gp[o * width..(o + 1) * width], src);
                        }
                    }
                    offset += width;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.nodes[a.0].value.shape.clone();
                let len = self.nodes[i].value.shape[axis];
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let total = in_shape[axis] * inner;
                if let Some(ga) = self.accum(a) {
                    for o in 0..outer {
                        let dst = &mut ga[o * total + start * inner..o * total + (start + len) * inner];
                        add_into(dst, &gout[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.accum(a) {
                    add_into(ga, gout);
                }
            }
            Op::Permute { a, perm } => {
                let out_shape = self.nodes[i].value.shape.clone();
                let mut inverse = vec![0; perm.len()];
                for (j, &p) in perm.iter().enumerate() {
                    inverse[p] = j;
                }
                let back = kernels::permute(gout, &out_shape, &inverse);
                if let Some(ga) = self.accum(a) {
                    add_into(ga, &back);
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.accum(a) {
                    for g in ga.iter_mut() {
                        *g += gout[0];
                    }
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.accum(a) {
                    let scale = gout[0] / ga.len() as f64;
                    for g in ga.iter_mut() {
                        *g += scale;
                    }
                }
            }
            Op::SumLast { a } => {
                let d = self.nodes[a.0].value.last_dim();
                if let Some(ga) = self.accum(a) {
                    for (gr, go) in ga.chunks_mut(d).zip(gout) {
                        for g in gr {
                            *g += go;
                        }
                    }
                }
            }
            Op::GatherLast { a, index } => {
                let d = self.nodes[a.0].value.last_dim();
                if let Some(ga) = self.accum(a) {
                    for (r, (&j, go)) in index.iter().zip(gout).enumerate() {
                        ga[r * d + j] += go;
                    }
                }
            }
        }
    }

    fn unary_from_output(&mut self, i: usize, a: Var, gout: &[f64], f: impl Fn(f64) -> f64) {
        let y = self.nodes[i].value.data.clone();
        if let Some(ga) = self.accum(a) {
            for ((g, d), y) in ga.iter_mut().zip(gout).zip(&y) {
                *g += d * f(*y);
            }
        }
    }

    fn unary_from_input(&mut self, a: Var, gout: &[f64], f: impl Fn(f64) -> f64) {
        let x = self.nodes[a.0].value.data.clone();
        if let Some(ga) = self.accum(a) {
            for ((g, d), x) in ga.iter_mut().zip(gout).zip(&x) {
                *g += d * f(*x);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_matmul(
        &mut self,
        gout: &[f64],
        a: Var,
        b: Var,
        trans_b: bool,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    ) {
        let av = self.nodes[a.0].value.data.clone();
        let bv = self.nodes[b.0].value.data.clone();
        // dA = dC · Bᵀ, with B viewed as [k, n].
        if let Some(ga) = self.accum(a) {
            for t in 0..batch {
                let bs = if shared_b { &bv[..] } else { &bv[t * k * n..(t + 1) * k * n] };
                let (rsb, csb) = if trans_b { (k, 1) } else { (1, n) };
                // Bᵀ[n, k]: element (j, l) = B[l, j].
                kernels::gemm(
                    m,
                    n,
                    k,
                    &gout[t * m * n..(t + 1) * m * n],
                    (n, 1),
                    bs,
                    (rsb, csb),
                    &mut ga[t * m * k..(t + 1) * m * k],
                    true,
                );
            }
        }
        if let Some(gb) = self.accum(b) {
            if shared_b {
                let rows = batch * m;
                if trans_b {
                    // dB[n, k] = dCᵀ · A
                    kernels::gemm(n, rows, k, gout, (1, n), &av, (k, 1), gb, true);
                } else {
                    // dB[k, n] = Aᵀ · dC
                    kernels::gemm(k, rows, n, &av, (1, k), gout, (n, 1), gb, true);
                }
            } else {
                for t in 0..batch {
                    let at = &av[t * m * k..(t + 1) * m * k];
                    let gt = &gout[t * m * n..(t + 1) * m * n];
                    let dst = &mut gb[t * k * n..(t + 1) * k * n];
                    if trans_b {
                        kernels::gemm(n, m, k, gt, (1, n), at, (k, 1), dst, true);
                    } else {
                        kernels::gemm(k, m, n, at, (1, k), gt, (n, 1), dst, true);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
