//! Forward definitions of the differentiable op set.

use crate::error::{shape_err, NumericsError, Result};
use crate::graph::{Graph, Op, Var};
use crate::kernels;

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Graph {
    /// `a[.., m, k] · b` where `b` is `[k, n]` (shared across the leading
    /// dims) or `[.., k, n]` with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl("matmul", a, b, false)
    }

    /// `a · bᵀ` over the last two axes; `b` is `[n, k]` or `[.., n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl("matmul_bt", a, b, true)
    }

    fn matmul_impl(&mut self, name: &'static str, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(name, format!("need rank >= 2, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return shape_err(name, format!("inner dims differ: {sa:?} vs {sb:?}"));
        }
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *lead {
            return shape_err(name, format!("batch dims differ: {sa:?} vs {sb:?}"));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        {
            let av = self.data(a);
            let bv = self.data(b);
            if shared_b {
                kernels::gemm(batch * m, k, n, av, (k, 1), bv, (rsb, csb), &mut out, false);
            } else {
                for t in 0..batch {
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &av[t * m * k..(t + 1) * m * k],
                        (k, 1),
                        &bv[t * k * n..(t + 1) * k * n],
                        (rsb, csb),
                        &mut out[t * m * n..(t + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul {
            a,
            b,
            trans_b,
            shared_b,
            batch,
            m,
            k,
            n,
        };
        self.push(name, shape, out, op, &[a, b])
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if !is_suffix(&sa, sb) {
            return shape_err(name, format!("{sb:?} does not broadcast onto {sa:?}"));
        }
        let bv = self.data(b);
        let nb = bv.len();
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(j, &x)| f(x, bv[j % nb]))
            .collect();
        self.push(name, sa, out, op, &[a, b])
    }

    /// Elementwise `a + b`; `b`'s shape must be a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale { a, factor }, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push("add_scalar", shape, out, Op::AddScalar { a }, &[a])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log { a })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, kernels::sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh { a })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, kernels::gelu, Op::Gelu { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu { a })
    }

    /// Clips into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = t.last_dim();
        let mut out = t.data.clone();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let shape = t.shape.clone();
        self.push("softmax", shape, out, Op::Softmax { a }, &[a])
    }

    /// Max-shifted log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = t.last_dim();
        let mut out = t.data.clone();
        for row in out.chunks_mut(d) {
            let lse = kernels::log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let shape = t.shape.clone();
        self.push("log_softmax", shape, out, Op::LogSoftmax { a }, &[a])
    }

    /// Normalizes the last axis to zero mean and unit (population) variance.
    /// Affine gain/bias are separate `mul`/`add` ops.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let d = t.last_dim();
        let mut out = t.data.clone();
        let mut inv_std = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            inv_std.push(r);
        }
        let shape = t.shape.clone();
        self.push("layer_norm", shape, out, Op::LayerNorm { a, inv_std }, &[a])
    }

    /// Row lookup into `weight[V, d]`; output shape is `ids_shape ++ [d]`.
    pub fn embedding(&mut self, weight: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let sw = self.shape(weight).to_vec();
        if sw.len() != 2 {
            return shape_err("embedding", format!("weight must be [V, d], got {sw:?}"));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return shape_err("embedding", format!("{} ids for shape {ids_shape:?}", ids.len()));
        }
        let (v, d) = (sw[0], sw[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumericsError::Invalid {
                op: "embedding",
                detail: format!("id {bad} out of range for vocabulary {v}"),
            });
        }
        let w = self.data(weight);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&w[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let op = Op::Embedding {
            weight,
            ids: ids.to_vec(),
        };
        self.push("embedding", shape, out, op, &[weight])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut axis_len = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return shape_err("concat", format!("{s:?} incompatible with {base:?}"));
            }
            axis_len += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for &p in parts {
                let width = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * width..(o + 1) * width]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        self.push("concat", shape, out, op, parts)
    }

    /// `a[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err("slice", format!("{start}..{} on axis {axis} of {s:?}", start + len));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let total = s[axis] * inner;
        let av = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&av[o * total + start * inner..o * total + (start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push("slice", shape, out, Op::Slice { a, axis, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a)));
        }
        let out = self.data(a).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a }, &[a])
    }

    /// Reorders axes: output axis `j` is input axis `perm[j]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("{perm:?} is not a permutation of {s:?}"));
        }
        let out = kernels::permute(self.data(a), &s, perm);
        let shape = perm.iter().map(|&p| s[p]).collect();
        let op = Op::Permute {
            a,
            perm: perm.to_vec(),
        };
        self.push("permute", shape, out, op, &[a])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.data(a).iter().sum();
        self.push("sum", Vec::new(), vec![total], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return shape_err("mean", "empty tensor");
        }
        let m = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Vec::new(), vec![m], Op::Mean { a }, &[a])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = t.last_dim();
        let out = t.data.chunks(d).map(|r| r.iter().sum()).collect();
        let shape = t.shape[..t.shape.len().saturating_sub(1)].to_vec();
        self.push("sum_last", shape, out, Op::SumLast { a }, &[a])
    }

    /// Picks `a[.., index[r]]` for every row `r` of the last axis.
    pub fn gather_last(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let d = t.last_dim();
        if t.len() / d != index.len() {
            return shape_err("gather_last", format!("{} indices for {} rows", index.len(), t.len() / d));
        }
        if index.iter().any(|&j| j >= d) {
            return shape_err("gather_last", format!("index out of range for last dim {d}"));
        }
        let out = index.iter().enumerate().map(|(r, &j)| t.data[r * d + j]).collect();
        let shape = t.shape[..t.shape.len() - 1].to_vec();
        let op = Op::GatherLast {
            a,
            index: index.to_vec(),
        };
        self.push("gather_last", shape, out, op, &[a])
    }
}
