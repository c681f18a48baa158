//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and the handles of its
//! operands. Nodes are only ever appended, so tape order is a topological
//! order and `backward` is a single reverse sweep.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{axis_blocks, broadcast_map, broadcast_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ClampMin { x: Var, min: f64 },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv3x3s2 { x: Var, w: Var, b: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Gem { x: Var, p: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { table: Var, rows: Vec<usize> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lower clamp applied before the fractional power in GeM pooling.
pub const GEM_EPS: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v), g.to_vec()).expect("grad matches value shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape(), data);
        }
        let out = broadcast_shape(ta.shape(), tb.shape())?;
        let (ma, mb) = (broadcast_map(ta.shape(), &out), broadcast_map(tb.shape(), &out));
        let data = ma
            .iter()
            .zip(&mb)
            .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
            .collect();
        Tensor::new(&out, data)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        self.unary(x, |v| v.max(min), Op::ClampMin { x, min })
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return shape_err(format!(
                "matmul needs matrices, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            ));
        };
        if k != k2 {
            return shape_err(format!("matmul inner extents differ: {m}x{k} times {k2}x{n}"));
        }
        let value = Tensor::new(&[m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[r, c] = t.shape() else {
            return shape_err(format!("transpose needs a matrix, got {:?}", t.shape()));
        };
        let value = Tensor::new(&[c, r], transpose_raw(t.data(), r, c))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Pointwise linear map over positions: `w [Cout, Cin]` applied to
    /// `x [Cin, P]`, plus `bias [Cout]`.
    pub fn conv_1x1(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(bias));
        match (xs, ws, bs) {
            (&[cin, _], &[cout, cin2], &[cout2]) if cin == cin2 && cout == cout2 => {}
            _ => return shape_err(format!("conv_1x1 channel mismatch: x {xs:?}, w {ws:?}, bias {bs:?}")),
        }
        let cout = ws[0];
        let y = self.matmul(w, x)?;
        let b = self.reshape(bias, &[cout, 1])?;
        self.add(y, b)
    }

    /// 3x3 cross-correlation, stride 2, zero padding 1.
    /// `x [Cin, H, W]`, `w [Cout, Cin, 3, 3]`, `b [Cout]` -> `[Cout, ceil(H/2), ceil(W/2)]`.
    pub fn conv3x3_s2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let geom = ConvGeom::new(tx.shape(), tw.shape(), tb.shape())?;
        let plane = geom.oh * geom.ow;
        let taps = geom.cin * 9;
        let cols = geom.im2col(tx.data());
        let mut out = vec![0.0; geom.cout * plane];
        for (co, row) in out.chunks_exact_mut(plane).enumerate() {
            row.fill(tb.data()[co]);
            for (&wk, col) in tw.data()[co * taps..(co + 1) * taps]
                .iter()
                .zip(cols.chunks_exact(plane))
            {
                for (o, &c) in row.iter_mut().zip(col) {
                    *o += wk * c;
                }
            }
        }
        let value = Tensor::new(&[geom.cout, geom.oh, geom.ow], out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Conv3x3s2 { x, w, b }, rg))
    }

    // ---- normalizations and pooling ---------------------------------------

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.along_axis(x, axis, |s, out| {
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(s) {
                *o = (v - m).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        })?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Log of the softmax along `axis`, computed as `x - max - ln(sum exp)`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.along_axis(x, axis, |s, out| {
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + s.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for (o, &v) in out.iter_mut().zip(s) {
                *o = v - lse;
            }
        })?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::LogSoftmax { x, axis }, rg))
    }

    fn along_axis(&self, x: Var, axis: usize, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
        let t = self.value(x);
        if axis >= t.rank() {
            return shape_err(format!("axis {axis} out of range for shape {:?}", t.shape()));
        }
        let (outer, n, inner) = axis_blocks(t.shape(), axis);
        let mut out = vec![0.0; t.numel()];
        let mut slice = vec![0.0; n];
        let mut res = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for j in 0..n {
                    slice[j] = t.data()[base + j * inner];
                }
                f(&slice, &mut res);
                for j in 0..n {
                    out[base + j * inner] = res[j];
                }
            }
        }
        Tensor::new(t.shape(), out)
    }

    /// Generalized-mean pooling over the last axis of `x [C, P]`:
    /// `((1/P) sum max(x, eps)^p)^(1/p)` per channel.
    pub fn gem(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::Param(format!("GeM exponent must be positive, got {p}")));
        }
        let t = self.value(x);
        let &[c, n] = t.shape() else {
            return shape_err(format!("gem expects [C, P], got {:?}", t.shape()));
        };
        let out = (0..c)
            .map(|ch| {
                let row = &t.data()[ch * n..(ch + 1) * n];
                let m = row.iter().map(|&v| v.max(GEM_EPS).powf(p)).sum::<f64>() / n as f64;
                m.powf(1.0 / p)
            })
            .collect();
        let value = Tensor::new(&[c], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Gem { x, p }, rg))
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return shape_err(format!("concat mismatch on axis {axis}: {base:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return shape_err(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                t.shape()
            ));
        }
        let (outer, n, inner) = axis_blocks(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    /// Rows of `table [V, D]` selected by `rows`, giving `[rows.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let &[v, d] = t.shape() else {
            return shape_err(format!("gather_rows expects [V, D], got {:?}", t.shape()));
        };
        if rows.is_empty() {
            return shape_err("gather_rows with no rows");
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= v {
                return shape_err(format!("row {r} out of range for table of {v} rows"));
            }
            out.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(&[rows.len(), d], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates d(loss)/d(node) into every `requires_grad` node reachable
    /// from `loss`. Previous gradients are discarded, so calling this twice
    /// yields identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if n.requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    let map = broadcast_map(self.shape(v), node.value.shape());
                    acc(v, &mut |ga| {
                        for (k, &j) in map.iter().enumerate() {
                            ga[j] += s * g[k];
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let out = node.value.shape();
                let (ma, mb) = (broadcast_map(self.shape(*a), out), broadcast_map(self.shape(*b), out));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[ma[k]] += g[k] * vb[mb[k]];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..g.len() {
                        gb[mb[k]] += g[k] * va[ma[k]];
                    }
                });
            }
            Op::Affine { x, scale } => acc(*x, &mut |gx| {
                for (o, &gk) in gx.iter_mut().zip(g) {
                    *o += scale * gk;
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * y[k];
                }
            }),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] / xv[k];
                    }
                })
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for k in 0..g.len() {
                        if xv[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                })
            }
            Op::ClampMin { x, min } => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for k in 0..g.len() {
                        if xv[k] >= *min {
                            gx[k] += g[k];
                        }
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                acc(*a, &mut |ga| {
                    // ga += g [m,n] * b^T [n,k]
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * tb.data()[c * n + j];
                            }
                            ga[r * k + c] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // gb += a^T [k,m] * g [m,n]
                    for r in 0..m {
                        for c in 0..k {
                            let av = ta.data()[r * k + c];
                            if av == 0.0 {
                                continue;
                            }
                            let (grow, brow) = (&g[r * n..(r + 1) * n], &mut gb[c * n..(c + 1) * n]);
                            for (o, &gv) in brow.iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let t = transpose_raw(g, s[0], s[1]);
                acc(*x, &mut |gx| gx.iter_mut().zip(&t).for_each(|(o, v)| *o += v));
            }
            Op::Reshape(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v)),
            Op::Conv3x3s2 { x, w, b } => self.conv_backward(*x, *w, *b, g, &mut acc),
            Op::Softmax { x, axis } => {
                let gx_full = slice_apply(node.value.shape(), *axis, &[y, g], |s, out| {
                    let (yy, gg) = (s[0], s[1]);
                    let dot: f64 = yy.iter().zip(gg).map(|(a, b)| a * b).sum();
                    for j in 0..out.len() {
                        out[j] = yy[j] * (gg[j] - dot);
                    }
                });
                acc(*x, &mut |gx| gx.iter_mut().zip(&gx_full).for_each(|(o, v)| *o += v));
            }
            Op::LogSoftmax { x, axis } => {
                let gx_full = slice_apply(node.value.shape(), *axis, &[y, g], |s, out| {
                    let (yy, gg) = (s[0], s[1]);
                    let total: f64 = gg.iter().sum();
                    for j in 0..out.len() {
                        out[j] = gg[j] - yy[j].exp() * total;
                    }
                });
                acc(*x, &mut |gx| gx.iter_mut().zip(&gx_full).for_each(|(o, v)| *o += v));
            }
            Op::Gem { x, p } => {
                let tx = self.value(*x);
                let n = tx.shape()[1];
                acc(*x, &mut |gx| {
                    for ch in 0..y.len() {
                        let coef = g[ch] * y[ch].powf(1.0 - p) / n as f64;
                        for k in 0..n {
                            let v = tx.data()[ch * n + k];
                            if v >= GEM_EPS {
                                gx[ch * n + k] += coef * v.powf(p - 1.0);
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_blocks(node.value.shape(), *axis);
                let mut offset = 0;
                let row = node.value.shape()[*axis] * inner;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (d, s) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = axis_blocks(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let to = (o * n + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in gx[to..to + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::GatherRows { table, rows } => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |gt| {
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            gt[r * d + c] += g[i * d + c];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Var, g: &[f64], acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [f64]))) {
        let (tx, tw) = (self.value(x), self.value(w));
        let geom = ConvGeom::new(tx.shape(), tw.shape(), self.shape(b)).expect("validated in forward");
        let plane = geom.oh * geom.ow;
        acc(b, &mut |gb| {
            for co in 0..geom.cout {
                gb[co] += g[co * plane..(co + 1) * plane].iter().sum::<f64>();
            }
        });
        let taps = geom.cin * 9;
        acc(w, &mut |gw| {
            let cols = geom.im2col(tx.data());
            for (gw_row, g_row) in gw.chunks_exact_mut(taps).zip(g.chunks_exact(plane)) {
                for (gk, col) in gw_row.iter_mut().zip(cols.chunks_exact(plane)) {
                    *gk += g_row.iter().zip(col).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        });
        acc(x, &mut |gx| {
            let mut gcols = vec![0.0; taps * plane];
            for (w_row, g_row) in tw.data().chunks_exact(taps).zip(g.chunks_exact(plane)) {
                for (&wk, gcol) in w_row.iter().zip(gcols.chunks_exact_mut(plane)) {
                    for (o, &gv) in gcol.iter_mut().zip(g_row) {
                        *o += wk * gv;
                    }
                }
            }
            geom.col2im(&gcols, gx);
        });
    }
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], b: &[usize]) -> Result<Self> {
        let &[cin, h, wd] = x else {
            return shape_err(format!("conv3x3 input must be [C, H, W], got {x:?}"));
        };
        match (w, b) {
            (&[cout, cin2, 3, 3], &[cout2]) if cin2 == cin && cout2 == cout => {}
            _ => return shape_err(format!("conv3x3 parameter mismatch: x {x:?}, w {w:?}, bias {b:?}")),
        }
        if h < 3 || wd < 3 {
            return shape_err(format!("conv3x3 input {h}x{wd} smaller than the kernel"));
        }
        Ok(Self {
            cin,
            cout: w[0],
            h,
            w: wd,
            oh: h.div_ceil(2),
            ow: wd.div_ceil(2),
        })
    }

    /// Patch matrix `[Cin*9, OH*OW]`; padding taps are zero.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let mut cols = vec![0.0; self.cin * 9 * plane];
        for ci in 0..self.cin {
            let xin = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let col = &mut cols[((ci * 9) + ky * 3 + kx) * plane..][..plane];
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, ky, self.h) else { continue };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                col[oy * self.ow + ox] = xin[iy * self.w + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds a patch-matrix gradient back onto the input layout.
    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let plane = self.oh * self.ow;
        for ci in 0..self.cin {
            let gin = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let col = &cols[((ci * 9) + ky * 3 + kx) * plane..][..plane];
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, ky, self.h) else { continue };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                gin[iy * self.w + ix] += col[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Input coordinate read by output position `o` at kernel tap `k`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (2 * o + k).checked_sub(1)?;
        (i < extent).then_some(i)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

/// Applies `f` to matching 1-D slices along `axis` of several same-shape
/// buffers, writing into a fresh buffer.
fn slice_apply(shape: &[usize], axis: usize, bufs: &[&[f64]], f: impl Fn(&[&[f64]], &mut [f64])) -> Vec<f64> {
    let (outer, n, inner) = axis_blocks(shape, axis);
    let mut out = vec![0.0; outer * n * inner];
    let mut slices: Vec<Vec<f64>> = vec![vec![0.0; n]; bufs.len()];
    let mut res = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (s, b) in slices.iter_mut().zip(bufs) {
                for j in 0..n {
                    s[j] = b[base + j * inner];
                }
            }
            let views: Vec<&[f64]> = slices.iter().map(Vec::as_slice).collect();
            f(&views, &mut res);
            for j in 0..n {
                out[base + j * inner] = res[j];
            }
        }
    }
    out
}
