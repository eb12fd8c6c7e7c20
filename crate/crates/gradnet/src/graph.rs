use std::collections::{BTreeMap, HashMap};

use crate::linalg;
use crate::{GradError, ParamStore, Result, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the differentiable primitives a [`Graph`] records.
pub fn op_set() -> &'static [&'static str] {
    &[
        "matmul",
        "add",
        "add_row",
        "sub",
        "mul",
        "scale",
        "add_const",
        "mul_scalar",
        "recip",
        "transpose",
        "concat_rows",
        "slice_rows",
        "reshape",
        "softmax_rows",
        "layer_norm",
        "gelu",
        "log_sigmoid",
        "softplus",
        "abs",
        "sum",
        "mean",
        "conv2d",
        "max_pool2d",
        "spd_solve",
        "diag",
        "diag_embed",
    ]
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    Recip(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    LogSigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    SpdSolve {
        a: Var,
        b: Var,
        chol: Vec<f64>,
    },
    Diag(Var),
    DiagEmbed(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-assignment tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> GradError {
    GradError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

const LN_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An unnamed leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds the named parameter from `store`. Repeated calls with the same
    /// name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let (x, y) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = x[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &y[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, mk, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x [r, c] + b` with `b` holding `c` values, broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (r, c) = tx.dims2("add_row")?;
        if tb.len() != c {
            return Err(mismatch("add_row", tx, tb));
        }
        let mut out = tx.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += tb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::AddRow(x, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddConst(x))
    }

    /// Multiplies every entry of `x` by the one-element node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let rg = self.rg(x) || self.rg(s);
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * sv).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulScalar(x, s), rg))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    /// Stacks 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(GradError::ShapeMismatch {
            op: "concat_rows",
            lhs: vec![],
            rhs: vec![],
        })?;
        let (_, c) = self.value(*first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            let (r, cp) = tp.dims2("concat_rows")?;
            if cp != c {
                return Err(mismatch("concat_rows", self.value(*first), tp));
            }
            rows += r;
            out.extend_from_slice(tp.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2("slice_rows")?;
        if start > end || end > r {
            return Err(GradError::ShapeMismatch {
                op: "slice_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let out = tx.data()[start * c..end * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![end - start, c], out)?, Op::Slice(x, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap_or(&1);
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Per-row layer normalization of `x [r, c]` with learnable `gain`/`bias`
    /// of `c` entries each.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2("layer_norm")?;
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != c {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.len() != c {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let mut normed = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                normed[i * c + j] = xh;
                out[i * c + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            inv_std,
        };
        Ok(self.push(Tensor::new(vec![r, c], out)?, op, rg))
    }

    /// Exact GELU, `x Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * std_normal_cdf(v), Op::Gelu(x))
    }

    /// Natural-log sigmoid, `ln(1 / (1 + e^{-x}))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.min(0.0) - (-v.abs()).exp().ln_1p(),
            Op::LogSigmoid(x),
        )
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.max(0.0) + (-v.abs()).exp().ln_1p(),
            Op::Softplus(x),
        )
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `sum(a * b)`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Stride-1 2-D convolution. `x` is `[C, H, W]`, `w` is
    /// `[O, C, kh, kw]`, `b` has `O` entries; zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (c, h, wd) = match tx.shape() {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(mismatch("conv2d", tx, tw)),
        };
        let (o, kh, kw) = match tw.shape() {
            [o, c2, kh, kw] if *c2 == c => (*o, *kh, *kw),
            _ => return Err(mismatch("conv2d", tx, tw)),
        };
        if tb.len() != o || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d", tw, tb));
        }
        let ho = h + 2 * pad + 1 - kh;
        let wo = wd + 2 * pad + 1 - kw;
        let (xd, wdata) = (tx.data(), tw.data());
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = tb.data()[oc];
                    for ic in 0..c {
                        for u in 0..kh {
                            let ii = i + u;
                            if ii < pad || ii - pad >= h {
                                continue;
                            }
                            for v in 0..kw {
                                let jj = j + v;
                                if jj < pad || jj - pad >= wd {
                                    continue;
                                }
                                s += wdata[((oc * c + ic) * kh + u) * kw + v]
                                    * xd[(ic * h + ii - pad) * wd + jj - pad];
                            }
                        }
                    }
                    out[(oc * ho + i) * wo + j] = s;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let t = Tensor::new(vec![o, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, pad }, rg))
    }

    /// Non-overlapping `k x k` max pooling of `[C, H, W]`; partial windows at
    /// the bottom/right edges are kept (output is `ceil(H/k) x ceil(W/k)`).
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let tx = self.value(x);
        let (c, h, w) = match tx.shape() {
            [c, h, w] if k > 0 => (*c, *h, *w),
            _ => return Err(mismatch("max_pool2d", tx, tx)),
        };
        let ho = h.div_ceil(k);
        let wo = w.div_ceil(k);
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for u in (i * k)..((i + 1) * k).min(h) {
                        for v in (j * k)..((j + 1) * k).min(w) {
                            let idx = (ch * h + u) * w + v;
                            if tx.data()[idx] > best {
                                best = tx.data()[idx];
                                at = idx;
                            }
                        }
                    }
                    out[(ch * ho + i) * wo + j] = best;
                    argmax[(ch * ho + i) * wo + j] = at;
                }
            }
        }
        let rg = self.rg(x);
        let t = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Solves `sym(A) X = B` by Cholesky, where `sym(A) = (A + Aᵀ)/2`.
    pub fn spd_solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, n2) = ta.dims2("spd_solve")?;
        let (nb, k) = tb.dims2("spd_solve")?;
        if n != n2 || nb != n {
            return Err(mismatch("spd_solve", ta, tb));
        }
        let ad = ta.data();
        let mut sym = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = 0.5 * (ad[i * n + j] + ad[j * n + i]);
            }
        }
        let chol = linalg::cholesky(&sym, n)?;
        let mut x = tb.data().to_vec();
        linalg::cholesky_solve(&chol, n, &mut x, k);
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(vec![n, k], x)?;
        Ok(self.push(t, Op::SpdSolve { a, b, chol }, rg))
    }

    /// Diagonal of a square matrix as an `[n, 1]` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (n, n2) = ta.dims2("diag")?;
        if n != n2 {
            return Err(mismatch("diag", ta, ta));
        }
        let d = (0..n).map(|i| ta.data()[i * n + i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::column(d), Op::Diag(a), rg))
    }

    /// Square matrix with the entries of `v` on its diagonal.
    pub fn diag_embed(&mut self, v: Var) -> Var {
        let tv = self.value(v);
        let n = tv.len();
        let mut out = vec![0.0; n * n];
        for (i, &x) in tv.data().iter().enumerate() {
            out[i * n + i] = x;
        }
        let rg = self.rg(v);
        let t = Tensor::new(vec![n, n], out).expect("square");
        self.push(t, Op::DiagEmbed(v), rg)
    }

    /// Reverse pass from the scalar `root`. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        let root_t = &self.nodes[root.0].value;
        if root_t.len() != 1 {
            return Err(GradError::NotScalar(root_t.shape().to_vec()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) if nodes[i].requires_grad => g,
                other => {
                    grads[i] = other;
                    continue;
                }
            };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }

        let mut leaves = BTreeMap::new();
        for (i, (node, g)) in nodes.iter().zip(grads.iter_mut()).enumerate() {
            if let (Op::Leaf, true) = (&node.op, node.requires_grad) {
                let data = g.take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                let t = Tensor::new(node.value.shape().to_vec(), data)?;
                leaves.insert(Var(i), t);
            }
        }
        let mut params = BTreeMap::new();
        for (name, v) in self.params {
            if let Some(t) = leaves.get(&v) {
                params.insert(name, t.clone());
            }
        }
        Ok(Gradients { leaves, params })
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![0.0; node.value.len()])
            .as_mut_slice(),
    )
}

fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], factor: f64) {
    if let Some(s) = slot(nodes, grads, v) {
        for (a, b) in s.iter_mut().zip(g) {
            *a += factor * b;
        }
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (m, k) = val(*a).dims2("matmul").expect("2-D");
            let n = val(*b).dims2("matmul").expect("2-D").1;
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bd[p * n + j];
                        }
                        da[i * k + p] += s;
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for i in 0..m {
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            add_into(nodes, grads, *a, g, 1.0);
            add_into(nodes, grads, *b, g, 1.0);
        }
        Op::Sub(a, b) => {
            add_into(nodes, grads, *a, g, 1.0);
            add_into(nodes, grads, *b, g, -1.0);
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bd) {
                    *d += gi * bi;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(ad) {
                    *d += gi * ai;
                }
            }
        }
        Op::AddRow(x, b) => {
            add_into(nodes, grads, *x, g, 1.0);
            let c = val(*b).len();
            if let Some(db) = slot(nodes, grads, *b) {
                for row in g.chunks(c) {
                    for (d, gi) in db.iter_mut().zip(row) {
                        *d += gi;
                    }
                }
            }
        }
        Op::Scale(x, f) => add_into(nodes, grads, *x, g, *f),
        Op::AddConst(x) | Op::Reshape(x) => add_into(nodes, grads, *x, g, 1.0),
        Op::MulScalar(x, s) => {
            let sv = val(*s).data()[0];
            add_into(nodes, grads, *x, g, sv);
            let xd = val(*x).data();
            if let Some(ds) = slot(nodes, grads, *s) {
                ds[0] += g.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Op::Recip(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d -= gi * y * y;
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = val(*x).dims2("transpose").expect("2-D");
            if let Some(dx) = slot(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).len();
                add_into(nodes, grads, *p, &g[offset..offset + len], 1.0);
                offset += len;
            }
        }
        Op::Slice(x, start) => {
            let c = val(*x).dims2("slice_rows").expect("2-D").1;
            if let Some(dx) = slot(nodes, grads, *x) {
                let base = start * c;
                for (k, gi) in g.iter().enumerate() {
                    dx[base + k] += gi;
                }
            }
        }
        Op::Softmax(x) => {
            let c = *out.shape().last().unwrap_or(&1);
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((dr, gr), yr) in dx
                    .chunks_mut(c.max(1))
                    .zip(g.chunks(c.max(1)))
                    .zip(out.data().chunks(c.max(1)))
                {
                    let dotp: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += yi * (gi - dotp);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            inv_std,
        } => {
            let c = val(*gain).len();
            let gd = val(*gain).data().to_vec();
            if let Some(dg) = slot(nodes, grads, *gain) {
                for (row_g, row_n) in g.chunks(c).zip(normed.chunks(c)) {
                    for j in 0..c {
                        dg[j] += row_g[j] * row_n[j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for row_g in g.chunks(c) {
                    for j in 0..c {
                        db[j] += row_g[j];
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let mut dxh = vec![0.0; c];
                for (r, (row_g, row_n)) in g.chunks(c).zip(normed.chunks(c)).enumerate() {
                    for j in 0..c {
                        dxh[j] = row_g[j] * gd[j];
                    }
                    let m1 = dxh.iter().sum::<f64>() / c as f64;
                    let m2 = dxh.iter().zip(row_n).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] += inv_std[r] * (dxh[j] - m1 - row_n[j] * m2);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xd = val(*x).data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), &v) in dx.iter_mut().zip(g).zip(xd) {
                    *d += gi * (std_normal_cdf(v) + v * std_normal_pdf(v));
                }
            }
        }
        Op::LogSigmoid(x) => {
            let xd = val(*x).data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), &v) in dx.iter_mut().zip(g).zip(xd) {
                    *d += gi * sigmoid(-v);
                }
            }
        }
        Op::Softplus(x) => {
            let xd = val(*x).data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), &v) in dx.iter_mut().zip(g).zip(xd) {
                    *d += gi * sigmoid(v);
                }
            }
        }
        Op::Abs(x) => {
            let xd = val(*x).data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), &v) in dx.iter_mut().zip(g).zip(xd) {
                    let s = if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *d += gi * s;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::Conv2d { x, w, b, pad } => {
            let (tx, tw) = (val(*x), val(*w));
            let (c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let (o, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
            let (ho, wo) = (out.shape()[1], out.shape()[2]);
            let pad = *pad;
            if let Some(db) = slot(nodes, grads, *b) {
                for oc in 0..o {
                    db[oc] += g[oc * ho * wo..(oc + 1) * ho * wo].iter().sum::<f64>();
                }
            }
            let each = |f: &mut dyn FnMut(usize, usize, f64)| {
                for oc in 0..o {
                    for i in 0..ho {
                        for j in 0..wo {
                            let gv = g[(oc * ho + i) * wo + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for ic in 0..c {
                                for u in 0..kh {
                                    let ii = i + u;
                                    if ii < pad || ii - pad >= h {
                                        continue;
                                    }
                                    for v in 0..kw {
                                        let jj = j + v;
                                        if jj < pad || jj - pad >= wd {
                                            continue;
                                        }
                                        let widx = ((oc * c + ic) * kh + u) * kw + v;
                                        let xidx = (ic * h + ii - pad) * wd + jj - pad;
                                        f(widx, xidx, gv);
                                    }
                                }
                            }
                        }
                    }
                }
            };
            let (xd, wdata) = (tx.data(), tw.data());
            if let Some(dw) = slot(nodes, grads, *w) {
                each(&mut |widx, xidx, gv| dw[widx] += gv * xd[xidx]);
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                each(&mut |widx, xidx, gv| dx[xidx] += gv * wdata[widx]);
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (gi, &at) in g.iter().zip(argmax) {
                    dx[at] += gi;
                }
            }
        }
        Op::SpdSolve { a, b, chol } => {
            let (n, k) = out.dims2("spd_solve").expect("2-D");
            let mut gb = g.to_vec();
            linalg::cholesky_solve(chol, n, &mut gb, k);
            add_into(nodes, grads, *b, &gb, 1.0);
            let xd = out.data();
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..n {
                    for j in 0..n {
                        let mut s_ij = 0.0;
                        let mut s_ji = 0.0;
                        for c in 0..k {
                            s_ij += gb[i * k + c] * xd[j * k + c];
                            s_ji += gb[j * k + c] * xd[i * k + c];
                        }
                        da[i * n + j] -= 0.5 * (s_ij + s_ji);
                    }
                }
            }
        }
        Op::Diag(a) => {
            let n = out.len();
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..n {
                    da[i * n + i] += g[i];
                }
            }
        }
        Op::DiagEmbed(v) => {
            let n = val(*v).len();
            if let Some(dv) = slot(nodes, grads, *v) {
                for i in 0..n {
                    dv[i] += g[i * n + i];
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    leaves: BTreeMap<Var, Tensor>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Graph::leaf`] or [`Graph::param`].
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}
