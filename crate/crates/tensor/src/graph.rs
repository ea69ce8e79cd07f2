use std::fmt;

use crate::error::TensorError;
use crate::tensor::Tensor;
use crate::Result;

/// Handle to a value stored in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this crate.
///
/// The caller computes the forward value itself and hands it to
/// [`Graph::custom`]; the graph only needs the local gradient rule.
pub trait CustomOp: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one entry per input: the gradient of the root with respect to
    /// that input, or `None` when the input receives no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    FloorLog(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, Axis),
    LogSoftmax(Var, Axis),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        start: usize,
        src_len: usize,
        outer: usize,
        inner: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

/// Strided view of one axis: `outer` blocks of `len` entries spaced `inner` apart.
#[derive(Clone, Copy, Debug)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize) -> Self {
        Axis {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    fn for_each_lane(&self, mut f: impl FnMut(usize)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                f(o * self.len * self.inner + i);
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf that requires it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Operation tape. Nodes are appended in construction order, which is also
/// a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

fn row_dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Bcast> {
    if lhs == rhs {
        Ok(Bcast::Same)
    } else if rhs.iter().product::<usize>() == 1 {
        Ok(Bcast::Scalar)
    } else if rhs.len() == 1 && lhs.len() == 2 && lhs[1] == rhs[0] {
        Ok(Bcast::Row)
    } else {
        Err(TensorError::shape(
            op,
            format!("cannot combine {lhs:?} with {rhs:?}"),
        ))
    }
}

fn rhs_at(rhs: &[f64], bcast: Bcast, idx: usize) -> f64 {
    match bcast {
        Bcast::Same => rhs[idx],
        Bcast::Scalar => rhs[0],
        Bcast::Row => rhs[idx % rhs.len()],
    }
}

fn reduce_to_rhs(grad: &[f64], bcast: Bcast, rhs_len: usize) -> Vec<f64> {
    match bcast {
        Bcast::Same => grad.to_vec(),
        Bcast::Scalar => vec![grad.iter().sum()],
        Bcast::Row => {
            let mut out = vec![0.0; rhs_len];
            for (i, g) in grad.iter().enumerate() {
                out[i % rhs_len] += g;
            }
            out
        }
    }
}

/// `a[m,k] * b[k,n]`
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a[m,k] * b[n,k]^T`
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a[k,m]^T * b[k,n]`
fn matmul_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn softmax_lanes(x: &[f64], ax: Axis, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    ax.for_each_lane(|base| {
        let at = |j: usize| base + j * ax.inner;
        let max = (0..ax.len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..ax.len {
            let e = (x[at(j)] - max).exp();
            out[at(j)] = e;
            total += e;
        }
        if log {
            let lse = max + total.ln();
            for j in 0..ax.len {
                out[at(j)] = x[at(j)] - lse;
            }
        } else {
            for j in 0..ax.len {
                out[at(j)] /= total;
            }
        }
    });
    out
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

    /// Drops every node and re-arms [`Graph::backward`].
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Leaf node; tracked when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.push(t, Op::Leaf, tracked)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let tracked = self.tracked(&[x]);
        self.push(value, op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), tracked))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bcast = row_dims(name, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, rhs_at(bv.data(), bcast, i)))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, make(a, b, bcast), tracked))
    }

    /// Elementwise sum; `b` may be a scalar or a row vector over matrix `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// `ln(max(x, floor))`; gradient is zero below the floor.
    pub fn floor_log(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor).ln(), Op::FloorLog(x, floor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<Axis> {
        let shape = self.shape(x);
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::shape(
                op,
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        Ok(Axis::of(shape, axis))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ax = self.check_axis("softmax", x, axis)?;
        let data = softmax_lanes(self.value(x).data(), ax, false);
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Softmax(x, ax), tracked))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ax = self.check_axis("log_softmax", x, axis)?;
        let data = softmax_lanes(self.value(x).data(), ax, true);
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x, ax), tracked))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| TensorError::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::shape(
                "layer_norm",
                format!(
                    "affine params {:?}/{:?} do not match feature dim {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / d.max(1);
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let tracked = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::shape(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &sz) in parts.iter().zip(&sizes) {
                let src = self.value(*p).data();
                data.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let tracked = self.tracked(parts);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                sizes,
                outer,
                inner,
            },
            tracked,
        ))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(TensorError::shape(
                "slice",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src_len = shape[axis];
        let len = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * src_len + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice {
                x,
                start,
                src_len,
                outer,
                inner,
            },
            tracked,
        ))
    }

    /// 1D convolution over time.
    ///
    /// `x` is `[n, c_in]`, `w` is `[kernel, c_in, c_out]`, `b` is `[c_out]`.
    /// Zero padding of `padding` frames is applied on both sides.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, cin) = self.value(x).dims2()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin {
            return Err(TensorError::shape(
                "conv1d",
                format!("weight {ws:?} does not fit input channels {cin}"),
            ));
        }
        let (k, cout) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::shape(
                    "conv1d",
                    format!("bias {:?} vs {cout} output channels", self.shape(b)),
                ));
            }
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv1d", "stride must be positive"));
        }
        if n + 2 * padding < k {
            return Err(TensorError::shape(
                "conv1d",
                format!("input length {n} (+2x{padding} padding) shorter than kernel {k}"),
            ));
        }
        let n_out = (n + 2 * padding - k) / stride + 1;
        let xs = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; n_out * cout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for t in 0..n_out {
                out[t * cout..(t + 1) * cout].copy_from_slice(bd);
            }
        }
        for t in 0..n_out {
            let orow = &mut out[t * cout..(t + 1) * cout];
            for kk in 0..k {
                let src = (t * stride + kk) as isize - padding as isize;
                if src < 0 || src as usize >= n {
                    continue;
                }
                let xrow = &xs[src as usize * cin..(src as usize + 1) * cin];
                for (c, &xv) in xrow.iter().enumerate() {
                    let wrow = &wd[(kk * cin + c) * cout..(kk * cin + c + 1) * cout];
                    for (o, wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let tracked = self.tracked(&inputs);
        Ok(self.push(
            Tensor::new(vec![n_out, cout], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(TensorError::invalid("mean", "empty tensor"));
        }
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())
            .map_err(|_| {
                TensorError::shape(
                    "reshape",
                    format!("{:?} -> {shape:?}", self.shape(x)),
                )
            })?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Selects rows of a `[rows, cols]` table (embedding lookup). A rank-1
    /// table is treated as a single column.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let (rows, cols) = match shape.as_slice() {
            [r] => (*r, 1),
            [r, c] => (*r, *c),
            _ => {
                return Err(TensorError::shape(
                    "gather_rows",
                    format!("table must be rank 1 or 2, got {shape:?}"),
                ))
            }
        };
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let out_shape = if shape.len() == 1 {
            vec![idx.len()]
        } else {
            vec![idx.len(), cols]
        };
        let tracked = self.tracked(&[table]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::GatherRows(table, idx.to_vec()),
            tracked,
        ))
    }

    /// `out[i, j] = x[i, idx[j]]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if let Some(bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(TensorError::invalid(
                "gather_cols",
                format!("column {bad} out of range for {cols} columns"),
            ));
        }
        let src = self.value(x).data();
        let m = idx.len();
        let mut data = vec![0.0; rows * m];
        for i in 0..rows {
            for (j, &c) in idx.iter().enumerate() {
                data[i * m + j] = src[i * cols + c];
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, m], data)?,
            Op::GatherCols(x, idx.to_vec()),
            tracked,
        ))
    }

    /// Records an externally computed value together with its gradient rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let tracked = self.tracked(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), op), tracked)
    }

    /// Reverse pass from a scalar root. Runs at most once per graph.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::BackwardConsumed);
        }
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].tracked {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads)?;
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if node.tracked && matches!(node.op, Op::Leaf) {
                    let shape = node.value.shape().to_vec();
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Some(Tensor::new(shape, data).expect("gradient shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2()?;
                let (_, n) = self.nodes[b.0].value.dims2()?;
                acc(*a, matmul_a_bt(g, val(*b), m, n, k));
                acc(*b, matmul_at_b(val(*a), g, m, k, n));
            }
            Op::Add(a, b, bc) => {
                acc(*a, g.to_vec());
                acc(*b, reduce_to_rhs(g, *bc, val(*b).len()));
            }
            Op::Sub(a, b, bc) => {
                acc(*a, g.to_vec());
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(*b, reduce_to_rhs(&neg, *bc, val(*b).len()));
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * rhs_at(bv, *bc, i))
                    .collect();
                let gb_full: Vec<f64> = g.iter().zip(av).map(|(gi, x)| gi * x).collect();
                acc(*a, ga);
                acc(*b, reduce_to_rhs(&gb_full, *bc, bv.len()));
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Exp(x) => acc(*x, g.iter().zip(out).map(|(gi, y)| gi * y).collect()),
            Op::Log(x) => acc(*x, g.iter().zip(val(*x)).map(|(gi, x)| gi / x).collect()),
            Op::FloorLog(x, floor) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gi, &x)| if x > *floor { gi / x } else { 0.0 })
                    .collect(),
            ),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect(),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y)).collect(),
            ),
            Op::Tanh(x) => acc(
                *x,
                g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect(),
            ),
            Op::Softmax(x, ax) => {
                let mut dx = vec![0.0; g.len()];
                ax.for_each_lane(|base| {
                    let at = |j: usize| base + j * ax.inner;
                    let dot: f64 = (0..ax.len).map(|j| g[at(j)] * out[at(j)]).sum();
                    for j in 0..ax.len {
                        dx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                    }
                });
                acc(*x, dx);
            }
            Op::LogSoftmax(x, ax) => {
                let mut dx = vec![0.0; g.len()];
                ax.for_each_lane(|base| {
                    let at = |j: usize| base + j * ax.inner;
                    let total: f64 = (0..ax.len).map(|j| g[at(j)]).sum();
                    for j in 0..ax.len {
                        dx[at(j)] = g[at(j)] - out[at(j)].exp() * total;
                    }
                });
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = val(*gamma);
                let d = gam.len();
                let rows = g.len() / d;
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Concat {
                parts,
                sizes,
                outer,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (p, &sz) in parts.iter().zip(sizes) {
                    let mut d = Vec::with_capacity(outer * sz * inner);
                    for o in 0..*outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + sz * inner]);
                    }
                    acc(*p, d);
                    offset += sz;
                }
            }
            Op::Slice {
                x,
                start,
                src_len,
                outer,
                inner,
            } => {
                let len = g.len() / (outer * inner).max(1);
                let mut dx = vec![0.0; outer * src_len * inner];
                for o in 0..*outer {
                    let dst = (o * src_len + start) * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, dx);
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (n, cin) = self.nodes[x.0].value.dims2()?;
                let ws = self.nodes[w.0].value.shape();
                let (k, cout) = (ws[0], ws[2]);
                let n_out = g.len() / cout;
                let (xs, wd) = (val(*x), val(*w));
                let mut dx = vec![0.0; n * cin];
                let mut dw = vec![0.0; wd.len()];
                for t in 0..n_out {
                    let grow = &g[t * cout..(t + 1) * cout];
                    for kk in 0..k {
                        let src = (t * stride + kk) as isize - *padding as isize;
                        if src < 0 || src as usize >= n {
                            continue;
                        }
                        let s = src as usize;
                        for c in 0..cin {
                            let wi = (kk * cin + c) * cout;
                            let wrow = &wd[wi..wi + cout];
                            let xv = xs[s * cin + c];
                            let mut dot = 0.0;
                            for o in 0..cout {
                                dot += grow[o] * wrow[o];
                                dw[wi + o] += xv * grow[o];
                            }
                            dx[s * cin + c] += dot;
                        }
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    let mut db = vec![0.0; cout];
                    for t in 0..n_out {
                        for o in 0..cout {
                            db[o] += g[t * cout + o];
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::Transpose(x) => {
                let (r, c) = self.nodes[x.0].value.dims2()?;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::GatherRows(table, idx) => {
                let src_len = val(*table).len();
                let cols = if idx.is_empty() { 1 } else { g.len() / idx.len() };
                let mut dt = vec![0.0; src_len];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dt[i * cols + c] += g[r * cols + c];
                    }
                }
                acc(*table, dt);
            }
            Op::GatherCols(x, idx) => {
                let (rows, cols) = self.nodes[x.0].value.dims2()?;
                let m = idx.len();
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    for (j, &c) in idx.iter().enumerate() {
                        dx[i * cols + c] += g[i * m + j];
                    }
                }
                acc(*x, dx);
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gout = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let local = op.backward(&ins, &node.value, &gout);
                if local.len() != inputs.len() {
                    return Err(TensorError::invalid(
                        "custom",
                        format!(
                            "{} returned {} gradients for {} inputs",
                            op.name(),
                            local.len(),
                            inputs.len()
                        ),
                    ));
                }
                for (v, gi) in inputs.iter().zip(local) {
                    if let Some(gi) = gi {
                        acc(*v, gi.into_data());
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
        g.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_grad())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y).data(), g.value(a).data());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn second_backward_needs_reset() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1], &[3.0]);
        let y = g.sum(x);
        g.backward(y).unwrap();
        assert_eq!(g.backward(y).unwrap_err(), TensorError::BackwardConsumed);
        g.reset();
        let x = leaf(&mut g, &[1], &[3.0]);
        let y = g.sum(x);
        assert!(g.backward(y).is_ok());
    }

    #[test]
    fn constant_root_gives_zero_gradients() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[1.0, -2.0, 0.5]);
        let c = g.scalar(7.0);
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn untracked_ops_are_not_recorded() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.exp(a);
        assert!(!g.requires_grad(b));
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        let y = g.mul(x, b).unwrap();
        assert!(g.requires_grad(y));
    }

    #[test]
    fn row_broadcast_reduces_over_rows() {
        let mut g = Graph::new();
        let m = leaf(&mut g, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let r = leaf(&mut g, &[2], &[10.0, 20.0]);
        let y = g.add(m, r).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(r).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn conv1d_same_padding_keeps_length() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let w = g.constant(Tensor::new(vec![3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap());
        let y = g.conv1d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 1]);
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn softmax_along_columns() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }
}
