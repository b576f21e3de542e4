use super::tensor::{check_temperature, softmax_rows, Tensor};
use crate::error::{dim_err, Error, Result};

/// Lower clamp applied to probabilities before taking their logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Softmax(Var, f64),
    CrossEntropy(Tensor, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward sweep is a single reverse pass. Leaves created with
/// [`Tape::constant`] never receive gradients and nothing upstream of them
/// is differentiated.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is a constant or does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = op(a)·op(b) + beta·c` with `op(a)` of size m×k and `op(b)` of size k×n.
/// `ta` means `a` is stored as k×m; `tb` means `b` is stored as n×k.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every strided access for the given dims.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn permuted_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

/// Data of `x` with axes reordered so output axis `i` is input axis `perm[i]`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape = permuted_shape(shape, perm);
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Copy of the value with no connection to the tape (stop-gradient).
    pub fn detach(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Adds a vector `b[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(b) != [n] {
            return dim_err(format!(
                "bias {:?} does not match last axis of {:?}",
                self.shape(b),
                self.shape(x)
            ));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// Matrix product of `[m, k]·[k, n]`, or batched `[B, m, k]·[B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([ba, m, k], [bb, k2, n]) if k == k2 && ba == bb => (*ba, *m, *k, *n),
            _ => return dim_err(format!("matmul of {sa:?} and {sb:?}")),
        };
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..],
                false,
                &db[i * k * n..],
                false,
                &mut out[i * m * n..],
                0.0,
            );
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Softmax of `x / temperature` along the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let out = self.value(x).softmax(temperature)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x, temperature), rg))
    }

    /// `-Σ p log max(q, ε)` along the last axis. `p` is a detached target;
    /// gradients flow into `q` only. Output drops the last axis.
    pub fn cross_entropy(&mut self, p: &Tensor, q: Var) -> Result<Var> {
        let qv = self.value(q);
        if p.shape() != qv.shape() || qv.rank() == 0 {
            return dim_err(format!(
                "cross entropy of {:?} and {:?}",
                p.shape(),
                qv.shape()
            ));
        }
        let out: Vec<f64> = p
            .rows()
            .zip(qv.rows())
            .map(|(pr, qr)| {
                -pr.iter()
                    .zip(qr)
                    .map(|(&pk, &qk)| pk * qk.max(LOG_EPS).ln())
                    .sum::<f64>()
            })
            .collect();
        let shape = qv.shape()[..qv.rank() - 1].to_vec();
        let rg = self.rg(q);
        Ok(self.push(Tensor::new(shape, out)?, Op::CrossEntropy(p.clone(), q), rg))
    }

    /// Normalizes each row over the last axis, then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return dim_err("layer norm affine parameters do not match last axis");
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.numel() / d.max(1));
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.rows() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Maximum along `axis`; the axis is removed. Ties go to the first index.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || xv.shape()[axis] == 0 {
            return dim_err(format!("max over axis {axis} of {:?}", xv.shape()));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let data = xv.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * len * inner;
            for j in 0..inner {
                let mut best = base + j;
                for i in 1..len {
                    let idx = base + i * inner + j;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxAxis { x, argmax }, rg))
    }

    /// Mean along `axis`; the axis is removed.
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || xv.shape()[axis] == 0 {
            return dim_err(format!("mean over axis {axis} of {:?}", xv.shape()));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let data = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let src = &data[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, axis }, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return dim_err("concat of zero tensors"),
        };
        if axis >= first.len() {
            return dim_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return dim_err(format!("concat of {first:?} and {s:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let block = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || start >= end || end > xv.shape()[axis] {
            return dim_err(format!(
                "slice {start}..{end} on axis {axis} of {:?}",
                xv.shape()
            ));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let width = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + width]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return dim_err(format!("invalid permutation {perm:?} for {shape:?}"));
        }
        let out = permute_data(self.value(x).data(), &shape, perm);
        let out = Tensor::new(permuted_shape(&shape, perm), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return dim_err("transpose needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(root.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, gd));
                self.acc(grads, *b, |buf| add_into(buf, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, gd));
                self.acc(grads, *b, |buf| {
                    buf.iter_mut().zip(gd).for_each(|(o, g)| *o -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |buf| {
                    for ((o, g), y) in buf.iter_mut().zip(gd).zip(bv) {
                        *o += g * y;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((o, g), x) in buf.iter_mut().zip(gd).zip(av) {
                        *o += g * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |buf| {
                    buf.iter_mut().zip(gd).for_each(|(o, g)| *o += s * g)
                });
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |buf| add_into(buf, gd));
                let n = g.last_dim();
                self.acc(grads, *b, |buf| {
                    for row in gd.chunks(n) {
                        add_into(buf, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let sa = av.shape();
                let (batch, m, k) = if sa.len() == 2 {
                    (1, sa[0], sa[1])
                } else {
                    (sa[0], sa[1], sa[2])
                };
                let n = bv.last_dim();
                self.acc(grads, *a, |buf| {
                    for i in 0..batch {
                        // dA = G·Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..],
                            false,
                            &bv.data()[i * k * n..],
                            true,
                            &mut buf[i * m * k..],
                            1.0,
                        );
                    }
                });
                self.acc(grads, *b, |buf| {
                    for i in 0..batch {
                        // dB = Aᵀ·G
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[i * m * k..],
                            true,
                            &gd[i * m * n..],
                            false,
                            &mut buf[i * k * n..],
                            1.0,
                        );
                    }
                });
            }
            Op::Softmax(x, t) => {
                let y = &node.value;
                let k = y.last_dim();
                self.acc(grads, *x, |buf| {
                    for ((o, yr), gr) in buf.chunks_mut(k).zip(y.rows()).zip(gd.chunks(k)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot) / t;
                        }
                    }
                });
            }
            Op::CrossEntropy(p, q) => {
                let qv = self.value(*q);
                let k = qv.last_dim();
                self.acc(grads, *q, |buf| {
                    for (((o, pr), qr), gv) in
                        buf.chunks_mut(k).zip(p.rows()).zip(qv.rows()).zip(gd)
                    {
                        for ((o, pk), qk) in o.iter_mut().zip(pr).zip(qr) {
                            if *qk > LOG_EPS {
                                *o -= gv * pk / qk;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = g.last_dim();
                let gain_v = self.value(*gain).data();
                self.acc(grads, *x, |buf| {
                    let mut gy = vec![0.0; d];
                    for (r, ((o, gr), hr)) in buf
                        .chunks_mut(d)
                        .zip(gd.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            gy[j] = gr[j] * gain_v[j];
                        }
                        let mean_g = gy.iter().sum::<f64>() / d as f64;
                        let mean_gh = gy.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            o[j] += rstd[r] * (gy[j] - mean_g - hr[j] * mean_gh);
                        }
                    }
                });
                self.acc(grads, *gain, |buf| {
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, gv), h) in buf.iter_mut().zip(gr).zip(hr) {
                            *o += gv * h;
                        }
                    }
                });
                self.acc(grads, *bias, |buf| {
                    for gr in gd.chunks(d) {
                        add_into(buf, gr);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |buf| {
                    for ((o, gv), xv) in buf.iter_mut().zip(gd).zip(xv) {
                        *o += gv * gelu_grad(*xv);
                    }
                });
            }
            Op::MaxAxis { x, argmax } => {
                self.acc(grads, *x, |buf| {
                    for (gv, &idx) in gd.iter().zip(argmax) {
                        buf[idx] += gv;
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis(shape, *axis);
                self.acc(grads, *x, |buf| {
                    let s = 1.0 / len as f64;
                    for o in 0..outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for i in 0..len {
                            let dst = &mut buf[(o * len + i) * inner..(o * len + i + 1) * inner];
                            for (d, gv) in dst.iter_mut().zip(src) {
                                *d += gv * s;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = gd[0];
                self.acc(grads, *x, |buf| buf.iter_mut().for_each(|o| *o += gv));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.acc(grads, p, |buf| {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..][..len * inner];
                            add_into(&mut buf[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let width = node.value.shape()[*axis] * inner;
                self.acc(grads, *x, |buf| {
                    for o in 0..outer {
                        let base = (o * len + start) * inner;
                        add_into(
                            &mut buf[base..base + width],
                            &gd[o * width..(o + 1) * width],
                        );
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(gd, g.shape(), &inverse);
                self.acc(grads, *x, |buf| add_into(buf, &back));
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |buf| add_into(buf, gd));
            }
        }
    }

    /// Runs `f` on the gradient buffer of `v`, creating it zeroed on first use.
    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(buf.data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Softmax helper exposed for callers holding raw row buffers.
pub fn softmax_in_place(data: &mut [f64], width: usize, temperature: f64) -> Result<()> {
    check_temperature(temperature)?;
    softmax_rows(data, width, temperature);
    Ok(())
}
