use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{gelu_grad_scalar, gelu_scalar, Tensor};
use crate::error::{Error, Result};

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
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias-style broadcast).
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x * s` with `s` a one-element tensor.
    ScaleBy(Var, Var),
    Reshape(Var),
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis_view: [usize; 3],
        start: usize,
        len: usize,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        da: usize,
        db: usize,
        inner: usize,
    },
    Broadcast(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    L2Normalize {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis_view: [usize; 3],
    },
    Pick {
        x: Var,
        index: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records a computation for reverse-mode differentiation.
///
/// The tape is rebuilt for every forward pass; node values are never
/// mutated once recorded.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn last_axis(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

/// Views `shape` as `[outer, shape[axis], inner]`.
fn axis_view(shape: &[usize], axis: usize) -> [usize; 3] {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    [outer, shape[axis], inner]
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} invalid for shape {shape:?}")));
    }
    Ok(())
}

/// For each linear index of the permuted output, the linear index it reads in the input.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut coord = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for d in (0..rank).rev() {
            coord[d] += 1;
            src += out_strides[d];
            if coord[d] < out_shape[d] {
                break;
            }
            src -= out_strides[d] * out_shape[d];
            coord[d] = 0;
        }
    }
    map
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
        debug_assert!(value.data().iter().all(|v| !v.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let grad = Some(Tensor::zeros(value.shape()));
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].grad = grad;
        v
    }

    /// Registers a constant leaf; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().fill(0.0);
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched matmul of `[B, m, k]` by `[B, k, n]`, or by `[B, n, k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape(format!(
                "batch_matmul {sa:?} x {sb:?} (trans_b = {trans_b})"
            )));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let a_i = &av[i * m * k..(i + 1) * m * k];
            let b_i = &bv[i * k * n..(i + 1) * k * n];
            let o_i = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(a_i, b_i, o_i, m, k, n);
            } else {
                gemm_nn(a_i, b_i, o_i, m, k, n);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    /// Elementwise sum; `b` may have a shape equal to a trailing suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("add {sa:?} + {sb:?}")));
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % nb])
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Add(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(format!(
                "scale_by needs a scalar, got {:?}",
                self.shape(s)
            )));
        }
        let factor = self.value(s).data()[0];
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleBy(x, s), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(format!("permutation {perm:?} for shape {shape:?}")));
        }
        let map = permute_map(&shape, perm);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Permute { x, map }, rg))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        if start + len > shape[axis] || len == 0 {
            return Err(Error::shape(format!(
                "narrow {start}..{} of axis {axis} in {shape:?}",
                start + len
            )));
        }
        let view = axis_view(&shape, axis);
        let [outer, dim, inner] = view;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Narrow {
                x,
                axis_view: view,
                start,
                len,
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        check_axis(&sa, axis)?;
        let compatible = sa.len() == sb.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape(format!("concat {sa:?} with {sb:?} on axis {axis}")));
        }
        let [outer, da, inner] = axis_view(&sa, axis);
        let db = sb[axis];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            data.extend_from_slice(&av[o * da * inner..(o + 1) * da * inner]);
            data.extend_from_slice(&bv[o * db * inner..(o + 1) * db * inner]);
        }
        let mut shape = sa;
        shape[axis] = da + db;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                a,
                b,
                outer,
                da,
                db,
                inner,
            },
            rg,
        ))
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn broadcast(&mut self, x: Var, n: usize) -> Var {
        let t = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let data = t.data().repeat(n);
        let value = Tensor::new(&shape, data).expect("consistent");
        let rg = self.rg(x);
        self.push(value, Op::Broadcast(x), rg)
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let width = last_axis(t.shape());
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let width = last_axis(t.shape());
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let width = last_axis(self.shape(x));
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(Error::shape(format!(
                "layer_norm over width {width} with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let t = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.numel() / width;
        let mut xhat = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(width) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Divides each last-axis row by `max(|row|, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let width = last_axis(t.shape());
        let mut norms = Vec::with_capacity(t.numel() / width);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(width) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let r = n.max(eps);
            for v in row.iter_mut() {
                *v /= r;
            }
        }
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::L2Normalize { x, eps, norms }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let total = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Mean(x), rg)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        let view = axis_view(&shape, axis);
        let [outer, dim, inner] = view;
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        for v in &mut data {
            *v /= dim as f64;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::MeanAxis { x, axis_view: view },
            rg,
        ))
    }

    /// Gathers `x[i, index[i]]` from a `[N, C]` tensor.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] != index.len() {
            return Err(Error::shape(format!(
                "pick {} indices from {shape:?}",
                index.len()
            )));
        }
        let cols = shape[1];
        if let Some(&bad) = index.iter().find(|&&c| c >= cols) {
            return Err(Error::OutOfRange {
                index: bad,
                limit: cols,
            });
        }
        let src = self.value(x).data();
        let data = index
            .iter()
            .enumerate()
            .map(|(i, &c)| src[i * cols + c])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[index.len()], data)?,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates from a one-element root, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                adj[id] = Some(g);
                continue;
            }
            let nodes = &self.nodes;
            let needs = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| nodes[v.0].value.data();
            let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
                if !needs(v) {
                    return;
                }
                let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    acc(*a, &|ga| gemm_nt(&g, val(*b), ga, m, n, k));
                    acc(*b, &|gb| gemm_tn(val(*a), &g, gb, k, m, n));
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let sa = nodes[a.0].value.shape();
                    let out = node.value.shape();
                    let (batch, m, k, n) = (sa[0], sa[1], sa[2], out[2]);
                    let (av, bv) = (val(*a), val(*b));
                    acc(*a, &|ga| {
                        for i in 0..batch {
                            let g_i = &g[i * m * n..(i + 1) * m * n];
                            let b_i = &bv[i * k * n..(i + 1) * k * n];
                            let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                            if *trans_b {
                                gemm_nn(g_i, b_i, ga_i, m, n, k);
                            } else {
                                gemm_nt(g_i, b_i, ga_i, m, n, k);
                            }
                        }
                    });
                    acc(*b, &|gb| {
                        for i in 0..batch {
                            let g_i = &g[i * m * n..(i + 1) * m * n];
                            let a_i = &av[i * m * k..(i + 1) * m * k];
                            let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                gemm_tn(g_i, a_i, gb_i, n, m, k);
                            } else {
                                gemm_tn(a_i, g_i, gb_i, k, m, n);
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &|ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &|gb| {
                        let nb = gb.len();
                        for (i, y) in g.iter().enumerate() {
                            gb[i % nb] += y;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    acc(*a, &|ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &|gb| gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(*a, &|ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    });
                    acc(*b, &|gb| {
                        for i in 0..gb.len() {
                            gb[i] += g[i] * av[i];
                        }
                    });
                }
                Op::Scale(x, factor) => {
                    acc(*x, &|gx| {
                        gx.iter_mut().zip(&g).for_each(|(a, y)| *a += factor * y)
                    });
                }
                Op::ScaleBy(x, s) => {
                    let factor = val(*s)[0];
                    let xv = val(*x);
                    acc(*x, &|gx| {
                        gx.iter_mut().zip(&g).for_each(|(a, y)| *a += factor * y)
                    });
                    acc(*s, &|gs| {
                        gs[0] += g.iter().zip(xv).map(|(y, v)| y * v).sum::<f64>()
                    });
                }
                Op::Reshape(x) | Op::Broadcast(x) => {
                    acc(*x, &|gx| {
                        let n = gx.len();
                        for (i, y) in g.iter().enumerate() {
                            gx[i % n] += y;
                        }
                    });
                }
                Op::Permute { x, map } => {
                    acc(*x, &|gx| {
                        for (o, &i) in map.iter().enumerate() {
                            gx[i] += g[o];
                        }
                    });
                }
                Op::Narrow {
                    x,
                    axis_view,
                    start,
                    len,
                } => {
                    let [outer, dim, inner] = *axis_view;
                    acc(*x, &|gx| {
                        for o in 0..outer {
                            let dst = o * dim * inner + start * inner;
                            let src = o * len * inner;
                            for i in 0..len * inner {
                                gx[dst + i] += g[src + i];
                            }
                        }
                    });
                }
                Op::Concat {
                    a,
                    b,
                    outer,
                    da,
                    db,
                    inner,
                } => {
                    let (outer, da, db, inner) = (*outer, *da, *db, *inner);
                    let total = (da + db) * inner;
                    acc(*a, &|ga| {
                        for o in 0..outer {
                            for i in 0..da * inner {
                                ga[o * da * inner + i] += g[o * total + i];
                            }
                        }
                    });
                    acc(*b, &|gb| {
                        for o in 0..outer {
                            for i in 0..db * inner {
                                gb[o * db * inner + i] += g[o * total + da * inner + i];
                            }
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let width = last_axis(node.value.shape());
                    acc(*x, &|gx| {
                        for r in 0..y.len() / width {
                            let span = r * width..(r + 1) * width;
                            let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for (j, out) in gx[span].iter_mut().enumerate() {
                                *out += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.data();
                    let width = last_axis(node.value.shape());
                    acc(*x, &|gx| {
                        for r in 0..y.len() / width {
                            let span = r * width..(r + 1) * width;
                            let gr = &g[span.clone()];
                            let total: f64 = gr.iter().sum();
                            for (j, out) in gx[span.clone()].iter_mut().enumerate() {
                                *out += gr[j] - y[span.start + j].exp() * total;
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let width = last_axis(node.value.shape());
                    let gv = val(*gamma);
                    acc(*gamma, &|gg| {
                        for (i, y) in g.iter().enumerate() {
                            gg[i % width] += y * xhat[i];
                        }
                    });
                    acc(*beta, &|gb| {
                        for (i, y) in g.iter().enumerate() {
                            gb[i % width] += y;
                        }
                    });
                    acc(*x, &|gx| {
                        let n = width as f64;
                        for (r, is) in inv_std.iter().enumerate() {
                            let span = r * width..(r + 1) * width;
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..width {
                                let d = g[span.start + j] * gv[j];
                                sum_d += d;
                                sum_dx += d * xhat[span.start + j];
                            }
                            for (j, gamma) in gv.iter().enumerate() {
                                let i = span.start + j;
                                let d = g[i] * gamma;
                                gx[i] += is / n * (n * d - sum_d - xhat[i] * sum_dx);
                            }
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = val(*x);
                    acc(*x, &|gx| {
                        for i in 0..gx.len() {
                            gx[i] += g[i] * gelu_grad_scalar(xv[i]);
                        }
                    });
                }
                Op::L2Normalize { x, eps, norms } => {
                    let y = node.value.data();
                    let width = last_axis(node.value.shape());
                    acc(*x, &|gx| {
                        for (r, &norm) in norms.iter().enumerate() {
                            let span = r * width..(r + 1) * width;
                            let denom = norm.max(*eps);
                            let dot: f64 = if norm > *eps {
                                y[span.clone()]
                                    .iter()
                                    .zip(&g[span.clone()])
                                    .map(|(a, b)| a * b)
                                    .sum()
                            } else {
                                0.0
                            };
                            for i in span {
                                gx[i] += (g[i] - y[i] * dot) / denom;
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    acc(*x, &|gx| gx.iter_mut().for_each(|v| *v += g[0]));
                }
                Op::Mean(x) => {
                    acc(*x, &|gx| {
                        let share = g[0] / gx.len() as f64;
                        gx.iter_mut().for_each(|v| *v += share);
                    });
                }
                Op::MeanAxis { x, axis_view } => {
                    let [outer, dim, inner] = *axis_view;
                    acc(*x, &|gx| {
                        for o in 0..outer {
                            for d in 0..dim {
                                let base = (o * dim + d) * inner;
                                for i in 0..inner {
                                    gx[base + i] += g[o * inner + i] / dim as f64;
                                }
                            }
                        }
                    });
                }
                Op::Pick { x, index } => {
                    let cols = nodes[x.0].value.shape()[1];
                    acc(*x, &|gx| {
                        for (i, &c) in index.iter().enumerate() {
                            gx[i * cols + c] += g[i];
                        }
                    });
                }
            }
        }

        for (id, slot) in adj.into_iter().enumerate() {
            if let (Some(g), Some(grad)) = (slot, self.nodes[id].grad.as_mut()) {
                for (acc, v) in grad.data_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
        Ok(())
    }
}
