//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and [`Graph::backward`] walks it once in reverse.

use std::sync::Arc;

use super::kernels::{self, axis_split, gemm_nn, gemm_nt, gemm_tn};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sequence packing and optional relative-position bias for the fused
/// multi-head attention op.
#[derive(Debug, Clone)]
pub struct AttnLayout {
    pub seqs: usize,
    pub seq_len: usize,
    pub heads: usize,
    /// Valid key count per sequence; keys at or beyond it are masked out.
    pub lengths: Option<Vec<usize>>,
    /// Maps `i * seq_len + j` to a column of the `[heads × R]` bias table.
    pub bias_index: Option<Vec<usize>>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Exp(Var),
    Gelu(Var, Vec<T>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    TileRows {
        x: Var,
        times: usize,
    },
    MeanRowGroups {
        x: Var,
        group: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Attention {
        qkv: Var,
        bias: Option<Var>,
        layout: Arc<AttnLayout>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Differentiation tape. One graph per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a, b)));
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v` after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}×{k}] × [{k2}×{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.value(a))?;
        let out = kernels::transpose(r, c, self.value(a).data());
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), ng))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector `bias[c]` to every row of `a[r×c]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(bias).len() != c {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", self.shape(a), self.shape(bias)),
            ));
        }
        let mut data = self.value(a).data().to_vec();
        let b = self.value(bias).data();
        if c > 0 {
            for row in data.chunks_exact_mut(c) {
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(t, Op::AddRow(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * c).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", format!("{:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * sv).collect())?;
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(t, Op::MulScalar(a, s), ng))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x.exp()).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Exp(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let th: Vec<T> = av.data().iter().map(|&x| kernels::gelu_tanh(x)).collect();
        let out = av.data().iter().zip(&th).map(|(&x, &t)| kernels::gelu_from_tanh(x, t)).collect();
        let t = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a, th), ng)
    }

    /// Row-wise layer normalization with epsilon 1e-5 on the variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "{:?} with gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let eps = T::of(1e-5);
        let xv = self.value(x);
        let r = xv.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let inv_c = T::one() / T::of(c as f64);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(op, format!("axis {axis} of {:?}", self.shape(x))));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                kernels::softmax_lane(xv.data(), &mut out, len, inner, o * len * inner + i);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax(x, axis), ng))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                kernels::log_softmax_lane(xv.data(), &mut out, len, inner, o * len * inner + i);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::LogSoftmax(x, axis), ng))
    }

    /// Scales each row to unit Euclidean norm; all-zero rows stay zero.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = xv.data().to_vec();
        let mut norms = vec![T::zero(); r];
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[i] = n;
            if n > T::zero() {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::L2Normalize { x, norms }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len();
        let s = if n == 0 {
            T::zero()
        } else {
            xv.data().iter().copied().sum::<T>() / T::of(n as f64)
        };
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Picks flat element indices into a vector.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::shape("gather", format!("index {bad} of {}", xv.len())));
        }
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::vector(data), Op::Gather { x, idx }, ng))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let (r, c) = dims2("gather_rows", self.value(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in &ids {
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![ids.len(), c], data)?;
        let ng = self.ng(table);
        Ok(self.push(t, Op::GatherRows { table, ids }, ng))
    }

    /// Stacks `times` copies of `x[r×c]` vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, c) = dims2("tile_rows", self.value(x))?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(times * src.len());
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let t = Tensor::new(vec![times * r, c], data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::TileRows { x, times }, ng))
    }

    /// Means over consecutive blocks of `group` rows.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = dims2("mean_row_groups", self.value(x))?;
        if group == 0 || r % group != 0 {
            return Err(Error::shape("mean_row_groups", format!("{r} rows in groups of {group}")));
        }
        let n = r / group;
        let xv = self.value(x).data();
        let inv = T::one() / T::of(group as f64);
        let mut data = vec![T::zero(); n * c];
        for g in 0..n {
            let out = &mut data[g * c..(g + 1) * c];
            for i in 0..group {
                let row = &xv[(g * group + i) * c..(g * group + i + 1) * c];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let t = Tensor::new(vec![n, c], data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MeanRowGroups { x, group }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = dims2("concat_rows", self.value(p))?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("width {pc} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice_rows", self.value(x))?;
        if start > end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r}")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let t = Tensor::new(vec![end - start, c], data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice_cols", self.value(x))?;
        if start > end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c}")));
        }
        let w = end - start;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, w], data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SliceCols { x, start }, ng))
    }

    /// Fused multi-head self-attention over packed `qkv[(seqs·L) × 3d]`.
    /// Returns `[(seqs·L) × d]`. `bias`, when present, is a `[heads × R]`
    /// table added to the logits through `layout.bias_index`.
    pub fn attention(
        &mut self,
        qkv: Var,
        bias: Option<Var>,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        let (rows, c3) = dims2("attention", self.value(qkv))?;
        let AttnLayout {
            seqs,
            seq_len: l,
            heads,
            ..
        } = *layout;
        if rows != seqs * l || c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("qkv {:?} for {seqs}×{l} tokens, {heads} heads", self.shape(qkv)),
            ));
        }
        if let Some(lens) = &layout.lengths {
            if lens.len() != seqs || lens.iter().any(|&n| n == 0 || n > l) {
                return Err(Error::shape("attention", "bad sequence lengths"));
            }
        }
        let table = match (bias, &layout.bias_index) {
            (Some(b), Some(index)) => {
                let (bh, br) = dims2("attention", self.value(b))?;
                if bh != heads || index.len() != l * l || index.iter().any(|&i| i >= br) {
                    return Err(Error::shape("attention", "bias table/index mismatch"));
                }
                Some((self.value(b).data(), br))
            }
            (None, None) => None,
            _ => return Err(Error::shape("attention", "bias needs both table and index")),
        };
        let d = c3 / 3;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); seqs * heads * l * l];
        let mut q = vec![T::zero(); l * dh];
        let mut kt = vec![T::zero(); dh * l];
        let mut v = vec![T::zero(); l * dh];
        let mut o = vec![T::zero(); l * dh];
        for s in 0..seqs {
            let valid = layout.lengths.as_ref().map_or(l, |lens| lens[s]);
            for h in 0..heads {
                gather_head(src, s, l, c3, h * dh, dh, &mut q);
                gather_head(src, s, l, c3, 2 * d + h * dh, dh, &mut v);
                for i in 0..l {
                    for t in 0..dh {
                        kt[t * l + i] = src[(s * l + i) * c3 + d + h * dh + t];
                    }
                }
                let p = &mut probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
                gemm_nn(l, dh, l, &q, &kt, p);
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    for (j, x) in row.iter_mut().enumerate() {
                        *x *= scale;
                        if let (Some((tb, br)), Some(index)) = (table, &layout.bias_index) {
                            *x += tb[h * br + index[i * l + j]];
                        }
                    }
                    let mut mx = T::neg_infinity();
                    for &x in &row[..valid] {
                        mx = mx.max(x);
                    }
                    let mut sum = T::zero();
                    for x in row[..valid].iter_mut() {
                        *x = (*x - mx).exp();
                        sum += *x;
                    }
                    for x in row[..valid].iter_mut() {
                        *x /= sum;
                    }
                    for x in row[valid..].iter_mut() {
                        *x = T::zero();
                    }
                }
                o.iter_mut().for_each(|x| *x = T::zero());
                gemm_nn(l, l, dh, p, &v, &mut o);
                for i in 0..l {
                    out[(s * l + i) * d + h * dh..(s * l + i) * d + (h + 1) * dh]
                        .copy_from_slice(&o[i * dh..(i + 1) * dh]);
                }
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let ng = self.ng(qkv) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(
            t,
            Op::Attention {
                qkv,
                bias,
                layout,
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a single-element root. Gradients of every node that
    /// depends on a trainable leaf are available through [`grad`](Self::grad).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let nn = bv.shape()[1];
                if self.ng(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm_nt(m, nn, k, g, bv.data(), ga);
                }
                if self.ng(*b) {
                    let gb = slot(grads, *b, k * nn);
                    gemm_tn(m, k, nn, av.data(), g, gb);
                }
            }
            Op::Transpose(a) => {
                if self.ng(*a) {
                    let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                    let t = kernels::transpose(r, c, g);
                    add_grad(grads, *a, &t);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    add_grad(grads, *a, g);
                }
                if self.ng(*b) {
                    add_grad(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    add_grad(grads, *a, g);
                }
                if self.ng(*b) {
                    let gb = slot(grads, *b, g.len());
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if self.ng(*b) {
                    let gb = slot(grads, *b, g.len());
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.ng(*a) {
                    add_grad(grads, *a, g);
                }
                if self.ng(*bias) {
                    let c = node.value.cols();
                    let gb = slot(grads, *bias, c);
                    if c > 0 {
                        for row in g.chunks_exact(c) {
                            accumulate(gb, row);
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.ng(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x * *c;
                    }
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                if self.ng(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x * sv;
                    }
                }
                if self.ng(*s) {
                    let dot = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&x, &y)| x * y)
                        .sum::<T>();
                    slot(grads, *s, 1)[0] += dot;
                }
            }
            Op::Exp(a) => {
                if self.ng(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(out) {
                        *o += x * y;
                    }
                }
            }
            Op::Gelu(a, th) => {
                if self.ng(*a) {
                    let av = self.value(*a).data();
                    let ga = slot(grads, *a, g.len());
                    for (((o, &x), &v), &t) in ga.iter_mut().zip(g).zip(av).zip(th) {
                        *o += x * kernels::gelu_grad_from_tanh(v, t);
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
                let c = node.value.cols();
                let r = node.value.rows();
                let gv = self.value(*gain).data();
                if self.ng(*gain) {
                    let gg = slot(grads, *gain, c);
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if self.ng(*bias) {
                    let gb = slot(grads, *bias, c);
                    for row in g.chunks_exact(c.max(1)) {
                        accumulate(gb, row);
                    }
                }
                if self.ng(*x) {
                    let gx = slot(grads, *x, r * c);
                    let inv_c = T::one() / T::of(c as f64);
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..r {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let d = g[i * c + j] * gv[j];
                            dxhat[j] = d;
                            m1 += d;
                            m2 += d * xhat[i * c + j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            gx[i * c + j] += rstd[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                if self.ng(*x) {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let gx = slot(grads, *x, g.len());
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut dot = T::zero();
                            for t in 0..len {
                                dot += g[base + t * inner] * out[base + t * inner];
                            }
                            for t in 0..len {
                                let k = base + t * inner;
                                gx[k] += out[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x, axis) => {
                if self.ng(*x) {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let gx = slot(grads, *x, g.len());
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut gs = T::zero();
                            for t in 0..len {
                                gs += g[base + t * inner];
                            }
                            for t in 0..len {
                                let k = base + t * inner;
                                gx[k] += g[k] - out[k].exp() * gs;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if self.ng(*x) {
                    let c = node.value.cols();
                    let gx = slot(grads, *x, g.len());
                    for (i, &nrm) in norms.iter().enumerate() {
                        if nrm <= T::zero() {
                            continue;
                        }
                        let y = &out[i * c..(i + 1) * c];
                        let gy = &g[i * c..(i + 1) * c];
                        let dot = y.iter().zip(gy).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..c {
                            gx[i * c + j] += (gy[j] - y[j] * dot) / nrm;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.ng(*x) {
                    let n = self.value(*x).len();
                    let gx = slot(grads, *x, n);
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if self.ng(*x) {
                    let n = self.value(*x).len();
                    let gx = slot(grads, *x, n);
                    let v = g[0] / T::of(n.max(1) as f64);
                    for o in gx.iter_mut() {
                        *o += v;
                    }
                }
            }
            Op::Gather { x, idx } => {
                if self.ng(*x) {
                    let n = self.value(*x).len();
                    let gx = slot(grads, *x, n);
                    for (&k, &v) in idx.iter().zip(g) {
                        gx[k] += v;
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if self.ng(*table) {
                    let tv = self.value(*table);
                    let c = tv.cols();
                    let gt = slot(grads, *table, tv.len());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::TileRows { x, times } => {
                if self.ng(*x) {
                    let n = self.value(*x).len();
                    let gx = slot(grads, *x, n);
                    for t in 0..*times {
                        accumulate(gx, &g[t * n..(t + 1) * n]);
                    }
                }
            }
            Op::MeanRowGroups { x, group } => {
                if self.ng(*x) {
                    let c = node.value.cols();
                    let n = self.value(*x).len();
                    let gx = slot(grads, *x, n);
                    let inv = T::one() / T::of(*group as f64);
                    for (r, row) in gx.chunks_exact_mut(c.max(1)).enumerate() {
                        let gr = &g[(r / group) * c..(r / group + 1) * c];
                        for (o, &v) in row.iter_mut().zip(gr) {
                            *o += v * inv;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.ng(p) {
                        add_grad(grads, p, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let gx = slot(grads, *x, xv.len());
                    accumulate(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let w = node.value.cols();
                    let gx = slot(grads, *x, xv.len());
                    for r in 0..xv.rows() {
                        accumulate(
                            &mut gx[r * c + start..r * c + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                }
            }
            Op::Attention {
                qkv,
                bias,
                layout,
                probs,
            } => self.attention_backward(g, *qkv, *bias, layout, probs, grads),
        }
    }

    fn attention_backward(
        &self,
        g: &[T],
        qkv: Var,
        bias: Option<Var>,
        layout: &AttnLayout,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let src = self.value(qkv).data();
        let c3 = self.value(qkv).cols();
        let d = c3 / 3;
        let (seqs, l, heads) = (layout.seqs, layout.seq_len, layout.heads);
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let want_qkv = self.ng(qkv);
        let bias_target = bias.filter(|&b| self.ng(b));
        let mut gqkv = if want_qkv {
            Some(vec![T::zero(); src.len()])
        } else {
            None
        };
        let mut gbias = bias_target.map(|b| vec![T::zero(); self.value(b).len()]);
        let br = bias.map_or(0, |b| self.value(b).cols());

        let mut q = vec![T::zero(); l * dh];
        let mut k = vec![T::zero(); l * dh];
        let mut vt = vec![T::zero(); dh * l];
        let mut dout = vec![T::zero(); l * dh];
        let mut dp = vec![T::zero(); l * l];
        let mut dq = vec![T::zero(); l * dh];
        let mut dk = vec![T::zero(); l * dh];
        let mut dv = vec![T::zero(); l * dh];
        for s in 0..seqs {
            for h in 0..heads {
                let p = &probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
                gather_head(src, s, l, c3, h * dh, dh, &mut q);
                gather_head(src, s, l, c3, d + h * dh, dh, &mut k);
                for i in 0..l {
                    for t in 0..dh {
                        vt[t * l + i] = src[(s * l + i) * c3 + 2 * d + h * dh + t];
                    }
                }
                gather_head(g, s, l, d, h * dh, dh, &mut dout);
                dp.iter_mut().for_each(|x| *x = T::zero());
                gemm_nn(l, dh, l, &dout, &vt, &mut dp);
                // dS = P ∘ (dP − rowsum(P ∘ dP))
                for i in 0..l {
                    let pr = &p[i * l..(i + 1) * l];
                    let dr = &mut dp[i * l..(i + 1) * l];
                    let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    for (x, &pv) in dr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot);
                    }
                }
                if let Some(gb) = gbias.as_mut() {
                    let index = layout.bias_index.as_ref().expect("bias index");
                    for (ij, &v) in dp.iter().enumerate() {
                        gb[h * br + index[ij]] += v;
                    }
                }
                if let Some(gq) = gqkv.as_mut() {
                    dv.iter_mut().for_each(|x| *x = T::zero());
                    gemm_tn(l, l, dh, p, &dout, &mut dv);
                    dq.iter_mut().for_each(|x| *x = T::zero());
                    gemm_nn(l, l, dh, &dp, &k, &mut dq);
                    dk.iter_mut().for_each(|x| *x = T::zero());
                    gemm_tn(l, l, dh, &dp, &q, &mut dk);
                    for i in 0..l {
                        let row = (s * l + i) * c3;
                        for t in 0..dh {
                            gq[row + h * dh + t] += dq[i * dh + t] * scale;
                            gq[row + d + h * dh + t] += dk[i * dh + t] * scale;
                            gq[row + 2 * d + h * dh + t] += dv[i * dh + t];
                        }
                    }
                }
            }
        }
        if let Some(gq) = gqkv {
            add_grad(grads, qkv, &gq);
        }
        if let (Some(b), Some(gb)) = (bias_target, gbias) {
            add_grad(grads, b, &gb);
        }
    }
}

fn gather_head<T: Real>(
    src: &[T],
    s: usize,
    l: usize,
    stride: usize,
    off: usize,
    dh: usize,
    dst: &mut [T],
) {
    for i in 0..l {
        let base = (s * l + i) * stride + off;
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[base..base + dh]);
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_grad<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, src: &[T]) {
    match &mut grads[v.0] {
        Some(dst) => accumulate(dst, src),
        empty => *empty = Some(src.to_vec()),
    }
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}
