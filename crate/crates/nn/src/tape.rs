//! Reverse-mode automatic differentiation over a flat operation list.
//!
//! A [`Tape`] borrows a [`ParamStore`], records every operation as a node and
//! replays them backwards in [`Tape::backward`]. Nodes are appended in
//! topological order, so the reverse sweep never needs a graph search.

use crate::params::{Grads, ParamId, ParamStore};
use crate::real::{gemm, MatMut, MatRef, Real};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Index value skipped by [`Tape::embed_sum`].
pub const NO_INDEX: usize = usize::MAX;

/// Geometry of a 2-D convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Value<F> {
    Owned(Tensor<F>),
    Param(ParamId),
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, b: Var },
    RowScale { x: Var, scales: Vec<F> },
    Scale(Var, F),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Minimum(Var, Var),
    Clamp { x: Var, lo: F, hi: F },
    EmbedSum { table: Var, idx: Vec<usize>, group: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, in_hw: (usize, usize), out_hw: (usize, usize), cols: Vec<F> },
    Film { x: Var, gamma: Var, beta: Var },
    SegmentMean { x: Var, segments: Vec<(usize, usize)> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv_std: Vec<F> },
    Attention { q: Var, k: Var, v: Var, segments: Vec<(usize, usize)>, heads: usize, probs: Vec<F> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    LogSoftmax(Var),
    Pick { x: Var, idx: Vec<usize> },
    RowSum(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a computation over the parameters of a [`ParamStore`].
pub struct Tape<'p, F: Real> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Tape { params, nodes: Vec::new(), param_nodes: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-D");
        let (m, n) = (av.rows(), bv.cols());
        let mut out = vec![F::zero(); m * n];
        gemm(F::one(), av.mat(), bv.mat(), F::zero(), MatMut::dense(&mut out, m, n));
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, out), Op::MatMul(a, b), ng)
    }

    /// `x · w + b` with `w: [in, out]` and optional `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(wv.shape().len(), 2, "affine weight must be 2-D");
        assert_eq!(xv.cols(), wv.rows(), "affine input width {:?} vs weight {:?}", xv.shape(), wv.shape());
        let (m, n) = (xv.rows(), wv.cols());
        let mut out = vec![F::zero(); m * n];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), n, "affine bias width");
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        gemm(F::one(), xv.mat(), wv.mat(), F::one(), MatMut::dense(&mut out, m, n));
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(&shape, out), Op::Affine { x, w, b }, ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise shape mismatch {:?} vs {:?}", av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    /// Adds a `[cols]` vector to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        assert_eq!(bv.len(), c, "add_row width");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (a, &bb) in row.iter_mut().zip(bv.data()) {
                *a += bb;
            }
        }
        let t = Tensor::new(xv.shape(), data);
        let ng = self.needs(x) || self.needs(b);
        self.push(t, Op::AddRow { x, b }, ng)
    }

    /// Multiplies row `r` by the constant `scales[r]`.
    pub fn row_scale(&mut self, x: Var, scales: Vec<F>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), scales.len(), "row_scale length");
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for (row, &s) in data.chunks_mut(c).zip(&scales) {
            for a in row {
                *a *= s;
            }
        }
        let t = Tensor::new(xv.shape(), data);
        let ng = self.needs(x);
        self.push(t, Op::RowScale { x, scales }, ng)
    }

    fn map(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect());
        let ng = self.needs(x);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        self.map(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// Row `r` of the output is the sum of `table[idx[r * group + j]]` over
    /// `j < group`; entries equal to [`NO_INDEX`] are skipped.
    pub fn embed_sum(&mut self, table: Var, idx: Vec<usize>, group: usize) -> Var {
        assert!(group > 0 && idx.len() % group == 0, "embed_sum index count");
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        let rows = idx.len() / group;
        let mut out = vec![F::zero(); rows * d];
        for (r, chunk) in idx.chunks(group).enumerate() {
            let dst = &mut out[r * d..(r + 1) * d];
            for &i in chunk {
                if i == NO_INDEX {
                    continue;
                }
                assert!(i < v, "embedding index {i} out of range {v}");
                for (o, &s) in dst.iter_mut().zip(tv.row(i)) {
                    *o += s;
                }
            }
        }
        let ng = self.needs(table);
        self.push(Tensor::new(&[rows, d], out), Op::EmbedSum { table, idx, group }, ng)
    }

    /// Convolution over `x: [B, H, W, C]` with `w: [k*k*C, O]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 4, "conv2d expects NHWC input, got {s:?}");
        let (bsz, h, wd, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (geom.out_size(h), geom.out_size(wd));
        let k = geom.kernel;
        let patch = k * k * c;
        let wv = self.value(w);
        assert_eq!(wv.rows(), patch, "conv2d weight rows");
        let o = wv.cols();
        let rows = bsz * oh * ow;
        let mut cols = vec![F::zero(); rows * patch];
        let xd = xv.data();
        for bi in 0..bsz {
            for oy in 0..oh {
                for ox in 0..ow {
                    let r = (bi * oh + oy) * ow + ox;
                    let dst = &mut cols[r * patch..(r + 1) * patch];
                    for ky in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let src = ((bi * h + iy as usize) * wd + ix as usize) * c;
                            let off = (ky * k + kx) * c;
                            dst[off..off + c].copy_from_slice(&xd[src..src + c]);
                        }
                    }
                }
            }
        }
        let bv = self.value(b).data();
        assert_eq!(bv.len(), o, "conv2d bias width");
        let mut out = vec![F::zero(); rows * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(bv);
        }
        gemm(F::one(), MatRef::dense(&cols, rows, patch), wv.mat(), F::one(), MatMut::dense(&mut out, rows, o));
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::new(&[bsz, oh, ow, o], out),
            Op::Conv2d { x, w, b, geom, in_hw: (h, wd), out_hw: (oh, ow), cols },
            ng,
        )
    }

    /// Feature-wise affine modulation: rows of `x` are split into
    /// `gamma.rows()` equal groups; group `g` is scaled by `gamma[g]` and
    /// shifted by `beta[g]` channel-wise.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        assert_eq!(gv.cols(), c, "film gamma width");
        assert_eq!(gv.len(), bv.len(), "film beta shape");
        let groups = gv.rows();
        assert!(groups > 0 && xv.rows() % groups == 0, "film group count");
        let per = xv.rows() / groups;
        let mut data = xv.data().to_vec();
        for (r, row) in data.chunks_mut(c).enumerate() {
            let g = r / per;
            for ((a, &ga), &be) in row.iter_mut().zip(gv.row(g)).zip(bv.row(g)) {
                *a = *a * ga + be;
            }
        }
        let t = Tensor::new(xv.shape(), data);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(t, Op::Film { x, gamma, beta }, ng)
    }

    /// Mean of each `(start, len)` row range.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<(usize, usize)>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![F::zero(); segments.len() * c];
        for (s, &(start, len)) in segments.iter().enumerate() {
            assert!(len > 0 && start + len <= xv.rows(), "segment out of range");
            let inv = F::one() / F::of(len as f64);
            let dst = &mut out[s * c..(s + 1) * c];
            for r in start..start + len {
                for (o, &v) in dst.iter_mut().zip(xv.row(r)) {
                    *o += v * inv;
                }
            }
        }
        let ng = self.needs(x);
        let n = segments.len();
        self.push(Tensor::new(&[n, c], out), Op::SegmentMean { x, segments }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let eps = F::of(1e-5);
        let xv = self.value(x);
        let c = xv.cols();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        assert_eq!(gv.len(), c, "layer_norm gain width");
        let rows = xv.rows();
        let mut xhat = vec![F::zero(); rows * c];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * c];
        let cf = F::of(c as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(xv.shape(), out);
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng)
    }

    /// Multi-head scaled dot-product attention restricted to each
    /// `(start, len)` row segment; rows in different segments never attend
    /// to each other.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: Vec<(usize, usize)>, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert!(heads > 0 && d % heads == 0, "attention width {d} not divisible by {heads} heads");
        assert_eq!(qv.shape(), kv.shape(), "attention q/k shape");
        assert_eq!(qv.shape(), vv.shape(), "attention q/v shape");
        let rows = qv.rows();
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let total: usize = segments.iter().map(|&(_, l)| l * l * heads).sum();
        let mut probs = vec![F::zero(); total];
        let mut out = vec![F::zero(); rows * d];
        let (qm, km, vm) = (qv.mat(), kv.mat(), vv.mat());
        let mut off = 0;
        for &(start, len) in &segments {
            assert!(start + len <= rows, "attention segment out of range");
            for h in 0..heads {
                let p = &mut probs[off..off + len * len];
                let qh = qm.block(start, h * dh, len, dh);
                let kh = km.block(start, h * dh, len, dh);
                gemm(scale, qh, kh.t(), F::zero(), MatMut::dense(p, len, len));
                for row in p.chunks_mut(len) {
                    softmax_in_place(row);
                }
                let vh = vm.block(start, h * dh, len, dh);
                let dst = MatMut::dense(&mut out, rows, d).block(start, h * dh, len, dh);
                gemm(F::one(), MatRef::dense(p, len, len), vh, F::zero(), dst);
                off += len * len;
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let t = Tensor::new(qv.shape(), out);
        self.push(t, Op::Attention { q, k, v, segments, heads, probs }, ng)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let c = self.value(xs[0]).cols();
        let mut data = Vec::new();
        let mut ng = false;
        for &x in xs {
            let xv = self.value(x);
            assert_eq!(xv.cols(), c, "concat_rows width");
            data.extend_from_slice(xv.data());
            ng |= self.needs(x);
        }
        let rows = data.len() / c.max(1);
        self.push(Tensor::new(&[rows, c], data), Op::ConcatRows(xs.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(start + len <= xv.rows(), "slice_rows out of range");
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        let ng = self.needs(x);
        self.push(Tensor::new(&[len, c], data), Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(start + width <= c, "slice_cols out of range");
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let ng = self.needs(x);
        self.push(Tensor::new(&[rows, width], data), Op::SliceCols { x, start }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.needs(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<F>().ln() + m;
            for v in row {
                *v -= lse;
            }
        }
        let t = Tensor::new(xv.shape(), data);
        let ng = self.needs(x);
        self.push(t, Op::LogSoftmax(x), ng)
    }

    /// `out[r] = x[r, idx[r]]`.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), idx.len(), "pick index count");
        let data = idx.iter().enumerate().map(|(r, &i)| xv.row(r)[i]).collect();
        let ng = self.needs(x);
        let n = idx.len();
        self.push(Tensor::new(&[n], data), Op::Pick { x, idx }, ng)
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data: Vec<F> = (0..xv.rows()).map(|r| xv.row(r).iter().copied().sum()).collect();
        let ng = self.needs(x);
        let n = data.len();
        self.push(Tensor::new(&[n], data), Op::RowSum(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.value(logits);
        let c = lv.cols();
        assert_eq!(lv.rows(), targets.len(), "cross_entropy target count");
        let mut probs = lv.data().to_vec();
        let mut loss = F::zero();
        for (row, &t) in probs.chunks_mut(c).zip(&targets) {
            assert!(t < c, "target {t} out of range {c}");
            softmax_in_place(row);
            loss -= row[t].max(F::min_positive_value()).ln();
        }
        loss /= F::of(targets.len() as f64);
        let ng = self.needs(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs }, ng)
    }

    /// Back-propagates from the scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Grads::new(self.params.len());
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads, &mut out);
        }
        out
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>], out: &mut Grads<F>) {
        let node_val = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => {
                out.accumulate(*id, &Tensor::new(self.params.get(*id).shape(), g.to_vec()));
            }
            Op::MatMul(a, b) | Op::Affine { x: a, w: b, .. } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (av.rows(), bv.cols());
                let gm = MatRef::dense(g, m, n);
                if let Some(ga) = self.buf(grads, *a) {
                    let k = av.cols();
                    gemm(F::one(), gm, bv.mat().t(), F::one(), MatMut::dense(ga, m, k));
                }
                if let Some(gb) = self.buf(grads, *b) {
                    let k = bv.rows();
                    gemm(F::one(), av.mat().t(), gm, F::one(), MatMut::dense(gb, k, n));
                }
                if let Op::Affine { b: Some(bias), .. } = &self.nodes[i].op {
                    if let Some(gbias) = self.buf(grads, *bias) {
                        for row in g.chunks(n) {
                            for (o, &v) in gbias.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.buf(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.buf(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.buf(grads, *a) {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gv * y;
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gv * x;
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.buf(grads, *a) {
                    for (j, o) in ga.iter_mut().enumerate() {
                        if ad[j] <= bd[j] {
                            *o += g[j];
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for (j, o) in gb.iter_mut().enumerate() {
                        if ad[j] > bd[j] {
                            *o += g[j];
                        }
                    }
                }
            }
            Op::AddRow { x, b } => {
                if let Some(gx) = self.buf(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::RowScale { x, scales } => {
                if let Some(gx) = self.buf(grads, *x) {
                    let c = node_val.cols();
                    for ((o, gr), &s) in gx.chunks_mut(c).zip(g.chunks(c)).zip(scales) {
                        for (a, &v) in o.iter_mut().zip(gr) {
                            *a += v * s;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.buf(grads, *x) {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v * *s;
                    }
                }
            }
            Op::Relu(x) => {
                let y = node_val.data();
                if let Some(gx) = self.buf(grads, *x) {
                    for ((o, &v), &yy) in gx.iter_mut().zip(g).zip(y) {
                        if yy > F::zero() {
                            *o += v;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node_val.data();
                if let Some(gx) = self.buf(grads, *x) {
                    for ((o, &v), &yy) in gx.iter_mut().zip(g).zip(y) {
                        *o += v * (F::one() - yy * yy);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node_val.data();
                if let Some(gx) = self.buf(grads, *x) {
                    for ((o, &v), &yy) in gx.iter_mut().zip(g).zip(y) {
                        *o += v * yy * (F::one() - yy);
                    }
                }
            }
            Op::Exp(x) => {
                let y = node_val.data();
                if let Some(gx) = self.buf(grads, *x) {
                    for ((o, &v), &yy) in gx.iter_mut().zip(g).zip(y) {
                        *o += v * yy;
                    }
                }
            }
            Op::Square(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.buf(grads, *x) {
                    let two = F::of(2.0);
                    for ((o, &v), &xx) in gx.iter_mut().zip(g).zip(xd) {
                        *o += two * v * xx;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.buf(grads, *x) {
                    for ((o, &v), &xx) in gx.iter_mut().zip(g).zip(xd) {
                        if xx >= *lo && xx <= *hi {
                            *o += v;
                        }
                    }
                }
            }
            Op::EmbedSum { table, idx, group } => {
                if let Some(gt) = self.buf(grads, *table) {
                    let d = self.value(*table).cols();
                    for (r, chunk) in idx.chunks(*group).enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        for &j in chunk {
                            if j != NO_INDEX {
                                add_into(&mut gt[j * d..(j + 1) * d], src);
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, in_hw, out_hw, cols } => {
                let wv = self.value(*w);
                let (patch, o) = (wv.rows(), wv.cols());
                let rows = cols.len() / patch;
                let gm = MatRef::dense(g, rows, o);
                if let Some(gw) = self.buf(grads, *w) {
                    gemm(F::one(), MatRef::dense(cols, rows, patch).t(), gm, F::one(), MatMut::dense(gw, patch, o));
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for row in g.chunks(o) {
                        add_into(gb, row);
                    }
                }
                if self.needs(*x) {
                    let mut dcols = vec![F::zero(); rows * patch];
                    gemm(F::one(), gm, wv.mat().t(), F::zero(), MatMut::dense(&mut dcols, rows, patch));
                    let xs = self.value(*x).shape().to_vec();
                    let c = xs[3];
                    let gx = self.buf(grads, *x).expect("needs grad");
                    let (h, wd) = *in_hw;
                    let (oh, ow) = *out_hw;
                    let k = geom.kernel;
                    for bi in 0..xs[0] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let r = (bi * oh + oy) * ow + ox;
                                let src = &dcols[r * patch..(r + 1) * patch];
                                for ky in 0..k {
                                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let dst = ((bi * h + iy as usize) * wd + ix as usize) * c;
                                        let off = (ky * k + kx) * c;
                                        add_into(&mut gx[dst..dst + c], &src[off..off + c]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Film { x, gamma, beta } => {
                let (xv, gv) = (self.value(*x), self.value(*gamma));
                let c = xv.cols();
                let per = xv.rows() / gv.rows();
                if let Some(gx) = self.buf(grads, *x) {
                    for (r, (o, gr)) in gx.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        for ((a, &v), &ga) in o.iter_mut().zip(gr).zip(gv.row(r / per)) {
                            *a += v * ga;
                        }
                    }
                }
                if let Some(gg) = self.buf(grads, *gamma) {
                    for (r, gr) in g.chunks(c).enumerate() {
                        let dst = &mut gg[(r / per) * c..(r / per + 1) * c];
                        for ((a, &v), &xx) in dst.iter_mut().zip(gr).zip(xv.row(r)) {
                            *a += v * xx;
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *beta) {
                    for (r, gr) in g.chunks(c).enumerate() {
                        add_into(&mut gb[(r / per) * c..(r / per + 1) * c], gr);
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                if let Some(gx) = self.buf(grads, *x) {
                    let c = node_val.cols();
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let inv = F::one() / F::of(len as f64);
                        let src = &g[s * c..(s + 1) * c];
                        for r in start..start + len {
                            for (o, &v) in gx[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *o += v * inv;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = node_val.cols();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.buf(grads, *gain) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((o, &v), &h) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += v * h;
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *bias) {
                    for gr in g.chunks(c) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    let cf = F::of(c as f64);
                    let mut dh = vec![F::zero(); c];
                    for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<F>() / cf;
                        let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<F>() / cf;
                        for j in 0..c {
                            gx[r * c + j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, segments, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let rows = qv.rows();
                let dh = d / heads;
                let scale = F::one() / F::of(dh as f64).sqrt();
                let mut dq = vec![F::zero(); rows * d];
                let mut dk = vec![F::zero(); rows * d];
                let mut dv = vec![F::zero(); rows * d];
                let gm = MatRef::dense(g, rows, d);
                let (qm, km, vm) = (qv.mat(), kv.mat(), vv.mat());
                let mut off = 0;
                let mut ds = Vec::new();
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let p = &probs[off..off + len * len];
                        off += len * len;
                        let pm = MatRef::dense(p, len, len);
                        let go = gm.block(start, h * dh, len, dh);
                        gemm(F::one(), pm.t(), go, F::one(), MatMut::dense(&mut dv, rows, d).block(start, h * dh, len, dh));
                        ds.clear();
                        ds.resize(len * len, F::zero());
                        let vh = vm.block(start, h * dh, len, dh);
                        gemm(F::one(), go, vh.t(), F::zero(), MatMut::dense(&mut ds, len, len));
                        for (dr, pr) in ds.chunks_mut(len).zip(p.chunks(len)) {
                            let dot = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<F>();
                            for (a, &b) in dr.iter_mut().zip(pr) {
                                *a = b * (*a - dot);
                            }
                        }
                        let dsm = MatRef::dense(&ds, len, len);
                        let kh = km.block(start, h * dh, len, dh);
                        let qh = qm.block(start, h * dh, len, dh);
                        gemm(scale, dsm, kh, F::one(), MatMut::dense(&mut dq, rows, d).block(start, h * dh, len, dh));
                        gemm(scale, dsm.t(), qh, F::one(), MatMut::dense(&mut dk, rows, d).block(start, h * dh, len, dh));
                    }
                }
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(gv) = self.buf(grads, var) {
                        add_into(gv, &d);
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if let Some(gx) = self.buf(grads, x) {
                        add_into(gx, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(gx) = self.buf(grads, *x) {
                    let c = node_val.cols();
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let w = node_val.cols();
                if let Some(gx) = self.buf(grads, *x) {
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * c + start..r * c + start + w], gr);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::LogSoftmax(x) => {
                let y = node_val.data();
                let c = node_val.cols();
                if let Some(gx) = self.buf(grads, *x) {
                    for ((o, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s = gr.iter().copied().sum::<F>();
                        for ((a, &v), &yy) in o.iter_mut().zip(gr).zip(yr) {
                            *a += v - yy.exp() * s;
                        }
                    }
                }
            }
            Op::Pick { x, idx } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.buf(grads, *x) {
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * c + j] += g[r];
                    }
                }
            }
            Op::RowSum(x) => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.buf(grads, *x) {
                    for (o, &v) in gx.chunks_mut(c).zip(g) {
                        for a in o {
                            *a += v;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    for a in gx.iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                if let Some(gl) = self.buf(grads, *logits) {
                    let s = g[0] / F::of(targets.len() as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let y = if j == t { F::one() } else { F::zero() };
                            gl[r * c + j] += s * (probs[r * c + j] - y);
                        }
                    }
                }
            }
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

pub(crate) fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
