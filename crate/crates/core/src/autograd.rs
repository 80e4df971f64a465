//! A small reverse-mode autodiff tape.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients. Nodes that do not
//! depend on a parameter are skipped during the backward pass.

use std::collections::HashMap;

use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse linear resampling from the columns of a `[C, P]` input into `S`
/// output rows: `out[s][c] = Σ w · in[c][idx]` over the entries of row `s`.
#[derive(Debug, Clone, Default)]
pub struct SamplePlan {
    pub offsets: Vec<usize>,
    pub idx: Vec<u32>,
    pub weight: Vec<f64>,
}

impl SamplePlan {
    pub fn rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn entries(&self, s: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[s]..self.offsets[s + 1];
        self.idx[r.clone()]
            .iter()
            .zip(&self.weight[r])
            .map(|(&i, &w)| (i as usize, w))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    /// Maps `(row of im2col, output position)` to an input offset, if inside.
    fn source(&self, r: usize, oy: usize, ox: usize) -> Option<usize> {
        let k2 = self.kernel * self.kernel;
        let c = r / k2;
        let ky = (r % k2) / self.kernel;
        let kx = r % self.kernel;
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some(c * self.h * self.w + iy as usize * self.w + ix as usize)
        }
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    AddCol { a: Var, bias: Var },
    Scale { a: Var, s: F },
    Silu { a: Var },
    SoftmaxRows { a: Var },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    RepeatRows { a: Var, times: usize },
    Reshape { a: Var },
    Conv { x: Var, w: Var, geo: ConvGeometry, cols: Vec<F> },
    MeanCols { a: Var },
    Resample { x: Var, plan: SamplePlan },
    EmbedMean { table: Var, rows: Vec<Vec<usize>> },
    /// Scalar with its gradient w.r.t. `a` computed during the forward pass.
    Fused { a: Var, grad: Vec<F> },
    WeightedSum { parts: Vec<(Var, F)> },
    Dot { a: Var, w: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: HashMap<usize, Var>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, deps: &[Var]) -> Var {
        let needs_grad = deps.iter().any(|d| self.nodes[d.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (never receives a gradient).
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf keyed by `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize, value: &Tensor<F>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let sa = self.dims2(a);
        let sb = self.dims2(b);
        let m = if ta { sa.1 } else { sa.0 };
        let n = if tb { sb.0 } else { sb.1 };
        let mut out = vec![F::zero(); m * n];
        gemm(
            &self.value(a).data,
            sa,
            ta,
            &self.value(b).data,
            sb,
            tb,
            &mut out,
            false,
        );
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.len(), vb.len(), "add: size mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| *x + *y).collect();
        let shape = va.shape.clone();
        self.push(Tensor::new(shape, data), Op::Add { a, b }, &[a, b])
    }

    /// Adds a row vector (`n` elements) to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (_, n) = self.dims2(a);
        assert_eq!(self.value(bias).len(), n, "add_row: bias width");
        let b = &self.value(bias).data;
        let mut v = self.value(a).clone();
        for row in v.data.chunks_exact_mut(n) {
            for (x, y) in row.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
        self.push(v, Op::AddRow { a, bias }, &[a, bias])
    }

    /// Adds `bias[i]` to every element of row `i`.
    pub fn add_col(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = self.dims2(a);
        assert_eq!(self.value(bias).len(), m, "add_col: bias height");
        let b = &self.value(bias).data;
        let mut v = self.value(a).clone();
        for (row, &bb) in v.data.chunks_exact_mut(n).zip(b) {
            row.iter_mut().for_each(|x| *x = *x + bb);
        }
        self.push(v, Op::AddCol { a, bias }, &[a, bias])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = F::of(s);
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = *x * s);
        self.push(v, Op::Scale { a, s }, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = *x * sigmoid(*x));
        self.push(v, Op::Silu { a }, &[a])
    }

    /// Row-wise softmax. Columns with `mask[j] == false` get probability 0;
    /// a row with no unmasked column is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let (_, n) = self.dims2(a);
        let mut v = self.value(a).clone();
        for row in v.data.chunks_exact_mut(n) {
            softmax_masked(row, mask);
        }
        self.push(v, Op::SoftmaxRows { a }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.dims2(p).0, m, "concat_cols: row mismatch");
                self.dims2(p).1
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        self.push(
            Tensor::new(vec![m, total], data),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.dims2(parts[0]).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            assert_eq!(self.dims2(p).1, n, "concat_rows: column mismatch");
            m += self.dims2(p).0;
            data.extend_from_slice(&self.value(p).data);
        }
        self.push(
            Tensor::new(vec![m, n], data),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let (m, n) = self.dims2(a);
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(m * n * times);
        for r in 0..m {
            for _ in 0..times {
                data.extend_from_slice(&src[r * n..(r + 1) * n]);
            }
        }
        self.push(Tensor::new(vec![m * times, n], data), Op::RepeatRows { a, times }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone();
        let v = Tensor::new(shape.to_vec(), v.data);
        self.push(v, Op::Reshape { a }, &[a])
    }

    /// 2-D convolution of a `[C_in, H·W]` map with weights `[C_out, C_in·k·k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, geo: ConvGeometry) -> Var {
        assert_eq!(self.value(x).len(), geo.c_in * geo.h * geo.w, "conv2d: input size");
        let (c_out, kk) = self.dims2(w);
        assert_eq!(kk, geo.patch(), "conv2d: weight width");
        let (oh, ow) = (geo.out_h(), geo.out_w());
        let p = oh * ow;
        let src = &self.value(x).data;
        let mut cols = vec![F::zero(); kk * p];
        for r in 0..kk {
            let row = &mut cols[r * p..(r + 1) * p];
            for oy in 0..oh {
                for ox in 0..ow {
                    if let Some(s) = geo.source(r, oy, ox) {
                        row[oy * ow + ox] = src[s];
                    }
                }
            }
        }
        let mut out = vec![F::zero(); c_out * p];
        gemm(&self.value(w).data, (c_out, kk), false, &cols, (kk, p), false, &mut out, false);
        self.push(Tensor::new(vec![c_out, p], out), Op::Conv { x, w, geo, cols }, &[x, w])
    }

    /// Mean of each row, returned as a `1 × m` row vector.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let inv = F::one() / F::of(n as f64);
        let data = self
            .value(a)
            .data
            .chunks_exact(n)
            .map(|r| r.iter().copied().sum::<F>() * inv)
            .collect();
        self.push(Tensor::new(vec![1, m], data), Op::MeanCols { a }, &[a])
    }

    /// Applies a [`SamplePlan`] to a `[C, P]` map, producing `[S, C]`.
    pub fn resample(&mut self, x: Var, plan: SamplePlan) -> Var {
        let (c, p) = self.dims2(x);
        let src = &self.value(x).data;
        let s = plan.rows();
        let mut out = vec![F::zero(); s * c];
        for row in 0..s {
            let dst = &mut out[row * c..(row + 1) * c];
            for (i, wt) in plan.entries(row) {
                debug_assert!(i < p);
                let wt = F::of(wt);
                for (ch, d) in dst.iter_mut().enumerate() {
                    *d = *d + wt * src[ch * p + i];
                }
            }
        }
        self.push(Tensor::new(vec![s, c], out), Op::Resample { x, plan }, &[x])
    }

    /// Row `r` of the output is the mean of `table` rows listed in `rows[r]`
    /// (zeros when the list is empty).
    pub fn embed_mean(&mut self, table: Var, rows: Vec<Vec<usize>>) -> Var {
        let (_, d) = self.dims2(table);
        let t = &self.value(table).data;
        let mut out = vec![F::zero(); rows.len() * d];
        for (r, ids) in rows.iter().enumerate() {
            if ids.is_empty() {
                continue;
            }
            let inv = F::one() / F::of(ids.len() as f64);
            let dst = &mut out[r * d..(r + 1) * d];
            for &id in ids {
                for (o, v) in dst.iter_mut().zip(&t[id * d..(id + 1) * d]) {
                    *o = *o + *v * inv;
                }
            }
        }
        let n = rows.len();
        self.push(Tensor::new(vec![n, d], out), Op::EmbedMean { table, rows }, &[table])
    }

    /// A scalar whose gradient w.r.t. `a` is already known.
    pub fn fused_scalar(&mut self, a: Var, value: F, grad: Vec<F>) -> Var {
        assert_eq!(grad.len(), self.value(a).len());
        self.push(Tensor::new(vec![1], vec![value]), Op::Fused { a, grad }, &[a])
    }

    pub fn weighted_sum(&mut self, parts: &[(Var, f64)]) -> Var {
        let parts: Vec<(Var, F)> = parts.iter().map(|&(v, w)| (v, F::of(w))).collect();
        let total = parts
            .iter()
            .map(|&(v, w)| self.value(v).data.iter().copied().sum::<F>() * w)
            .fold(F::zero(), |a, b| a + b);
        let deps: Vec<Var> = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::new(vec![1], vec![total]), Op::WeightedSum { parts }, &deps)
    }

    /// `Σ a ⊙ w` for a fixed weight vector.
    pub fn dot(&mut self, a: Var, w: Vec<F>) -> Var {
        assert_eq!(w.len(), self.value(a).len());
        let v = self.value(a).data.iter().zip(&w).map(|(x, y)| *x * *y).sum();
        self.push(Tensor::new(vec![1], vec![v]), Op::Dot { a, w }, &[a])
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: Var) -> Grads<F> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut g: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Tensor::new(self.value(root).shape.clone(), vec![F::one()]));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = g[i].take() else { continue };
            self.propagate(node, &dy, &mut g);
            g[i] = Some(dy);
        }
        Grads {
            grads: g,
            params: self.params.clone(),
        }
    }

    fn propagate(&self, node: &Node<F>, dy: &Tensor<F>, g: &mut [Option<Tensor<F>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [F])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = g[v.0].get_or_insert_with(|| Tensor::zeros(&nodes[v.0].value.shape));
            f(&mut slot.data);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let sa = (va.rows(), va.cols());
                let sb = (vb.rows(), vb.cols());
                let sy = (dy.rows(), dy.cols());
                if wants(*a) {
                    acc(*a, &|da| {
                        if !*ta {
                            gemm(&dy.data, sy, false, &vb.data, sb, !*tb, da, true);
                        } else {
                            gemm(&vb.data, sb, *tb, &dy.data, sy, true, da, true);
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &|db| {
                        if !*tb {
                            gemm(&va.data, sa, !*ta, &dy.data, sy, false, db, true);
                        } else {
                            gemm(&dy.data, sy, true, &va.data, sa, *ta, db, true);
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                acc(*a, &|d| add_into(d, &dy.data));
                acc(*b, &|d| add_into(d, &dy.data));
            }
            Op::AddRow { a, bias } => {
                acc(*a, &|d| add_into(d, &dy.data));
                let n = dy.cols();
                acc(*bias, &|d| {
                    for row in dy.data.chunks_exact(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::AddCol { a, bias } => {
                acc(*a, &|d| add_into(d, &dy.data));
                let n = dy.cols();
                acc(*bias, &|d| {
                    for (o, row) in d.iter_mut().zip(dy.data.chunks_exact(n)) {
                        *o = *o + row.iter().copied().sum::<F>();
                    }
                });
            }
            Op::Scale { a, s } => acc(*a, &|d| {
                for (o, y) in d.iter_mut().zip(&dy.data) {
                    *o = *o + *y * *s;
                }
            }),
            Op::Silu { a } => {
                let x = &nodes[a.0].value.data;
                acc(*a, &|d| {
                    for ((o, y), &xv) in d.iter_mut().zip(&dy.data).zip(x) {
                        let s = sigmoid(xv);
                        *o = *o + *y * s * (F::one() + xv * (F::one() - s));
                    }
                });
            }
            Op::SoftmaxRows { a } => {
                let n = dy.cols();
                let p = &node.value.data;
                acc(*a, &|d| {
                    for ((drow, yrow), prow) in d
                        .chunks_exact_mut(n)
                        .zip(dy.data.chunks_exact(n))
                        .zip(p.chunks_exact(n))
                    {
                        let dot: F = yrow.iter().zip(prow).map(|(y, p)| *y * *p).sum();
                        for ((o, y), pv) in drow.iter_mut().zip(yrow).zip(prow) {
                            *o = *o + *pv * (*y - dot);
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = dy.cols();
                let m = dy.rows();
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(p, &|d| {
                        for r in 0..m {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &dy.data[r * total + off..r * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    acc(p, &|d| add_into(d, &dy.data[off..off + len]));
                    off += len;
                }
            }
            Op::RepeatRows { a, times } => {
                let n = dy.cols();
                acc(*a, &|d| {
                    for (r, drow) in d.chunks_exact_mut(n).enumerate() {
                        for s in 0..*times {
                            let k = r * times + s;
                            add_into(drow, &dy.data[k * n..(k + 1) * n]);
                        }
                    }
                });
            }
            Op::Reshape { a } => acc(*a, &|d| add_into(d, &dy.data)),
            Op::Conv { x, w, geo, cols } => {
                let kk = geo.patch();
                let p = geo.out_h() * geo.out_w();
                let c_out = dy.rows();
                acc(*w, &|dw| {
                    gemm(&dy.data, (c_out, p), false, cols, (kk, p), true, dw, true);
                });
                if wants(*x) {
                    let wv = &nodes[w.0].value.data;
                    let mut dcols = vec![F::zero(); kk * p];
                    gemm(wv, (c_out, kk), true, &dy.data, (c_out, p), false, &mut dcols, false);
                    let ow = geo.out_w();
                    acc(*x, &|dx| {
                        for r in 0..kk {
                            for oy in 0..geo.out_h() {
                                for ox in 0..ow {
                                    if let Some(s) = geo.source(r, oy, ox) {
                                        dx[s] = dx[s] + dcols[r * p + oy * ow + ox];
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::MeanCols { a } => {
                let n = nodes[a.0].value.cols();
                let inv = F::one() / F::of(n as f64);
                acc(*a, &|d| {
                    for (row, y) in d.chunks_exact_mut(n).zip(&dy.data) {
                        row.iter_mut().for_each(|o| *o = *o + *y * inv);
                    }
                });
            }
            Op::Resample { x, plan } => {
                let c = dy.cols();
                let p = nodes[x.0].value.cols();
                acc(*x, &|dx| {
                    for row in 0..plan.rows() {
                        let src = &dy.data[row * c..(row + 1) * c];
                        for (i, wt) in plan.entries(row) {
                            let wt = F::of(wt);
                            for (ch, y) in src.iter().enumerate() {
                                dx[ch * p + i] = dx[ch * p + i] + wt * *y;
                            }
                        }
                    }
                });
            }
            Op::EmbedMean { table, rows } => {
                let d = dy.cols();
                acc(*table, &|dt| {
                    for (r, ids) in rows.iter().enumerate() {
                        if ids.is_empty() {
                            continue;
                        }
                        let inv = F::one() / F::of(ids.len() as f64);
                        let src = &dy.data[r * d..(r + 1) * d];
                        for &id in ids {
                            for (o, y) in dt[id * d..(id + 1) * d].iter_mut().zip(src) {
                                *o = *o + *y * inv;
                            }
                        }
                    }
                });
            }
            Op::Fused { a, grad } => {
                let s = dy.data[0];
                acc(*a, &|d| {
                    for (o, gv) in d.iter_mut().zip(grad) {
                        *o = *o + *gv * s;
                    }
                });
            }
            Op::WeightedSum { parts } => {
                let s = dy.data[0];
                for &(v, w) in parts {
                    acc(v, &|d| d.iter_mut().for_each(|o| *o = *o + s * w));
                }
            }
            Op::Dot { a, w } => {
                let s = dy.data[0];
                acc(*a, &|d| {
                    for (o, wv) in d.iter_mut().zip(w) {
                        *o = *o + *wv * s;
                    }
                });
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: HashMap<usize, Var>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of the parameter registered under `id`, if it was used.
    pub fn param(&self, id: usize) -> Option<&Tensor<F>> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// Ids of every parameter that was placed on the tape.
    pub fn param_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.params.keys().copied().collect();
        ids.sort_unstable();
        ids
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// In-place masked softmax over one row.
pub fn softmax_masked<F: Scalar>(row: &mut [F], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = F::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        row.iter_mut().for_each(|v| *v = F::zero());
        return;
    }
    let mut sum = F::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            sum = sum + *v;
        } else {
            *v = F::zero();
        }
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}
