//! Minimal reverse-mode autodiff over `ndarray` f64 tensors.
//!
//! A [`Graph`] is a single-threaded tape: every operation appends a node
//! holding its value plus whatever the backward pass needs. Gradients are
//! computed by one reverse sweep. All kernels are deterministic (fixed
//! iteration order, single-threaded matmul), which is what makes training
//! runs bit-reproducible.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// [M,N] x [N,K]
    MatMul(Var, Var),
    /// [M,N] + [N] broadcast over rows
    AddRowBias(Var, Var),
    /// [C,H,W] + [C] broadcast over spatial dims
    AddChanBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        /// saved im2col matrix [Ho*Wo, Cin*K*K]
        cols: Array2<f64>,
    },
    UpsampleNearest2(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        inv_std: Vec<f64>,
        xhat: Arr,
    },
    SiLU(Var),
    /// softmax over the last axis of a 2-D array
    SoftmaxRows(Var),
    Reshape(Var),
    Transpose2(Var),
    /// rows gathered from a 2-D table
    GatherRows { table: Var, ids: Vec<usize> },
    /// out = base with one row replaced
    AssignRow { base: Var, row: Var, index: usize },
    SliceCols { x: Var, start: usize, end: usize },
    ConcatCols(Vec<Var>),
    ConcatChan(Vec<Var>),
    MeanAll(Var),
    SumAll(Var),
    Abs(Var),
    /// scalar max over all elements; gradient routes to the first argmax
    MaxAll(Var),
    /// elementwise division by a scalar (0-dim) variable
    DivScalarVar { x: Var, s: Var },
}

struct Node {
    value: Arr,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape.
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by node id, produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn scalar(v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        debug_assert_eq!(a.len(), 1);
        *a.iter().next().unwrap()
    }

    fn push(&mut self, value: Arr, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input: no gradient flows into it.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf with gradient tracking (parameters, override vectors).
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * k);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, k), g)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + k);
        let g = self.ng(a);
        self.push(v, Op::AddScalar(a), g)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let v = av.dot(&bv).into_dyn();
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = as2(self.value(x));
        let bv = as1(self.value(b));
        let v = (&xv + &bv).into_dyn();
        let g = self.ng(x) || self.ng(b);
        self.push(v, Op::AddRowBias(x, b), g)
    }

    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = as3(self.value(x));
        let bv = as1(self.value(b));
        let mut v = xv.to_owned();
        for (c, mut plane) in v.axis_iter_mut(Axis(0)).enumerate() {
            plane += bv[c];
        }
        let g = self.ng(x) || self.ng(b);
        self.push(v.into_dyn(), Op::AddChanBias(x, b), g)
    }

    /// 2-D convolution via im2col. `x`: [Cin,H,W], `w`: [Cout,Cin,K,K].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = as3(self.value(x));
        let ws = self.value(w).shape().to_vec();
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        debug_assert_eq!(xv.shape()[0], cin);
        let (h, wd) = (xv.shape()[1], xv.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        // cols layout [Cin*K*K, Ho*Wo]: contiguous inner writes, and the
        // matmul result reshapes straight into [Cout, Ho, Wo]
        let cols = im2col(&xv, k, stride, pad, ho, wo);
        let wmat = self.value(w)
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .unwrap()
            .to_owned();
        let out_mat = wmat.dot(&cols); // [Cout, Ho*Wo]
        let out = out_mat.into_shape_with_order((cout, ho, wo)).unwrap();
        let g = self.ng(x) || self.ng(w);
        self.push(out.into_dyn(), Op::Conv2d { x, w, stride, pad, cols }, g)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Array3::<f64>::zeros((c, h * 2, w * 2));
        for ci in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    let v = xv[[ci, y, x_]];
                    out[[ci, 2 * y, 2 * x_]] = v;
                    out[[ci, 2 * y + 1, 2 * x_]] = v;
                    out[[ci, 2 * y, 2 * x_ + 1]] = v;
                    out[[ci, 2 * y + 1, 2 * x_ + 1]] = v;
                }
            }
        }
        let g = self.ng(x);
        self.push(out.into_dyn(), Op::UpsampleNearest2(x), g)
    }

    /// Group normalization over [C,H,W] with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = as3(self.value(x)).to_owned();
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(c % groups == 0, "channels {} not divisible by groups {}", c, groups);
        let cg = c / groups;
        let gv = as1(self.value(gamma)).to_owned();
        let bv = as1(self.value(beta)).to_owned();
        let mut xhat = Array3::<f64>::zeros((c, h, w));
        let mut inv_std = vec![0.0; groups];
        for g in 0..groups {
            let sl = xv.slice(ndarray::s![g * cg..(g + 1) * cg, .., ..]);
            let n = (cg * h * w) as f64;
            let mean = sl.sum() / n;
            let var = sl.mapv(|v| (v - mean) * (v - mean)).sum() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[g] = is;
            let mut dst = xhat.slice_mut(ndarray::s![g * cg..(g + 1) * cg, .., ..]);
            dst.assign(&sl.mapv(|v| (v - mean) * is));
        }
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            let (gm, bt) = (gv[ci], bv[ci]);
            let src = xhat.index_axis(Axis(0), ci);
            let mut dst = out.index_axis_mut(Axis(0), ci);
            dst.assign(&src.mapv(|v| v * gm + bt));
        }
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out.into_dyn(),
            Op::GroupNorm { x, gamma, beta, groups, inv_std, xhat: xhat.into_dyn() },
            g,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| t * sigmoid(t));
        let g = self.ng(x);
        self.push(v, Op::SiLU(x), g)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = as2(self.value(x));
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let g = self.ng(x);
        self.push(out.into_dyn(), Op::SoftmaxRows(x), g)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes[x.0]
            .value
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shape")
            .to_owned();
        let g = self.ng(x);
        self.push(v, Op::Reshape(x), g)
    }

    pub fn transpose2(&mut self, x: Var) -> Var {
        let xv = as2(self.value(x));
        let v = xv.t().as_standard_layout().to_owned().into_dyn();
        let g = self.ng(x);
        self.push(v, Op::Transpose2(x), g)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = as2(self.value(table));
        let d = tv.shape()[1];
        let mut out = Array2::<f64>::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&tv.row(id));
        }
        let g = self.ng(table);
        self.push(out.into_dyn(), Op::GatherRows { table, ids: ids.to_vec() }, g)
    }

    /// Replace one row of a 2-D array with a 1-D vector.
    pub fn assign_row(&mut self, base: Var, row: Var, index: usize) -> Var {
        let bv = as2(self.value(base)).to_owned();
        let rv = as1(self.value(row)).to_owned();
        debug_assert_eq!(bv.shape()[1], rv.len());
        let mut out = bv;
        out.row_mut(index).assign(&rv);
        let g = self.ng(base) || self.ng(row);
        self.push(out.into_dyn(), Op::AssignRow { base, row, index }, g)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = as2(self.value(x));
        let v = xv.slice(ndarray::s![.., start..end]).to_owned().into_dyn();
        let g = self.ng(x);
        self.push(v, Op::SliceCols { x, start, end }, g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let v = ndarray::concatenate(
            Axis(1),
            &views.iter().map(|a| a.view()).collect::<Vec<_>>(),
        )
        .unwrap()
        .into_dyn();
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_chan(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| as3(self.value(p))).collect();
        let v = ndarray::concatenate(
            Axis(0),
            &views.iter().map(|a| a.view()).collect::<Vec<_>>(),
        )
        .unwrap()
        .into_dyn();
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatChan(parts.to_vec()), g)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = scalar(self.nodes[x.0].value.mean().unwrap());
        let g = self.ng(x);
        self.push(v, Op::MeanAll(x), g)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = scalar(self.nodes[x.0].value.sum());
        let g = self.ng(x);
        self.push(v, Op::SumAll(x), g)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(f64::abs);
        let g = self.ng(x);
        self.push(v, Op::Abs(x), g)
    }

    pub fn max_all(&mut self, x: Var) -> Var {
        let m = self.nodes[x.0].value.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = self.ng(x);
        self.push(scalar(m), Op::MaxAll(x), g)
    }

    /// Elementwise x / s where s is a 0-dim variable.
    pub fn div_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.nodes[x.0].value.mapv(|t| t / sv);
        let g = self.ng(x) || self.ng(s);
        self.push(v, Op::DivScalarVar { x, s }, g)
    }

    // ---- composite helpers ----

    /// Mean squared error between two same-shape tensors (0-dim output).
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// mean(|x - t|) against a constant target.
    pub fn mean_abs_to(&mut self, x: Var, target: &Arr) -> Var {
        let t = self.constant(target.clone());
        let d = self.sub(x, t);
        let a = self.abs(d);
        self.mean_all(a)
    }

    /// Reverse sweep from `loss` (must be 0-dim).
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(scalar(1.0));
        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backprop(id, &g, &mut grads);
            // leaves keep their gradient
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Grads { grads }
    }

    fn backprop(&self, id: usize, g: &Arr, grads: &mut [Option<Arr>]) {
        let acc = |grads: &mut [Option<Arr>], v: Var, contrib: Arr, nodes: &[Node]| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => *a += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        let nodes = &self.nodes;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone(), nodes);
                acc(grads, *b, g.clone(), nodes);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone(), nodes);
                acc(grads, *b, g.mapv(|v| -v), nodes);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * &nodes[b.0].value, nodes);
                acc(grads, *b, g * &nodes[a.0].value, nodes);
            }
            Op::Scale(a, k) => acc(grads, *a, g.mapv(|v| v * k), nodes),
            Op::AddScalar(a) => acc(grads, *a, g.clone(), nodes),
            Op::MatMul(a, b) => {
                let gv = as2(g);
                let av = as2(&nodes[a.0].value);
                let bv = as2(&nodes[b.0].value);
                acc(grads, *a, gv.dot(&bv.t()).into_dyn(), nodes);
                acc(grads, *b, av.t().dot(&gv).into_dyn(), nodes);
            }
            Op::AddRowBias(x, b) => {
                acc(grads, *x, g.clone(), nodes);
                let gv = as2(g);
                acc(grads, *b, gv.sum_axis(Axis(0)).into_dyn(), nodes);
            }
            Op::AddChanBias(x, b) => {
                acc(grads, *x, g.clone(), nodes);
                let gv = as3(g);
                let mut db = Array1::<f64>::zeros(gv.shape()[0]);
                for (c, plane) in gv.axis_iter(Axis(0)).enumerate() {
                    db[c] = plane.sum();
                }
                acc(grads, *b, db.into_dyn(), nodes);
            }
            Op::Conv2d { x, w, stride, pad, cols } => {
                let ws = nodes[w.0].value.shape().to_vec();
                let (cout, cin, k) = (ws[0], ws[1], ws[2]);
                let gv = as3(g);
                let (ho, wo) = (gv.shape()[1], gv.shape()[2]);
                // [Cout, Ho*Wo], no copy needed beyond the reshape
                let gmat = gv
                    .into_shape_with_order((cout, ho * wo))
                    .unwrap()
                    .to_owned();
                if nodes[w.0].needs_grad {
                    let dw = gmat.dot(&cols.t()); // [Cout, Cin*K*K]
                    let dw = dw
                        .into_shape_with_order(IxDyn(&[cout, cin, k, k]))
                        .unwrap();
                    acc(grads, *w, dw, nodes);
                }
                if nodes[x.0].needs_grad {
                    let wmat = nodes[w.0]
                        .value
                        .view()
                        .into_shape_with_order((cout, cin * k * k))
                        .unwrap()
                        .to_owned();
                    let dcols = wmat.t().dot(&gmat); // [Cin*K*K, Ho*Wo]
                    let xs = nodes[x.0].value.shape();
                    let dx = col2im(&dcols, xs[0], xs[1], xs[2], k, *stride, *pad, ho, wo);
                    acc(grads, *x, dx.into_dyn(), nodes);
                }
            }
            Op::UpsampleNearest2(x) => {
                let gv = as3(g);
                let (c, h2, w2) = (gv.shape()[0], gv.shape()[1], gv.shape()[2]);
                let (h, w) = (h2 / 2, w2 / 2);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..h {
                        for x_ in 0..w {
                            dx[[ci, y, x_]] = gv[[ci, 2 * y, 2 * x_]]
                                + gv[[ci, 2 * y + 1, 2 * x_]]
                                + gv[[ci, 2 * y, 2 * x_ + 1]]
                                + gv[[ci, 2 * y + 1, 2 * x_ + 1]];
                        }
                    }
                }
                acc(grads, *x, dx.into_dyn(), nodes);
            }
            Op::GroupNorm { x, gamma, beta, groups, inv_std, xhat } => {
                let gv = as3(g);
                let xh = as3(xhat);
                let (c, h, w) = (gv.shape()[0], gv.shape()[1], gv.shape()[2]);
                let cg = c / groups;
                let gamma_v = as1(&nodes[gamma.0].value);
                if nodes[beta.0].needs_grad {
                    let mut db = Array1::<f64>::zeros(c);
                    for ci in 0..c {
                        db[ci] = gv.index_axis(Axis(0), ci).sum();
                    }
                    acc(grads, *beta, db.into_dyn(), nodes);
                }
                if nodes[gamma.0].needs_grad {
                    let mut dg = Array1::<f64>::zeros(c);
                    for ci in 0..c {
                        dg[ci] = (&gv.index_axis(Axis(0), ci) * &xh.index_axis(Axis(0), ci)).sum();
                    }
                    acc(grads, *gamma, dg.into_dyn(), nodes);
                }
                if nodes[x.0].needs_grad {
                    let mut dx = Array3::<f64>::zeros((c, h, w));
                    let n = (cg * h * w) as f64;
                    for gi in 0..*groups {
                        let sl = ndarray::s![gi * cg..(gi + 1) * cg, .., ..];
                        // d_xhat = g * gamma (per channel)
                        let mut dxhat = Array3::<f64>::zeros((cg, h, w));
                        for (j, ci) in (gi * cg..(gi + 1) * cg).enumerate() {
                            let src = gv.index_axis(Axis(0), ci);
                            let mut dst = dxhat.index_axis_mut(Axis(0), j);
                            dst.assign(&src.mapv(|v| v * gamma_v[ci]));
                        }
                        let xh_g = xh.slice(sl);
                        let mean_dxhat = dxhat.sum() / n;
                        let mean_dxhat_xhat = (&dxhat * &xh_g).sum() / n;
                        let is = inv_std[gi];
                        let mut dst = dx.slice_mut(sl);
                        let val = dxhat
                            .iter()
                            .zip(xh_g.iter())
                            .map(|(&dh, &xv)| is * (dh - mean_dxhat - xv * mean_dxhat_xhat))
                            .collect::<Vec<f64>>();
                        let val = Array3::from_shape_vec((cg, h, w), val).unwrap();
                        dst.assign(&val);
                    }
                    acc(grads, *x, dx.into_dyn(), nodes);
                }
            }
            Op::SiLU(x) => {
                let xv = &nodes[x.0].value;
                let dx = ndarray::Zip::from(g).and(xv).map_collect(|&gg, &t| {
                    let s = sigmoid(t);
                    gg * s * (1.0 + t * (1.0 - s))
                });
                acc(grads, *x, dx, nodes);
            }
            Op::SoftmaxRows(x) => {
                let y = as2(&nodes[id].value);
                let gv = as2(g);
                let mut dx = Array2::<f64>::zeros((y.shape()[0], y.shape()[1]));
                for r in 0..y.shape()[0] {
                    let yr = y.row(r);
                    let gr = gv.row(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    let mut dr = dx.row_mut(r);
                    for j in 0..yr.len() {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, dx.into_dyn(), nodes);
            }
            Op::Reshape(x) => {
                let ps = nodes[x.0].value.shape().to_vec();
                let dx = g.view().into_shape_with_order(IxDyn(&ps)).unwrap().to_owned();
                acc(grads, *x, dx, nodes);
            }
            Op::Transpose2(x) => {
                let gv = as2(g);
                acc(grads, *x, gv.t().as_standard_layout().to_owned().into_dyn(), nodes);
            }
            Op::GatherRows { table, ids } => {
                let gv = as2(g);
                let ts = nodes[table.0].value.shape().to_vec();
                let mut dt = Array2::<f64>::zeros((ts[0], ts[1]));
                for (i, &idx) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(idx);
                    row += &gv.row(i);
                }
                acc(grads, *table, dt.into_dyn(), nodes);
            }
            Op::AssignRow { base, row, index } => {
                let gv = as2(g);
                if nodes[base.0].needs_grad {
                    let mut db = gv.to_owned();
                    db.row_mut(*index).fill(0.0);
                    acc(grads, *base, db.into_dyn(), nodes);
                }
                acc(grads, *row, gv.row(*index).to_owned().into_dyn(), nodes);
            }
            Op::SliceCols { x, start, end } => {
                let gv = as2(g);
                let xs = nodes[x.0].value.shape().to_vec();
                let mut dx = Array2::<f64>::zeros((xs[0], xs[1]));
                dx.slice_mut(ndarray::s![.., *start..*end]).assign(&gv);
                acc(grads, *x, dx.into_dyn(), nodes);
            }
            Op::ConcatCols(parts) => {
                let gv = as2(g);
                let mut start = 0;
                for &p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    let dp = gv.slice(ndarray::s![.., start..start + w]).to_owned();
                    acc(grads, p, dp.into_dyn(), nodes);
                    start += w;
                }
            }
            Op::ConcatChan(parts) => {
                let gv = as3(g);
                let mut start = 0;
                for &p in parts {
                    let c = nodes[p.0].value.shape()[0];
                    let dp = gv.slice(ndarray::s![start..start + c, .., ..]).to_owned();
                    acc(grads, p, dp.into_dyn(), nodes);
                    start += c;
                }
            }
            Op::MeanAll(x) => {
                let n = nodes[x.0].value.len() as f64;
                let gs = g.iter().next().copied().unwrap();
                let dx = nodes[x.0].value.mapv(|_| gs / n);
                acc(grads, *x, dx, nodes);
            }
            Op::SumAll(x) => {
                let gs = g.iter().next().copied().unwrap();
                let dx = nodes[x.0].value.mapv(|_| gs);
                acc(grads, *x, dx, nodes);
            }
            Op::Abs(x) => {
                let xv = &nodes[x.0].value;
                let dx = ndarray::Zip::from(g).and(xv).map_collect(|&gg, &t| {
                    if t > 0.0 {
                        gg
                    } else if t < 0.0 {
                        -gg
                    } else {
                        0.0
                    }
                });
                acc(grads, *x, dx, nodes);
            }
            Op::MaxAll(x) => {
                let xv = &nodes[x.0].value;
                let m = nodes[id].value.iter().next().copied().unwrap();
                let gs = g.iter().next().copied().unwrap();
                let mut dx = ArrayD::<f64>::zeros(xv.raw_dim());
                // first argmax wins; deterministic tie break
                if let Some(pos) = xv.iter().position(|&v| v == m) {
                    dx.as_slice_mut().unwrap()[pos] = gs;
                }
                acc(grads, *x, dx, nodes);
            }
            Op::DivScalarVar { x, s } => {
                let sv = nodes[s.0].value.iter().next().copied().unwrap();
                if nodes[x.0].needs_grad {
                    acc(grads, *x, g.mapv(|v| v / sv), nodes);
                }
                if nodes[s.0].needs_grad {
                    let xv = &nodes[x.0].value;
                    let ds: f64 = g
                        .iter()
                        .zip(xv.iter())
                        .map(|(&gg, &xx)| -gg * xx / (sv * sv))
                        .sum();
                    acc(grads, *s, scalar(ds), nodes);
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn as1(a: &Arr) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality().expect("expected 1-D")
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("expected 2-D")
}

fn as3(a: &Arr) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality().expect("expected 3-D")
}

/// im2col with layout [Cin*K*K, Ho*Wo]; the inner loop over output x is a
/// contiguous write with strided contiguous reads.
fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<f64>::zeros((cin * k * k, ho * wo));
    let xs = x.as_slice().expect("conv input must be standard layout");
    let cs = cols.as_slice_mut().unwrap();
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let crow = (c * k * k + ky * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (c * h + iy as usize) * w;
                    let dst = crow + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cs[dst + ox] = xs[xrow + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((cin, h, w));
    let ds = dcols.as_slice().expect("dcols standard layout");
    let out = dx.as_slice_mut().unwrap();
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let crow = (c * k * k + ky * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (c * h + iy as usize) * w;
                    let src = crow + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[xrow + ix as usize] += ds[src + ox];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = rng.random::<f64>() * 2.0 - 1.0;
                x
            })
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    /// Central finite-difference check of d loss / d input against autodiff.
    fn check_grad<F>(build: F, shape: &[usize], seed: u64, tol: f64)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = randn(&mut rng, shape);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let loss = build(&mut g, x);
        assert_eq!(g.value(loss).len(), 1, "loss must be scalar");
        let grads = g.backward(loss);
        let ga = grads.get(x).expect("no gradient").clone();

        let h = 1e-5;
        for idx in 0..x0.len() {
            let mut xp = x0.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut gp = Graph::new();
            let vp = gp.leaf(xp);
            let lossp = build(&mut gp, vp);
            let lp = gp.scalar_value(lossp);

            let mut xm = x0.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let mut gm = Graph::new();
            let vm = gm.leaf(xm);
            let lossm = build(&mut gm, vm);
            let lm = gm.scalar_value(lossm);

            let fd = (lp - lm) / (2.0 * h);
            let an = ga.as_slice().unwrap()[idx];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(
                err < tol,
                "grad mismatch at {}: analytic {} vs fd {} (err {})",
                idx,
                an,
                fd,
                err
            );
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        check_grad(
            |g, x| {
                let y = g.silu(x);
                let z = g.mul(y, y);
                let a = g.abs(z);
                let b = g.add_scalar(a, 0.3);
                let c = g.scale(b, 1.7);
                g.mean_all(c)
            },
            &[3, 4],
            1,
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_and_softmax() {
        check_grad(
            |g, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(77);
                let w = g.constant(randn(&mut rng, &[4, 5]));
                let y = g.matmul(x, w);
                let p = g.softmax_rows(y);
                let t = g.constant(ArrayD::from_elem(IxDyn(&[3, 5]), 0.2));
                g.mse(p, t)
            },
            &[3, 4],
            2,
            1e-6,
        );
    }

    #[test]
    fn grad_conv2d_x_and_w() {
        // gradient w.r.t. input
        check_grad(
            |g, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let w = g.constant(randn(&mut rng, &[3, 2, 3, 3]));
                let y = g.conv2d(x, w, 1, 1);
                let t = g.constant(ArrayD::zeros(IxDyn(&[3, 5, 5])));
                g.mse(y, t)
            },
            &[2, 5, 5],
            3,
            1e-6,
        );
        // gradient w.r.t. weights
        check_grad(
            |g, w| {
                let mut rng = ChaCha8Rng::seed_from_u64(6);
                let x = g.constant(randn(&mut rng, &[2, 5, 5]));
                let y = g.conv2d(x, w, 1, 1);
                let t = g.constant(ArrayD::zeros(IxDyn(&[3, 5, 5])));
                g.mse(y, t)
            },
            &[3, 2, 3, 3],
            4,
            1e-6,
        );
        // strided
        check_grad(
            |g, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                let w = g.constant(randn(&mut rng, &[3, 2, 3, 3]));
                let y = g.conv2d(x, w, 2, 1);
                let t = g.constant(ArrayD::zeros(IxDyn(&[3, 3, 3])));
                g.mse(y, t)
            },
            &[2, 6, 6],
            8,
            1e-6,
        );
    }

    #[test]
    fn grad_group_norm() {
        check_grad(
            |g, x| {
                let gamma = g.leaf(ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.1, 0.9, 1.3, 0.8]).unwrap());
                let beta = g.constant(ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.1, -0.2, 0.0, 0.3]).unwrap());
                let y = g.group_norm(x, gamma, beta, 2, 1e-5);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            &[4, 3, 3],
            9,
            1e-5,
        );
    }

    #[test]
    fn grad_gather_assign_slice_concat() {
        check_grad(
            |g, table| {
                let seq = g.gather_rows(table, &[0, 2, 1, 2]);
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let row = g.constant(randn(&mut rng, &[3]));
                let seq = g.assign_row(seq, row, 1);
                let a = g.slice_cols(seq, 0, 2);
                let b = g.slice_cols(seq, 2, 3);
                let c = g.concat_cols(&[b, a]);
                let sq = g.mul(c, c);
                g.mean_all(sq)
            },
            &[3, 3],
            12,
            1e-6,
        );
    }

    #[test]
    fn grad_upsample_and_chan_ops() {
        check_grad(
            |g, x| {
                let up = g.upsample_nearest2(x);
                let b = g.leaf(arr1(&[0.2, -0.4]).into_dyn());
                let y = g.add_chan_bias(up, b);
                let c = g.concat_chan(&[y, up]);
                let sq = g.mul(c, c);
                g.mean_all(sq)
            },
            &[2, 3, 3],
            13,
            1e-6,
        );
    }

    #[test]
    fn grad_max_norm_path() {
        // mimic the per-map max-normalization used by the attention loss
        check_grad(
            |g, x| {
                let m = g.max_all(x);
                let y = g.div_scalar_var(x, m);
                let t = g.constant(ArrayD::from_elem(IxDyn(&[4, 4]), 0.5));
                let d = g.sub(y, t);
                let a = g.abs(d);
                g.mean_all(a)
            },
            &[4, 4],
            14,
            1e-5,
        );
    }

    #[test]
    fn grad_transpose_reshape() {
        check_grad(
            |g, x| {
                let t = g.transpose2(x);
                let r = g.reshape(t, &[2, 6]);
                let sq = g.mul(r, r);
                g.sum_all(sq)
            },
            &[4, 3],
            15,
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(arr2(&[[1.0, 2.0, 3.0], [0.0, -1.0, 5.0]]).into_dyn());
        let p = g.softmax_rows(x);
        let v = as2(g.value(p));
        for row in v.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_leaf_accumulates() {
        // y = x*x + x  => dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(arr1(&[3.0]).into_dyn());
        let sq = g.mul(x, x);
        let y = g.add(sq, x);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        assert!((gx[[0]] - 7.0).abs() < 1e-12);
    }
}
