//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every model in this crate builds a fresh [`Graph`] per forward pass. Nodes
//! are appended in evaluation order, so the reverse pass is a single sweep
//! from the last node to the first. Parameters live in a [`ParamStore`] and
//! enter a graph as shared leaves; their gradients are collected by
//! [`Gradients::param_grads`].
//!
//! Values are row-major `p×d` matrices throughout. Row vectors are `1×d`,
//! column vectors `p×1`, scalars `1×1`.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a tensor of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Arc<Mat>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name: names are assigned by
    /// model constructors and a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: Arc::new(value),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Rounds every value to the nearest `f32`, so that a checkpoint (which
    /// stores `f32`) reloads to exactly these values.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            Arc::make_mut(&mut p.value).mapv_inplace(|x| x as f32 as f64);
        }
    }

    fn shared(&self, id: ParamId) -> Arc<Mat> {
        Arc::clone(&self.params[id.0].value)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Mat>),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    MaskCols(Var, Arc<Vec<bool>>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    GatherScalars(Var, Arc<Vec<usize>>),
    SegmentMax(Var, Vec<usize>),
    SegmentMean(Var, Vec<(usize, usize)>),
    Sum(Var),
    RowL2Normalize(Var, Vec<f64>),
    RowNorm(Var),
    Diag(Var),
}

struct Node {
    value: Arc<Mat>,
    op: Op,
    needs_grad: bool,
}

/// A single forward computation recorded for reverse-mode differentiation.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Mat>, op: Op, needs_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Reads a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf whose gradient can be read back with
    /// [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push_shared(store.shared(id), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulBt(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds a `1×d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, d) = self.shape(a);
        assert_eq!(self.shape(row), (1, d), "add_row: row shape");
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Element-wise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Arc<Mat>) -> Var {
        assert_eq!(self.shape(a), c.dim(), "mul_const: shape mismatch");
        let v = self.value(a) * &*c;
        let ng = self.ng(a);
        self.push(v, Op::MulConst(a, c), ng)
    }

    /// Scales row `i` of `a` (`p×d`) by `w[i]` (`w` is `p×1`).
    pub fn mul_col(&mut self, a: Var, w: Var) -> Var {
        let (p, _) = self.shape(a);
        assert_eq!(self.shape(w), (p, 1), "mul_col: weight shape");
        let v = self.value(a) * self.value(w);
        let ng = self.ng(a) || self.ng(w);
        self.push(v, Op::MulCol(a, w), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// Adds `-inf` to every column `j` where `masked[j]` is true.
    pub fn mask_cols(&mut self, a: Var, masked: Arc<Vec<bool>>) -> Var {
        let (_, d) = self.shape(a);
        assert_eq!(masked.len(), d, "mask_cols: mask length");
        let mut v = self.value(a).clone();
        for (j, &m) in masked.iter().enumerate() {
            if m {
                v.column_mut(j).fill(f64::NEG_INFINITY);
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::MaskCols(a, masked), ng)
    }

    /// Row-wise softmax. `-inf` entries receive probability zero.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "softmax: row has no finite entry");
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmax(a), ng)
    }

    /// Row-wise layer normalization with `1×d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (p, d) = xv.dim();
        let mut xhat = Mat::zeros((p, d));
        let mut inv_std = Vec::with_capacity(p);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    /// Embedding lookup: row `k` of the output is row `idx[k]` of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: Arc<Vec<usize>>) -> Var {
        let t = self.value(table);
        let d = t.ncols();
        let mut v = Mat::zeros((idx.len(), d));
        for (k, &i) in idx.iter().enumerate() {
            v.row_mut(k).assign(&t.row(i));
        }
        let ng = self.ng(table);
        self.push(v, Op::GatherRows(table, idx), ng)
    }

    /// Builds a `rows×cols` matrix whose entry `(i,j)` is `src[idx[i*cols+j]]`
    /// where `src` is a column vector.
    pub fn gather_scalars(&mut self, src: Var, idx: Arc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather_scalars: index length");
        let s = self.value(src);
        assert_eq!(s.ncols(), 1, "gather_scalars: source must be a column");
        let v = Mat::from_shape_fn((rows, cols), |(i, j)| s[[idx[i * cols + j], 0]]);
        let ng = self.ng(src);
        self.push(v, Op::GatherScalars(src, idx), ng)
    }

    /// Column-wise max over contiguous row segments. `lens` gives each
    /// segment's row count; the output has one row per segment.
    pub fn segment_max(&mut self, a: Var, lens: &[usize]) -> Var {
        let av = self.value(a);
        let d = av.ncols();
        assert_eq!(lens.iter().sum::<usize>(), av.nrows(), "segment_max: lengths");
        let mut v = Mat::zeros((lens.len(), d));
        let mut arg = vec![0usize; lens.len() * d];
        let mut start = 0;
        for (k, &len) in lens.iter().enumerate() {
            assert!(len > 0, "segment_max: empty segment");
            for j in 0..d {
                let mut best = start;
                let mut best_v = av[[start, j]];
                for i in start + 1..start + len {
                    // strict comparison keeps the first maximal row
                    if av[[i, j]] > best_v {
                        best_v = av[[i, j]];
                        best = i;
                    }
                }
                v[[k, j]] = best_v;
                arg[k * d + j] = best;
            }
            start += len;
        }
        let ng = self.ng(a);
        self.push(v, Op::SegmentMax(a, arg), ng)
    }

    /// Column-wise max over all rows, `p×d → 1×d`.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let p = self.shape(a).0;
        self.segment_max(a, &[p])
    }

    /// Column-wise mean over contiguous row segments.
    pub fn segment_mean(&mut self, a: Var, lens: &[usize]) -> Var {
        let av = self.value(a);
        let d = av.ncols();
        assert_eq!(lens.iter().sum::<usize>(), av.nrows(), "segment_mean: lengths");
        let mut v = Mat::zeros((lens.len(), d));
        let mut segs = Vec::with_capacity(lens.len());
        let mut start = 0;
        for (k, &len) in lens.iter().enumerate() {
            assert!(len > 0, "segment_mean: empty segment");
            let m = av
                .slice(s![start..start + len, ..])
                .mean_axis(Axis(0))
                .expect("non-empty");
            v.row_mut(k).assign(&m);
            segs.push((start, len));
            start += len;
        }
        let ng = self.ng(a);
        self.push(v, Op::SegmentMean(a, segs), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let p = self.shape(a).0;
        self.segment_mean(a, &[p])
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Divides every row by its Euclidean norm.
    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            row /= n;
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(v, Op::RowL2Normalize(a, norms), ng)
    }

    /// Euclidean norm of each row, `p×d → p×1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = Mat::from_shape_fn((av.nrows(), 1), |(i, _)| {
            av.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()
        });
        let ng = self.ng(a);
        self.push(v, Op::RowNorm(a), ng)
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = av.dim();
        assert_eq!(n, m, "diag: not square");
        let v = Mat::from_shape_fn((n, 1), |(i, _)| av[[i, i]]);
        let ng = self.ng(a);
        self.push(v, Op::Diag(a), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be scalar");
        self.backward_with(root, Mat::from_elem((1, 1), 1.0))
    }

    /// Reverse pass seeded with an explicit upstream gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: Mat) -> Gradients {
        assert_eq!(self.shape(root), seed.dim(), "backward: seed shape");
        let mut grads: Vec<Option<Mat>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let Op::Param(pid) = node.op {
                if let Some(g) = grads[idx].take() {
                    params.push((pid, g));
                }
            }
        }
        Gradients { nodes: grads, params }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| -> &Mat { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(&val(*b).t()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(val(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.t().dot(val(*a)));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*row) {
                    self.acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    self.acc(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * val(*b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g * val(*a));
                }
            }
            Op::MulConst(a, c) => self.acc(grads, *a, g * &**c),
            Op::MulCol(a, w) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * val(*w));
                }
                if self.ng(*w) {
                    let gw = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.acc(grads, *w, gw);
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g * *k),
            Op::Relu(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(val(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = ndarray::Zip::from(g).and(&**y).map_collect(|&g, &y| g * (1.0 - y * y));
                self.acc(grads, *a, d);
            }
            Op::MaskCols(a, masked) => {
                let mut d = g.clone();
                for (j, &m) in masked.iter().enumerate() {
                    if m {
                        d.column_mut(j).fill(0.0);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = g * &**y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                }
                self.acc(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let total: f64 = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv.exp() * total);
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.ng(*gain) {
                    let gg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *gain, gg);
                }
                if self.ng(*bias) {
                    self.acc(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = g * val(*gain);
                    let d = dxhat.ncols() as f64;
                    let mut dx = Mat::zeros(dxhat.dim());
                    for i in 0..dxhat.nrows() {
                        let dr = dxhat.row(i);
                        let xr = xhat.row(i);
                        let m1 = dr.sum() / d;
                        let m2 = dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                        for j in 0..dxhat.ncols() {
                            dx[[i, j]] = inv_std[i] * (dr[j] - m1 - xr[j] * m2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        self.acc(grads, p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.ng(*a) {
                    let mut d = Mat::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    self.acc(grads, *a, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.ng(p) {
                        self.acc(grads, p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                if self.ng(*a) {
                    let mut d = Mat::zeros(self.shape(*a));
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                    self.acc(grads, *a, d);
                }
            }
            Op::GatherRows(table, idx) => {
                let mut d = Mat::zeros(self.shape(*table));
                for (k, &i) in idx.iter().enumerate() {
                    let mut r = d.row_mut(i);
                    r += &g.row(k);
                }
                self.acc(grads, *table, d);
            }
            Op::GatherScalars(src, idx) => {
                let mut d = Mat::zeros(self.shape(*src));
                for (k, gv) in g.iter().enumerate() {
                    d[[idx[k], 0]] += gv;
                }
                self.acc(grads, *src, d);
            }
            Op::SegmentMax(a, arg) => {
                let mut d = Mat::zeros(self.shape(*a));
                let cols = g.ncols();
                for ((k, j), gv) in g.indexed_iter() {
                    d[[arg[k * cols + j], j]] += gv;
                }
                self.acc(grads, *a, d);
            }
            Op::SegmentMean(a, segs) => {
                let mut d = Mat::zeros(self.shape(*a));
                for (k, &(start, len)) in segs.iter().enumerate() {
                    let share = &g.row(k) / len as f64;
                    for i in start..start + len {
                        d.row_mut(i).assign(&share);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                self.acc(grads, *a, d);
            }
            Op::RowL2Normalize(a, norms) => {
                let y = &node.value;
                let mut d = g.clone();
                for (i, mut drow) in d.rows_mut().into_iter().enumerate() {
                    let yrow = y.row(i);
                    let dot: f64 = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv = (*dv - yv * dot) / norms[i]);
                }
                self.acc(grads, *a, d);
            }
            Op::RowNorm(a) => {
                let av = val(*a);
                let y = &node.value;
                let mut d = av.clone();
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    let n = y[[i, 0]];
                    if n > 0.0 {
                        row *= g[[i, 0]] / n;
                    } else {
                        // subgradient 0 at the origin
                        row.fill(0.0);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Diag(a) => {
                let mut d = Mat::zeros(self.shape(*a));
                for i in 0..g.nrows() {
                    d[[i, i]] = g[[i, 0]];
                }
                self.acc(grads, *a, d);
            }
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<(ParamId, Mat)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created with [`Graph::leaf`]. Returns
    /// `None` when the leaf does not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients. A parameter that entered the graph several
    /// times appears several times.
    pub fn param_grads(&self) -> &[(ParamId, Mat)] {
        &self.params
    }

    pub fn into_param_grads(self) -> Vec<(ParamId, Mat)> {
        self.params
    }
}

/// Dense per-parameter gradient accumulator matching a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Mat>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.ids().map(|id| Mat::zeros(store.get(id).dim())).collect(),
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (pid, g) in grads.param_grads() {
            self.grads[pid.0] += g;
        }
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.grads[id.0]
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.grads {
            *g *= k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }
}
