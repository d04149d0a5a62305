use std::collections::BTreeSet;

use ndarray::{Array2, Axis, Zip};

use crate::params::{Gradients, ParamId, ParamStore};
use crate::Matrix;

/// Node handle inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    MaxOf(Vec<Var>, Vec<u32>),
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
    Reshape(Var),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
}

/// A single-use computation tape.
///
/// Every operation is evaluated eagerly and recorded; [`Graph::backward`]
/// walks the tape in reverse. Parameters are borrowed from a
/// [`ParamStore`] rather than copied.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    branches: Vec<u32>,
}

fn out_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible broadcast shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn shape_of(m: &Matrix) -> (usize, usize) {
    m.dim()
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Matrix, shape: (usize, usize)) -> Matrix {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_binary(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let shape = out_shape(shape_of(a), shape_of(b));
    let av = a.broadcast(shape).expect("broadcast lhs");
    let bv = b.broadcast(shape).expect("broadcast rhs");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            branches: Vec::new(),
        }
    }

    /// Every piecewise choice made so far (max selections, clamp activity).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> &[u32] {
        &self.branches
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Leaf node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Elementwise sum with row/column broadcasting of size-1 dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x / y);
        self.push(value, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    /// `1 - a`, built from primitive ops.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let one = self.scalar_constant(1.0);
        self.sub(one, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Log(a))
    }

    /// `max(a, lo)`; gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let x = self.value(a);
        let active: Vec<u32> = x.iter().map(|&v| u32::from(v < lo)).collect();
        let value = x.mapv(|x| x.max(lo));
        self.branches.extend(active);
        self.push(value, Op::ClampMin(a, lo))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine
    /// terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNormRows(a, inv_std))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols shapes");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows shapes");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(ndarray::s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(ndarray::s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    /// Row lookup: output row `i` is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), indices);
        self.push(value, Op::GatherRows(a, indices.to_vec()))
    }

    /// Scatter-sum of columns: output has `width` columns and column
    /// `targets[l]` accumulates column `l` of `a`.
    pub fn scatter_cols(&mut self, a: Var, targets: &[usize], width: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.ncols(), targets.len(), "scatter_cols target count");
        let mut value = Array2::zeros((src.nrows(), width));
        for (l, &t) in targets.iter().enumerate() {
            let mut col = value.column_mut(t);
            col += &src.column(l);
        }
        self.push(value, Op::ScatterCols(a, targets.to_vec()))
    }

    /// One entry per row: output `(i, 0)` is `a[i, cols[i]]`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), cols.len(), "pick needs one column per row");
        let value = Array2::from_shape_fn((cols.len(), 1), |(i, _)| src[[i, cols[i]]]);
        self.push(value, Op::Pick(a, cols.to_vec()))
    }

    /// Elementwise maximum across same-shaped inputs. Ties go to the
    /// earliest input.
    pub fn max_of(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "max of nothing");
        let mut value = self.value(parts[0]).clone();
        let mut arg = vec![0u32; value.len()];
        for (k, &p) in parts.iter().enumerate().skip(1) {
            let other = self.value(p);
            assert_eq!(other.dim(), value.dim(), "max_of shapes");
            for (idx, (v, &o)) in value.iter_mut().zip(other.iter()).enumerate() {
                if o > *v {
                    *v = o;
                    arg[idx] = k as u32;
                }
            }
        }
        self.branches.extend_from_slice(&arg);
        self.push(value, Op::MaxOf(parts.to_vec(), arg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of each row, shape `m×1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSums(a))
    }

    /// Sum of each column, shape `1×n`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::ColSums(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape element count");
        let flat: Vec<f64> = src.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(value, Op::Reshape(a))
    }

    /// Parameters on which `root` depends.
    pub fn reachable_params(&self, root: Var) -> BTreeSet<ParamId> {
        let mut seen = vec![false; root.0 + 1];
        seen[root.0] = true;
        let mut out = BTreeSet::new();
        for i in (0..=root.0).rev() {
            if !seen[i] {
                continue;
            }
            let node = &self.nodes[i];
            if let Op::Param(id) = node.op {
                out.insert(id);
            }
            for input in inputs_of(&node.op) {
                seen[input.0] = true;
            }
        }
        out
    }

    /// Reverse pass from a scalar `root`, returning parameter gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = node.value.as_ref();
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.add_dense(*id, g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accum(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    let sa = self.shape(*a);
                    let sb = self.shape(*b);
                    accum(&mut grads, *b, reduce_to(g.clone(), sb));
                    accum(&mut grads, *a, reduce_to(g, sa));
                }
                Op::Sub(a, b) => {
                    let sa = self.shape(*a);
                    let sb = self.shape(*b);
                    accum(&mut grads, *b, reduce_to(-&g, sb));
                    accum(&mut grads, *a, reduce_to(g, sa));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = broadcast_binary(&g, vb, |x, y| x * y);
                    let gb = broadcast_binary(&g, va, |x, y| x * y);
                    accum(&mut grads, *a, reduce_to(ga, va.dim()));
                    accum(&mut grads, *b, reduce_to(gb, vb.dim()));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = broadcast_binary(&g, vb, |x, y| x / y);
                    let shape = g.dim();
                    let av = va.broadcast(shape).expect("div lhs");
                    let bv = vb.broadcast(shape).expect("div rhs");
                    let gb = Zip::from(&g)
                        .and(&av)
                        .and(&bv)
                        .map_collect(|&gg, &x, &z| -gg * x / (z * z));
                    accum(&mut grads, *a, reduce_to(ga, va.dim()));
                    accum(&mut grads, *b, reduce_to(gb, vb.dim()));
                }
                Op::Scale(a, c) => accum(&mut grads, *a, g * *c),
                Op::Tanh(a) => {
                    let y = y.expect("value");
                    let ga = Zip::from(&g).and(y).map_collect(|&gg, &t| gg * (1.0 - t * t));
                    accum(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = y.expect("value");
                    let ga = Zip::from(&g).and(y).map_collect(|&gg, &s| gg * s * (1.0 - s));
                    accum(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let ga = Zip::from(&g).and(x).map_collect(|&gg, &v| gg * gelu_grad(v));
                    accum(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let y = y.expect("value");
                    accum(&mut grads, *a, g * y);
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    let ga = Zip::from(&g).and(x).map_collect(|&gg, &v| gg / v);
                    accum(&mut grads, *a, ga);
                }
                Op::ClampMin(a, lo) => {
                    let x = self.value(*a);
                    let ga = Zip::from(&g)
                        .and(x)
                        .map_collect(|&gg, &v| if v > *lo { gg } else { 0.0 });
                    accum(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = y.expect("value");
                    let mut ga = &g * y;
                    let dots = ga.sum_axis(Axis(1));
                    Zip::from(ga.rows_mut()).and(y.rows()).and(&dots).for_each(
                        |mut row, yrow, &d| {
                            Zip::from(&mut row).and(&yrow).for_each(|r, &yy| *r -= yy * d);
                        },
                    );
                    accum(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, inv_std) => {
                    let xhat = y.expect("value");
                    let n = xhat.ncols() as f64;
                    let mut ga = Array2::zeros(xhat.dim());
                    for (r, &scale) in inv_std.iter().enumerate() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mean_g = gr.sum() / n;
                        let mean_gx = gr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        let mut out = ga.row_mut(r);
                        for c in 0..xhat.ncols() {
                            out[c] = scale * (gr[c] - mean_g - xr[c] * mean_gx);
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        let part = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accum(&mut grads, p, part);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        let part = g.slice(ndarray::s![offset..offset + h, ..]).to_owned();
                        accum(&mut grads, p, part);
                        offset += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let h = g.nrows();
                    ga.slice_mut(ndarray::s![*start..*start + h, ..]).assign(&g);
                    accum(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let w = g.ncols();
                    ga.slice_mut(ndarray::s![.., *start..*start + w]).assign(&g);
                    accum(&mut grads, *a, ga);
                }
                Op::GatherRows(a, indices) => {
                    if let Op::Param(id) = self.nodes[a.0].op {
                        for (i, &r) in indices.iter().enumerate() {
                            out.add_row(id, r, g.row(i));
                        }
                    } else {
                        let mut ga = Array2::zeros(self.shape(*a));
                        for (i, &r) in indices.iter().enumerate() {
                            let mut row = ga.row_mut(r);
                            row += &g.row(i);
                        }
                        accum(&mut grads, *a, ga);
                    }
                }
                Op::ScatterCols(a, targets) => {
                    let ga = g.select(Axis(1), targets);
                    accum(&mut grads, *a, ga);
                }
                Op::Pick(a, cols) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (i, &c) in cols.iter().enumerate() {
                        ga[[i, c]] += g[[i, 0]];
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::MaxOf(parts, arg) => {
                    for (k, &p) in parts.iter().enumerate() {
                        let mut gp = g.clone();
                        for (v, &winner) in gp.iter_mut().zip(arg.iter()) {
                            if winner as usize != k {
                                *v = 0.0;
                            }
                        }
                        accum(&mut grads, p, gp);
                    }
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accum(&mut grads, *a, ga);
                }
                Op::RowSums(a) => {
                    let ga = g.broadcast(self.shape(*a)).expect("row_sums grad").to_owned();
                    accum(&mut grads, *a, ga);
                }
                Op::ColSums(a) => {
                    let ga = g.broadcast(self.shape(*a)).expect("col_sums grad").to_owned();
                    accum(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a);
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let ga = Array2::from_shape_vec(shape, flat).expect("reshape grad");
                    accum(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}

fn accum(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Param(_) => Vec::new(),
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            vec![*a, *b]
        }
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Gelu(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::ClampMin(a, _)
        | Op::SoftmaxRows(a)
        | Op::LayerNormRows(a, _)
        | Op::SliceRows(a, _)
        | Op::SliceCols(a, _)
        | Op::GatherRows(a, _)
        | Op::ScatterCols(a, _)
        | Op::Pick(a, _)
        | Op::SumAll(a)
        | Op::RowSums(a)
        | Op::ColSums(a)
        | Op::Reshape(a) => vec![*a],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) | Op::MaxOf(parts, _) => parts.clone(),
    }
}
