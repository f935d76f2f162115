//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix; scalars are `1x1`. Elementwise
//! binary ops broadcast a `1xn`, `mx1` or `1x1` operand against the other
//! operand, and their backward pass sums the gradient back down to the
//! operand's shape. Nodes built only from constants carry no gradient.

use std::rc::Rc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Ln(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    Extreme(Var, (usize, usize)),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
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

fn expand(m: &Mat, shape: (usize, usize)) -> ArrayView2<'_, f64> {
    m.broadcast(shape).expect("broadcastable operand")
}

/// Sum `g` down to `shape` along broadcast axes.
fn reduce_to(g: Mat, shape: (usize, usize)) -> Mat {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn shape(m: &Mat) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(&self.nodes[v.0].value)
    }

    /// Value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(shape(m), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), x))
    }

    /// Leaf that accumulates a gradient.
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (va, vb) = (self.value(a), self.value(b));
        let out = broadcast_shape(shape(va), shape(vb));
        let mut value = Mat::zeros(out);
        ndarray::Zip::from(&mut value)
            .and(&expand(va, out))
            .and(&expand(vb, out))
            .for_each(|o, &x, &y| *o = f(x, y));
        value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).mapv(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |x| x.max(lo))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, `m x n -> 1 x n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    /// Row sums, `m x n -> m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), rows * cols, "reshape size mismatch");
        let data: Vec<f64> = v.iter().copied().collect();
        let value = Mat::from_shape_vec((rows, cols), data).expect("reshape");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Row `i` of the result is row `idx[i]` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let v = self.value(a);
        let mut value = Mat::zeros((idx.len(), v.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            value.row_mut(i).assign(&v.row(r));
        }
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    fn extreme(&mut self, a: Var, want_max: bool) -> Var {
        let v = self.value(a);
        let mut best = (0, 0);
        for ((i, j), &x) in v.indexed_iter() {
            let b = v[best];
            if (want_max && x > b) || (!want_max && x < b) {
                best = (i, j);
            }
        }
        let value = Mat::from_elem((1, 1), v[best]);
        let rg = self.rg(a);
        self.push(value, Op::Extreme(a, best), rg)
    }

    /// Largest element as a `1x1` node.
    pub fn max_all(&mut self, a: Var) -> Var {
        self.extreme(a, true)
    }

    /// Smallest element as a `1x1` node.
    pub fn min_all(&mut self, a: Var) -> Var {
        self.extreme(a, false)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar node");
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if self.rg(*a) {
                        acc(&mut grads, *a, reduce_to(g.clone(), self.shape(*a)));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, reduce_to(&g * sign, self.shape(*b)));
                    }
                }
                Op::Mul(a, b) => {
                    let sh = shape(out);
                    if self.rg(*a) {
                        let ga = &g * &expand(self.value(*b), sh);
                        acc(&mut grads, *a, reduce_to(ga, self.shape(*a)));
                    }
                    if self.rg(*b) {
                        let gb = &g * &expand(self.value(*a), sh);
                        acc(&mut grads, *b, reduce_to(gb, self.shape(*b)));
                    }
                }
                Op::Div(a, b) => {
                    let sh = shape(out);
                    let vb = expand(self.value(*b), sh);
                    if self.rg(*a) {
                        let ga = &g / &vb;
                        acc(&mut grads, *a, reduce_to(ga, self.shape(*a)));
                    }
                    if self.rg(*b) {
                        // d(a/b)/db = -(a/b)/b
                        let gb = -(&g * out) / &vb;
                        acc(&mut grads, *b, reduce_to(gb, self.shape(*b)));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Offset(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let d = out.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, g * d);
                }
                Op::Sigmoid(a) => {
                    let d = out.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, g * d);
                }
                Op::Softplus(a) => {
                    let d = self.value(*a).mapv(sigmoid);
                    acc(&mut grads, *a, g * d);
                }
                Op::Relu(a) => {
                    let d = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, g * d);
                }
                Op::Ln(a) => {
                    let d = self.value(*a).mapv(|x| 1.0 / x);
                    acc(&mut grads, *a, g * d);
                }
                Op::Sqrt(a) => {
                    let d = out.mapv(|y| 0.5 / y);
                    acc(&mut grads, *a, g * d);
                }
                Op::ClampMin(a, lo) => {
                    let d = self.value(*a).mapv(|x| if x > *lo { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, g * d);
                }
                Op::SumAll(a) => {
                    let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let ga = g.broadcast(self.shape(*a)).unwrap().to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let ga = g.broadcast(self.shape(*a)).unwrap().to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    let data: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads, *a, Mat::from_shape_vec((r, c), data).unwrap());
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    for (i, &r) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.rg(p) {
                            acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        if self.rg(p) {
                            acc(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    let h = g.nrows();
                    ga.slice_mut(s![*start..*start + h, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    // dx = y * (g - sum(g * y))
                    let mut ga = &g * out;
                    let dots = ga.sum_axis(Axis(1));
                    for (mut row, (yrow, d)) in
                        ga.rows_mut().into_iter().zip(out.rows().into_iter().zip(dots.iter()))
                    {
                        row.zip_mut_with(&yrow, |gx, &y| *gx -= y * d);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Extreme(a, at) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga[*at] = g[[0, 0]];
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Grads { grads }
    }
}
