//! Minimal reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Graph`] is a tape of nodes created in topological order; [`Var`]
//! handles index into it. Calling [`Graph::backward`] seeds the gradient of a
//! scalar output and walks the tape in reverse, accumulating gradients into
//! every node. Leaves created with [`Graph::param`] carry a name so callers
//! can collect per-parameter gradients afterwards.
//!
//! The op set is exactly what the transformer and its losses need: matmul,
//! broadcasting adds, layer normalization, masked row softmax, log-softmax,
//! relu, elementwise arithmetic and scalar reductions.
//!
//! ```
//! use evmorph::autodiff::{Graph, Mat};
//!
//! // d/dw of sum(w * w) at w = 3 is 2w = 6.
//! let mut g = Graph::new();
//! let w = g.param("w", Mat::from_element(1, 1, 3.0));
//! let sq = g.mul_elem(w, w);
//! let loss = g.sum_all(sq);
//! g.backward(loss);
//! assert_eq!(g.grad(w).unwrap()[(0, 0)], 6.0);
//! ```

use nalgebra::DMatrix;

pub type Mat = DMatrix<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// a @ b
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    /// each row of `a` plus the single row `b`
    AddRowBroadcast(Var, Var),
    /// matrix times a 1x1 scalar node
    ScaleByScalar(Var, Var),
    ScaleConst(Var, f64),
    Relu(Var),
    Exp(Var),
    /// row-wise softmax over `scores + additive_mask`
    SoftmaxRows(Var),
    /// row-wise log-softmax
    LogSoftmaxRows(Var),
    /// per-row layer norm with affine gain/bias (1 x d each)
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    Transpose(Var),
    SumAll(Var),
}

struct Node {
    op: Op,
    value: Mat,
    grad: Option<Mat>,
    name: Option<String>,
    /// cached normalization stats for layer norm backward: (mean, inv_std)
    ln_cache: Option<(Vec<f64>, Vec<f64>)>,
}

pub const LN_EPS: f64 = 1e-8;
pub const MASK_NEG: f64 = -1e9;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            name: None,
            ln_cache: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!((m.nrows(), m.ncols()), (1, 1), "expected a scalar node");
        m[(0, 0)]
    }

    /// Constant leaf: participates in the forward pass, gradient discarded.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Named parameter leaf; gradients are retrievable by name after backward.
    pub fn param(&mut self, name: &str, value: Mat) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).component_mul(self.value(b));
        self.push(Op::MulElem(a, b), value)
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).clone();
        assert_eq!(r.nrows(), 1);
        let mut value = self.value(a).clone();
        for i in 0..value.nrows() {
            for j in 0..value.ncols() {
                value[(i, j)] += r[(0, j)];
            }
        }
        self.push(Op::AddRowBroadcast(a, row), value)
    }

    pub fn scale_by_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let value = self.value(a) * sv;
        self.push(Op::ScaleByScalar(a, s), value)
    }

    pub fn scale_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(Op::ScaleConst(a, c), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    /// Row softmax over pre-masked scores. Masking (diagonal or invalid keys)
    /// is applied by the caller as an additive constant before this op.
    pub fn softmax_rows(&mut self, scores: Var) -> Var {
        let s = self.value(scores);
        let mut value = s.clone();
        for i in 0..s.nrows() {
            let row_max = (0..s.ncols()).map(|j| s[(i, j)]).fold(f64::MIN, f64::max);
            let mut sum = 0.0;
            for j in 0..s.ncols() {
                let e = (s[(i, j)] - row_max).exp();
                value[(i, j)] = e;
                sum += e;
            }
            for j in 0..s.ncols() {
                value[(i, j)] /= sum;
            }
        }
        self.push(Op::SoftmaxRows(scores), value)
    }

    pub fn log_softmax_rows(&mut self, scores: Var) -> Var {
        let s = self.value(scores);
        let mut value = s.clone();
        for i in 0..s.nrows() {
            let row_max = (0..s.ncols()).map(|j| s[(i, j)]).fold(f64::MIN, f64::max);
            let lse = (0..s.ncols())
                .map(|j| (s[(i, j)] - row_max).exp())
                .sum::<f64>()
                .ln()
                + row_max;
            for j in 0..s.ncols() {
                value[(i, j)] -= lse;
            }
        }
        self.push(Op::LogSoftmaxRows(scores), value)
    }

    /// Per-row layer normalization with learnable gain and bias (both 1 x d).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x).clone();
        let g = self.value(gain).clone();
        let b = self.value(bias).clone();
        let d = xv.ncols();
        let mut value = xv.clone();
        let mut means = Vec::with_capacity(xv.nrows());
        let mut inv_stds = Vec::with_capacity(xv.nrows());
        for i in 0..xv.nrows() {
            let mean = (0..d).map(|j| xv[(i, j)]).sum::<f64>() / d as f64;
            let var = (0..d).map(|j| (xv[(i, j)] - mean).powi(2)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                value[(i, j)] = (xv[(i, j)] - mean) * inv_std * g[(0, j)] + b[(0, j)];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let v = self.push(Op::LayerNorm { x, gain, bias }, value);
        self.nodes[v.0].ln_cache = Some((means, inv_stds));
        v
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).rows(start, len).clone_owned();
        self.push(Op::SliceRows(a, start, len), value)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).columns(start, len).clone_owned();
        self.push(Op::SliceCols(a, start, len), value)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.ncols(), bv.ncols());
        let mut value = Mat::zeros(av.nrows() + bv.nrows(), av.ncols());
        value.rows_mut(0, av.nrows()).copy_from(av);
        value.rows_mut(av.nrows(), bv.nrows()).copy_from(bv);
        self.push(Op::ConcatRows(a, b), value)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.nrows(), bv.nrows());
        let mut value = Mat::zeros(av.nrows(), av.ncols() + bv.ncols());
        value.columns_mut(0, av.ncols()).copy_from(av);
        value.columns_mut(av.ncols(), bv.ncols()).copy_from(bv);
        self.push(Op::ConcatCols(a, b), value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        self.push(Op::SumAll(a), Mat::from_element(1, 1, s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale_const(s, 1.0 / n)
    }

    fn accumulate(&mut self, v: Var, delta: Mat) {
        match &mut self.nodes[v.0].grad {
            Some(g) => *g += delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Backpropagates from a scalar output node.
    pub fn backward(&mut self, output: Var) {
        assert_eq!(
            (self.value(output).nrows(), self.value(output).ncols()),
            (1, 1),
            "backward expects a scalar output"
        );
        self.nodes[output.0].grad = Some(Mat::from_element(1, 1, 1.0));
        for idx in (0..=output.0).rev() {
            let Some(grad) = self.nodes[idx].grad.clone() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &grad * self.nodes[b.0].value.transpose();
                    let gb = self.nodes[a.0].value.transpose() * &grad;
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, -grad);
                }
                Op::MulElem(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = grad.component_mul(&self.nodes[b.0].value);
                    let gb = grad.component_mul(&self.nodes[a.0].value);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::AddRowBroadcast(a, row) => {
                    let (a, row) = (*a, *row);
                    let mut grow = Mat::zeros(1, grad.ncols());
                    for i in 0..grad.nrows() {
                        for j in 0..grad.ncols() {
                            grow[(0, j)] += grad[(i, j)];
                        }
                    }
                    self.accumulate(a, grad);
                    self.accumulate(row, grow);
                }
                Op::ScaleByScalar(a, s) => {
                    let (a, s) = (*a, *s);
                    let sv = self.nodes[s.0].value[(0, 0)];
                    let ga = &grad * sv;
                    let gs = grad
                        .iter()
                        .zip(self.nodes[a.0].value.iter())
                        .map(|(g, v)| g * v)
                        .sum::<f64>();
                    self.accumulate(a, ga);
                    self.accumulate(s, Mat::from_element(1, 1, gs));
                }
                Op::ScaleConst(a, c) => {
                    let (a, c) = (*a, *c);
                    self.accumulate(a, grad * c);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mut g = grad;
                    for (gv, v) in g.iter_mut().zip(self.nodes[a.0].value.iter()) {
                        if *v <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    self.accumulate(a, g);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let g = grad.component_mul(&self.nodes[idx].value);
                    self.accumulate(a, g);
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let y = self.nodes[idx].value.clone();
                    let mut g = grad.clone();
                    for i in 0..y.nrows() {
                        let dot: f64 =
                            (0..y.ncols()).map(|j| grad[(i, j)] * y[(i, j)]).sum();
                        for j in 0..y.ncols() {
                            g[(i, j)] = y[(i, j)] * (grad[(i, j)] - dot);
                        }
                    }
                    self.accumulate(a, g);
                }
                Op::LogSoftmaxRows(a) => {
                    let a = *a;
                    let y = self.nodes[idx].value.clone();
                    let mut g = grad.clone();
                    for i in 0..y.nrows() {
                        let gsum: f64 = (0..y.ncols()).map(|j| grad[(i, j)]).sum();
                        for j in 0..y.ncols() {
                            g[(i, j)] = grad[(i, j)] - y[(i, j)].exp() * gsum;
                        }
                    }
                    self.accumulate(a, g);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let (means, inv_stds) = self.nodes[idx].ln_cache.clone().unwrap();
                    let xv = self.nodes[x.0].value.clone();
                    let g = self.nodes[gain.0].value.clone();
                    let d = xv.ncols();
                    let mut gx = Mat::zeros(xv.nrows(), d);
                    let mut ggain = Mat::zeros(1, d);
                    let mut gbias = Mat::zeros(1, d);
                    for i in 0..xv.nrows() {
                        let mean = means[i];
                        let inv_std = inv_stds[i];
                        // dy/dxhat per element, then the standard LN backward
                        let mut dxhat = vec![0.0; d];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (xv[(i, j)] - mean) * inv_std;
                            let go = grad[(i, j)];
                            ggain[(0, j)] += go * xhat;
                            gbias[(0, j)] += go;
                            let dxh = go * g[(0, j)];
                            dxhat[j] = dxh;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat;
                        }
                        for j in 0..d {
                            let xhat = (xv[(i, j)] - mean) * inv_std;
                            gx[(i, j)] = inv_std / d as f64
                                * (d as f64 * dxhat[j] - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(x, gx);
                    self.accumulate(gain, ggain);
                    self.accumulate(bias, gbias);
                }
                Op::SliceRows(a, start, len) => {
                    let (a, start, len) = (*a, *start, *len);
                    let src = &self.nodes[a.0].value;
                    let mut g = Mat::zeros(src.nrows(), src.ncols());
                    g.rows_mut(start, len).copy_from(&grad);
                    self.accumulate(a, g);
                }
                Op::SliceCols(a, start, len) => {
                    let (a, start, len) = (*a, *start, *len);
                    let src = &self.nodes[a.0].value;
                    let mut g = Mat::zeros(src.nrows(), src.ncols());
                    g.columns_mut(start, len).copy_from(&grad);
                    self.accumulate(a, g);
                }
                Op::ConcatRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let na = self.nodes[a.0].value.nrows();
                    let nb = self.nodes[b.0].value.nrows();
                    let ga = grad.rows(0, na).clone_owned();
                    let gb = grad.rows(na, nb).clone_owned();
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let na = self.nodes[a.0].value.ncols();
                    let nb = self.nodes[b.0].value.ncols();
                    let ga = grad.columns(0, na).clone_owned();
                    let gb = grad.columns(na, nb).clone_owned();
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    self.accumulate(a, grad.transpose());
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let src = &self.nodes[a.0].value;
                    let g = Mat::from_element(src.nrows(), src.ncols(), grad[(0, 0)]);
                    self.accumulate(a, g);
                }
            }
        }
    }

    /// Gradients of all named parameter leaves, by name.
    pub fn param_grads(&self) -> Vec<(String, Mat)> {
        self.nodes
            .iter()
            .filter_map(|n| match (&n.name, &n.grad) {
                (Some(name), Some(grad)) => Some((name.clone(), grad.clone())),
                _ => None,
            })
            .collect()
    }
}
