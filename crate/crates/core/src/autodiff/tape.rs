//! Wengert-style tape over dense row-major matrices.
//!
//! Every node holds its forward value. Rows are batch items and columns are
//! features throughout; a scalar is a 1×1 matrix.

use std::ops::Range;

use ndarray::{s, Axis};

use super::params::{Gradients, ParamKey, ParamStore};
use super::{AutodiffError, Matrix, Precision};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Elementwise map with the local derivative saved at forward time.
    Map { input: Var, deriv: Matrix },
    /// Output column `k` depends only on input column `source[k]`.
    Spread {
        input: Var,
        source: Vec<usize>,
        deriv: Matrix,
    },
    /// Each output row depends only on the same input row, through a dense
    /// per-row Jacobian stored as rows × out × in.
    Rowwise { input: Var, jac: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    AddColBroadcast(Var, Var),
    Sum(Var),
    Mean(Var),
    Composite {
        colors: Var,
        alphas: Var,
        segments: Vec<Range<usize>>,
        background: [f64; 3],
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    param: Option<ParamKey>,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.precision.round(&mut value);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        let v = self.push(store.value(index).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(store.key(index));
        v
    }

    fn check_shape(
        &self,
        op: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    ) -> Result<(), AutodiffError> {
        if a == b {
            Ok(())
        } else {
            Err(AutodiffError::Shape { op, lhs: a, rhs: b })
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if ac != br {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x` (n×m) plus a row vector `b` (1×m) added to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let (_, xc) = self.dims(x);
        self.check_shape("add_bias", (1, xc), self.dims(b))?;
        let value = self.value(x) + self.value(b);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.check_shape("add", self.dims(a), self.dims(b))?;
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.check_shape("sub", self.dims(a), self.dims(b))?;
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.check_shape("mul", self.dims(a), self.dims(b))?;
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// Elementwise map; `f` returns `(value, derivative)`.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let src = self.value(x);
        let mut value = Matrix::zeros(src.raw_dim());
        let mut deriv = Matrix::zeros(src.raw_dim());
        ndarray::Zip::from(&mut value)
            .and(&mut deriv)
            .and(src)
            .for_each(|v, d, &s| {
                let (fv, fd) = f(s);
                *v = fv;
                *d = fd;
            });
        let rg = self.rg(x);
        self.push(value, Op::Map { input: x, deriv }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { (v, 1.0) } else { (0.0, 0.0) })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| {
            let y = sigmoid(v);
            (y, y * (1.0 - y))
        })
    }

    pub fn squareplus(&mut self, x: Var) -> Var {
        self.map(x, squareplus_with_deriv)
    }

    /// Clamp to [0, 1]; zero derivative outside the interval.
    pub fn clamp01(&mut self, x: Var) -> Var {
        self.map(x, |v| {
            if v < 0.0 {
                (0.0, 0.0)
            } else if v > 1.0 {
                (1.0, 0.0)
            } else {
                (v, 1.0)
            }
        })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, |v| (v.abs(), if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| (v * v, 2.0 * v))
    }

    /// Low-level column spread; see [`Op::Spread`].
    pub fn spread(
        &mut self,
        x: Var,
        value: Matrix,
        source: Vec<usize>,
        deriv: Matrix,
    ) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.dims(x);
        if value.nrows() != rows
            || deriv.dim() != value.dim()
            || source.len() != value.ncols()
            || source.iter().any(|&c| c >= cols)
        {
            return Err(AutodiffError::Shape {
                op: "spread",
                lhs: (rows, cols),
                rhs: value.dim(),
            });
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::Spread { input: x, source, deriv }, rg))
    }

    /// Row-local op with caller-computed values and per-row Jacobians
    /// (`jac[r * out * in + o * in + i]` = d value[r, o] / d x[r, i]).
    pub fn rowwise(&mut self, x: Var, value: Matrix, jac: Vec<f64>) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.dims(x);
        if value.nrows() != rows || jac.len() != rows * value.ncols() * cols {
            return Err(AutodiffError::Shape {
                op: "rowwise",
                lhs: (rows, cols),
                rhs: value.dim(),
            });
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::Rowwise { input: x, jac }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let rows = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or(AutodiffError::Empty("concat_cols"))?;
        for &p in parts {
            self.check_shape("concat_cols", (rows, 0), (self.dims(p).0, 0))?;
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, range: Range<usize>) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.dims(x);
        if range.end > rows || range.start > range.end {
            return Err(AutodiffError::Shape {
                op: "slice_rows",
                lhs: (rows, cols),
                rhs: (range.start, range.end),
            });
        }
        let value = self.value(x).slice(s![range.clone(), ..]).to_owned();
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows(x, range.start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, range: Range<usize>) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.dims(x);
        if range.end > cols || range.start > range.end {
            return Err(AutodiffError::Shape {
                op: "slice_cols",
                lhs: (rows, cols),
                rhs: (range.start, range.end),
            });
        }
        let value = self.value(x).slice(s![.., range.clone()]).to_owned();
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols(x, range.start), rg))
    }

    /// Row gather; the backward pass scatter-adds into the source rows.
    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.dims(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::Shape {
                op: "gather_rows",
                lhs: (rows, cols),
                rhs: (bad, 0),
            });
        }
        let value = self.value(x).select(Axis(0), &indices);
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows(x, indices), rg))
    }

    /// Adds the single column `col` (n×1) to every column of `x` (n×m).
    pub fn add_col_broadcast(&mut self, x: Var, col: Var) -> Result<Var, AutodiffError> {
        let (rows, _) = self.dims(x);
        self.check_shape("add_col_broadcast", (rows, 1), self.dims(col))?;
        let value = self.value(x) + self.value(col);
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push(value, Op::AddColBroadcast(x, col), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean over all entries; the mean of an empty matrix is 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let m = if n == 0 { 0.0 } else { self.value(x).sum() / n as f64 };
        let rg = self.rg(x);
        self.push(Matrix::from_elem((1, 1), m), Op::Mean(x), rg)
    }

    /// Front-to-back over-compositing. `colors` is S×3, `alphas` is S×1 and
    /// `segments[r]` lists the (t-sorted) sample rows belonging to output row `r`.
    pub fn composite(
        &mut self,
        colors: Var,
        alphas: Var,
        segments: Vec<Range<usize>>,
        background: [f64; 3],
    ) -> Result<Var, AutodiffError> {
        let (s, c) = self.dims(colors);
        if c != 3 {
            return Err(AutodiffError::Shape {
                op: "composite",
                lhs: (s, c),
                rhs: (s, 3),
            });
        }
        self.check_shape("composite", (s, 1), self.dims(alphas))?;
        if segments.iter().any(|r| r.end > s || r.start > r.end) {
            return Err(AutodiffError::Shape {
                op: "composite",
                lhs: (s, 1),
                rhs: (segments.len(), 0),
            });
        }
        let col = self.value(colors);
        let alp = self.value(alphas);
        let mut value = Matrix::zeros((segments.len(), 3));
        for (r, seg) in segments.iter().enumerate() {
            let mut trans = 1.0;
            let mut acc = [0.0; 3];
            for k in seg.clone() {
                let a = alp[[k, 0]];
                for ch in 0..3 {
                    acc[ch] += trans * a * col[[k, ch]];
                }
                trans *= 1.0 - a;
            }
            for ch in 0..3 {
                value[[r, ch]] = acc[ch] + trans * background[ch];
            }
        }
        let rg = self.rg(colors) || self.rg(alphas);
        Ok(self.push(
            value,
            Op::Composite {
                colors,
                alphas,
                segments,
                background,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let dims = self.dims(loss);
        if dims != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(dims));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(key) = node.param {
                out.accumulate(key, &g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.rg(*b) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::Map { input, deriv } => accumulate(&mut grads, *input, g * deriv),
                Op::Spread {
                    input,
                    source,
                    deriv,
                } => {
                    let (rows, cols) = self.dims(*input);
                    let mut gi = Matrix::zeros((rows, cols));
                    for r in 0..rows {
                        for (k, &src) in source.iter().enumerate() {
                            gi[[r, src]] += g[[r, k]] * deriv[[r, k]];
                        }
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::Rowwise { input, jac } => {
                    let (rows, cols) = self.dims(*input);
                    let outs = g.ncols();
                    let mut gi = Matrix::zeros((rows, cols));
                    for r in 0..rows {
                        let base = r * outs * cols;
                        for o in 0..outs {
                            let go = g[[r, o]];
                            if go == 0.0 {
                                continue;
                            }
                            for c in 0..cols {
                                gi[[r, c]] += go * jac[base + o * cols + c];
                            }
                        }
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.dims(p).1;
                        if self.rg(p) {
                            let gp = g.slice(s![.., start..start + w]).to_owned();
                            accumulate(&mut grads, p, gp);
                        }
                        start += w;
                    }
                }
                Op::SliceRows(x, start) => {
                    let mut gx = Matrix::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols(x, start) => {
                    let mut gx = Matrix::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::GatherRows(x, indices) => {
                    let mut gx = Matrix::zeros(self.value(*x).raw_dim());
                    for (row, &src) in indices.iter().enumerate() {
                        let mut dst = gx.row_mut(src);
                        dst += &g.row(row);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::AddColBroadcast(x, col) => {
                    if self.rg(*col) {
                        let gc = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                        accumulate(&mut grads, *col, gc);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Sum(x) => {
                    let gx = Matrix::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len().max(1) as f64;
                    let gx = Matrix::from_elem(self.value(*x).raw_dim(), g[[0, 0]] / n);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Composite {
                    colors,
                    alphas,
                    segments,
                    background,
                } => {
                    let (gc, ga) =
                        composite_backward(self.value(*colors), self.value(*alphas), segments, background, &g);
                    if self.rg(*colors) {
                        accumulate(&mut grads, *colors, gc);
                    }
                    if self.rg(*alphas) {
                        accumulate(&mut grads, *alphas, ga);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of the over-operator. With `after[k]` the colour composited from
/// samples `k+1..` onto the background, dC/dα_k = T_k (c_k − after[k]) and
/// dC/dc_k = α_k T_k.
fn composite_backward(
    colors: &Matrix,
    alphas: &Matrix,
    segments: &[Range<usize>],
    background: &[f64; 3],
    g: &Matrix,
) -> (Matrix, Matrix) {
    let mut gc = Matrix::zeros(colors.raw_dim());
    let mut ga = Matrix::zeros(alphas.raw_dim());
    for (r, seg) in segments.iter().enumerate() {
        let mut trans = Vec::with_capacity(seg.len());
        let mut t = 1.0;
        for k in seg.clone() {
            trans.push(t);
            t *= 1.0 - alphas[[k, 0]];
        }
        let mut after = *background;
        for (j, k) in seg.clone().enumerate().rev() {
            let a = alphas[[k, 0]];
            let tk = trans[j];
            let mut da = 0.0;
            for ch in 0..3 {
                let go = g[[r, ch]];
                gc[[k, ch]] = go * a * tk;
                da += go * tk * (colors[[k, ch]] - after[ch]);
                after[ch] = a * colors[[k, ch]] + (1.0 - a) * after[ch];
            }
            ga[[k, 0]] = da;
        }
    }
    (gc, ga)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(x + sqrt(x² + 4)) / 2`: a smooth, cheap softplus look-alike.
pub fn squareplus(x: f64) -> f64 {
    0.5 * (x + (x * x + 4.0).sqrt())
}

fn squareplus_with_deriv(x: f64) -> (f64, f64) {
    let r = (x * x + 4.0).sqrt();
    (0.5 * (x + r), 0.5 * (1.0 + x / r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::StoreId;
    use ndarray::array;

    fn fd_check(f: impl Fn(&Matrix) -> f64, x: &Matrix, analytic: &Matrix) {
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let ana = analytic.as_slice().unwrap()[idx];
            let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            assert!(err < 1e-6, "entry {idx}: numeric {num} vs analytic {ana}");
        }
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut store = ParamStore::new(StoreId(0));
        let w = store.add("w", array![[0.3], [-1.2], [2.0]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.5, -0.25, 4.0]]);
        let wv = tape.param(&store, w);
        let y = tape.matmul(x, wv).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        store.set_grads(&grads);
        assert_eq!(store.grad(w), &array![[1.5], [-0.25], [4.0]]);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut store = ParamStore::new(StoreId(0));
        let a = store.add("a", array![[2.0]]).unwrap();
        let b = store.add("b", array![[5.0]]).unwrap();
        store.value_mut(b).fill(7.0);
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let _bv = tape.param(&store, b);
        let sq = tape.square(av);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        store.set_grads(&grads);
        assert_eq!(store.grad(a)[[0, 0]], 4.0);
        assert_eq!(store.grad(b)[[0, 0]], 0.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0]]);
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::NonScalarLoss((1, 2)))
        ));
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let colors = array![[0.2, 0.5, 0.9], [0.7, 0.1, 0.3], [0.4, 0.4, 0.8], [0.9, 0.6, 0.2]];
        let alphas = array![[0.3], [0.6], [0.45], [0.8]];
        let segments = vec![0..3, 3..4, 4..4];
        let bg = [0.1, 0.2, 0.3];
        let weights = array![[0.3, -0.7, 1.1], [0.5, 0.25, -0.4], [1.0, 1.0, 1.0]];
        let run = |c: &Matrix, a: &Matrix| -> (f64, Gradients, Var, Var) {
            let mut store = ParamStore::new(StoreId(0));
            let ci = store.add("c", c.clone()).unwrap();
            let ai = store.add("a", a.clone()).unwrap();
            let mut tape = Tape::new();
            let cv = tape.param(&store, ci);
            let av = tape.param(&store, ai);
            let out = tape.composite(cv, av, segments.clone(), bg).unwrap();
            let w = tape.constant(weights.clone());
            let prod = tape.mul(out, w).unwrap();
            let loss = tape.sum(prod);
            (tape.scalar(loss), tape.backward(loss).unwrap(), cv, av)
        };
        let (_, grads, _, _) = run(&colors, &alphas);
        let key_c = ParamKey { store: StoreId(0), index: 0 };
        let key_a = ParamKey { store: StoreId(0), index: 1 };
        fd_check(|c| run(c, &alphas).0, &colors, grads.get(key_c).unwrap());
        fd_check(|a| run(&colors, a).0, &alphas, grads.get(key_a).unwrap());
    }

    #[test]
    fn gather_slice_concat_broadcast_gradients() {
        let table = array![[0.1, -0.3], [0.7, 0.2], [-0.5, 0.9]];
        let eval = |t: &Matrix| -> (f64, Option<Matrix>) {
            let mut store = ParamStore::new(StoreId(1));
            let ti = store.add("t", t.clone()).unwrap();
            let mut tape = Tape::new();
            let tv = tape.param(&store, ti);
            let g = tape.gather_rows(tv, vec![2, 0, 2, 1]).unwrap();
            let c = tape.slice_cols(g, 1..2).unwrap();
            let cat = tape.concat_cols(&[g, c]).unwrap();
            let b = tape.add_col_broadcast(cat, c).unwrap();
            let r = tape.slice_rows(b, 1..4).unwrap();
            let sq = tape.sigmoid(r);
            let sp = tape.squareplus(sq);
            let loss = tape.mean(sp);
            let grads = tape.backward(loss).unwrap();
            (
                tape.scalar(loss),
                grads.get(ParamKey { store: StoreId(1), index: 0 }).cloned(),
            )
        };
        let (_, g) = eval(&table);
        fd_check(|t| eval(t).0, &table, &g.unwrap());
    }
}
