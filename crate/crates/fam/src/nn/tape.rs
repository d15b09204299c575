//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records a sequence of matrix operations; [`Tape::backward`]
//! replays them in reverse to produce exact gradients with respect to every
//! leaf created via [`Tape::leaf`]. All values are `Array2<f64>`; row vectors
//! and scalars are 1xN and 1x1 matrices.

use ndarray::{concatenate, Array2, Axis};

pub type VarId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    /// matrix + broadcast row vector (bias)
    AddRow(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    MinElem(VarId, VarId),
    ConcatCols(VarId, VarId),
    ConcatRows(Vec<VarId>),
    SliceCols(VarId, usize, usize),
    Neg(VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    Relu(VarId),
    Tanh(VarId),
    Sigmoid(VarId),
    Exp(VarId),
    Square(VarId),
    /// zero gradient outside (lo, hi)
    Clamp(VarId, f64, f64),
    LogSoftmaxRows(VarId),
    SoftmaxRows(VarId),
    /// per-row column selection, output Nx1
    GatherCols(VarId, Vec<usize>),
    SumAll(VarId),
    MeanAll(VarId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one differentiable expression.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: VarId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-1x1 node");
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: VarId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, v: Array2<f64>) -> VarId {
        self.push(v, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data, targets, detached values).
    pub fn constant(&mut self, v: Array2<f64>) -> VarId {
        self.push(v, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        debug_assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Elementwise minimum; gradient follows the smaller argument (ties to `a`).
    pub fn min_elem(&mut self, a: VarId, b: VarId) -> VarId {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let mut v = self.value(a).clone();
        v.zip_mut_with(self.value(b), |x, &y| {
            if y < *x {
                *x = y;
            }
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MinElem(a, b), rg)
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let v = concatenate![Axis(1), self.value(a).view(), self.value(b).view()];
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::ConcatCols(a, b), rg)
    }

    /// Vertical stack of equally wide blocks.
    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column widths match");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, end: usize) -> VarId {
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..end])
            .to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start, end), rg)
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        let v = -self.value(a);
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a) + c;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> VarId {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn log_softmax_rows(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = m + row.mapv(|x| (x - m).exp()).sum().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.rg(a);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn gather_cols(&mut self, a: VarId, cols: &[usize]) -> VarId {
        let x = self.value(a);
        assert_eq!(x.nrows(), cols.len(), "one column index per row");
        let mut v = Array2::zeros((x.nrows(), 1));
        for (i, &c) in cols.iter().enumerate() {
            v[[i, 0]] = x[[i, c]];
        }
        let rg = self.rg(a);
        self.push(v, Op::GatherCols(a, cols.to_vec()), rg)
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        let m = x.sum() / x.len() as f64;
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a), rg)
    }

    /// 1 - x, elementwise.
    pub fn one_minus(&mut self, a: VarId) -> VarId {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    /// Reverse pass from a 1x1 loss node.
    pub fn backward(&self, loss: VarId) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::ones((1, 1)));

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads[*a], ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads[*b], gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[*b], g.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.rg(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[*row], gr);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[*b], -&g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[*a], &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[*b], &g * self.value(*a));
                    }
                }
                Op::MinElem(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    if self.rg(*a) {
                        let mut ga = g.clone();
                        ga.zip_mut_with(&(va - vb), |x, &d| {
                            if d > 0.0 {
                                *x = 0.0;
                            }
                        });
                        accumulate(&mut grads[*a], ga);
                    }
                    if self.rg(*b) {
                        let mut gb = g.clone();
                        gb.zip_mut_with(&(va - vb), |x, &d| {
                            if d <= 0.0 {
                                *x = 0.0;
                            }
                        });
                        accumulate(&mut grads[*b], gb);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    if self.rg(*a) {
                        let ga = g.slice(ndarray::s![.., ..ca]).to_owned();
                        accumulate(&mut grads[*a], ga);
                    }
                    if self.rg(*b) {
                        let gb = g.slice(ndarray::s![.., ca..]).to_owned();
                        accumulate(&mut grads[*b], gb);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        if self.rg(p) {
                            let gp = g.slice(ndarray::s![row..row + n, ..]).to_owned();
                            accumulate(&mut grads[p], gp);
                        }
                        row += n;
                    }
                }
                Op::SliceCols(a, start, _end) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                        .assign(&g);
                    accumulate(&mut grads[*a], ga);
                }
                Op::Neg(a) => accumulate(&mut grads[*a], -&g),
                Op::Scale(a, c) => accumulate(&mut grads[*a], &g * *c),
                Op::AddScalar(a) => accumulate(&mut grads[*a], g),
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |x, &v| {
                        if v <= 0.0 {
                            *x = 0.0;
                        }
                    });
                    accumulate(&mut grads[*a], ga);
                }
                Op::Tanh(a) => {
                    let y = self.value(id);
                    accumulate(&mut grads[*a], &g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Sigmoid(a) => {
                    let y = self.value(id);
                    accumulate(&mut grads[*a], &g * &y.mapv(|s| s * (1.0 - s)));
                }
                Op::Exp(a) => {
                    accumulate(&mut grads[*a], &g * self.value(id));
                }
                Op::Square(a) => {
                    accumulate(&mut grads[*a], &g * &(self.value(*a) * 2.0));
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |x, &v| {
                        if v <= *lo || v >= *hi {
                            *x = 0.0;
                        }
                    });
                    accumulate(&mut grads[*a], ga);
                }
                Op::LogSoftmaxRows(a) => {
                    // dx = g - softmax(x) * rowsum(g)
                    let y = self.value(id); // log-probs
                    let p = y.mapv(f64::exp);
                    let row_sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g - &(&p * &row_sums);
                    accumulate(&mut grads[*a], ga);
                }
                Op::SoftmaxRows(a) => {
                    // dx = p * (g - rowsum(g * p))
                    let p = self.value(id);
                    let gp = &g * p;
                    let row_sums = gp.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = p * &(&g - &row_sums);
                    accumulate(&mut grads[*a], ga);
                }
                Op::GatherCols(a, cols) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (i, &c) in cols.iter().enumerate() {
                        ga[[i, c]] = g[[i, 0]];
                    }
                    accumulate(&mut grads[*a], ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads[*a], ga);
                }
                Op::MeanAll(a) => {
                    let n = self.value(*a).len() as f64;
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]] / n);
                    accumulate(&mut grads[*a], ga);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Gradients indexed by the `VarId`s of the tape that produced them.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros if the loss did not touch it.
    pub fn wrt(&self, tape: &Tape, id: VarId) -> Array2<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.value(id).dim()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum p^2 at p = 3 -> grad 6
        let mut t = Tape::new();
        let p = t.leaf(array![[3.0]]);
        let sq = t.square(p);
        let loss = t.sum_all(sq);
        assert_abs_diff_eq!(t.scalar(loss), 9.0);
        let g = t.backward(loss);
        assert_abs_diff_eq!(g.wrt(&t, p)[[0, 0]], 6.0);
    }

    #[test]
    fn untouched_parameter_has_zero_gradient() {
        let mut t = Tape::new();
        let p = t.leaf(array![[1.0, 2.0]]);
        let q = t.leaf(array![[5.0]]);
        let sq = t.square(q);
        let loss = t.sum_all(sq);
        let g = t.backward(loss);
        assert_eq!(g.wrt(&t, p), array![[0.0, 0.0]]);
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut vals = vec![0.3, -0.7, 1.2, 0.5, -0.1, 0.9];
        let build = |v: &[f64]| {
            let mut t = Tape::new();
            let a = t.leaf(Array2::from_shape_vec((2, 3), v.to_vec()).unwrap());
            let b = t.constant(array![[1.0, -2.0], [0.5, 0.3], [2.0, 1.0]]);
            let m = t.matmul(a, b);
            let s = t.tanh(m);
            let loss = t.mean_all(s);
            (t, a, loss)
        };
        let (t, a, loss) = build(&vals);
        let g = t.backward(loss);
        let ga = g.wrt(&t, a);
        let eps = 1e-6;
        for i in 0..vals.len() {
            let orig = vals[i];
            vals[i] = orig + eps;
            let (tp, _, lp) = build(&vals);
            vals[i] = orig - eps;
            let (tm, _, lm) = build(&vals);
            vals[i] = orig;
            let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * eps);
            let an = ga.as_slice().unwrap()[i];
            assert_abs_diff_eq!(an, fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn log_softmax_and_gather() {
        let mut t = Tape::new();
        let logits = t.leaf(array![[1.0, 0.0, 0.0, 0.0, 0.0]]);
        let lp = t.log_softmax_rows(logits);
        let chosen = t.gather_cols(lp, &[0]);
        let z = 4.0 + 1.0f64.exp();
        assert_abs_diff_eq!(t.value(chosen)[[0, 0]], (1.0f64.exp() / z).ln(), epsilon = 1e-12);
        let probs = t.value(lp).mapv(f64::exp);
        assert_abs_diff_eq!(probs.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn min_elem_routes_gradient_to_smaller_side() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 5.0]]);
        let b = t.leaf(array![[2.0, 3.0]]);
        let m = t.min_elem(a, b);
        let loss = t.sum_all(m);
        let g = t.backward(loss);
        assert_eq!(g.wrt(&t, a), array![[1.0, 0.0]]);
        assert_eq!(g.wrt(&t, b), array![[0.0, 1.0]]);
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0]]);
        let b = t.leaf(array![[3.0]]);
        let c = t.concat_cols(a, b);
        let left = t.slice_cols(c, 0, 2);
        let sq = t.square(left);
        let loss = t.sum_all(sq);
        let g = t.backward(loss);
        assert_eq!(g.wrt(&t, a), array![[2.0, 4.0]]);
        assert_eq!(g.wrt(&t, b), array![[0.0]]);
    }
}
