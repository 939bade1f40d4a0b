//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only list of nodes. Each node stores the
//! primitive that produced it, the ids of its inputs, and its forward
//! value. Because inputs always precede the nodes that consume them,
//! walking the list backwards is a reverse topological order.
//!
//! ```
//! use metacal::numerics::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::scalar(3.0));
//! let y = tape.mul(x, x);
//! let grads = tape.backward(y);
//! assert_eq!(tape.value(y).item(), 9.0);
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use super::linalg::{cholesky_backward, cholesky_solve, cholesky_with_jitter};
use super::special::{erf, erf_derivative, logistic, softplus};
use super::Matrix;
use crate::error::Result;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `n×m` plus a `1×m` row added to every row.
    AddRow(Var, Var),
    /// Any shape plus a `1×1`.
    AddScalar(Var, Var),
    /// Any shape times a `1×1`.
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Exp(Var),
    Erf(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    Softplus(Var),
    Logistic(Var),
    Recip(Var),
    Sum(Var),
    RowSums(Var),
    /// Pairwise squared Euclidean distances between rows.
    SqDist(Var, Var),
    /// `a_i − b_j` for column vectors `a` (n) and `b` (m).
    OuterSub(Var, Var),
    /// Square matrix plus `1×1` times identity.
    AddDiag(Var, Var),
    Cholesky(Var),
    SolveSpd(Var, Var),
    /// Column vector of entries picked by flat index.
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b)
            | AddRow(a, b)
            | AddScalar(a, b)
            | MulScalar(a, b)
            | MatMul(a, b)
            | SqDist(a, b)
            | OuterSub(a, b)
            | AddDiag(a, b)
            | SolveSpd(a, b) => vec![*a, *b],
            Scale(a, _)
            | Offset(a, _)
            | Transpose(a)
            | Tanh(a)
            | Exp(a)
            | Erf(a)
            | Sqrt(a)
            | Square(a)
            | Abs(a)
            | Softplus(a)
            | Logistic(a)
            | Recip(a)
            | Sum(a)
            | RowSums(a)
            | Cholesky(a)
            | Gather(a, _)
            | SelectRows(a, _) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    /// Cholesky factor kept for `SolveSpd` backward.
    factor: Option<Matrix>,
}

/// Single-owner record of a computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.adjoints.get(var.0).and_then(Option::as_ref)
    }

    /// Adjoint of `var`, zero if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Matrix {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
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

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// Input or constant.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, None)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Matrix::scalar(value))
    }

    fn push(&mut self, op: Op, value: Matrix, factor: Option<Matrix>) -> Var {
        self.nodes.push(Node { op, value, factor });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Var {
        let (value, factor) =
            evaluate(&op, |v| &self.nodes[v.0].value).expect("infallible primitive");
        self.push(op, value, factor)
    }

    fn record_fallible(&mut self, op: Op) -> Result<Var> {
        let (value, factor) = evaluate(&op, |v| &self.nodes[v.0].value)?;
        Ok(self.push(op, value, factor))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Mul(a, b))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.record(Op::AddRow(a, row))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        self.record(Op::AddScalar(a, s))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        self.record(Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.record(Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Var {
        self.record(Op::Offset(a, shift))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.record(Op::Transpose(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.record(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.record(Op::Exp(a))
    }

    pub fn erf(&mut self, a: Var) -> Var {
        self.record(Op::Erf(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.record(Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.record(Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.record(Op::Abs(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.record(Op::Softplus(a))
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        self.record(Op::Logistic(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.record(Op::Recip(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        self.record(Op::RowSums(a))
    }

    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::SqDist(a, b))
    }

    pub fn outer_sub(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::OuterSub(a, b))
    }

    pub fn add_diag(&mut self, a: Var, s: Var) -> Var {
        self.record(Op::AddDiag(a, s))
    }

    /// Lower Cholesky factor (with the jitter policy of [`cholesky_with_jitter`]).
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        self.record_fallible(Op::Cholesky(a))
    }

    /// `K⁻¹·B` for symmetric positive-definite `K`.
    pub fn solve_spd(&mut self, k: Var, b: Var) -> Result<Var> {
        self.record_fallible(Op::SolveSpd(k, b))
    }

    pub fn gather(&mut self, a: Var, flat_indices: Vec<usize>) -> Var {
        self.record(Op::Gather(a, flat_indices))
    }

    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        self.record(Op::SelectRows(a, rows))
    }
}

fn evaluate<'a>(op: &Op, val: impl Fn(Var) -> &'a Matrix) -> Result<(Matrix, Option<Matrix>)> {
    use Op::*;
    let out = match op {
        Leaf => unreachable!("leaves have no forward rule"),
        Add(a, b) => val(*a).zip_map(val(*b), |x, y| x + y),
        Sub(a, b) => val(*a).zip_map(val(*b), |x, y| x - y),
        Mul(a, b) => val(*a).zip_map(val(*b), |x, y| x * y),
        Div(a, b) => val(*a).zip_map(val(*b), |x, y| x / y),
        AddRow(a, r) => {
            let (a, r) = (val(*a), val(*r));
            assert_eq!((1, a.cols()), r.shape(), "add_row shape mismatch");
            let mut out = a.clone();
            let cols = a.cols();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += r.data()[i % cols];
            }
            out
        }
        AddScalar(a, s) => {
            let s = val(*s).item();
            val(*a).map(|x| x + s)
        }
        MulScalar(a, s) => {
            let s = val(*s).item();
            val(*a).map(|x| x * s)
        }
        Scale(a, c) => val(*a).map(|x| x * c),
        Offset(a, c) => val(*a).map(|x| x + c),
        MatMul(a, b) => val(*a).matmul(val(*b)),
        Transpose(a) => val(*a).transpose(),
        Tanh(a) => val(*a).map(f64::tanh),
        Exp(a) => val(*a).map(f64::exp),
        Erf(a) => val(*a).map(erf),
        Sqrt(a) => val(*a).map(f64::sqrt),
        Square(a) => val(*a).map(|x| x * x),
        Abs(a) => val(*a).map(f64::abs),
        Softplus(a) => val(*a).map(softplus),
        Logistic(a) => val(*a).map(logistic),
        Recip(a) => val(*a).map(|x| 1.0 / x),
        Sum(a) => Matrix::scalar(val(*a).sum()),
        RowSums(a) => {
            let a = val(*a);
            Matrix::column((0..a.rows()).map(|r| a.row(r).iter().sum()).collect())
        }
        SqDist(a, b) => {
            let (a, b) = (val(*a), val(*b));
            assert_eq!(a.cols(), b.cols(), "sq_dist dimension mismatch");
            let mut out = Matrix::zeros(a.rows(), b.rows());
            for i in 0..a.rows() {
                for j in 0..b.rows() {
                    let d = a
                        .row(i)
                        .iter()
                        .zip(b.row(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    out.set(i, j, d);
                }
            }
            out
        }
        OuterSub(a, b) => {
            let (a, b) = (val(*a), val(*b));
            let mut out = Matrix::zeros(a.len(), b.len());
            for (i, &x) in a.data().iter().enumerate() {
                for (j, &y) in b.data().iter().enumerate() {
                    out.set(i, j, x - y);
                }
            }
            out
        }
        AddDiag(a, s) => {
            let s = val(*s).item();
            let mut out = val(*a).clone();
            for i in 0..out.rows().min(out.cols()) {
                out.set(i, i, out.get(i, i) + s);
            }
            out
        }
        Cholesky(a) => cholesky_with_jitter(val(*a))?.0,
        SolveSpd(k, b) => {
            let (k, b) = (val(*k), val(*b));
            if b.rows() != k.rows() {
                return Err(crate::error::Error::Shape(format!(
                    "solve_spd: {}x{} system with {}-row right-hand side",
                    k.rows(),
                    k.cols(),
                    b.rows()
                )));
            }
            let (l, _) = cholesky_with_jitter(k)?;
            let x = cholesky_solve(&l, b);
            return Ok((x, Some(l)));
        }
        Gather(a, idx) => {
            let a = val(*a);
            Matrix::column(idx.iter().map(|&i| a.data()[i]).collect())
        }
        SelectRows(a, rows) => val(*a).select_rows(rows),
    };
    Ok((out, None))
}

impl Tape {
    /// Recompute every node from the leaf values currently on the tape.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => evaluate(op, |v: Var| &values[v.0])?.0,
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Reverse pass seeded with `d loss / d loss = 1`; `loss` must be `1×1`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward needs a scalar loss"
        );
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            adj[idx] = Some(g);
        }
        adj.resize(self.nodes.len(), None);
        Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        use Op::*;
        let node = &self.nodes[idx];
        let out = &node.value;
        let v = |var: Var| &self.nodes[var.0].value;
        let mut acc = |var: Var, grad: Matrix| accumulate(adj, var, grad);
        match &node.op {
            Leaf => {}
            Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Mul(a, b) => {
                acc(*a, g.zip_map(v(*b), |g, y| g * y));
                acc(*b, g.zip_map(v(*a), |g, x| g * x));
            }
            Div(a, b) => {
                let bv = v(*b);
                acc(*a, g.zip_map(bv, |g, y| g / y));
                let ga = g.zip_map(out, |g, q| g * q);
                acc(*b, ga.zip_map(bv, |gq, y| -gq / y));
            }
            AddRow(a, r) => {
                acc(*a, g.clone());
                let cols = g.cols();
                let mut gr = Matrix::zeros(1, cols);
                for (i, x) in g.data().iter().enumerate() {
                    gr.data_mut()[i % cols] += x;
                }
                acc(*r, gr);
            }
            AddScalar(a, s) => {
                acc(*a, g.clone());
                acc(*s, Matrix::scalar(g.sum()));
            }
            MulScalar(a, s) => {
                let sv = v(*s).item();
                acc(*a, g.scale(sv));
                let dot = g.data().iter().zip(v(*a).data()).map(|(g, x)| g * x).sum();
                acc(*s, Matrix::scalar(dot));
            }
            Scale(a, c) => acc(*a, g.scale(*c)),
            Offset(a, _) => acc(*a, g.clone()),
            MatMul(a, b) => {
                acc(*a, g.matmul_transpose(v(*b)));
                acc(*b, v(*a).transpose_matmul(g));
            }
            Transpose(a) => acc(*a, g.transpose()),
            Tanh(a) => acc(*a, g.zip_map(out, |g, t| g * (1.0 - t * t))),
            Exp(a) => acc(*a, g.zip_map(out, |g, e| g * e)),
            Erf(a) => acc(*a, g.zip_map(v(*a), |g, x| g * erf_derivative(x))),
            Sqrt(a) => acc(*a, g.zip_map(out, |g, s| 0.5 * g / s)),
            Square(a) => acc(*a, g.zip_map(v(*a), |g, x| 2.0 * g * x)),
            Abs(a) => acc(*a, g.zip_map(v(*a), |g, x| g * sign(x))),
            Softplus(a) => acc(*a, g.zip_map(v(*a), |g, x| g * logistic(x))),
            Logistic(a) => acc(*a, g.zip_map(out, |g, s| g * s * (1.0 - s))),
            Recip(a) => acc(*a, g.zip_map(out, |g, r| -g * r * r)),
            Sum(a) => {
                let (r, c) = v(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            RowSums(a) => {
                let (r, c) = v(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.data()[i];
                    for j in 0..c {
                        ga.set(i, j, gi);
                    }
                }
                acc(*a, ga);
            }
            SqDist(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                for i in 0..av.rows() {
                    for j in 0..bv.rows() {
                        let gij = 2.0 * g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..av.cols() {
                            let d = gij * (av.get(i, k) - bv.get(j, k));
                            ga.set(i, k, ga.get(i, k) + d);
                            gb.set(j, k, gb.get(j, k) - d);
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            OuterSub(a, b) => {
                let (n, m) = g.shape();
                let ga = Matrix::column((0..n).map(|i| g.row(i).iter().sum()).collect());
                let gb = Matrix::column(
                    (0..m)
                        .map(|j| -(0..n).map(|i| g.get(i, j)).sum::<f64>())
                        .collect(),
                );
                let (ar, ac) = v(*a).shape();
                let (br, bc) = v(*b).shape();
                acc(
                    *a,
                    Matrix::from_vec(ar, ac, ga.into_vec()).expect("same length"),
                );
                acc(
                    *b,
                    Matrix::from_vec(br, bc, gb.into_vec()).expect("same length"),
                );
            }
            AddDiag(a, s) => {
                acc(*a, g.clone());
                let trace = (0..g.rows().min(g.cols())).map(|i| g.get(i, i)).sum();
                acc(*s, Matrix::scalar(trace));
            }
            Cholesky(a) => acc(*a, cholesky_backward(out, g)),
            SolveSpd(k, b) => {
                let l = node.factor.as_ref().expect("solve_spd keeps its factor");
                let gb = cholesky_solve(l, g);
                let gk = gb.matmul_transpose(out).scale(-1.0);
                acc(*k, gk);
                acc(*b, gb);
            }
            Gather(a, idx) => {
                let (r, c) = v(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (&i, &gi) in idx.iter().zip(g.data()) {
                    ga.data_mut()[i] += gi;
                }
                acc(*a, ga);
            }
            SelectRows(a, rows) => {
                let (r, c) = v(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        ga.set(i, j, ga.get(i, j) + g.get(k, j));
                    }
                }
                acc(*a, ga);
            }
        }
    }

    /// Ids of the inputs of `var`, for inspection and tests.
    pub fn inputs_of(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs()
    }
}

fn accumulate(adj: &mut [Option<Matrix>], var: Var, grad: Matrix) {
    match &mut adj[var.0] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => *slot = Some(grad),
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    /// Builds `graph` on fresh tapes and compares its gradient with central
    /// differences, after contracting the output against fixed random weights.
    fn check<F>(inputs: &[Matrix], graph: F, seed: u64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let run = |flat: &[f64]| -> (Tape, Vec<Var>, Var) {
            let mut tape = Tape::new();
            let mut offset = 0;
            let leaves: Vec<Var> = inputs
                .iter()
                .map(|m| {
                    let n = m.len();
                    let v = Matrix::from_vec(m.rows(), m.cols(), flat[offset..offset + n].to_vec())
                        .unwrap();
                    offset += n;
                    tape.leaf(v)
                })
                .collect();
            let out = graph(&mut tape, &leaves);
            (tape, leaves, out)
        };
        let flat: Vec<f64> = inputs.iter().flat_map(|m| m.data().to_vec()).collect();
        let (probe, _, out) = run(&flat);
        let (r, c) = probe.value(out).shape();
        let weights = random(r, c, &mut rng);
        let loss = |flat: &[f64]| {
            let (mut tape, _, out) = run(flat);
            let w = tape.leaf(weights.clone());
            let prod = tape.mul(out, w);
            let s = tape.sum(prod);
            (tape, s)
        };
        let (tape, s) = loss(&flat);
        let grads = tape.backward(s);
        let analytic: Vec<f64> = (0..inputs.len())
            .flat_map(|i| grads.wrt(Var(i)).into_vec())
            .collect();
        let numeric = finite_diff_grad(
            |theta| {
                let (tape, s) = loss(theta);
                tape.value(s).item()
            },
            &flat,
            1e-5,
        );
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            assert!(
                relative_error(*a, *n, 1e-7) < 1e-4,
                "coordinate {i}: tape {a} vs finite difference {n}"
            );
        }
    }

    fn spd(n: usize, rng: &mut impl Rng) -> Matrix {
        let mut k = random(n, n, rng);
        k = k.matmul_transpose(&k);
        for i in 0..n {
            k.set(i, i, k.get(i, i) + 1.0);
        }
        k
    }

    #[test]
    fn elementwise_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..5 {
            let a = random(3, 4, &mut rng);
            let b = random(3, 4, &mut rng).map(|x| x + 2.5);
            check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), seed);
            check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]), seed);
            check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]), seed);
            check(&[a.clone(), b.clone()], |t, v| t.div(v[0], v[1]), seed);
            check(std::slice::from_ref(&a), |t, v| t.tanh(v[0]), seed);
            check(std::slice::from_ref(&a), |t, v| t.exp(v[0]), seed);
            check(std::slice::from_ref(&a), |t, v| t.erf(v[0]), seed);
            check(std::slice::from_ref(&b), |t, v| t.sqrt(v[0]), seed);
            check(std::slice::from_ref(&a), |t, v| t.square(v[0]), seed);
            check(&[a.map(|x| x + 0.1 * x.signum())], |t, v| t.abs(v[0]), seed);
            check(std::slice::from_ref(&a), |t, v| t.softplus(v[0]), seed);
            check(std::slice::from_ref(&a), |t, v| t.logistic(v[0]), seed);
            check(std::slice::from_ref(&b), |t, v| t.recip(v[0]), seed);
            check(std::slice::from_ref(&a), |t, v| t.scale(v[0], -1.7), seed);
            check(std::slice::from_ref(&a), |t, v| t.offset(v[0], 0.3), seed);
        }
    }

    #[test]
    fn structural_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..5 {
            let a = random(4, 3, &mut rng);
            let b = random(3, 2, &mut rng);
            let row = random(1, 3, &mut rng);
            let s = Matrix::scalar(rng.random_range(0.5..1.5));
            check(&[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]), seed);
            check(std::slice::from_ref(&a), |t, v| t.transpose(v[0]), seed);
            check(
                &[a.clone(), row.clone()],
                |t, v| t.add_row(v[0], v[1]),
                seed,
            );
            check(
                &[a.clone(), s.clone()],
                |t, v| t.add_scalar(v[0], v[1]),
                seed,
            );
            check(
                &[a.clone(), s.clone()],
                |t, v| t.mul_scalar(v[0], v[1]),
                seed,
            );
            check(std::slice::from_ref(&a), |t, v| t.sum(v[0]), seed);
            check(std::slice::from_ref(&a), |t, v| t.mean(v[0]), seed);
            check(std::slice::from_ref(&a), |t, v| t.row_sums(v[0]), seed);
            check(
                &[a.clone(), random(5, 3, &mut rng)],
                |t, v| t.sq_dist(v[0], v[1]),
                seed,
            );
            check(std::slice::from_ref(&a), |t, v| t.sq_dist(v[0], v[0]), seed);
            check(
                &[random(4, 1, &mut rng), random(3, 1, &mut rng)],
                |t, v| t.outer_sub(v[0], v[1]),
                seed,
            );
            check(
                &[spd(3, &mut rng), s.clone()],
                |t, v| t.add_diag(v[0], v[1]),
                seed,
            );
            check(std::slice::from_ref(&a), |t, v| t.gather(v[0], vec![5, 0, 5, 11]), seed);
            check(
                std::slice::from_ref(&a),
                |t, v| t.select_rows(v[0], vec![3, 1, 1]),
                seed,
            );
        }
    }

    #[test]
    fn linear_algebra_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..5 {
            let n = 2 + seed as usize;
            // Parameterize K = A·Aᵀ + I so perturbations stay symmetric.
            let a = random(n, n, &mut rng);
            let b = random(n, 2, &mut rng);
            let build_k = |t: &mut Tape, a: Var| {
                let at = t.transpose(a);
                let aat = t.matmul(a, at);
                let one = t.scalar(1.0);
                t.add_diag(aat, one)
            };
            check(
                &[a.clone(), b.clone()],
                |t, v| {
                    let k = build_k(t, v[0]);
                    t.solve_spd(k, v[1]).unwrap()
                },
                seed,
            );
            check(
                std::slice::from_ref(&a),
                |t, v| {
                    let k = build_k(t, v[0]);
                    t.cholesky(k).unwrap()
                },
                seed,
            );
        }
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let x = tape.leaf(random(5, 3, &mut rng));
        let w = tape.leaf(random(3, 3, &mut rng));
        let h = tape.matmul(x, w);
        let h = tape.tanh(h);
        let d = tape.sq_dist(h, h);
        let d = tape.scale(d, -0.5);
        let k = tape.exp(d);
        let beta = tape.scalar(0.1);
        let k = tape.add_diag(k, beta);
        let y = tape.leaf(random(5, 1, &mut rng));
        let sol = tape.solve_spd(k, y).unwrap();
        let e = tape.erf(sol);
        let total = tape.sum(e);
        let replayed = tape.replay().unwrap();
        for (i, value) in replayed.iter().enumerate() {
            let original = tape.value(Var(i));
            assert_eq!(
                value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                original
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
                "node {i}"
            );
        }
        assert!(tape.value(total).is_finite());
    }

    #[test]
    fn every_reachable_input_gets_a_gradient() {
        let mut tape = Tape::new();
        let a = tape.scalar(2.0);
        let b = tape.scalar(3.0);
        let unused = tape.scalar(5.0);
        let p = tape.mul(a, b);
        let q = tape.add(p, a);
        let grads = tape.backward(q);
        assert_eq!(grads.wrt(a).item(), 4.0);
        assert_eq!(grads.wrt(b).item(), 2.0);
        assert!(grads.get(unused).is_none());
        assert_eq!(tape.inputs_of(q), vec![p, a]);
    }

    #[test]
    fn solve_rejects_singular_system() {
        let mut tape = Tape::new();
        let k = tape.leaf(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap());
        let b = tape.leaf(Matrix::column(vec![1.0, 1.0]));
        assert!(matches!(
            tape.solve_spd(k, b),
            Err(crate::error::Error::Singular { pivot: 1 })
        ));
    }
}
