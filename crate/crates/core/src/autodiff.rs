//! Minimal reverse-mode differentiation over dense f64 matrices.
//!
//! A [`Tape`] records every operation; [`Tape::backward`] replays them in
//! exact reverse order, accumulating gradients into every reachable tensor
//! that requires them, then clears the recording. One tape per training
//! context, confined to a single thread (`Tensor` is deliberately `!Send`;
//! use [`Tensor::to_matrix`] to move values across threads).

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::matrix::Matrix;

struct TensorData {
    rows: usize,
    cols: usize,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Vec<f64>>, // empty until first accumulation
    requires_grad: bool,
    on_tape: Cell<bool>,
}

/// Dense matrix participating in a recorded computation graph.
/// Cloning is cheap (shared handle).
#[derive(Clone)]
pub struct Tensor {
    data: Rc<TensorData>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("rows", &self.data.rows)
            .field("cols", &self.data.cols)
            .field("requires_grad", &self.data.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn build(rows: usize, cols: usize, values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if values.len() != rows * cols {
            return Err(Error::Validation(format!(
                "tensor data length {} does not match {rows}x{cols}",
                values.len()
            )));
        }
        Ok(Tensor {
            data: Rc::new(TensorData {
                rows,
                cols,
                values: RefCell::new(values),
                grad: RefCell::new(Vec::new()),
                requires_grad,
                on_tape: Cell::new(false),
            }),
        })
    }

    /// Constant (non-learnable) tensor.
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        Tensor::build(rows, cols, values, false)
    }

    /// Learnable leaf: gradients accumulate here across backward passes
    /// until an optimizer consumes them.
    pub fn parameter(rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        Tensor::build(rows, cols, values, true)
    }

    pub fn from_matrix(m: &Matrix) -> Tensor {
        Tensor::build(m.rows, m.cols, m.data.clone(), false).expect("matrix is shape-consistent")
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::build(rows, cols, vec![0.0; rows * cols], false).expect("consistent")
    }

    pub fn rows(&self) -> usize {
        self.data.rows
    }

    pub fn cols(&self) -> usize {
        self.data.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.data.rows, self.data.cols)
    }

    pub fn len(&self) -> usize {
        self.data.rows * self.data.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.data.requires_grad
    }

    fn needs_grad(&self) -> bool {
        self.data.requires_grad || self.data.on_tape.get()
    }

    pub fn values(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.data.values.borrow()
    }

    pub fn values_mut(&self) -> std::cell::RefMut<'_, Vec<f64>> {
        self.data.values.borrow_mut()
    }

    /// Scalar value of a 1x1 tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::Shape {
                op: "scalar",
                expected: (1, 1),
                got: self.shape(),
            });
        }
        Ok(self.data.values.borrow()[0])
    }

    /// Accumulated gradient; zeros if no backward pass touched this tensor.
    pub fn grad(&self) -> Vec<f64> {
        let g = self.data.grad.borrow();
        if g.is_empty() {
            vec![0.0; self.len()]
        } else {
            g.clone()
        }
    }

    pub fn zero_grad(&self) {
        let mut g = self.data.grad.borrow_mut();
        for v in g.iter_mut() {
            *v = 0.0;
        }
    }

    fn accumulate(&self, delta: &[f64]) {
        let mut g = self.data.grad.borrow_mut();
        if g.is_empty() {
            g.resize(self.len(), 0.0);
        }
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Add directly into the gradient accumulator (externally computed
    /// gradients, e.g. when driving the optimizer without a tape).
    pub fn accumulate_grad(&self, delta: &[f64]) {
        assert_eq!(delta.len(), self.len(), "gradient shape mismatch");
        self.accumulate(delta);
    }

    /// Value-equal tensor with no tape history and no gradient requirement.
    pub fn detach(&self) -> Tensor {
        Tensor::build(
            self.data.rows,
            self.data.cols,
            self.data.values.borrow().clone(),
            false,
        )
        .expect("consistent")
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.data.rows,
            cols: self.data.cols,
            data: self.data.values.borrow().clone(),
        }
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.data, &other.data)
    }
}

/// Glorot-uniform values: entries in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_values<R: Rng>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect()
}

enum Op {
    Matmul { a: Tensor, b: Tensor, out: Tensor },
    Spmm { adj: Rc<NormalizedAdjacency>, x: Tensor, out: Tensor },
    Add { a: Tensor, b: Tensor, out: Tensor },
    Sub { a: Tensor, b: Tensor, out: Tensor },
    Affine { a: Tensor, k: f64, out: Tensor },
    Hadamard { a: Tensor, b: Tensor, out: Tensor },
    Relu { a: Tensor, out: Tensor },
    Sigmoid { a: Tensor, out: Tensor },
    Tanh { a: Tensor, out: Tensor },
    LogSigmoid { a: Tensor, out: Tensor },
    Log { a: Tensor, out: Tensor },
    Powf { a: Tensor, p: f64, out: Tensor },
    Dropout { a: Tensor, mask: Vec<f64>, out: Tensor },
    RowGather { a: Tensor, indices: Vec<usize>, out: Tensor },
    RowwiseDot { a: Tensor, b: Tensor, out: Tensor },
    Sum { a: Tensor, out: Tensor },
    Mean { a: Tensor, out: Tensor },
    L2RowNorms { a: Tensor, eps: f64, out: Tensor },
    L2RowNormalize { a: Tensor, eps: f64, out: Tensor },
    MulScalar { a: Tensor, s: Tensor, out: Tensor },
}

/// Recording of forward operations, replayed in reverse by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
}

fn shape_err(op: &'static str, expected: (usize, usize), got: (usize, usize)) -> Error {
    Error::Shape { op, expected, got }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { ops: Vec::new() }
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn record(&mut self, op: Op, out: &Tensor, any_input_needs: bool) {
        if any_input_needs {
            out.data.on_tape.set(true);
            self.ops.push(op);
        }
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.cols() != b.rows() {
            return Err(shape_err("matmul", (a.cols(), b.cols()), b.shape()));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let av = a.values();
        let bv = b.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = av[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        drop(av);
        drop(bv);
        let out = Tensor::from_values(m, n, out)?;
        let needs = a.needs_grad() || b.needs_grad();
        self.record(
            Op::Matmul {
                a: a.clone(),
                b: b.clone(),
                out: out.clone(),
            },
            &out,
            needs,
        );
        Ok(out)
    }

    /// Sparse-dense product with a constant normalized adjacency.
    pub fn spmm_node(&mut self, adj: &Rc<NormalizedAdjacency>, x: &Tensor) -> Result<Tensor> {
        let result = adj.spmm(&x.to_matrix())?;
        let out = Tensor::from_values(result.rows, result.cols, result.data)?;
        let needs = x.needs_grad();
        self.record(
            Op::Spmm {
                adj: Rc::clone(adj),
                x: x.clone(),
                out: out.clone(),
            },
            &out,
            needs,
        );
        Ok(out)
    }

    /// Elementwise addition; `b` may also be a `1 x cols` row vector, which
    /// broadcasts over the rows of `a` (bias addition).
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let broadcast = b.rows() == 1 && a.cols() == b.cols() && a.rows() != 1;
        if !broadcast && a.shape() != b.shape() {
            return Err(shape_err("add", a.shape(), b.shape()));
        }
        let av = a.values();
        let bv = b.values();
        let cols = a.cols();
        let out: Vec<f64> = if broadcast {
            av.iter()
                .enumerate()
                .map(|(i, x)| x + bv[i % cols])
                .collect()
        } else {
            av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect()
        };
        drop(av);
        drop(bv);
        let out = Tensor::from_values(a.rows(), a.cols(), out)?;
        let needs = a.needs_grad() || b.needs_grad();
        self.record(
            Op::Add {
                a: a.clone(),
                b: b.clone(),
                out: out.clone(),
            },
            &out,
            needs,
        );
        Ok(out)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err("sub", a.shape(), b.shape()));
        }
        let out: Vec<f64> = a
            .values()
            .iter()
            .zip(b.values().iter())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_values(a.rows(), a.cols(), out)?;
        let needs = a.needs_grad() || b.needs_grad();
        self.record(
            Op::Sub {
                a: a.clone(),
                b: b.clone(),
                out: out.clone(),
            },
            &out,
            needs,
        );
        Ok(out)
    }

    /// Elementwise `k * a + c`.
    pub fn affine(&mut self, a: &Tensor, k: f64, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = a.values().iter().map(|x| k * x + c).collect();
        let out = Tensor::from_values(a.rows(), a.cols(), out)?;
        let needs = a.needs_grad();
        self.record(
            Op::Affine {
                a: a.clone(),
                k,
                out: out.clone(),
            },
            &out,
            needs,
        );
        Ok(out)
    }

    /// Multiplication by a scalar constant.
    pub fn scale(&mut self, a: &Tensor, k: f64) -> Result<Tensor> {
        self.affine(a, k, 0.0)
    }

    pub fn hadamard(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err("hadamard", a.shape(), b.shape()));
        }
        let out: Vec<f64> = a
            .values()
            .iter()
            .zip(b.values().iter())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_values(a.rows(), a.cols(), out)?;
        let needs = a.needs_grad() || b.needs_grad();
        self.record(
            Op::Hadamard {
                a: a.clone(),
                b: b.clone(),
                out: out.clone(),
            },
            &out,
            needs,
        );
        Ok(out)
    }

    fn unary(
        &mut self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        make: impl Fn(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        let out: Vec<f64> = a.values().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_values(a.rows(), a.cols(), out)?;
        let needs = a.needs_grad();
        let op = make(a.clone(), out.clone());
        self.record(op, &out, needs);
        Ok(out)
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x.max(0.0), |a, out| Op::Relu { a, out })
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, sigmoid, |a, out| Op::Sigmoid { a, out })
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, f64::tanh, |a, out| Op::Tanh { a, out })
    }

    /// Numerically stable `log(sigmoid(x)) = min(x, 0) - ln(1 + e^{-|x|})`.
    pub fn log_sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, log_sigmoid, |a, out| Op::LogSigmoid { a, out })
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, f64::ln, |a, out| Op::Log { a, out })
    }

    /// Elementwise power; inputs are assumed positive where `p` is fractional.
    pub fn powf(&mut self, a: &Tensor, p: f64) -> Result<Tensor> {
        self.unary(a, |x| x.powf(p), |a, out| Op::Powf { a, p, out })
    }

    /// Inverted dropout: in train mode zeroes entries with probability `p`
    /// and scales survivors by `1/(1-p)`; in eval mode it is the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        a: &Tensor,
        p: f64,
        train_mode: bool,
        rng: &mut R,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Validation(format!(
                "dropout probability {p} must be in [0, 1)"
            )));
        }
        if !train_mode || p == 0.0 {
            return Ok(a.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..a.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = a
            .values()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let out = Tensor::from_values(a.rows(), a.cols(), out)?;
        let needs = a.needs_grad();
        self.record(
            Op::Dropout {
                a: a.clone(),
                mask,
                out: out.clone(),
            },
            &out,
            needs,
        );
        Ok(out)
    }

    /// Select rows by index (duplicates allowed); backward scatter-adds.
    pub fn row_gather(&mut self, a: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let cols = a.cols();
        let mut out = Vec::with_capacity(indices.len() * cols);
        {
            let av = a.values();
            for &i in indices {
                if i >= a.rows() {
                    return Err(Error::Validation(format!(
                        "row_gather index {i} out of range for {} rows",
                        a.rows()
                    )));
                }
                out.extend_from_slice(&av[i * cols..(i + 1) * cols]);
            }
        }
        let out = Tensor::from_values(indices.len(), cols, out)?;
        let needs = a.needs_grad();
        self.record(
            Op::RowGather {
                a: a.clone(),
                indices: indices.to_vec(),
                out: out.clone(),
            },
            &out,
            needs,
        );
        Ok(out)
    }

    /// Per-row inner product of two equally shaped matrices; output `n x 1`.
    pub fn rowwise_dot(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err("rowwise_dot", a.shape(), b.shape()));
        }
        let cols = a.cols();
        let av = a.values();
        let bv = b.values();
        let out: Vec<f64> = (0..a.rows())
            .map(|i| {
                av[i * cols..(i + 1) * cols]
                    .iter()
                    .zip(&bv[i * cols..(i + 1) * cols])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        drop(av);
        drop(bv);
        let out = Tensor::from_values(a.rows(), 1, out)?;
        let needs = a.needs_grad() || b.needs_grad();
        self.record(
            Op::RowwiseDot {
                a: a.clone(),
                b: b.clone(),
                out: out.clone(),
            },
            &out,
            needs,
        );
        Ok(out)
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let total: f64 = a.values().iter().sum();
        let out = Tensor::from_values(1, 1, vec![total])?;
        let needs = a.needs_grad();
        self.record(
            Op::Sum {
                a: a.clone(),
                out: out.clone(),
            },
            &out,
            needs,
        );
        Ok(out)
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.is_empty() {
            return Err(Error::Validation("mean of empty tensor".into()));
        }
        let total: f64 = a.values().iter().sum();
        let out = Tensor::from_values(1, 1, vec![total / a.len() as f64])?;
        let needs = a.needs_grad();
        self.record(
            Op::Mean {
                a: a.clone(),
                out: out.clone(),
            },
            &out,
            needs,
        );
        Ok(out)
    }

    /// Column vector of row L2 norms; `eps` guards the backward division.
    pub fn l2_row_norms(&mut self, a: &Tensor, eps: f64) -> Result<Tensor> {
        let cols = a.cols();
        let out: Vec<f64> = {
            let av = a.values();
            (0..a.rows())
                .map(|i| {
                    av[i * cols..(i + 1) * cols]
                        .iter()
                        .map(|x| x * x)
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        };
        let out = Tensor::from_values(a.rows(), 1, out)?;
        let needs = a.needs_grad();
        self.record(
            Op::L2RowNorms {
                a: a.clone(),
                eps,
                out: out.clone(),
            },
            &out,
            needs,
        );
        Ok(out)
    }

    /// Each row divided by `max(row_norm, eps)`; zero rows stay zero.
    pub fn l2_row_normalize(&mut self, a: &Tensor, eps: f64) -> Result<Tensor> {
        let cols = a.cols();
        let out: Vec<f64> = {
            let av = a.values();
            let mut out = Vec::with_capacity(av.len());
            for i in 0..a.rows() {
                let row = &av[i * cols..(i + 1) * cols];
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let r = norm.max(eps);
                out.extend(row.iter().map(|x| x / r));
            }
            out
        };
        let out = Tensor::from_values(a.rows(), a.cols(), out)?;
        let needs = a.needs_grad();
        self.record(
            Op::L2RowNormalize {
                a: a.clone(),
                eps,
                out: out.clone(),
            },
            &out,
            needs,
        );
        Ok(out)
    }

    /// Multiply by a 1x1 tensor (the scalar participates in the graph).
    pub fn mul_scalar(&mut self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.shape() != (1, 1) {
            return Err(shape_err("mul_scalar", (1, 1), s.shape()));
        }
        let sv = s.scalar()?;
        let out: Vec<f64> = a.values().iter().map(|x| x * sv).collect();
        let out = Tensor::from_values(a.rows(), a.cols(), out)?;
        let needs = a.needs_grad() || s.needs_grad();
        self.record(
            Op::MulScalar {
                a: a.clone(),
                s: s.clone(),
                out: out.clone(),
            },
            &out,
            needs,
        );
        Ok(out)
    }

    /// Accumulate `d(loss)/d(t)` into every `requires_grad` tensor reachable
    /// from `loss`, then clear the recording. Calling backward twice on the
    /// same recording is rejected rather than silently wrong.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.shape() != (1, 1) {
            return Err(shape_err("backward", (1, 1), loss.shape()));
        }
        if self.ops.is_empty() {
            return Err(Error::Validation(
                "backward on an empty tape (double backward, or no recorded ops reach the loss)"
                    .into(),
            ));
        }
        loss.accumulate(&[1.0]);
        for op in self.ops.iter().rev() {
            step_backward(op);
        }
        self.ops.clear();
        Ok(())
    }

    /// Drop the recording without propagating anything (eval-mode forward).
    pub fn discard(&mut self) {
        self.ops.clear();
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn step_backward(op: &Op) {
    match op {
        Op::Matmul { a, b, out } => {
            let g = out.data.grad.borrow();
            if g.is_empty() {
                return;
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            if a.needs_grad() {
                // dA = G · Bᵀ
                let bv = b.values();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for kk in 0..k {
                            da[i * k + kk] += gij * bv[kk * n + j];
                        }
                    }
                }
                a.accumulate(&da);
            }
            if b.needs_grad() {
                // dB = Aᵀ · G
                let av = a.values();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let aik = av[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[kk * n + j] += aik * g[i * n + j];
                        }
                    }
                }
                b.accumulate(&db);
            }
        }
        Op::Spmm { adj, x, out } => {
            let g = out.data.grad.borrow();
            if g.is_empty() || !x.needs_grad() {
                return;
            }
            let gm = Matrix {
                rows: out.rows(),
                cols: out.cols(),
                data: g.clone(),
            };
            let dx = adj.spmm_transpose(&gm).expect("shapes fixed at forward");
            x.accumulate(&dx.data);
        }
        Op::Add { a, b, out } => {
            let g = out.data.grad.borrow();
            if g.is_empty() {
                return;
            }
            if a.needs_grad() {
                a.accumulate(&g);
            }
            if b.needs_grad() {
                if b.rows() == 1 && a.rows() != 1 {
                    let cols = b.cols();
                    let mut db = vec![0.0; cols];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % cols] += gi;
                    }
                    b.accumulate(&db);
                } else {
                    b.accumulate(&g);
                }
            }
        }
        Op::Sub { a, b, out } => {
            let g = out.data.grad.borrow();
            if g.is_empty() {
                return;
            }
            if a.needs_grad() {
                a.accumulate(&g);
            }
            if b.needs_grad() {
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                b.accumulate(&neg);
            }
        }
        Op::Affine { a, k, out } => {
            let g = out.data.grad.borrow();
            if g.is_empty() || !a.needs_grad() {
                return;
            }
            let da: Vec<f64> = g.iter().map(|x| k * x).collect();
            a.accumulate(&da);
        }
        Op::Hadamard { a, b, out } => {
            let g = out.data.grad.borrow();
            if g.is_empty() {
                return;
            }
            if a.needs_grad() {
                let bv = b.values();
                let da: Vec<f64> = g.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
                a.accumulate(&da);
            }
            if b.needs_grad() {
                let av = a.values();
                let db: Vec<f64> = g.iter().zip(av.iter()).map(|(x, y)| x * y).collect();
                b.accumulate(&db);
            }
        }
        Op::Relu { a, out } => {
            unary_backward(a, out, |x, _y, g| if x > 0.0 { g } else { 0.0 });
        }
        Op::Sigmoid { a, out } => {
            unary_backward(a, out, |_x, y, g| g * y * (1.0 - y));
        }
        Op::Tanh { a, out } => {
            unary_backward(a, out, |_x, y, g| g * (1.0 - y * y));
        }
        Op::LogSigmoid { a, out } => {
            unary_backward(a, out, |x, _y, g| g * sigmoid(-x));
        }
        Op::Log { a, out } => {
            unary_backward(a, out, |x, _y, g| g / x);
        }
        Op::Powf { a, p, out } => {
            let p = *p;
            unary_backward(a, out, move |x, _y, g| g * p * x.powf(p - 1.0));
        }
        Op::Dropout { a, mask, out } => {
            let g = out.data.grad.borrow();
            if g.is_empty() || !a.needs_grad() {
                return;
            }
            let da: Vec<f64> = g.iter().zip(mask).map(|(x, m)| x * m).collect();
            a.accumulate(&da);
        }
        Op::RowGather { a, indices, out } => {
            let g = out.data.grad.borrow();
            if g.is_empty() || !a.needs_grad() {
                return;
            }
            let cols = a.cols();
            let mut da = vec![0.0; a.len()];
            for (k, &i) in indices.iter().enumerate() {
                for c in 0..cols {
                    da[i * cols + c] += g[k * cols + c];
                }
            }
            a.accumulate(&da);
        }
        Op::RowwiseDot { a, b, out } => {
            let g = out.data.grad.borrow();
            if g.is_empty() {
                return;
            }
            let cols = a.cols();
            if a.needs_grad() {
                let bv = b.values();
                let da: Vec<f64> = bv
                    .iter()
                    .enumerate()
                    .map(|(i, y)| g[i / cols] * y)
                    .collect();
                a.accumulate(&da);
            }
            if b.needs_grad() {
                let av = a.values();
                let db: Vec<f64> = av
                    .iter()
                    .enumerate()
                    .map(|(i, x)| g[i / cols] * x)
                    .collect();
                b.accumulate(&db);
            }
        }
        Op::Sum { a, out } => {
            let g = out.data.grad.borrow();
            if g.is_empty() || !a.needs_grad() {
                return;
            }
            let da = vec![g[0]; a.len()];
            a.accumulate(&da);
        }
        Op::Mean { a, out } => {
            let g = out.data.grad.borrow();
            if g.is_empty() || !a.needs_grad() {
                return;
            }
            let da = vec![g[0] / a.len() as f64; a.len()];
            a.accumulate(&da);
        }
        Op::L2RowNorms { a, eps, out } => {
            let g = out.data.grad.borrow();
            if g.is_empty() || !a.needs_grad() {
                return;
            }
            let cols = a.cols();
            let av = a.values();
            let ov = out.values();
            let mut da = vec![0.0; a.len()];
            for i in 0..a.rows() {
                let r = ov[i].max(*eps);
                let gi = g[i];
                for c in 0..cols {
                    da[i * cols + c] = gi * av[i * cols + c] / r;
                }
            }
            drop(av);
            drop(ov);
            a.accumulate(&da);
        }
        Op::L2RowNormalize { a, eps, out } => {
            let g = out.data.grad.borrow();
            if g.is_empty() || !a.needs_grad() {
                return;
            }
            let cols = a.cols();
            let av = a.values();
            let ov = out.values();
            let mut da = vec![0.0; a.len()];
            for i in 0..a.rows() {
                let row = &av[i * cols..(i + 1) * cols];
                let orow = &ov[i * cols..(i + 1) * cols];
                let grow = &g[i * cols..(i + 1) * cols];
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > *eps {
                    // d(x/r)/dx = (I - yyᵀ)/r on the unit sphere
                    let dot: f64 = grow.iter().zip(orow).map(|(gv, yv)| gv * yv).sum();
                    for c in 0..cols {
                        da[i * cols + c] = (grow[c] - orow[c] * dot) / norm;
                    }
                } else {
                    // guard active: the divisor is the constant eps
                    for c in 0..cols {
                        da[i * cols + c] = grow[c] / eps;
                    }
                }
            }
            drop(av);
            drop(ov);
            a.accumulate(&da);
        }
        Op::MulScalar { a, s, out } => {
            let g = out.data.grad.borrow();
            if g.is_empty() {
                return;
            }
            let sv = s.values()[0];
            if a.needs_grad() {
                let da: Vec<f64> = g.iter().map(|x| x * sv).collect();
                a.accumulate(&da);
            }
            if s.needs_grad() {
                let av = a.values();
                let ds: f64 = g.iter().zip(av.iter()).map(|(x, y)| x * y).sum();
                s.accumulate(&[ds]);
            }
        }
    }
}

fn unary_backward(a: &Tensor, out: &Tensor, rule: impl Fn(f64, f64, f64) -> f64) {
    let g = out.data.grad.borrow();
    if g.is_empty() || !a.needs_grad() {
        return;
    }
    let av = a.values();
    let ov = out.values();
    let da: Vec<f64> = (0..av.len()).map(|i| rule(av[i], ov[i], g[i])).collect();
    drop(av);
    drop(ov);
    a.accumulate(&da);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = Tensor::from_values(1, 2, vec![-1.0, 2.0]).unwrap();
        let y = tape.relu(&x).unwrap();
        assert_eq!(*y.values(), vec![0.0, 2.0]);

        let z = Tensor::from_values(1, 1, vec![0.0]).unwrap();
        let s = tape.sigmoid(&z).unwrap();
        assert_eq!(s.scalar().unwrap(), 0.5);
    }

    #[test]
    fn matmul_hand_value() {
        let mut tape = Tape::new();
        let a = Tensor::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_values(2, 1, vec![1.0, 1.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(*c.values(), vec![3.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        let err = tape.matmul(&a, &b).unwrap_err();
        assert!(err.to_string().contains("3"));
        assert!(err.to_string().contains("2"));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = Tensor::parameter(2, 2, vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        let loss = tape.sum(&w).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad(), vec![1.0; 4]);
    }

    #[test]
    fn relu_subgradient_zero_at_negatives() {
        let mut tape = Tape::new();
        let w = Tensor::parameter(1, 2, vec![-1.0, 2.0]).unwrap();
        let r = tape.relu(&w).unwrap();
        let loss = tape.sum(&r).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad(), vec![0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = Tensor::parameter(1, 2, vec![1.0, 2.0]).unwrap();
        let y = tape.relu(&w).unwrap();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn double_backward_rejected() {
        let mut tape = Tape::new();
        let w = Tensor::parameter(1, 1, vec![2.0]).unwrap();
        let loss = tape.sum(&w).unwrap();
        tape.backward(&loss).unwrap();
        let err = tape.backward(&loss).unwrap_err();
        assert!(err.to_string().contains("empty tape"));
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let x = Tensor::from_values(4, 4, (0..16).map(|i| i as f64).collect()).unwrap();
        let mut out = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let y = tape.dropout(&x, 0.25, true, &mut rng).unwrap();
            out.push(y.values().clone());
        }
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let x = Tensor::from_values(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = tape.dropout(&x, 0.5, false, &mut rng).unwrap();
        assert!(y.same_storage(&x));
    }

    #[test]
    fn dropout_scales_survivors() {
        let x = Tensor::from_values(1, 1000, vec![1.0; 1000]).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = tape.dropout(&x, 0.25, true, &mut rng).unwrap();
        for v in y.values().iter() {
            assert!(*v == 0.0 || (*v - 4.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn detach_is_value_equal_and_grad_free() {
        let mut tape = Tape::new();
        let w = Tensor::parameter(1, 2, vec![1.0, 2.0]).unwrap();
        let y = tape.scale(&w, 3.0).unwrap();
        let d = y.detach();
        assert_eq!(*d.values(), *y.values());
        // ops downstream of the detached tensor record nothing: a fresh
        // tape stays empty and backward through it is rejected
        let mut downstream = Tape::new();
        let loss = downstream.sum(&d).unwrap();
        assert_eq!(downstream.num_ops(), 0);
        assert!(downstream.backward(&loss).is_err());
        assert_eq!(w.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn log_sigmoid_stable_at_extremes() {
        let mut tape = Tape::new();
        let x = Tensor::from_values(1, 3, vec![-1000.0, 0.0, 1000.0]).unwrap();
        let y = tape.log_sigmoid(&x).unwrap();
        let v = y.values();
        assert!((v[0] + 1000.0).abs() < 1e-9);
        assert!((v[1] + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(v[2].abs() < 1e-9);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn add_broadcasts_row_bias() {
        let mut tape = Tape::new();
        let a = Tensor::parameter(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::parameter(1, 2, vec![10.0, 20.0]).unwrap();
        let y = tape.add(&a, &b).unwrap();
        assert_eq!(*y.values(), vec![11.0, 22.0, 13.0, 24.0]);
        let loss = tape.sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(b.grad(), vec![2.0, 2.0]);
    }

    #[test]
    fn glorot_values_respect_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = glorot_values(3, 32, 32, 32, &mut rng);
        let bound = (6.0 / 64.0_f64).sqrt();
        assert!(v.iter().all(|x| x.abs() < bound));
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(v, glorot_values(3, 32, 32, 32, &mut rng2));
    }
}
