//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! tape visits every node after all of its consumers.

use super::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Silu(Var),
    Tanh(Var),
    /// Weighted mean of squared errors over all entries; `weights` scale rows.
    Mse {
        pred: Var,
        target: Matrix,
        weights: Option<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a).add_row(self.value(bias));
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(silu);
        self.push(value, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// Scalar `(1 / (rows * cols)) * sum_i w_i * |pred_i - target_i|^2`.
    pub fn mse(&mut self, pred: Var, target: Matrix, weights: Option<Vec<f64>>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse shape mismatch");
        if let Some(w) = &weights {
            assert_eq!(w.len(), p.rows(), "mse weight count mismatch");
        }
        let mut total = 0.0;
        for i in 0..p.rows() {
            let row: f64 = p
                .row(i)
                .iter()
                .zip(target.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += weights.as_ref().map_or(1.0, |w| w[i]) * row;
        }
        let value = Matrix::from_vec(1, 1, vec![total / p.len() as f64]).expect("1x1");
        self.push(
            value,
            Op::Mse {
                pred,
                target,
                weights,
            },
        )
    }

    /// Gradients of the scalar `loss` with respect to every leaf. Interior
    /// nodes and leaves that do not influence `loss` are `None`.
    pub fn backward(&self, loss: Var) -> Vec<Option<Matrix>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).expect("1x1"));

        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads, *bias, g.sum_rows());
                    accumulate(&mut grads, *a, g);
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gi, xi) in ga.data_mut().iter_mut().zip(x.data()) {
                        *gi *= silu_grad(*xi);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let mut ga = g;
                    for (gi, yi) in ga.data_mut().iter_mut().zip(y.data()) {
                        *gi *= 1.0 - yi * yi;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mse {
                    pred,
                    target,
                    weights,
                } => {
                    let p = self.value(*pred);
                    let scale = 2.0 * g.get(0, 0) / p.len() as f64;
                    let mut gp = Matrix::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let w = weights.as_ref().map_or(1.0, |w| w[i]) * scale;
                        for ((o, a), b) in gp.row_mut(i).iter_mut().zip(p.row(i)).zip(target.row(i)) {
                            *o = w * (a - b);
                        }
                    }
                    accumulate(&mut grads, *pred, gp);
                }
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
