//! Fully connected noise predictor `eps_theta(x_t, t)`.
//!
//! Input is `[x_t | time_embed(t)]`; `y` is deliberately not an input. Hidden
//! layers use a smooth activation and the output layer is zero-initialized,
//! so an untrained model predicts zero everywhere.

use rand::Rng;

use super::autograd::Tape;
use super::tensor::Matrix;
use crate::error::{check_dim, Error, Result};
use crate::process::StateVector;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "silu" => Some(Activation::Silu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(self, m: &Matrix) -> Matrix {
        match self {
            Activation::Silu => m.map(super::autograd::silu),
            Activation::Tanh => m.map(f64::tanh),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub data_dim: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::invalid("data dimension must be positive"));
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "time embedding dimension must be even and at least 2, got {}",
                self.embed_dim
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("need at least one non-empty hidden layer"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.embed_dim
    }

    /// `(fan_in, fan_out)` of every linear layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.data_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Sinusoidal embedding of step `t` out of `total`. The position is rescaled to
/// `1000 t / total` so embeddings are comparable across different `T`.
pub fn time_embed(t: usize, total: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "embedding dimension must be even and positive, got {dim}"
        )));
    }
    if total == 0 || t > total {
        return Err(Error::TimestepOutOfRange { t, steps: total });
    }
    let half = dim / 2;
    let pos = 1000.0 * t as f64 / total as f64;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// One entry per parameter matrix, in [`NoisePredictor::params`] order.
    pub params: Vec<Matrix>,
    /// Gradient with respect to the network input `[x_t | embedding]`.
    pub input: Matrix,
}

/// One minibatch of regression examples.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x_t: Matrix,
    pub t: Vec<usize>,
    pub target: Matrix,
    /// Optional per-example loss weights.
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePredictor {
    arch: Architecture,
    /// `[w_0, b_0, w_1, b_1, ...]`; weights are `fan_in x fan_out`, biases `1 x fan_out`.
    params: Vec<Matrix>,
}

impl NoisePredictor {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(seed, "init", 0);
        let shapes = arch.layer_shapes();
        let last = shapes.len() - 1;
        let mut params = Vec::with_capacity(2 * shapes.len());
        for (i, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            if i == last {
                params.push(Matrix::zeros(fan_in, fan_out));
                params.push(Matrix::zeros(1, fan_out));
                continue;
            }
            let wb = (3.0 / fan_in as f64).sqrt();
            let bb = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| r.random_range(-wb..wb)).collect();
            let b = (0..fan_out).map(|_| r.random_range(-bb..bb)).collect();
            params.push(Matrix::from_vec(fan_in, fan_out, w)?);
            params.push(Matrix::from_vec(1, fan_out, b)?);
        }
        Ok(Self { arch, params })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_parts(arch: Architecture, params: Vec<Matrix>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if params.len() != 2 * shapes.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter matrices, got {}",
                2 * shapes.len(),
                params.len()
            )));
        }
        for (i, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            if params[2 * i].shape() != (fan_in, fan_out) || params[2 * i + 1].shape() != (1, fan_out)
            {
                return Err(Error::invalid(format!("layer {i} has the wrong shape")));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[Matrix]) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::invalid("parameter shapes do not match the model"));
        }
        self.params = params.to_vec();
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    fn check_params(&self) -> Result<()> {
        if self.params.iter().all(Matrix::is_finite) {
            Ok(())
        } else {
            Err(Error::non_finite("model parameters"))
        }
    }

    /// Builds `[x_t | time_embed(t)]` for a batch.
    pub fn input_matrix(&self, x_t: &Matrix, t: &[usize], total: usize) -> Result<Matrix> {
        check_dim(self.arch.data_dim, x_t.cols())?;
        check_dim(x_t.rows(), t.len())?;
        let mut emb = Vec::with_capacity(t.len() * self.arch.embed_dim);
        for &ti in t {
            emb.extend(time_embed(ti, total, self.arch.embed_dim)?);
        }
        Ok(x_t.hcat(&Matrix::from_vec(t.len(), self.arch.embed_dim, emb)?))
    }

    fn run(&self, input: Matrix) -> Matrix {
        let n = self.params.len() / 2;
        let mut h = input;
        for i in 0..n {
            h = h.matmul(&self.params[2 * i]).add_row(&self.params[2 * i + 1]);
            if i + 1 < n {
                h = self.arch.activation.apply(&h);
            }
        }
        h
    }

    /// Predictions for a batch of states; row `i` is evaluated at step `t[i]`.
    pub fn forward_batch(&self, x_t: &Matrix, t: &[usize], total: usize) -> Result<Matrix> {
        self.check_params()?;
        let input = self.input_matrix(x_t, t, total)?;
        Ok(self.run(input))
    }

    pub fn forward(&self, x_t: &StateVector, t: usize, total: usize) -> Result<StateVector> {
        let x = Matrix::from_vec(1, x_t.dim(), x_t.to_vec())?;
        let out = self.forward_batch(&x, &[t], total)?;
        Ok(StateVector::from_raw(out.row(0).to_vec()))
    }

    /// Forward from an explicit network input (used by gradient checks).
    pub fn forward_input(&self, input: &Matrix) -> Result<Matrix> {
        check_dim(self.arch.input_dim(), input.cols())?;
        Ok(self.run(input.clone()))
    }

    /// Loss value and gradients from an explicit network input.
    pub fn loss_and_grad_input(
        &self,
        input: &Matrix,
        target: &Matrix,
        weights: Option<&[f64]>,
    ) -> Result<(f64, Gradients)> {
        check_dim(self.arch.input_dim(), input.cols())?;
        check_dim(self.arch.data_dim, target.cols())?;
        check_dim(input.rows(), target.rows())?;
        if input.rows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if let Some(w) = weights {
            check_dim(input.rows(), w.len())?;
        }
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let vars: Vec<_> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let n = vars.len() / 2;
        let mut h = x;
        for i in 0..n {
            let z = tape.matmul(h, vars[2 * i]);
            h = tape.add_row(z, vars[2 * i + 1]);
            if i + 1 < n {
                h = match self.arch.activation {
                    Activation::Silu => tape.silu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        let loss = tape.mse(h, target.clone(), weights.map(<[f64]>::to_vec));
        let value = tape.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(Error::non_finite("training loss"));
        }
        let mut grads = tape.backward(loss);
        let mut take = |v: super::autograd::Var, shape: (usize, usize)| {
            grads[v.index()]
                .take()
                .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
        };
        let params = vars
            .iter()
            .zip(&self.params)
            .map(|(v, p)| take(*v, p.shape()))
            .collect();
        let input = take(x, input.shape());
        Ok((value, Gradients { params, input }))
    }

    /// Mean-over-batch training loss and its gradients.
    pub fn grad(&self, batch: &TrainBatch, total: usize) -> Result<(f64, Gradients)> {
        self.check_params()?;
        let input = self.input_matrix(&batch.x_t, &batch.t, total)?;
        self.loss_and_grad_input(&input, &batch.target, batch.weights.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(data_dim: usize) -> Architecture {
        Architecture {
            data_dim,
            embed_dim: 8,
            hidden: vec![16, 16],
            activation: Activation::Silu,
        }
    }

    #[test]
    fn embedding_at_zero_and_shape() {
        let e = time_embed(0, 100, 16).unwrap();
        assert_eq!(e.len(), 16);
        assert!(e[..8].iter().all(|&v| v == 0.0));
        assert!(e[8..].iter().all(|&v| v == 1.0));
        assert!(time_embed(3, 100, 7).is_err());
        assert!(time_embed(101, 100, 8).is_err());
        let e = time_embed(37, 100, 32).unwrap();
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn embeddings_are_distinct() {
        for total in [10, 100, 1000, 10_000] {
            let embs: Vec<Vec<f64>> = (0..=total).map(|t| time_embed(t, total, 16).unwrap()).collect();
            // Nearest positions are the hardest to tell apart; distant pairs
            // differ in the low-frequency components.
            for t in 0..total {
                let gap = embs[t]
                    .iter()
                    .zip(&embs[t + 1])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(gap > 1e-6, "T={total} t={t}");
            }
            for t in 0..=total {
                for u in (t + 1..=total).step_by(97.max(total / 50)) {
                    let gap = embs[t]
                        .iter()
                        .zip(&embs[u])
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    assert!(gap > 1e-6, "T={total} t={t} u={u}");
                }
            }
        }
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let m = NoisePredictor::new(arch(3), 1).unwrap();
        let out = m
            .forward(&StateVector::new(vec![0.3, -2.0, 5.0]).unwrap(), 17, 100)
            .unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(out.dim(), 3);
    }

    #[test]
    fn deterministic_init_and_forward() {
        let mut a = NoisePredictor::new(arch(2), 9).unwrap();
        let mut b = NoisePredictor::new(arch(2), 9).unwrap();
        assert_eq!(a, b);
        // Give the output layer weights so the output is non-trivial.
        for m in [&mut a, &mut b] {
            let n = m.params().len();
            let w = m.params()[n - 2].map(|_| 0.1);
            m.params_mut()[n - 2] = w;
        }
        let x = StateVector::new(vec![0.5, -0.5]).unwrap();
        let ya = a.forward(&x, 3, 10).unwrap();
        let yb = b.forward(&x, 3, 10).unwrap();
        assert_eq!(ya, yb);
        assert!(ya.iter().any(|v| *v != 0.0));
        assert_ne!(NoisePredictor::new(arch(2), 10).unwrap(), a);
    }

    #[test]
    fn forward_errors() {
        let mut m = NoisePredictor::new(arch(2), 1).unwrap();
        assert!(m.forward(&StateVector::scalar(1.0), 1, 10).is_err());
        m.params_mut()[0].data_mut()[0] = f64::NAN;
        assert!(matches!(
            m.forward(&StateVector::zeros(2), 1, 10),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn perfect_targets_give_zero_loss_and_gradient() {
        let mut m = NoisePredictor::new(arch(2), 4).unwrap();
        let n = m.params().len();
        let w = m.params()[n - 2].map(|_| 0.05);
        m.params_mut()[n - 2] = w;
        let x_t = Matrix::from_rows(&[[0.1, 0.2], [1.0, -1.0], [0.0, 3.0]]).unwrap();
        let t = vec![1, 5, 9];
        let target = m.forward_batch(&x_t, &t, 10).unwrap();
        let (loss, g) = m
            .grad(
                &TrainBatch {
                    x_t,
                    t,
                    target,
                    weights: None,
                },
                10,
            )
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.params.iter().all(|p| p.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let mut m = NoisePredictor::new(arch(1), 2).unwrap();
        let n = m.params().len();
        let w = m.params()[n - 2].map(|_| 0.3);
        m.params_mut()[n - 2] = w;
        let one = TrainBatch {
            x_t: Matrix::from_rows(&[[0.7]]).unwrap(),
            t: vec![4],
            target: Matrix::from_rows(&[[1.5]]).unwrap(),
            weights: None,
        };
        let k = 5;
        let many = TrainBatch {
            x_t: Matrix::from_rows(&vec![[0.7]; k]).unwrap(),
            t: vec![4; k],
            target: Matrix::from_rows(&vec![[1.5]; k]).unwrap(),
            weights: None,
        };
        let (l1, g1) = m.grad(&one, 10).unwrap();
        let (lk, gk) = m.grad(&many, 10).unwrap();
        assert!((l1 - lk).abs() <= 1e-15 * l1.abs().max(1.0));
        for (a, b) in g1.params.iter().zip(&gk.params) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-3), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn from_parts_checks_shapes() {
        let m = NoisePredictor::new(arch(2), 1).unwrap();
        let a = m.architecture().clone();
        assert!(NoisePredictor::from_parts(a.clone(), m.params().to_vec()).is_ok());
        let mut bad = m.params().to_vec();
        bad.pop();
        assert!(NoisePredictor::from_parts(a.clone(), bad).is_err());
        let mut bad = m.params().to_vec();
        bad[0] = Matrix::zeros(1, 1);
        assert!(NoisePredictor::from_parts(a, bad).is_err());
    }
}
