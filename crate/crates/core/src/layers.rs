//! Network layers: 3×3 convolution, 2×2 max pooling, batch normalisation,
//! leaky ReLU, fully connected, and the feature-reweighting (FRW) layer.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How the optimizer treats a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv, FC and softmax-head weights; the only kind subject to weight decay.
    Weight,
    Bias,
    /// Batch-norm scale and shift.
    Norm,
    /// Feature reweighting weights.
    Frw,
}

/// A trainable tensor together with its most recent gradient.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub kind: ParamKind,
    /// Frozen parameters are recorded as constants and receive no gradient.
    pub frozen: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Self {
        Param {
            name: name.into(),
            value,
            grad: None,
            kind,
            frozen: false,
        }
    }

    /// Records the parameter on `tape` as a named leaf.
    pub fn bind(&self, tape: &Tape<T>) -> Var {
        tape.param(&self.name, self.value.clone(), !self.frozen)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Clone, Debug)]
pub struct ConvLayer<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> ConvLayer<T> {
    /// He-initialised weights (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let std = (2.0 / (in_ch * 9) as f64).sqrt();
        ConvLayer {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::randn(&[out_ch, in_ch, 3, 3], std, rng),
                ParamKind::Weight,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch]), ParamKind::Bias),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        let b = self.bias.bind(tape);
        tape.conv3x3(x, w, b)
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Batch normalisation over channel axis 1.
#[derive(Clone, Debug)]
pub struct BatchNormLayer<T: Scalar = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    /// Weight on the old running value: `r <- momentum * r + (1 - momentum) * batch`.
    pub momentum: f64,
    pub mode: Mode,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNormLayer {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::Norm),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Norm),
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            eps: 1e-5,
            momentum: 0.9,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// In training mode normalises with batch statistics and folds them
    /// into the running estimates (unbiased variance); in eval mode uses
    /// the running estimates only.
    pub fn forward(&mut self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let gamma = self.gamma.bind(tape);
        let beta = self.beta.bind(tape);
        let eps = T::from_f64(self.eps);
        match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, eps)?;
                let m = T::from_f64(self.momentum);
                let keep = T::ONE - m;
                let correction = T::from_f64(stats.count as f64 / (stats.count as f64 - 1.0));
                for c in 0..self.channels() {
                    self.running_mean[c] = m * self.running_mean[c] + keep * stats.mean[c];
                    self.running_var[c] =
                        m * self.running_var[c] + keep * stats.var[c] * correction;
                }
                if !self.running_mean.iter().chain(&self.running_var).all(|v| v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite running statistics in {}",
                        self.gamma.name
                    )));
                }
                Ok(y)
            }
            Mode::Eval => {
                tape.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, eps)
            }
        }
    }

    /// Evaluation-mode forward regardless of `self.mode`.
    pub fn forward_eval(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let gamma = self.gamma.bind(tape);
        let beta = self.beta.bind(tape);
        let eps = T::from_f64(self.eps);
        tape.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, eps)
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct FcLayer<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> FcLayer<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        Self::with_std(name, inputs, outputs, std, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        FcLayer {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::randn(&[inputs, outputs], std, rng),
                ParamKind::Weight,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[outputs]), ParamKind::Bias),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        let b = self.bias.bind(tape);
        fc_forward(tape, w, b, x)
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// `x W + b` for `x: [B, in]`, `W: [in, out]`, `b: [out]`.
pub fn fc_forward<T: Scalar>(tape: &Tape<T>, weight: Var, bias: Var, x: Var) -> Result<Var> {
    let xw = tape.matmul(x, weight)?;
    tape.add(xw, bias)
}

/// Learned per-dimension reweighting of the embedding: `x̂ = x ⊙ w`.
#[derive(Clone, Debug)]
pub struct FrwLayer<T: Scalar = f32> {
    pub weight: Param<T>,
}

impl<T: Scalar> FrwLayer<T> {
    /// All entries equal to `sqrt(2C / D)`, so that `½‖w‖² = C` and the
    /// norm constraint starts at zero.
    pub fn new(name: &str, dim: usize, norm_target: f64) -> Self {
        let v = (2.0 * norm_target / dim as f64).sqrt();
        FrwLayer {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::full(&[dim], T::from_f64(v)),
                ParamKind::Frw,
            ),
        }
    }

    pub fn from_weights(name: &str, weights: Tensor<T>) -> Self {
        FrwLayer {
            weight: Param::new(format!("{name}.weight"), weights, ParamKind::Frw),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.value.len()
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        frw_forward(tape, x, w)
    }
}

/// Row-wise element-wise product of a `[B, D]` batch with `w: [D]`.
pub fn frw_forward<T: Scalar>(tape: &Tape<T>, x: Var, weight: Var) -> Result<Var> {
    let xs = tape.shape(x);
    let ws = tape.shape(weight);
    if xs.len() != 2 || ws != [xs[1]] {
        return Err(Error::dim("frw", &xs, &ws));
    }
    tape.mul(x, weight)
}

pub fn leaky_relu<T: Scalar>(tape: &Tape<T>, x: Var, slope: f64) -> Var {
    tape.leaky_relu(x, T::from_f64(slope))
}

pub fn max_pool<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<Var> {
    tape.max_pool2x2(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_preserves_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = ConvLayer::<f64>::new("c", 2, 5, &mut rng);
        for (h, w) in [(1, 1), (1, 7), (4, 3), (9, 2)] {
            let tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[2, 2, h, w], 1.0, &mut rng));
            let y = conv.forward(&tape, x).unwrap();
            assert_eq!(tape.shape(y), vec![2, 5, h, w]);
        }
    }

    #[test]
    fn fc_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1., 1.]).unwrap());
        let w = tape.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 2.]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[2], &[1., 1.]).unwrap());
        let y = fc_forward(&tape, w, b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[2., 3.]);

        let eye = tape.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[0.5, -3., 2., 7.]).unwrap());
        let y = fc_forward(&tape, eye, zero, x).unwrap();
        assert_eq!(*tape.value(y), *tape.value(x));

        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(fc_forward(&tape, bad, zero, x).is_err());
    }

    #[test]
    fn frw_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let w = tape.constant(Tensor::from_f64(&[2], &[3., 0.5]).unwrap());
        let y = frw_forward(&tape, x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 1.]);

        let w3 = tape.constant(Tensor::ones(&[3]));
        assert!(frw_forward(&tape, x, w3).is_err());
    }

    #[test]
    fn frw_init_meets_norm_target() {
        let frw = FrwLayer::<f64>::new("frw", 32, 200.0);
        let half_sq: f64 = 0.5 * frw.weight.value.data().iter().map(|v| v * v).sum::<f64>();
        assert!((half_sq - 200.0).abs() < 1e-9);
    }

    #[test]
    fn batchnorm_train_fixed_point_and_eval_affine() {
        let mut bn = BatchNormLayer::<f64>::new("bn", 2);
        // per channel: zero mean, unit (biased) variance
        let x = Tensor::from_f64(&[2, 2], &[1., -1., -1., 1.]).unwrap();
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = bn.forward(&tape, v).unwrap();
        assert!(tape.value(y).max_abs_diff(&x) < 1e-5);
        // running stats moved 10% toward the batch (unbiased var = 2)
        assert!((bn.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);

        bn.mode = Mode::Eval;
        bn.running_mean = vec![1.0, -2.0];
        bn.running_var = vec![4.0, 0.25];
        bn.gamma.value = Tensor::from_f64(&[2], &[2.0, 1.0]).unwrap();
        let tape = Tape::new();
        let v = tape.constant(Tensor::from_f64(&[1, 2], &[3., 0.]).unwrap());
        let y = bn.forward(&tape, v).unwrap();
        let out = tape.value(y).to_f64_vec();
        let expect0 = 2.0 * (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt();
        let expect1 = (0.0 + 2.0) / (0.25f64 + 1e-5).sqrt();
        assert!((out[0] - expect0).abs() < 1e-12);
        assert!((out[1] - expect1).abs() < 1e-12);
    }
}
