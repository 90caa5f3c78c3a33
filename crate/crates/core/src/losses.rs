//! Identification loss, center loss and its center update rule, the FRW
//! norm constraint, the joint objective, and a pairwise verification
//! baseline.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{fc_forward, Param, ParamKind};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of freshly initialised classifier weights. Small
/// enough that initial logits are nearly uniform.
pub const HEAD_INIT_STD: f64 = 0.01;

/// Softmax classifier `z = Wᵀx + b` with `W: [D, N]`.
#[derive(Clone, Debug)]
pub struct SoftmaxHead<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> SoftmaxHead<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> Self {
        SoftmaxHead {
            weight: Param::new(
                "head.weight",
                Tensor::randn(&[dim, classes], HEAD_INIT_STD, rng),
                ParamKind::Weight,
            ),
            bias: Param::new("head.bias", Tensor::zeros(&[classes]), ParamKind::Bias),
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::dim("softmax head", weight.shape(), bias.shape()));
        }
        Ok(SoftmaxHead {
            weight: Param::new("head.weight", weight, ParamKind::Weight),
            bias: Param::new("head.bias", bias, ParamKind::Bias),
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn bind(&self, tape: &Tape<T>) -> (Var, Var) {
        (self.weight.bind(tape), self.bias.bind(tape))
    }

    /// Logits for a `[B, D]` batch, outside any tape.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let (w, b) = self.bind(&tape);
        let xv = tape.constant(x.clone());
        let z = fc_forward(&tape, w, b, xv)?;
        let out = tape.value(z).clone();
        Ok(out)
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Per-class centers. Updated only by [`CenterTable::update`], never by
/// the optimizer, and never recorded on a tape as a gradient-carrying leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterTable<T: Scalar = f32> {
    centers: Tensor<T>,
    alpha: f64,
}

impl<T: Scalar> CenterTable<T> {
    /// All-zero centers for `classes` classes of dimension `dim`.
    pub fn zeros(classes: usize, dim: usize, alpha: f64) -> Result<Self> {
        Self::from_centers(Tensor::zeros(&[classes, dim]), alpha)
    }

    pub fn from_centers(centers: Tensor<T>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("center rate alpha must be in (0, 1], got {alpha}")));
        }
        if centers.rank() != 2 {
            return Err(Error::dim("center table", centers.shape(), &[0, 0]));
        }
        Ok(CenterTable { centers, alpha })
    }

    pub fn centers(&self) -> &Tensor<T> {
        &self.centers
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn center(&self, class: usize) -> &[T] {
        self.centers.row(class)
    }

    /// One center step on a batch of detached embeddings `x: [M, D]`:
    ///
    /// `Δc_j = Σ_i [y_i = j] (c_j − x_i) / (1 + Σ_i [y_i = j])`,
    /// `c_j ← c_j − α Δc_j`.
    ///
    /// Classes absent from the batch are left untouched.
    pub fn update(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<()> {
        check_batch(x, labels, self.classes(), self.dim(), "update_centers")?;
        let d = self.dim();
        let alpha = T::from_f64(self.alpha);
        let mut acc = vec![T::ZERO; self.classes() * d];
        let mut counts = vec![0usize; self.classes()];
        for (i, &j) in labels.iter().enumerate() {
            counts[j] += 1;
            let c = self.centers.row(j);
            let xi = x.row(i);
            for k in 0..d {
                acc[j * d + k] += c[k] - xi[k];
            }
        }
        let data = self.centers.data_mut();
        for (j, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let denom = T::ONE + T::from_f64(count as f64);
            for k in 0..d {
                let delta = acc[j * d + k] / denom;
                data[j * d + k] -= alpha * delta;
            }
        }
        Ok(())
    }
}

/// Joint-objective coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the center loss.
    pub lambda: f64,
    /// Weight of the FRW norm constraint.
    pub beta: f64,
    /// Target value of `½‖w_frw‖²`.
    pub norm_target: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.01,
            beta: 0.001,
            norm_target: 200.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lambda >= 0.0) {
            problems.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.beta >= 0.0) {
            problems.push(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.norm_target > 0.0) {
            problems.push(format!("C must be > 0, got {}", self.norm_target));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn check_batch<T: Scalar>(
    x: &Tensor<T>,
    labels: &[usize],
    classes: usize,
    dim: usize,
    op: &'static str,
) -> Result<()> {
    if x.rank() != 2 || x.shape()[1] != dim || x.shape()[0] != labels.len() {
        return Err(Error::dim(op, x.shape(), &[labels.len(), dim]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(format!(
            "{op}: label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy of `logits: [M, K]` against `labels`.
pub fn cross_entropy<T: Scalar>(tape: &Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::dim("cross_entropy", &shape, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {} classes",
            shape[1]
        )));
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather(logp, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -T::ONE))
}

/// Identification loss: mean negative log-softmax of the true class under
/// the head with bound weights `w: [D, N]`, `b: [N]`.
pub fn identification_loss<T: Scalar>(
    tape: &Tape<T>,
    w: Var,
    b: Var,
    x: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = fc_forward(tape, w, b, x)?;
    cross_entropy(tape, logits, labels)
}

/// Center loss `(1 / 2M) Σ ‖x_i − c_{y_i}‖²`. Centers enter as constants.
pub fn center_loss<T: Scalar>(
    tape: &Tape<T>,
    table: &CenterTable<T>,
    x: Var,
    labels: &[usize],
) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != table.dim() || shape[0] != labels.len() {
        return Err(Error::dim("center_loss", &shape, table.centers().shape()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= table.classes()) {
        return Err(Error::contract(format!(
            "center_loss: label {bad} out of range for {} classes",
            table.classes()
        )));
    }
    let c = tape.constant(table.centers().select_rows(labels)?);
    let diff = tape.sub(x, c)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, T::from_f64(0.5 / labels.len() as f64)))
}

/// FRW norm constraint `β (½‖w‖² − C)²`.
pub fn frw_constraint<T: Scalar>(tape: &Tape<T>, w: Var, cfg: &LossConfig) -> Var {
    let sq = tape.mul(w, w).expect("same shape");
    let s = tape.sum(sq);
    let half = tape.scale(s, T::from_f64(0.5));
    let dev = tape.add_scalar(half, T::from_f64(-cfg.norm_target));
    let dev2 = tape.mul(dev, dev).expect("same shape");
    tape.scale(dev2, T::from_f64(cfg.beta))
}

/// The individual terms of the joint objective, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ident: Var,
    pub center: Var,
    /// `None` when the FRW layer is disabled.
    pub frw: Option<Var>,
}

/// `L = L_I + λ L_C + L_F`, with `L_F` omitted when `frw_weight` is `None`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    head_w: Var,
    head_b: Var,
    table: &CenterTable<T>,
    frw_weight: Option<Var>,
    x: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let ident = identification_loss(tape, head_w, head_b, x, labels)?;
    let center = center_loss(tape, table, x, labels)?;
    let weighted = tape.scale(center, T::from_f64(cfg.lambda));
    let mut total = tape.add(ident, weighted)?;
    let frw = frw_weight.map(|w| frw_constraint(tape, w, cfg));
    if let Some(f) = frw {
        total = tape.add(total, f)?;
    }
    Ok(LossTerms {
        total,
        ident,
        center,
        frw,
    })
}

/// Two-way (different / same) classifier on squared embedding differences.
#[derive(Clone, Debug)]
pub struct VerificationHead<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

/// Class index used for "same identity" pairs.
pub const SAME: usize = 1;
/// Class index used for "different identity" pairs.
pub const DIFFERENT: usize = 0;

impl<T: Scalar> VerificationHead<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        VerificationHead {
            weight: Param::new(
                "verif.weight",
                Tensor::randn(&[dim, 2], HEAD_INIT_STD, rng),
                ParamKind::Weight,
            ),
            bias: Param::new("verif.bias", Tensor::zeros(&[2]), ParamKind::Bias),
        }
    }

    pub fn bind(&self, tape: &Tape<T>) -> (Var, Var) {
        (self.weight.bind(tape), self.bias.bind(tape))
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Cross-entropy of a linear two-class head on `(x1 − x2) ⊙ (x1 − x2)`.
/// `same[p]` is [`SAME`] or [`DIFFERENT`].
pub fn binary_verification_loss<T: Scalar>(
    tape: &Tape<T>,
    x1: Var,
    x2: Var,
    same: &[usize],
    head_w: Var,
    head_b: Var,
) -> Result<Var> {
    let (s1, s2) = (tape.shape(x1), tape.shape(x2));
    if s1 != s2 || s1.len() != 2 || s1[0] != same.len() {
        return Err(Error::dim("binary_verification_loss", &s1, &s2));
    }
    let diff = tape.sub(x1, x2)?;
    let sq = tape.mul(diff, diff)?;
    let logits = fc_forward(tape, head_w, head_b, sq)?;
    cross_entropy(tape, logits, same)
}

/// Folds FRW weights into the classifier: `W'_j = Ŵ_j ⊙ w_frw`, biases
/// unchanged. Logits of the result on raw `x` equal logits of `head` on
/// `x ⊙ w_frw`.
pub fn fold_frw_into_softmax<T: Scalar>(
    head: &SoftmaxHead<T>,
    w_frw: &Tensor<T>,
) -> Result<SoftmaxHead<T>> {
    let (d, n) = (head.dim(), head.classes());
    if w_frw.shape() != [d] {
        return Err(Error::dim("fold_frw_into_softmax", head.weight.value.shape(), w_frw.shape()));
    }
    let mut w = head.weight.value.clone();
    let scale = w_frw.data();
    for (row, &s) in w.data_mut().chunks_mut(n).zip(scale) {
        row.iter_mut().for_each(|v| *v *= s);
    }
    SoftmaxHead::from_parts(w, head.bias.value.clone())
}
