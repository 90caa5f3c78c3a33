//! Self-check suites run by `reid verify`: finite-difference gradients of
//! every layer and loss, the FRW/softmax folding identity, the center
//! update rule, single-shot CMC ranking, and the rule that centers never
//! receive gradients. Everything runs in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::evaluation::{cmc_single_shot, DistanceMatrix};
use crate::gradcheck::finite_diff_check;
use crate::layers::{fc_forward, frw_forward};
use crate::losses::{
    binary_verification_loss, center_loss, fold_frw_into_softmax, frw_constraint,
    identification_loss, total_loss, CenterTable, LossConfig, SoftmaxHead,
};
use crate::model::{EmbeddingModel, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{AdamConfig, AdamState};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const FOLD_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    /// Headline number (max error, mismatch count, ...).
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<14} value={:.3e} threshold={:.1e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.threshold,
            self.detail
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyConfig {
    pub grad_seeds: u64,
    pub fold_trials: u64,
    pub center_batches: u64,
    pub cmc_trials: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            grad_seeds: 20,
            fold_trials: 100,
            center_batches: 50,
            cmc_trials: 1000,
        }
    }
}

pub fn run_all(cfg: &VerifyConfig) -> Result<VerifyReport> {
    Ok(VerifyReport {
        suites: vec![
            gradient_suite(cfg.grad_seeds)?,
            fold_suite(cfg.fold_trials)?,
            center_suite(cfg.center_batches)?,
            no_backprop_suite()?,
            cmc_suite(cfg.cmc_trials)?,
        ],
    })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn project(tape: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y);
    let r = tape.constant(Tensor::uniform(&shape, 0.5, 1.5, &mut rng(seed ^ 0x5eed)));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Uniform magnitudes in [0.1, 1] with random signs: away from ReLU kinks.
fn signed(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(0.1..1.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Distinct values spaced 0.05 apart, shuffled: no max-pool near-ties.
fn distinct(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    data.shuffle(r);
    Tensor::new(shape, data).expect("shape")
}

type Case = Box<dyn Fn(u64) -> Result<f64>>;

/// `(name, check)` for every layer and loss; each check returns the worst
/// relative error over all inputs it differentiates.
fn gradient_cases() -> Vec<(&'static str, Case)> {
    fn check(
        f: impl Fn(&Tape<f64>, Var) -> Result<Var>,
        x: &Tensor<f64>,
    ) -> Result<f64> {
        Ok(finite_diff_check(f, x, GRAD_STEP)?.max_rel_error)
    }
    vec![
        (
            "conv3x3",
            Box::new(|s| {
                let mut r = rng(s);
                let (b, c, o) = (2, r.random_range(1..3), r.random_range(1..3));
                let x = Tensor::randn(&[b, c, 4, 3], 1.0, &mut r);
                let w = Tensor::randn(&[o, c, 3, 3], 0.5, &mut r);
                let bias = Tensor::randn(&[o], 0.5, &mut r);
                let (wc, bc, xc) = (w.clone(), bias.clone(), x.clone());
                let ex = check(
                    |t, v| {
                        let y = t.conv3x3(v, t.constant(wc.clone()), t.constant(bc.clone()))?;
                        project(t, y, s)
                    },
                    &x,
                )?;
                let ew = check(
                    |t, v| {
                        let y = t.conv3x3(t.constant(xc.clone()), v, t.constant(bc.clone()))?;
                        project(t, y, s)
                    },
                    &w,
                )?;
                let eb = check(
                    |t, v| {
                        let y = t.conv3x3(t.constant(xc.clone()), t.constant(wc.clone()), v)?;
                        project(t, y, s)
                    },
                    &bias,
                )?;
                Ok(ex.max(ew).max(eb))
            }),
        ),
        (
            "max_pool",
            Box::new(|s| {
                let x = distinct(&[2, 2, 5, 4], &mut rng(s));
                check(
                    |t, v| {
                        let y = t.max_pool2x2(v)?;
                        project(t, y, s)
                    },
                    &x,
                )
            }),
        ),
        (
            "batch_norm",
            Box::new(|s| {
                let mut r = rng(s);
                let x = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut r);
                let g = Tensor::uniform(&[2], 0.5, 1.5, &mut r);
                let b = Tensor::randn(&[2], 0.5, &mut r);
                let (gc, bc, xc) = (g.clone(), b.clone(), x.clone());
                let train_x = check(
                    |t, v| {
                        let (y, _) =
                            t.batch_norm_train(v, t.constant(gc.clone()), t.constant(bc.clone()), 1e-5)?;
                        project(t, y, s)
                    },
                    &x,
                )?;
                let train_g = check(
                    |t, v| {
                        let (y, _) =
                            t.batch_norm_train(t.constant(xc.clone()), v, t.constant(bc.clone()), 1e-5)?;
                        project(t, y, s)
                    },
                    &g,
                )?;
                let mean = [0.1, -0.2];
                let var = [0.8, 1.3];
                let eval_x = check(
                    |t, v| {
                        let y = t.batch_norm_eval(
                            v,
                            t.constant(gc.clone()),
                            t.constant(bc.clone()),
                            &mean,
                            &var,
                            1e-5,
                        )?;
                        project(t, y, s)
                    },
                    &x,
                )?;
                Ok(train_x.max(train_g).max(eval_x))
            }),
        ),
        (
            "leaky_relu",
            Box::new(|s| {
                let x = signed(&[4, 5], &mut rng(s));
                check(
                    |t, v| {
                        let y = t.leaky_relu(v, 0.1);
                        project(t, y, s)
                    },
                    &x,
                )
            }),
        ),
        (
            "fc",
            Box::new(|s| {
                let mut r = rng(s);
                let x = Tensor::randn(&[3, 4], 1.0, &mut r);
                let w = Tensor::randn(&[4, 5], 1.0, &mut r);
                let b = Tensor::randn(&[5], 1.0, &mut r);
                let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
                let ex = check(
                    |t, v| {
                        let y = fc_forward(t, t.constant(wc.clone()), t.constant(bc.clone()), v)?;
                        project(t, y, s)
                    },
                    &x,
                )?;
                let ew = check(
                    |t, v| {
                        let y = fc_forward(t, v, t.constant(bc.clone()), t.constant(xc.clone()))?;
                        project(t, y, s)
                    },
                    &w,
                )?;
                Ok(ex.max(ew))
            }),
        ),
        (
            "frw",
            Box::new(|s| {
                let mut r = rng(s);
                let x = Tensor::randn(&[3, 4], 1.0, &mut r);
                let w = Tensor::randn(&[4], 1.0, &mut r);
                let (wc, xc) = (w.clone(), x.clone());
                let ex = check(
                    |t, v| {
                        let y = frw_forward(t, v, t.constant(wc.clone()))?;
                        project(t, y, s)
                    },
                    &x,
                )?;
                let ew = check(
                    |t, v| {
                        let y = frw_forward(t, t.constant(xc.clone()), v)?;
                        project(t, y, s)
                    },
                    &w,
                )?;
                Ok(ex.max(ew))
            }),
        ),
        (
            "identification",
            Box::new(|s| {
                let mut r = rng(s);
                let (m, d, n) = (4, 3, 5);
                let x = Tensor::randn(&[m, d], 1.0, &mut r);
                let w = Tensor::randn(&[d, n], 1.0, &mut r);
                let b = Tensor::randn(&[n], 1.0, &mut r);
                let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
                let (wc, bc, xc, lc) = (w.clone(), b.clone(), x.clone(), labels.clone());
                let ex = check(
                    |t, v| identification_loss(t, t.constant(wc.clone()), t.constant(bc.clone()), v, &lc),
                    &x,
                )?;
                let ew = check(
                    |t, v| identification_loss(t, v, t.constant(bc.clone()), t.constant(xc.clone()), &labels),
                    &w,
                )?;
                Ok(ex.max(ew))
            }),
        ),
        (
            "center",
            Box::new(|s| {
                let mut r = rng(s);
                let (m, d, n) = (5, 3, 4);
                let x = Tensor::randn(&[m, d], 1.0, &mut r);
                let table = CenterTable::from_centers(Tensor::randn(&[n, d], 1.0, &mut r), 0.5)?;
                let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
                check(|t, v| center_loss(t, &table, v, &labels), &x)
            }),
        ),
        (
            "frw_constraint",
            Box::new(|s| {
                let w = Tensor::randn(&[6], 2.0, &mut rng(s));
                let cfg = LossConfig {
                    norm_target: 3.0,
                    ..LossConfig::default()
                };
                check(|t, v| Ok(frw_constraint(t, v, &cfg)), &w)
            }),
        ),
        (
            "total",
            Box::new(|s| {
                let mut r = rng(s);
                let (m, d, n) = (4, 3, 4);
                let x = Tensor::randn(&[m, d], 1.0, &mut r);
                let w = Tensor::randn(&[d, n], 1.0, &mut r);
                let b = Tensor::randn(&[n], 1.0, &mut r);
                let frw = Tensor::randn(&[d], 1.0, &mut r);
                let table = CenterTable::from_centers(Tensor::randn(&[n, d], 1.0, &mut r), 0.5)?;
                let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
                let cfg = LossConfig {
                    lambda: 0.3,
                    beta: 0.01,
                    norm_target: 2.0,
                };
                let (wc, bc, fc, xc) = (w.clone(), b.clone(), frw.clone(), x.clone());
                // embedding path through FRW so both x and w_frw are exercised
                let loss = |t: &Tape<f64>, xv: Var, wv: Var, fv: Var| -> Result<Var> {
                    let e = frw_forward(t, xv, fv)?;
                    Ok(total_loss(t, wv, t.constant(bc.clone()), &table, Some(fv), e, &labels, &cfg)?.total)
                };
                let ex = check(|t, v| loss(t, v, t.constant(wc.clone()), t.constant(fc.clone())), &x)?;
                let ew = check(|t, v| loss(t, t.constant(xc.clone()), v, t.constant(fc.clone())), &w)?;
                let ef = check(|t, v| loss(t, t.constant(xc.clone()), t.constant(wc.clone()), v), &frw)?;
                Ok(ex.max(ew).max(ef))
            }),
        ),
        (
            "verification",
            Box::new(|s| {
                let mut r = rng(s);
                let (p, d) = (4, 3);
                // squared differences feed the logits; keep them small so
                // the softmax never saturates below finite-difference noise
                let x1 = Tensor::randn(&[p, d], 0.5, &mut r);
                let x2 = Tensor::randn(&[p, d], 0.5, &mut r);
                let w = Tensor::randn(&[d, 2], 0.5, &mut r);
                let b = Tensor::randn(&[2], 1.0, &mut r);
                let same: Vec<usize> = (0..p).map(|i| i % 2).collect();
                let (wc, bc, x2c, x1c) = (w.clone(), b.clone(), x2.clone(), x1.clone());
                let e1 = check(
                    |t, v| {
                        binary_verification_loss(
                            t,
                            v,
                            t.constant(x2c.clone()),
                            &same,
                            t.constant(wc.clone()),
                            t.constant(bc.clone()),
                        )
                    },
                    &x1,
                )?;
                let ew = check(
                    |t, v| {
                        binary_verification_loss(
                            t,
                            t.constant(x1c.clone()),
                            t.constant(x2.clone()),
                            &same,
                            v,
                            t.constant(bc.clone()),
                        )
                    },
                    &w,
                )?;
                Ok(e1.max(ew))
            }),
        ),
    ]
}

pub fn gradient_suite(seeds: u64) -> Result<SuiteResult> {
    let mut worst = (0.0f64, String::new());
    for (name, case) in gradient_cases() {
        for s in 0..seeds {
            let e = case(s)?;
            if e > worst.0 || worst.1.is_empty() {
                worst = (e.max(worst.0), format!("{name} seed {s}"));
            }
        }
    }
    Ok(SuiteResult {
        name: "gradients".into(),
        passed: worst.0 < GRAD_TOLERANCE,
        value: worst.0,
        threshold: GRAD_TOLERANCE,
        detail: format!("worst finite-difference relative error at {}", worst.1),
    })
}

/// Folded-head logits on `x` versus head logits on `x ⊙ w_frw`.
pub fn fold_suite(trials: u64) -> Result<SuiteResult> {
    let mut max_dev = 0.0f64;
    let mut argmax_mismatch = 0usize;
    for s in 0..trials {
        let mut r = rng(1000 + s);
        let (b, d, n) = (r.random_range(1..6), r.random_range(1..9), r.random_range(2..8));
        let head = SoftmaxHead::<f64>::from_parts(
            Tensor::randn(&[d, n], 1.0, &mut r),
            Tensor::randn(&[n], 1.0, &mut r),
        )?;
        let w = Tensor::randn(&[d], 2.0, &mut r);
        let x = Tensor::randn(&[b, d], 1.0, &mut r);
        let tape = Tape::new();
        let xw = frw_forward(&tape, tape.constant(x.clone()), tape.constant(w.clone()))?;
        let reference = head.logits(&tape.value(xw).clone())?;
        let folded = fold_frw_into_softmax(&head, &w)?.logits(&x)?;
        max_dev = max_dev.max(reference.max_abs_diff(&folded));
        for i in 0..b {
            if argmax(reference.row(i)) != argmax(folded.row(i)) {
                argmax_mismatch += 1;
            }
        }
    }
    Ok(SuiteResult {
        name: "frw_fold".into(),
        passed: max_dev < FOLD_TOLERANCE && argmax_mismatch == 0,
        value: max_dev,
        threshold: FOLD_TOLERANCE,
        detail: format!("max logit deviation over {trials} triples, {argmax_mismatch} argmax mismatches"),
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

/// Center step against a per-class loop written straight from the rule.
pub fn center_suite(batches: u64) -> Result<SuiteResult> {
    let mut mismatches = 0usize;
    let mut untouched_changed = 0usize;
    for s in 0..batches {
        let mut r = rng(2000 + s);
        let n = r.random_range(1..=10);
        let d = r.random_range(1..=6);
        let m = r.random_range(1..=32);
        let alpha = r.random_range(0.05..=1.0);
        let centers = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
        let x = Tensor::<f64>::randn(&[m, d], 1.0, &mut r);
        let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
        let mut table = CenterTable::from_centers(centers.clone(), alpha)?;
        table.update(&x, &labels)?;
        for j in 0..n {
            let members: Vec<usize> = (0..m).filter(|&i| labels[i] == j).collect();
            for k in 0..d {
                let c = centers.row(j)[k];
                let expected = if members.is_empty() {
                    c
                } else {
                    let mut num = 0.0;
                    for &i in &members {
                        num += c - x.row(i)[k];
                    }
                    c - alpha * (num / (1.0 + members.len() as f64))
                };
                let got = table.center(j)[k];
                if got.to_bits() != expected.to_bits() {
                    if members.is_empty() {
                        untouched_changed += 1;
                    } else {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    Ok(SuiteResult {
        name: "center_update".into(),
        passed: mismatches == 0 && untouched_changed == 0,
        value: (mismatches + untouched_changed) as f64,
        threshold: 0.0,
        detail: format!(
            "{batches} batches: {mismatches} coordinate mismatches, {untouched_changed} absent-class changes"
        ),
    })
}

/// After a full forward/backward of the joint loss the centers carry no
/// gradient, are not a model parameter and are not optimizer-managed.
pub fn no_backprop_suite() -> Result<SuiteResult> {
    let cfg = ModelConfig {
        input_size: (8, 4),
        conv_channels: vec![2, 2],
        pool_after: vec![0, 1],
        embedding_dim: 4,
        ..ModelConfig::desk(3)
    };
    let mut model = EmbeddingModel::<f64>::build(&cfg, 1)?;
    model.centers = CenterTable::from_centers(Tensor::randn(&[3, 4], 1.0, &mut rng(3)), 0.5)?;
    let tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[4, 3, 8, 4], 1.0, &mut rng(4)));
    let fwd = model.forward(&tape, x)?;
    let (w, b) = model.head.bind(&tape);
    let labels = [0, 1, 2, 1];
    let terms = total_loss(
        &tape,
        w,
        b,
        &model.centers,
        fwd.frw_weight,
        fwd.embedding,
        &labels,
        &LossConfig::default(),
    )?;
    tape.backward(terms.total)?;
    let grads = tape.named_grads();
    let mut problems = Vec::new();
    if grads.iter().any(|(n, _)| n == "centers") {
        problems.push("a gradient named `centers` exists");
    }
    if model.params().iter().any(|p| p.name == "centers") {
        problems.push("centers are listed as a parameter");
    }
    let adam = AdamState::new(AdamConfig::default(), &model.params())?;
    if adam.manages("centers") {
        problems.push("optimizer manages centers");
    }
    let expected = model.params().len();
    if grads.len() != expected {
        problems.push("not every parameter received a gradient");
    }
    Ok(SuiteResult {
        name: "no_backprop".into(),
        passed: problems.is_empty(),
        value: problems.len() as f64,
        threshold: 0.0,
        detail: if problems.is_empty() {
            format!("{} parameter gradients, none for centers", grads.len())
        } else {
            problems.join("; ")
        },
    })
}

/// CMC against full sorting of each gallery, plus the 3×3 hand example.
pub fn cmc_suite(trials: u64) -> Result<SuiteResult> {
    let mut mismatches = 0usize;
    for s in 0..trials {
        let mut r = rng(3000 + s);
        let g = r.random_range(1..=8);
        let p = r.random_range(1..=g);
        let mut gallery_ids: Vec<usize> = (0..g).collect();
        use rand::seq::SliceRandom;
        gallery_ids.shuffle(&mut r);
        let probe_ids: Vec<usize> = (0..p).map(|_| r.random_range(0..g)).collect();
        // coarse grid so that ties occur
        let values: Vec<f64> = (0..p * g).map(|_| r.random_range(0..6) as f64 * 0.5).collect();
        let dist = DistanceMatrix::new(values.clone(), probe_ids.clone(), gallery_ids.clone())?;
        let got = cmc_single_shot(&dist, g)?;
        let mut hits = vec![0usize; g];
        for (i, &pid) in probe_ids.iter().enumerate() {
            let mut order: Vec<usize> = (0..g).collect();
            order.sort_by(|&a, &b| values[i * g + a].total_cmp(&values[i * g + b]).then(a.cmp(&b)));
            let pos = order.iter().position(|&j| gallery_ids[j] == pid).expect("present");
            for h in hits.iter_mut().skip(pos) {
                *h += 1;
            }
        }
        let expected: Vec<f64> = hits.iter().map(|&h| h as f64 / p as f64).collect();
        if got.rates != expected {
            mismatches += 1;
        }
    }
    let hand = DistanceMatrix::new(
        vec![0.1, 0.2, 0.3, 0.3, 0.4, 0.6, 0.9, 0.8, 0.7],
        vec![0, 1, 2],
        vec![0, 1, 2],
    )?;
    let c = cmc_single_shot(&hand, 3)?;
    let hand_ok = c.rates[0] == 2.0 / 3.0 && c.rates[1] == 1.0;
    Ok(SuiteResult {
        name: "cmc".into(),
        passed: mismatches == 0 && hand_ok,
        value: mismatches as f64,
        threshold: 0.0,
        detail: format!(
            "{trials} random galleries (size <= 8): {mismatches} mismatches; 3x3 example CMC(1)={:.4} CMC(2)={:.4}",
            c.rates[0], c.rates[1]
        ),
    })
}
