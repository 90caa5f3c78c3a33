//! Adam with decoupled weight decay, a step learning-rate schedule, the
//! mini-batch training loop for loss modes I / IC / IV, two-step
//! fine-tuning, and the loss-mode comparison harness.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::ReidDataset;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_splits, Protocol};
use crate::layers::{Mode, Param, ParamKind};
use crate::losses::{
    binary_verification_loss, center_loss, frw_constraint, identification_loss, total_loss,
    LossConfig, VerificationHead, DIFFERENT, SAME,
};
use crate::model::{is_head_state, EmbeddingModel, ModelConfig};
use crate::tensor::{Scalar, Tensor};

/// `lr(t) = initial` for `t < decay_step`, `initial * factor` afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub decay_step: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            factor: 1.0,
            decay_step: usize::MAX,
        }
    }

    pub fn lr(&self, t: usize) -> f64 {
        if t < self.decay_step {
            self.initial
        } else {
            self.initial * self.factor
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to [`ParamKind::Weight`] only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam moments keyed by parameter name. The managed set is fixed at
/// construction to the parameters that were not frozen.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new<T: Scalar>(config: AdamConfig, params: &[&Param<T>]) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for p in params.iter().filter(|p| !p.frozen) {
            if p.name == "centers" {
                return Err(Error::contract("centers must never be optimizer-managed"));
            }
            let n = p.numel();
            let prev = moments.insert(
                p.name.clone(),
                Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                },
            );
            if prev.is_some() {
                return Err(Error::contract(format!("parameter `{}` registered twice", p.name)));
            }
        }
        Ok(AdamState {
            config,
            t: 0,
            moments,
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn manages(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn managed(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// One bias-corrected Adam update of every managed parameter in
    /// `params`; frozen parameters are skipped.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
        for p in params.iter() {
            if p.frozen {
                continue;
            }
            if !self.moments.contains_key(&p.name) {
                return Err(Error::contract(format!(
                    "parameter `{}` is not managed by this optimizer",
                    p.name
                )));
            }
            match &p.grad {
                None => {
                    return Err(Error::contract(format!("missing gradient for `{}`", p.name)))
                }
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(Error::dim("adam_step", g.shape(), p.value.shape()))
                }
                _ => {}
            }
        }
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for p in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let st = self.moments.get_mut(&p.name).expect("checked above");
            let decay = if p.kind == ParamKind::Weight { weight_decay } else { 0.0 };
            let grad = p.grad.as_ref().expect("checked above").data().to_vec();
            for (k, (w, g)) in p.value.data_mut().iter_mut().zip(grad).enumerate() {
                let g = g.to_f64();
                let m = beta1 * st.m[k] + (1.0 - beta1) * g;
                let v = beta2 * st.v[k] + (1.0 - beta2) * g * g;
                st.m[k] = m;
                st.v[k] = v;
                let wf = w.to_f64();
                let upd = (m / bc1) / ((v / bc2).sqrt() + eps) + decay * wf;
                *w = T::from_f64(wf - lr * upd);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossMode {
    /// Identification loss only.
    I,
    /// Identification + λ·center + FRW constraint.
    IC,
    /// Identification + pairwise verification + FRW constraint. A batch is
    /// `batch_size` image pairs, so twice as many images go through the
    /// network as in the single-image modes.
    IV,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::I => "I",
            LossMode::IC => "IC",
            LossMode::IV => "IV",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" => Ok(LossMode::I),
            "IC" => Ok(LossMode::IC),
            "IV" => Ok(LossMode::IV),
            other => Err(Error::Config(format!(
                "unknown loss mode `{other}` (expected I, IC or IV)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub iterations: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub center_alpha: f64,
    pub mode: LossMode,
    pub seed: u64,
    /// Log every `log_every` iterations (plus the first and last).
    pub log_every: usize,
    /// Weight of the verification loss in mode IV.
    pub verification_weight: f64,
}

impl TrainPlan {
    /// 25k iterations, batch 100, lr 0.001 decayed ×0.1 after 22k, weight
    /// decay 0.001, mode IC.
    pub fn paper() -> Self {
        TrainPlan {
            iterations: 25_000,
            batch_size: 100,
            schedule: LrSchedule {
                initial: 0.001,
                factor: 0.1,
                decay_step: 22_000,
            },
            weight_decay: 0.001,
            loss: LossConfig::default(),
            center_alpha: 0.5,
            mode: LossMode::IC,
            seed: 0,
            log_every: 100,
            verification_weight: 1.0,
        }
    }

    /// Paper coefficients with a desk-sized batch and budget; the decay
    /// step sits at the same fraction of the run as in the paper.
    pub fn desk(iterations: usize) -> Self {
        TrainPlan {
            iterations,
            batch_size: 32,
            schedule: LrSchedule {
                initial: 0.001,
                factor: 0.1,
                decay_step: iterations * 22 / 25,
            },
            log_every: 50,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size < 2 {
            problems.push(format!("batch size must be >= 2, got {}", self.batch_size));
        }
        if !(self.schedule.initial > 0.0) {
            problems.push(format!("learning rate must be > 0, got {}", self.schedule.initial));
        }
        if !(self.schedule.factor > 0.0) {
            problems.push(format!("lr decay factor must be > 0, got {}", self.schedule.factor));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.center_alpha > 0.0 && self.center_alpha <= 1.0) {
            problems.push(format!("alpha must be in (0, 1], got {}", self.center_alpha));
        }
        if !(self.verification_weight >= 0.0) {
            problems.push(format!(
                "verification weight must be >= 0, got {}",
                self.verification_weight
            ));
        }
        if self.log_every == 0 {
            problems.push("log_every must be >= 1".into());
        }
        if let Err(Error::Config(msg)) = self.loss.validate() {
            problems.push(msg);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub phase: Option<u8>,
    pub iteration: usize,
    pub total: f64,
    pub ident: f64,
    pub center: f64,
    pub frw: f64,
    pub lr: f64,
    /// Wall-clock seconds since the run started.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    /// Wall-clock duration of every step.
    pub step_seconds: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

impl RunLog {
    /// Mean wall-clock seconds per step; 0 when nothing ran.
    pub fn sec_per_iter(&self) -> f64 {
        if self.step_seconds.is_empty() {
            return 0.0;
        }
        self.step_seconds.iter().sum::<f64>() / self.step_seconds.len() as f64
    }

    pub fn append(&mut self, other: RunLog) {
        self.records.extend(other.records);
        self.step_seconds.extend(other.step_seconds);
        if other.checkpoint.is_some() {
            self.checkpoint = other.checkpoint;
        }
    }

    /// `iteration,L,L_I,L_C,L_F,lr,seconds`, prefixed by `phase` when any
    /// record carries one.
    pub fn to_csv(&self) -> String {
        let phased = self.records.iter().any(|r| r.phase.is_some());
        let mut s = String::new();
        if phased {
            s.push_str("phase,");
        }
        s.push_str("iteration,L,L_I,L_C,L_F,lr,seconds\n");
        for r in &self.records {
            if phased {
                s.push_str(&format!("{},", r.phase.map_or(String::new(), |p| p.to_string())));
            }
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{},{:.3}\n",
                r.iteration, r.total, r.ident, r.center, r.frw, r.lr, r.seconds
            ));
        }
        s
    }
}

/// Uniform sampling without replacement, reshuffled every epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchSampler {
            order,
            cursor: 0,
            rng,
        }
    }

    pub fn next_batch(&mut self, m: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(m);
        while out.len() < m {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub ident: f64,
    pub center: f64,
    pub frw: f64,
}

/// Resumable training state: optimizer, sampler, verification head and log.
pub struct Trainer {
    plan: TrainPlan,
    adam: AdamState,
    sampler: BatchSampler,
    by_identity: Vec<Vec<usize>>,
    verif: Option<VerificationHead<f32>>,
    iteration: usize,
    phase: Option<u8>,
    log: RunLog,
    elapsed: f64,
}

impl Trainer {
    pub fn new(
        model: &mut EmbeddingModel<f32>,
        dataset: &ReidDataset,
        plan: TrainPlan,
    ) -> Result<Self> {
        plan.validate()?;
        dataset.validate()?;
        if dataset.num_identities() != model.num_classes() {
            return Err(Error::Config(format!(
                "dataset has {} identities but the model head has {} classes",
                dataset.num_identities(),
                model.num_classes()
            )));
        }
        let (h, w) = model.config().input_size;
        let want = [model.config().in_channels, h, w];
        if dataset.image_shape() != Some(&want[..]) {
            return Err(Error::dim(
                "training images",
                dataset.image_shape().unwrap_or(&[]),
                &want,
            ));
        }
        model.set_center_alpha(plan.center_alpha)?;
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x7E5_1F1C);
        let verif = (plan.mode == LossMode::IV)
            .then(|| VerificationHead::new(model.embedding_dim(), &mut rng));
        let mut params = model.params();
        if let Some(v) = &verif {
            params.extend(v.params());
        }
        let adam = AdamState::new(
            AdamConfig {
                weight_decay: plan.weight_decay,
                ..AdamConfig::default()
            },
            &params,
        )?;
        Ok(Trainer {
            sampler: BatchSampler::new(dataset.len(), plan.seed),
            by_identity: dataset.by_identity(),
            plan,
            adam,
            verif,
            iteration: 0,
            phase: None,
            log: RunLog::default(),
            elapsed: 0.0,
        })
    }

    /// Tags every log record with `phase`.
    pub fn with_phase(mut self, phase: u8) -> Self {
        self.phase = Some(phase);
        self
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.adam
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.plan.iterations
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn into_log(self) -> RunLog {
        self.log
    }

    /// Draws the next batch: record indices, labels, and for mode IV the
    /// pair targets. In IV each of the `m` sampled anchors gets a partner
    /// (same identity for even `p`, another identity for odd `p`), and
    /// images `2p` and `2p + 1` form pair `p`.
    fn sample(&mut self, dataset: &ReidDataset) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let m = self.plan.batch_size;
        if self.plan.mode != LossMode::IV {
            let idx = self.sampler.next_batch(m);
            let labels = dataset.labels(&idx);
            return (idx, labels, Vec::new());
        }
        let anchors = self.sampler.next_batch(m);
        let n_ids = self.by_identity.len();
        let mut idx = Vec::with_capacity(2 * m);
        let mut same = Vec::with_capacity(m);
        for (p, &a) in anchors.iter().enumerate() {
            let id = dataset.records[a].identity;
            let rng = self.sampler.rng();
            let partner = if p % 2 == 0 {
                let pool = &self.by_identity[id];
                let others: Vec<usize> = pool.iter().copied().filter(|&i| i != a).collect();
                same.push(SAME);
                if others.is_empty() {
                    a
                } else {
                    others[rng.random_range(0..others.len())]
                }
            } else {
                let mut other = rng.random_range(0..n_ids - 1);
                if other >= id {
                    other += 1;
                }
                let pool = &self.by_identity[other];
                same.push(DIFFERENT);
                pool[rng.random_range(0..pool.len())]
            };
            idx.push(a);
            idx.push(partner);
        }
        let labels = dataset.labels(&idx);
        (idx, labels, same)
    }

    /// One optimisation step: sample, forward, loss, backward, Adam, then
    /// the center update with the detached embeddings.
    pub fn step(
        &mut self,
        model: &mut EmbeddingModel<f32>,
        dataset: &ReidDataset,
    ) -> Result<StepLosses> {
        let start = Instant::now();
        let t = self.iteration;
        let (idx, labels, same) = self.sample(dataset);
        let tape = Tape::new();
        let x = tape.constant(dataset.batch(&idx)?);
        let fwd = model.forward(&tape, x)?;
        let (hw, hb) = model.head.bind(&tape);
        let emb = fwd.embedding;
        let cfg = &self.plan.loss;
        let (total, ident, center, frw) = match self.plan.mode {
            LossMode::IC => {
                let terms = total_loss(
                    &tape,
                    hw,
                    hb,
                    &model.centers,
                    fwd.frw_weight,
                    emb,
                    &labels,
                    cfg,
                )?;
                (terms.total, terms.ident, terms.center, terms.frw)
            }
            LossMode::I => {
                let ident = identification_loss(&tape, hw, hb, emb, &labels)?;
                let center = center_loss(&tape, &model.centers, emb, &labels)?;
                (ident, ident, center, None)
            }
            LossMode::IV => {
                let ident = identification_loss(&tape, hw, hb, emb, &labels)?;
                let center = center_loss(&tape, &model.centers, emb, &labels)?;
                let verif = self.verif.as_ref().expect("IV has a verification head");
                let (vw, vb) = verif.bind(&tape);
                let even: Vec<usize> = (0..idx.len()).step_by(2).collect();
                let odd: Vec<usize> = (1..idx.len()).step_by(2).collect();
                let x1 = tape.select_rows(emb, &even)?;
                let x2 = tape.select_rows(emb, &odd)?;
                let lv = binary_verification_loss(&tape, x1, x2, &same, vw, vb)?;
                let lv = tape.scale(lv, self.plan.verification_weight as f32);
                let mut total = tape.add(ident, lv)?;
                let frw = fwd.frw_weight.map(|w| frw_constraint(&tape, w, cfg));
                if let Some(f) = frw {
                    total = tape.add(total, f)?;
                }
                (total, ident, center, frw)
            }
        };
        let losses = StepLosses {
            total: tape.item(total) as f64,
            ident: tape.item(ident) as f64,
            center: tape.item(center) as f64,
            frw: frw.map_or(0.0, |f| tape.item(f) as f64),
        };
        if ![losses.total, losses.ident, losses.center, losses.frw]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {t}: L={} L_I={} L_C={} L_F={}",
                losses.total, losses.ident, losses.center, losses.frw
            )));
        }
        tape.backward(total)?;
        let mut grads: HashMap<String, Tensor<f32>> = tape.named_grads().into_iter().collect();
        let mut params = model.params_mut();
        if let Some(v) = &mut self.verif {
            params.extend(v.params_mut());
        }
        for p in params.iter_mut() {
            p.grad = if p.frozen { None } else { grads.remove(&p.name) };
        }
        let lr = self.plan.schedule.lr(t);
        self.adam.step(&mut params, lr)?;
        drop(params);
        let detached = tape.value(emb).clone();
        model.centers.update(&detached, &labels)?;

        let secs = start.elapsed().as_secs_f64();
        self.elapsed += secs;
        self.log.step_seconds.push(secs);
        self.iteration += 1;
        let last = self.iteration == self.plan.iterations;
        if t.is_multiple_of(self.plan.log_every) || last {
            self.log.records.push(LogRecord {
                phase: self.phase,
                iteration: t,
                total: losses.total,
                ident: losses.ident,
                center: losses.center,
                frw: losses.frw,
                lr,
                seconds: self.elapsed,
            });
        }
        Ok(losses)
    }

    /// Runs up to `steps` more iterations without exceeding the plan.
    pub fn run(
        &mut self,
        model: &mut EmbeddingModel<f32>,
        dataset: &ReidDataset,
        steps: usize,
    ) -> Result<()> {
        for _ in 0..steps {
            if self.is_done() {
                break;
            }
            self.step(model, dataset)?;
        }
        Ok(())
    }
}

/// Trains `model` in place for `plan.iterations` steps in training mode.
pub fn train(
    model: &mut EmbeddingModel<f32>,
    dataset: &ReidDataset,
    plan: &TrainPlan,
) -> Result<RunLog> {
    model.set_mode(Mode::Train);
    let mut trainer = Trainer::new(model, dataset, plan.clone())?;
    trainer.run(model, dataset, plan.iterations)?;
    Ok(trainer.into_log())
}

/// Phase-1 early stop: halt when the mean loss of the latest `window`
/// iterations improves on the previous window by less than `min_delta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStop {
    pub window: usize,
    pub min_delta: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            window: 200,
            min_delta: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub log: RunLog,
    pub backbone_before: String,
    pub backbone_after_phase1: String,
    pub phase1_iterations: usize,
    /// Parameter names the phase-1 optimizer managed.
    pub phase1_trainable: Vec<String>,
}

/// Two-step transfer: a fresh head for `dataset`'s identities is trained
/// with everything else frozen (batch norm in inference mode), then the
/// whole network is trained.
pub fn two_step_finetune(
    model: &mut EmbeddingModel<f32>,
    dataset: &ReidDataset,
    plan1: &TrainPlan,
    plan2: &TrainPlan,
    early_stop: Option<EarlyStop>,
) -> Result<FinetuneReport> {
    plan1.validate()?;
    plan2.validate()?;
    model.replace_head(dataset.num_identities(), plan1.seed ^ 0x4EAD)?;
    let backbone_before = model.backbone_checksum();

    for p in model.params_mut() {
        p.frozen = !is_head_state(&p.name);
    }
    model.set_mode(Mode::Eval);
    let phase1 = (|| -> Result<(RunLog, usize, Vec<String>)> {
        let mut trainer = Trainer::new(model, dataset, plan1.clone())?.with_phase(1);
        let names = trainer.optimizer().managed().map(String::from).collect();
        let mut history = Vec::new();
        while !trainer.is_done() {
            history.push(trainer.step(model, dataset)?.total);
            if let Some(es) = early_stop {
                let n = history.len();
                if es.window > 0 && n >= 2 * es.window && n % es.window == 0 {
                    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
                    let prev = mean(&history[n - 2 * es.window..n - es.window]);
                    let cur = mean(&history[n - es.window..]);
                    if prev - cur < es.min_delta {
                        break;
                    }
                }
            }
        }
        let done = trainer.iteration();
        Ok((trainer.into_log(), done, names))
    })();
    for p in model.params_mut() {
        p.frozen = false;
    }
    model.set_mode(Mode::Train);
    let (mut log, phase1_iterations, phase1_trainable) = phase1?;
    let backbone_after_phase1 = model.backbone_checksum();

    let mut trainer = Trainer::new(model, dataset, plan2.clone())?.with_phase(2);
    trainer.run(model, dataset, plan2.iterations)?;
    log.append(trainer.into_log());
    Ok(FinetuneReport {
        log,
        backbone_before,
        backbone_after_phase1,
        phase1_iterations,
        phase1_trainable,
    })
}

/// Mean `‖x_i − c_{y_i}‖²` of eval-mode embeddings against the model's
/// current centers.
pub fn center_deviation(
    model: &EmbeddingModel<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
) -> Result<f64> {
    let x = model.embed(images)?;
    if x.rows() != labels.len() || labels.is_empty() {
        return Err(Error::dim("center_deviation", &[x.rows()], &[labels.len()]));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= model.centers.classes() {
            return Err(Error::contract(format!("label {y} has no center")));
        }
        let c = model.centers.center(y);
        total += x
            .row(i)
            .iter()
            .zip(c)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>();
    }
    Ok(total / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareConfig {
    pub model: ModelConfig,
    /// Shared plan; `mode` and `seed` are overridden per arm.
    pub plan: TrainPlan,
    pub modes: Vec<LossMode>,
    pub seeds: Vec<u64>,
    pub protocol: Protocol,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub mode: LossMode,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    /// Seed-mean and population stddev of rank-1.
    pub mean: f64,
    pub stddev: f64,
    pub sec_per_iter: f64,
    pub per_seed_rank1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub iterations: usize,
}

impl CompareReport {
    pub fn row(&self, mode: LossMode) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// `mode,rank1,rank5,rank10,mean,stddev,sec_per_iter`, rates in percent.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,rank1,rank5,rank10,mean,stddev,sec_per_iter\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.6}\n",
                r.mode.name(),
                100.0 * r.rank1,
                100.0 * r.rank5,
                100.0 * r.rank10,
                100.0 * r.mean,
                100.0 * r.stddev,
                r.sec_per_iter
            ));
        }
        s
    }
}

/// Trains every mode from the same per-seed initialisation under the same
/// budget and evaluates each on `test`. For each seed the arms advance one
/// step at a time in round-robin order, reversed every round, so machine
/// load and warm-cache effects fall on all modes alike.
pub fn compare_losses(
    train_set: &ReidDataset,
    test_set: &ReidDataset,
    cfg: &CompareConfig,
) -> Result<CompareReport> {
    let mut modes = cfg.modes.clone();
    modes.sort();
    modes.dedup();
    if modes.len() < 2 {
        return Err(Error::Config("compare needs at least two distinct loss modes".into()));
    }
    if cfg.seeds.len() < 3 {
        return Err(Error::Config(format!(
            "compare needs at least 3 seeds, got {}",
            cfg.seeds.len()
        )));
    }
    let mut results: BTreeMap<LossMode, Vec<(f64, f64, f64, f64)>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        let base = EmbeddingModel::<f32>::build(&cfg.model, seed)?;
        let mut arms = Vec::with_capacity(modes.len());
        for &mode in &modes {
            let mut model = base.clone();
            model.set_mode(Mode::Train);
            let plan = TrainPlan {
                mode,
                seed,
                ..cfg.plan.clone()
            };
            let trainer = Trainer::new(&mut model, train_set, plan)?;
            arms.push((mode, model, trainer));
        }
        for round in 0..cfg.plan.iterations {
            let order: Vec<usize> = if round % 2 == 0 {
                (0..arms.len()).collect()
            } else {
                (0..arms.len()).rev().collect()
            };
            for k in order {
                let (_, model, trainer) = &mut arms[k];
                trainer.step(model, train_set)?;
            }
        }
        for (mode, model, trainer) in arms {
            let cmc = evaluate_splits(&model, test_set, &cfg.protocol)?;
            results.entry(mode).or_default().push((
                cmc.rank(1),
                cmc.rank(5),
                cmc.rank(10),
                trainer.log().sec_per_iter(),
            ));
        }
    }
    let rows = results
        .into_iter()
        .map(|(mode, runs)| {
            let n = runs.len() as f64;
            let avg = |f: fn(&(f64, f64, f64, f64)) -> f64| runs.iter().map(f).sum::<f64>() / n;
            let rank1 = avg(|r| r.0);
            let var = runs.iter().map(|r| (r.0 - rank1).powi(2)).sum::<f64>() / n;
            CompareRow {
                mode,
                rank1,
                rank5: avg(|r| r.1),
                rank10: avg(|r| r.2),
                mean: rank1,
                stddev: var.sqrt(),
                sec_per_iter: avg(|r| r.3),
                per_seed_rank1: runs.iter().map(|r| r.0).collect(),
            }
        })
        .collect();
    Ok(CompareReport {
        rows,
        iterations: cfg.plan.iterations,
    })
}
