//! Flat `key = value` run configuration: file values, then flag
//! overrides, resolved against the preset's defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use reid_core::data::AugmentConfig;
use reid_core::evaluation::Protocol;
use reid_core::kv::{self, parse_bool, parse_num};
use reid_core::model::{ModelConfig, Preset};
use reid_core::training::{EarlyStop, LossMode, TrainPlan};
use reid_core::{Error, Result};

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "preset",
    "data",
    "test_data",
    "checkpoint",
    "frw_enabled",
    "frw_norm_target",
    "lrelu_slope",
    "bn_momentum",
    "bn_eps",
    "loss_mode",
    "iterations",
    "batch_size",
    "lr",
    "lr_decay_factor",
    "lr_decay_step",
    "weight_decay",
    "lambda",
    "beta",
    "alpha",
    "verification_weight",
    "log_every",
    "augment",
    "translations",
    "max_shift_y",
    "max_shift_x",
    "flip",
    "splits",
    "train_frac",
    "max_rank",
    "probe_camera",
    "gallery_camera",
    "ids",
    "cams",
    "shots",
    "held_out",
    "image_height",
    "image_width",
    "phase1_iters",
    "phase1_lr",
    "early_stop",
    "early_stop_window",
    "early_stop_delta",
    "budget",
    "compare_seeds",
    "compare_modes",
];

/// One `key = value` assignment and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub key: String,
    pub value: String,
    pub origin: String,
}

impl Setting {
    pub fn flag(key: &str, value: impl ToString) -> Self {
        Setting {
            key: key.into(),
            value: value.to_string(),
            origin: format!("--{}", key.replace('_', "-")),
        }
    }
}

pub fn read_file(path: &Path) -> Result<Vec<Setting>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    Ok(kv::parse(&text, path)?
        .into_iter()
        .map(|e| Setting {
            origin: format!("{}:{}", path.display(), e.line),
            key: e.key,
            value: e.value,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub ids: usize,
    pub cams: usize,
    pub shots: usize,
    pub held_out: usize,
    pub size: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSettings {
    pub phase1_iters: usize,
    pub phase1_lr: f64,
    pub early_stop: EarlyStop,
    pub early_stop_enabled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareSettings {
    pub budget: usize,
    pub seeds: usize,
    pub modes: Vec<LossMode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// `num_classes` is a placeholder until a dataset is loaded.
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub augment: AugmentConfig,
    pub augment_enabled: bool,
    pub protocol: Protocol,
    pub synth: SynthSettings,
    pub finetune: FinetuneSettings,
    pub compare: CompareSettings,
    /// Keys given explicitly (file or flag).
    pub explicit: BTreeSet<String>,
}

fn path_opt(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn parse_modes(key: &str, v: &str) -> Result<Vec<LossMode>> {
    v.split(',')
        .map(|m| LossMode::parse(m.trim()).map_err(|e| Error::Config(format!("`{key}`: {e}"))))
        .collect()
}

impl RunConfig {
    /// Applies `settings` in order (later wins) over the preset defaults and
    /// validates the result. Every problem is reported, one per line.
    pub fn resolve(settings: &[Setting]) -> Result<Self> {
        let mut problems = Vec::new();
        for s in settings {
            if !KEYS.contains(&s.key.as_str()) {
                problems.push(format!("{}: unknown key `{}`", s.origin, s.key));
            }
        }
        let last = |key: &str| settings.iter().rev().find(|s| s.key == key);

        let preset = match last("preset").map(|s| Preset::parse(&s.value)) {
            None => Preset::Desk,
            Some(Ok(p)) => p,
            Some(Err(e)) => {
                problems.push(format!("{}: {e}", last("preset").expect("set").origin));
                Preset::Desk
            }
        };
        let mut cfg = RunConfig::defaults(preset);
        // The last value of each key wins; keys apply in canonical order so
        // the order of lines and flags never matters.
        for key in KEYS.iter().filter(|&&k| k != "preset") {
            if let Some(s) = last(key) {
                if let Err(e) = cfg.apply(key, &s.value) {
                    problems.push(format!("{}: {}", s.origin, strip(&e)));
                }
            }
        }
        cfg.explicit = settings
            .iter()
            .filter(|s| KEYS.contains(&s.key.as_str()))
            .map(|s| s.key.clone())
            .collect();
        if !cfg.explicit.contains("lr_decay_step") {
            cfg.plan.schedule.decay_step = cfg.plan.iterations * 22 / 25;
        }
        cfg.collect_validation(&mut problems);
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(format!("\n  - {}", problems.join("\n  - "))))
        }
    }

    pub fn defaults(preset: Preset) -> Self {
        let model = ModelConfig::for_preset(preset, 2);
        let plan = match preset {
            Preset::Paper => TrainPlan::paper(),
            Preset::Desk => TrainPlan::desk(2000),
        };
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data: None,
            test_data: None,
            checkpoint: None,
            augment: AugmentConfig::new(model.input_size),
            augment_enabled: true,
            protocol: Protocol::held_out(10, 0),
            synth: SynthSettings {
                ids: 50,
                cams: 2,
                shots: 4,
                held_out: 0,
                size: model.input_size,
            },
            finetune: FinetuneSettings {
                phase1_iters: plan.iterations / 5,
                phase1_lr: plan.schedule.initial,
                early_stop: EarlyStop::default(),
                early_stop_enabled: false,
            },
            compare: CompareSettings {
                budget: 400,
                seeds: 3,
                modes: vec![LossMode::IC, LossMode::IV],
            },
            model,
            plan,
            explicit: BTreeSet::new(),
        }
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => {
                self.seed = parse_num(key, v)?;
                self.plan.seed = self.seed;
                self.protocol.seed = self.seed;
            }
            "out" => self.out = PathBuf::from(v),
            "data" => self.data = path_opt(v),
            "test_data" => self.test_data = path_opt(v),
            "checkpoint" => self.checkpoint = path_opt(v),
            "frw_enabled" => self.model.frw_enabled = parse_bool(key, v)?,
            "frw_norm_target" => {
                self.model.frw_norm_target = parse_num(key, v)?;
                self.plan.loss.norm_target = self.model.frw_norm_target;
            }
            "lrelu_slope" => self.model.lrelu_slope = parse_num(key, v)?,
            "bn_momentum" => self.model.bn_momentum = parse_num(key, v)?,
            "bn_eps" => self.model.bn_eps = parse_num(key, v)?,
            "loss_mode" => self.plan.mode = LossMode::parse(v)?,
            "iterations" => self.plan.iterations = parse_num(key, v)?,
            "batch_size" => self.plan.batch_size = parse_num(key, v)?,
            "lr" => self.plan.schedule.initial = parse_num(key, v)?,
            "lr_decay_factor" => self.plan.schedule.factor = parse_num(key, v)?,
            "lr_decay_step" => self.plan.schedule.decay_step = parse_num(key, v)?,
            "weight_decay" => self.plan.weight_decay = parse_num(key, v)?,
            "lambda" => self.plan.loss.lambda = parse_num(key, v)?,
            "beta" => self.plan.loss.beta = parse_num(key, v)?,
            "alpha" => {
                self.plan.center_alpha = parse_num(key, v)?;
                self.model.center_alpha = self.plan.center_alpha;
            }
            "verification_weight" => self.plan.verification_weight = parse_num(key, v)?,
            "log_every" => self.plan.log_every = parse_num(key, v)?,
            "augment" => self.augment_enabled = parse_bool(key, v)?,
            "translations" => self.augment.translations_per_image = parse_num(key, v)?,
            "max_shift_y" => self.augment.max_shift.0 = parse_num(key, v)?,
            "max_shift_x" => self.augment.max_shift.1 = parse_num(key, v)?,
            "flip" => self.augment.horizontal_flip = parse_bool(key, v)?,
            "splits" => self.protocol.num_splits = parse_num(key, v)?,
            "train_frac" => self.protocol.train_frac = parse_num(key, v)?,
            "max_rank" => self.protocol.max_rank = parse_num(key, v)?,
            "probe_camera" => self.protocol.probe_camera = parse_num(key, v)?,
            "gallery_camera" => self.protocol.gallery_camera = parse_num(key, v)?,
            "ids" => self.synth.ids = parse_num(key, v)?,
            "cams" => self.synth.cams = parse_num(key, v)?,
            "shots" => self.synth.shots = parse_num(key, v)?,
            "held_out" => self.synth.held_out = parse_num(key, v)?,
            "image_height" => self.synth.size.0 = parse_num(key, v)?,
            "image_width" => self.synth.size.1 = parse_num(key, v)?,
            "phase1_iters" => self.finetune.phase1_iters = parse_num(key, v)?,
            "phase1_lr" => self.finetune.phase1_lr = parse_num(key, v)?,
            "early_stop" => self.finetune.early_stop_enabled = parse_bool(key, v)?,
            "early_stop_window" => self.finetune.early_stop.window = parse_num(key, v)?,
            "early_stop_delta" => self.finetune.early_stop.min_delta = parse_num(key, v)?,
            "budget" => self.compare.budget = parse_num(key, v)?,
            "compare_seeds" => self.compare.seeds = parse_num(key, v)?,
            "compare_modes" => self.compare.modes = parse_modes(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn collect_validation(&self, problems: &mut Vec<String>) {
        let mut push = |r: Result<()>| {
            if let Err(e) = r {
                for line in strip(&e).split("; ") {
                    problems.push(line.to_string());
                }
            }
        };
        push(self.model.validate());
        push(self.plan.validate());
        push(self.augment.validate());
        push(self.protocol.validate());
        if self.synth.size.0 == 0 || self.synth.size.1 == 0 {
            problems.push("image_height and image_width must be >= 1".into());
        }
        if !(self.finetune.phase1_lr > 0.0) {
            problems.push(format!("phase1_lr must be > 0, got {}", self.finetune.phase1_lr));
        }
        if self.compare.seeds == 0 {
            problems.push("compare_seeds must be >= 1".into());
        }
    }

    /// The fully resolved configuration as `(key, value)` pairs; resolving
    /// these pairs again gives back the same configuration.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let a = &self.augment;
        let es = &self.finetune.early_stop;
        let f = |x: f64| format!("{x:?}");
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.out.display().to_string(),
            self.model.preset.name().into(),
            p(&self.data),
            p(&self.test_data),
            p(&self.checkpoint),
            self.model.frw_enabled.to_string(),
            f(self.model.frw_norm_target),
            f(self.model.lrelu_slope),
            f(self.model.bn_momentum),
            f(self.model.bn_eps),
            self.plan.mode.name().into(),
            self.plan.iterations.to_string(),
            self.plan.batch_size.to_string(),
            f(self.plan.schedule.initial),
            f(self.plan.schedule.factor),
            self.plan.schedule.decay_step.to_string(),
            f(self.plan.weight_decay),
            f(self.plan.loss.lambda),
            f(self.plan.loss.beta),
            f(self.plan.center_alpha),
            f(self.plan.verification_weight),
            self.plan.log_every.to_string(),
            self.augment_enabled.to_string(),
            a.translations_per_image.to_string(),
            f(a.max_shift.0),
            f(a.max_shift.1),
            a.horizontal_flip.to_string(),
            self.protocol.num_splits.to_string(),
            f(self.protocol.train_frac),
            self.protocol.max_rank.to_string(),
            self.protocol.probe_camera.to_string(),
            self.protocol.gallery_camera.to_string(),
            self.synth.ids.to_string(),
            self.synth.cams.to_string(),
            self.synth.shots.to_string(),
            self.synth.held_out.to_string(),
            self.synth.size.0.to_string(),
            self.synth.size.1.to_string(),
            self.finetune.phase1_iters.to_string(),
            f(self.finetune.phase1_lr),
            self.finetune.early_stop_enabled.to_string(),
            es.window.to_string(),
            f(es.min_delta),
            self.compare.budget.to_string(),
            self.compare.seeds.to_string(),
            self.compare
                .modes
                .iter()
                .map(|m| m.name())
                .collect::<Vec<_>>()
                .join(","),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn render(&self) -> String {
        kv::render(&self.to_pairs())
    }

    /// Model config for a dataset with `num_classes` identities.
    pub fn model_for(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes,
            ..self.model.clone()
        }
    }
}

/// Drops the `invalid configuration: ` prefix from nested config errors.
fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[(&str, &str)]) -> Vec<Setting> {
        pairs.iter().map(|(k, v)| Setting::flag(k, v)).collect()
    }

    #[test]
    fn defaults_carry_paper_coefficients() {
        let cfg = RunConfig::resolve(&[]).unwrap();
        let pairs: std::collections::BTreeMap<_, _> = cfg.to_pairs().into_iter().collect();
        assert_eq!(pairs["lambda"], "0.01");
        assert_eq!(pairs["alpha"], "0.5");
        assert_eq!(pairs["beta"], "0.001");
        assert_eq!(pairs["frw_norm_target"], "200.0");
        assert_eq!(pairs["lr"], "0.001");
        assert_eq!(pairs["preset"], "desk");
        let paper = RunConfig::resolve(&set(&[("preset", "paper")])).unwrap();
        assert_eq!(paper.plan.batch_size, 100);
        assert_eq!(paper.plan.iterations, 25_000);
        assert_eq!(paper.plan.schedule.decay_step, 22_000);
    }

    #[test]
    fn echo_resolves_to_the_same_config() {
        let cfg = RunConfig::resolve(&set(&[
            ("seed", "9"),
            ("loss_mode", "IV"),
            ("augment", "false"),
            ("flip", "false"),
            ("data", "some/dir"),
            ("compare_modes", "I,IC"),
            ("early_stop", "true"),
        ]))
        .unwrap();
        let text = cfg.render();
        let entries = kv::parse(&text, Path::new("echo")).unwrap();
        let again: Vec<Setting> = entries
            .into_iter()
            .map(|e| Setting { key: e.key, value: e.value, origin: "echo".into() })
            .collect();
        let back = RunConfig::resolve(&again).unwrap();
        assert_eq!(back.render(), text);
        assert_eq!(RunConfig { explicit: cfg.explicit.clone(), ..back }, cfg);
    }

    #[test]
    fn later_values_win_and_order_is_irrelevant() {
        let a = RunConfig::resolve(&set(&[("augment", "false"), ("flip", "false"), ("lr", "0.1"), ("lr", "0.2")]))
            .unwrap();
        let b = RunConfig::resolve(&set(&[("flip", "false"), ("lr", "0.2"), ("augment", "false")])).unwrap();
        assert_eq!(a.plan.schedule.initial, 0.2);
        assert!(!a.augment_enabled);
        assert_eq!(a.render(), b.render());
    }

    #[test]
    fn every_problem_is_listed() {
        let err = RunConfig::resolve(&set(&[
            ("nonsense", "1"),
            ("batch_size", "x"),
            ("alpha", "2"),
            ("lr", "0"),
            ("max_shift_x", "0.7"),
        ]))
        .unwrap_err()
        .to_string();
        for needle in ["unknown key `nonsense`", "batch_size", "alpha", "learning rate", "shift"] {
            assert!(err.contains(needle), "`{needle}` missing from: {err}");
        }
    }

    #[test]
    fn decay_step_follows_iterations_unless_set() {
        let c = RunConfig::resolve(&set(&[("iterations", "1000")])).unwrap();
        assert_eq!(c.plan.schedule.decay_step, 880);
        let c = RunConfig::resolve(&set(&[("iterations", "1000"), ("lr_decay_step", "10")])).unwrap();
        assert_eq!(c.plan.schedule.decay_step, 10);
    }
}
