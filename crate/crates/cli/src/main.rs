// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use reid_core::checkpoint;
use reid_core::data::{
    augment, generate_synthetic, generate_synthetic_split, load_directory, preprocess,
    preprocess_with_mean, AugmentConfig, ReidDataset, SynthConfig,
};
use reid_core::evaluation::{evaluate_raw_pixels, evaluate_splits, CMCurve};
use reid_core::kv;
use reid_core::layers::Mode;
use reid_core::model::EmbeddingModel;
use reid_core::training::{
    compare_losses, two_step_finetune, CompareConfig, LrSchedule, TrainPlan, Trainer,
};
use reid_core::verify::{run_all, VerifyConfig};
use reid_core::Error;

use config::{RunConfig, Setting};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "reid", version, about = "Train and evaluate center-loss person re-identification embeddings")]
struct Cli {
    /// `key = value` config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic identity dataset (PPM images plus manifest).
    Synth {
        #[arg(long)]
        ids: Option<usize>,
        #[arg(long)]
        cams: Option<usize>,
        /// Images per identity per camera.
        #[arg(long)]
        shots: Option<usize>,
        /// Extra shots per identity and camera written to `test/`.
        #[arg(long)]
        held_out: Option<usize>,
    },
    /// Train a model from scratch.
    Train {
        /// Dataset directory or manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Optional dataset to evaluate after training.
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        loss_mode: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Two-step fine-tuning of a pretrained checkpoint on a new dataset.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Head-only iterations before full training.
        #[arg(long)]
        phase1_iters: Option<usize>,
        /// Full-network iterations.
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        loss_mode: Option<String>,
    },
    /// Single-shot CMC evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        splits: Option<usize>,
        /// Use the gallery camera as probe and vice versa.
        #[arg(long)]
        swap_cameras: bool,
        /// Nearest neighbour on raw pixels instead of a model.
        #[arg(long)]
        raw_pixels: bool,
    },
    /// Train several loss modes under one budget and compare them.
    Compare {
        /// Training dataset; a synthetic benchmark is generated if omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        test_data: Option<PathBuf>,
        /// Iterations per arm.
        #[arg(long)]
        budget: Option<usize>,
        /// Number of seeds, counting up from `--seed`.
        #[arg(long)]
        seeds: Option<usize>,
        /// Comma-separated loss modes, e.g. `IC,IV,I`.
        #[arg(long)]
        modes: Option<String>,
    },
    /// Run the gradient, folding, center-update and CMC self-checks.
    Verify,
}

/// Input rejected before any work started.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Invalid>().is_some() {
        return EXIT_VALIDATION;
    }
    match e.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::Protocol(_)
            | Error::Manifest { .. }
            | Error::Dataset(_)
            | Error::MissingFile { .. }
            | Error::DuplicateEntry { .. }
            | Error::Raster { .. }
            | Error::CheckpointVersion { .. }
            | Error::CheckpointTruncated(_)
            | Error::CheckpointMagic
            | Error::CheckpointShape { .. }
            | Error::CheckpointConfig(_),
        ) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn settings(cli: &Cli) -> anyhow::Result<Vec<Setting>> {
    let mut s = match &cli.config {
        Some(p) => config::read_file(p)?,
        None => Vec::new(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        s.push(Setting {
            key: k.trim().into(),
            value: v.trim().into(),
            origin: format!("--set {kv}"),
        });
    }
    let mut flag = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            s.push(Setting::flag(key, v));
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let num = |n: Option<usize>| n.map(|n| n.to_string());
    flag("seed", cli.seed.map(|n| n.to_string()));
    flag("out", path(&cli.out));
    match &cli.command {
        Command::Synth { ids, cams, shots, held_out } => {
            flag("ids", num(*ids));
            flag("cams", num(*cams));
            flag("shots", num(*shots));
            flag("held_out", num(*held_out));
        }
        Command::Train { data, test_data, preset, loss_mode, iterations, batch_size } => {
            flag("data", path(data));
            flag("test_data", path(test_data));
            flag("preset", preset.clone());
            flag("loss_mode", loss_mode.clone());
            flag("iterations", num(*iterations));
            flag("batch_size", num(*batch_size));
        }
        Command::Finetune { checkpoint, data, phase1_iters, iterations, loss_mode } => {
            flag("checkpoint", path(checkpoint));
            flag("data", path(data));
            flag("phase1_iters", num(*phase1_iters));
            flag("iterations", num(*iterations));
            flag("loss_mode", loss_mode.clone());
        }
        Command::Eval { checkpoint, data, splits, .. } => {
            flag("checkpoint", path(checkpoint));
            flag("data", path(data));
            flag("splits", num(*splits));
        }
        Command::Compare { data, test_data, budget, seeds, modes } => {
            flag("data", path(data));
            flag("test_data", path(test_data));
            flag("budget", num(*budget));
            flag("compare_seeds", num(*seeds));
            flag("compare_modes", modes.clone());
        }
        Command::Verify => {}
    }
    Ok(s)
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let cfg = RunConfig::resolve(&settings(&cli)?)?;
    if let Command::Verify = cli.command {
        return verify();
    }
    std::fs::create_dir_all(&cfg.out)
        .with_context(|| format!("cannot create output directory {}", cfg.out.display()))?;
    kv::write_atomic(&cfg.out.join("config.txt"), cfg.render().as_bytes())?;
    match cli.command {
        Command::Synth { .. } => synth(&cfg),
        Command::Train { .. } => train(&cfg),
        Command::Finetune { .. } => finetune(&cfg),
        Command::Eval { swap_cameras, raw_pixels, .. } => eval(&cfg, swap_cameras, raw_pixels),
        Command::Compare { .. } => compare(&cfg),
        Command::Verify => unreachable!("handled above"),
    }?;
    Ok(0)
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> anyhow::Result<&'a Path> {
    let p = p
        .as_deref()
        .ok_or_else(|| invalid(format!("`{key}` is required (flag --{})", key.replace('_', "-"))))?;
    if !p.exists() {
        return Err(invalid(format!("{key} path {} does not exist", p.display())));
    }
    Ok(p)
}

/// A dataset directory (with `manifest.txt`) or a manifest file.
fn load(p: &Path) -> anyhow::Result<ReidDataset> {
    let manifest = if p.is_dir() { p.join("manifest.txt") } else { p.to_path_buf() };
    Ok(load_directory(&manifest)?)
}

fn mean_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".mean");
    PathBuf::from(s)
}

fn save_mean(ckpt: &Path, mean: &[f32]) -> anyhow::Result<()> {
    let v: Vec<String> = mean.iter().map(|m| format!("{m:?}")).collect();
    kv::write_atomic(&mean_path(ckpt), kv::render(&[("channel_mean", v.join(","))]).as_bytes())?;
    Ok(())
}

/// Training-set channel mean stored next to a checkpoint, if any.
fn read_mean(ckpt: &Path) -> anyhow::Result<Option<Vec<f32>>> {
    let p = mean_path(ckpt);
    if !p.exists() {
        return Ok(None);
    }
    let entries = kv::parse(&std::fs::read_to_string(&p)?, &p)?;
    let e = entries
        .iter()
        .find(|e| e.key == "channel_mean")
        .ok_or_else(|| invalid(format!("{}: no `channel_mean`", p.display())))?;
    let mean = e
        .value
        .split(',')
        .map(|v| kv::parse_num::<f32>("channel_mean", v.trim()))
        .collect::<reid_core::Result<Vec<_>>>()?;
    Ok(Some(mean))
}

/// Resizes and mean-centres `raw`, then augments it when enabled.
fn prepare_training(cfg: &RunConfig, raw: &ReidDataset) -> anyhow::Result<ReidDataset> {
    let size = cfg.model.input_size;
    let pre = preprocess(raw, size)?;
    if !cfg.augment_enabled {
        return Ok(pre);
    }
    let aug = AugmentConfig {
        target_size: size,
        ..cfg.augment.clone()
    };
    Ok(augment(&pre, &aug, cfg.seed)?)
}

fn print_cmc(label: &str, c: &CMCurve) {
    let r = |k: usize| 100.0 * c.rank(k.min(c.max_rank()));
    println!(
        "{label}: rank-1 {:.2}%  rank-5 {:.2}%  rank-10 {:.2}%  ({} splits, {} probes each)",
        r(1),
        r(5),
        r(10),
        c.num_splits(),
        c.num_probes
    );
}

fn synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let s = &cfg.synth;
    let sc = SynthConfig::new(s.ids, s.cams, s.shots, s.size, cfg.seed);
    if s.held_out == 0 {
        let ds = generate_synthetic(&sc)?;
        let manifest = ds.export(&cfg.out)?;
        println!(
            "wrote {} images ({} identities x {} cameras x {} shots) to {}",
            ds.len(),
            s.ids,
            s.cams,
            s.shots,
            manifest.display()
        );
    } else {
        let (train, test) = generate_synthetic_split(&sc, s.held_out)?;
        let a = train.export(&cfg.out.join("train"))?;
        let b = test.export(&cfg.out.join("test"))?;
        println!("wrote {} training images to {}", train.len(), a.display());
        println!("wrote {} held-out images to {}", test.len(), b.display());
    }
    Ok(())
}

fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = require(&cfg.data, "data")?;
    if cfg.test_data.is_some() {
        require(&cfg.test_data, "test_data")?;
    }
    let raw = load(data)?;
    let train_set = prepare_training(cfg, &raw)?;
    let mean = train_set.channel_mean.clone().expect("preprocess stores the mean");
    let mut model = EmbeddingModel::<f32>::build(&cfg.model_for(raw.num_identities()), cfg.seed)?;
    println!(
        "training {} preset, mode {}, {} identities, {} images after augmentation, {} iterations",
        cfg.model.preset.name(),
        cfg.plan.mode.name(),
        raw.num_identities(),
        train_set.len(),
        cfg.plan.iterations
    );
    model.set_mode(Mode::Train);
    let start = Instant::now();
    let mut trainer = Trainer::new(&mut model, &train_set, cfg.plan.clone())?;
    while !trainer.is_done() {
        trainer.run(&mut model, &train_set, cfg.plan.log_every)?;
        if let Some(r) = trainer.log().records.last() {
            eprintln!(
                "iter {:>6}  L {:.4}  L_I {:.4}  L_C {:.4}  L_F {:.4}  lr {:.1e}  {:.1}s",
                r.iteration, r.total, r.ident, r.center, r.frw, r.lr, r.seconds
            );
        }
    }
    let mut log = trainer.into_log();
    let ckpt = cfg.out.join("model.ckpt");
    checkpoint::save(&model, &ckpt)?;
    save_mean(&ckpt, &mean)?;
    log.checkpoint = Some(ckpt.clone());
    kv::write_atomic(&cfg.out.join("train_log.csv"), log.to_csv().as_bytes())?;
    println!(
        "done in {:.1}s ({:.4} s/iter); checkpoint {} (checksum {})",
        start.elapsed().as_secs_f64(),
        log.sec_per_iter(),
        ckpt.display(),
        model.checksum()
    );
    if let Some(test) = &cfg.test_data {
        let test = preprocess_with_mean(&load(test)?, cfg.model.input_size, &mean)?;
        let c = evaluate_splits(&model, &test, &cfg.protocol)?;
        kv::write_atomic(&cfg.out.join("cmc.csv"), c.to_csv().as_bytes())?;
        print_cmc("held-out", &c);
    }
    Ok(())
}

fn finetune(cfg: &RunConfig) -> anyhow::Result<()> {
    let ckpt = require(&cfg.checkpoint, "checkpoint")?;
    let data = require(&cfg.data, "data")?;
    let stored = checkpoint::decode(&std::fs::read(ckpt)?)?.config;
    if cfg.explicit.contains("preset") && stored.preset != cfg.model.preset {
        return Err(Error::CheckpointConfig(format!(
            "checkpoint {} was trained with preset `{}` but the config asks for `{}`",
            ckpt.display(),
            stored.preset.name(),
            cfg.model.preset.name()
        ))
        .into());
    }
    let mut model: EmbeddingModel<f32> = checkpoint::load(ckpt)?;
    let sized = RunConfig {
        model: stored.clone(),
        ..cfg.clone()
    };
    let raw = load(data)?;
    let train_set = prepare_training(&sized, &raw)?;
    let mean = train_set.channel_mean.clone().expect("preprocess stores the mean");
    let plan1 = TrainPlan {
        iterations: cfg.finetune.phase1_iters,
        schedule: LrSchedule::constant(cfg.finetune.phase1_lr),
        ..cfg.plan.clone()
    };
    let early = cfg.finetune.early_stop_enabled.then_some(cfg.finetune.early_stop);
    let report = two_step_finetune(&mut model, &train_set, &plan1, &cfg.plan, early)?;
    println!(
        "phase 1: {} iterations, trainable: {}",
        report.phase1_iterations,
        report.phase1_trainable.join(", ")
    );
    let same = report.backbone_before == report.backbone_after_phase1;
    println!(
        "frozen backbone checksum: before {}  after phase 1 {}  ({})",
        report.backbone_before,
        report.backbone_after_phase1,
        if same { "unchanged" } else { "CHANGED" }
    );
    if !same {
        bail!("backbone changed during the frozen phase");
    }
    let out = cfg.out.join("model.ckpt");
    checkpoint::save(&model, &out)?;
    save_mean(&out, &mean)?;
    kv::write_atomic(&cfg.out.join("finetune_log.csv"), report.log.to_csv().as_bytes())?;
    println!("phase 2: {} iterations; checkpoint {}", cfg.plan.iterations, out.display());
    Ok(())
}

fn eval(cfg: &RunConfig, swap: bool, raw_pixels: bool) -> anyhow::Result<()> {
    let data = require(&cfg.data, "data")?;
    let protocol = if swap { cfg.protocol.clone().swapped() } else { cfg.protocol.clone() };
    let raw = load(data)?;
    let curve = if raw_pixels {
        let ds = preprocess(&raw, cfg.synth.size)?;
        evaluate_raw_pixels(&ds, &protocol)?
    } else {
        let ckpt = require(&cfg.checkpoint, "checkpoint")?;
        let model: EmbeddingModel<f32> = checkpoint::load(ckpt)?;
        let size = model.config().input_size;
        let ds = match read_mean(ckpt)? {
            Some(mean) => preprocess_with_mean(&raw, size, &mean)?,
            None => {
                eprintln!("warning: no channel mean next to the checkpoint; using the test set's own");
                preprocess(&raw, size)?
            }
        };
        evaluate_splits(&model, &ds, &protocol)?
    };
    let path = cfg.out.join("cmc.csv");
    kv::write_atomic(&path, curve.to_csv().as_bytes())?;
    print_cmc(if raw_pixels { "raw pixels" } else { "model" }, &curve);
    println!("wrote {}", path.display());
    Ok(())
}

fn compare(cfg: &RunConfig) -> anyhow::Result<()> {
    let size = cfg.model.input_size;
    let (train_raw, test_raw) = match (&cfg.data, &cfg.test_data) {
        (Some(_), Some(_)) => (
            load(require(&cfg.data, "data")?)?,
            load(require(&cfg.test_data, "test_data")?)?,
        ),
        (None, None) => {
            let s = &cfg.synth;
            let sc = SynthConfig::new(s.ids, s.cams, s.shots, size, cfg.seed);
            generate_synthetic_split(&sc, s.held_out.max(2))?
        }
        _ => return Err(invalid("compare needs both `data` and `test_data`, or neither")),
    };
    let pre = preprocess(&train_raw, size)?;
    let mean = pre.channel_mean.clone().expect("preprocess stores the mean");
    let test = preprocess_with_mean(&test_raw, size, &mean)?;
    let train_set = prepare_training(cfg, &train_raw)?;
    let budget = cfg.compare.budget;
    let mut plan = TrainPlan {
        iterations: budget,
        ..cfg.plan.clone()
    };
    if !cfg.explicit.contains("lr_decay_step") {
        plan.schedule.decay_step = budget * 22 / 25;
    }
    let cc = CompareConfig {
        model: cfg.model_for(train_raw.num_identities()),
        plan,
        modes: cfg.compare.modes.clone(),
        seeds: (0..cfg.compare.seeds as u64).map(|i| cfg.seed + i).collect(),
        protocol: cfg.protocol.clone(),
    };
    let start = Instant::now();
    let report = compare_losses(&train_set, &test, &cc)?;
    let path = cfg.out.join("compare.csv");
    kv::write_atomic(&path, report.to_csv().as_bytes())?;
    println!("{budget} iterations per arm, seeds {:?}", cc.seeds);
    print!("{}", report.to_csv());
    println!("wrote {} in {:.1}s", path.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn verify() -> anyhow::Result<u8> {
    let start = Instant::now();
    let report = run_all(&VerifyConfig::default()).map_err(|e| anyhow!(e))?;
    for s in &report.suites {
        println!("{}", s.line());
    }
    println!("{:.1}s", start.elapsed().as_secs_f64());
    Ok(if report.passed() { 0 } else { EXIT_VERIFY })
}
