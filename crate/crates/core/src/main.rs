use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dgcf::backbone::BackboneHandle;
use dgcf::config::RunConfig;
use dgcf::data::{load_volume_with, read_manifest, save_volume, split_dataset, PairedDataset, SplitKind};
use dgcf::evaluation::{evaluate_cases, translate_volume, EvalOptions, EvalReport, ExternalSegmenter, ModelTranslator, Segmenter};
use dgcf::generator::{build_generator, BuildOptions, Variant};
use dgcf::phantom::{phantom_segmenter, synth_dataset, PhantomSpec};
use dgcf::training::{load_checkpoint, mean_l1, Trainer};

#[derive(Parser)]
#[command(name = "dgcf", version, about = "Backbone-guided cross-fusion sCT synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SegmenterKind {
    None,
    /// HU-band toy segmenter matching the synthetic phantoms.
    Threshold,
    /// External TotalSegmentator executable on PATH.
    Totalsegmentator,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitKind {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitKind::Train,
            SplitArg::Val => SplitKind::Val,
            SplitArg::Test => SplitKind::Test,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a generator; checkpoints and train_log.jsonl go to train.out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a data split and write a JSON report.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "none")]
        segmenter: SegmenterKind,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Earlier report to run paired t-tests against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate one source volume into an sCT volume.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config giving the backbone and data task; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train every generator variant with the same budget and compare them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "none")]
        segmenter: SegmenterKind,
    },
    /// Write a synthetic paired phantom dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        cases: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, default_value = "mri2ct")]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn load_backbone(cfg: &RunConfig) -> Result<Option<Arc<BackboneHandle>>> {
    if !cfg.needs_backbone() {
        return Ok(None);
    }
    let bb = cfg.backbone.load(cfg.train.precision.dtype(), &candle_core::Device::Cpu)?;
    log::info!("backbone {}", bb.identifier());
    Ok(Some(Arc::new(bb)))
}

fn load_split(cfg: &RunConfig, kind: SplitKind) -> Result<PairedDataset> {
    let manifest = read_manifest(&cfg.data.manifest_path())?;
    let ids: Vec<String> = manifest.iter().map(|e| e.case_id.clone()).collect();
    let split = split_dataset(&ids, (7, 1, 2), cfg.data.split_seed)?;
    Ok(PairedDataset::load(&cfg.data.root, &manifest, split.get(kind), cfg.data.task, kind)?)
}

fn make_segmenter(kind: SegmenterKind, workdir: &Path) -> Option<Box<dyn Segmenter>> {
    match kind {
        SegmenterKind::None => None,
        SegmenterKind::Threshold => Some(Box::new(phantom_segmenter())),
        SegmenterKind::Totalsegmentator => Some(Box::new(ExternalSegmenter::total_segmentator(workdir))),
    }
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        organs: cfg.eval.organs.clone(),
        body_threshold_hu: cfg.eval.body_threshold_hu,
        ..Default::default()
    }
}

fn run_train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let tcfg = cfg.train_config();
    let backbone = load_backbone(&cfg)?;
    let train_set = load_split(&cfg, SplitKind::Train)?;
    if train_set.is_empty() {
        bail!("training split is empty");
    }
    let val_set = load_split(&cfg, SplitKind::Val)?;
    let opts = BuildOptions {
        seed: tcfg.seed,
        dtype: cfg.train.precision.dtype(),
        ..Default::default()
    };
    let model_bb = if cfg.model.variant.uses_backbone() { backbone.clone() } else { None };
    let model = build_generator(&cfg.model, model_bb, &opts)?;
    let mut trainer = Trainer::new(model, backbone, tcfg)?;
    let out = &cfg.train.out_dir;
    trainer.log_to(&out.join("train_log.jsonl"))?;
    if let Some(r) = resume {
        trainer.resume_from(r)?;
        log::info!("resumed at epoch {} step {}", trainer.epoch(), trainer.steps_taken());
    }
    let size = cfg.model.input_size;
    let tr = train_set.slice_pairs(size)?;
    let va = if val_set.is_empty() { None } else { Some(val_set.slice_pairs(size)?) };
    let log = trainer.fit(&tr, va.as_ref(), Some(out))?;
    println!(
        "trained {} steps in {:.1}s; best val L1 {}; checkpoints in {}",
        trainer.steps_taken(),
        log.wall_clock_s,
        log.best_val_l1.map(|v| format!("{v:.5}")).unwrap_or_else(|| "n/a".into()),
        out.display()
    );
    Ok(())
}

fn run_evaluate(ckpt: &Path, config: &Path, seg: SegmenterKind, split: SplitKind, baseline: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let backbone = if cfg.model.variant.uses_backbone() { load_backbone(&cfg)? } else { None };
    let model = load_checkpoint(ckpt, Some(&cfg.model), backbone)?;
    let data = load_split(&cfg, split)?;
    if data.is_empty() {
        bail!("evaluation split is empty");
    }
    let segmenter = make_segmenter(seg, &out.with_extension("seg"));
    let translator = ModelTranslator {
        model: &model,
        batch_size: cfg.eval.batch_size,
    };
    let name = ckpt.display().to_string();
    let mut report = evaluate_cases(&name, &translator, &data.cases, segmenter.as_deref(), &eval_options(&cfg))?;
    if let Some(b) = baseline {
        let text = std::fs::read_to_string(b).with_context(|| format!("reading {}", b.display()))?;
        let base: EvalReport = serde_json::from_str(&text)?;
        report.compare_to(&base)?;
    }
    report.save_json(out)?;
    print!("{}", report.to_table());
    for s in &report.significance {
        match s.test.p_value {
            Some(p) => println!("{} vs {}: p = {p:.4}", s.metric, s.baseline),
            None => println!("{} vs {}: degenerate (zero-variance differences)", s.metric, s.baseline),
        }
    }
    for n in &report.notes {
        println!("note: {n}");
    }
    Ok(())
}

fn run_translate(ckpt: &Path, input: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(c) => load_config(c)?,
        None => RunConfig::default(),
    };
    let header = dgcf::training::read_checkpoint(ckpt)?;
    let backbone = if header.config.variant.uses_backbone() {
        let dtype = match header.dtype.as_str() {
            "f64" => candle_core::DType::F64,
            _ => candle_core::DType::F32,
        };
        Some(Arc::new(cfg.backbone.load(dtype, &candle_core::Device::Cpu)?))
    } else {
        None
    };
    let model = load_checkpoint(ckpt, None, backbone)?;
    let source = load_volume_with(input, cfg.data.task.source_modality())?;
    let sct = translate_volume(&model, &source, cfg.eval.batch_size)?;
    save_volume(out, &sct)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run_ablate(config: &Path, seg: SegmenterKind) -> Result<()> {
    let cfg = load_config(config)?;
    let train_set = load_split(&cfg, SplitKind::Train)?;
    let val_set = load_split(&cfg, SplitKind::Val)?;
    let test_set = load_split(&cfg, SplitKind::Test)?;
    let size = cfg.model.input_size;
    let tr = train_set.slice_pairs(size)?;
    let va = val_set.slice_pairs(size)?;
    let dtype = cfg.train.precision.dtype();
    let mut shared_bb: Option<Arc<BackboneHandle>> = None;
    let segmenter = make_segmenter(seg, &cfg.train.out_dir.join("ablation_seg"));
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut vcfg = cfg.clone();
        vcfg.model.variant = variant;
        if vcfg.needs_backbone() && shared_bb.is_none() {
            shared_bb = load_backbone(&vcfg)?;
        }
        let bb = if vcfg.needs_backbone() { shared_bb.clone() } else { None };
        let opts = BuildOptions {
            seed: vcfg.train.seed,
            dtype,
            ..Default::default()
        };
        let model_bb = if variant.uses_backbone() { bb.clone() } else { None };
        let model = build_generator(&vcfg.model, model_bb, &opts)?;
        let mut trainer = Trainer::new(model, bb, vcfg.train_config())?;
        let dir = cfg.train.out_dir.join(format!("ablation-{variant}"));
        trainer.log_to(&dir.join("train_log.jsonl"))?;
        trainer.fit(&tr, None, Some(&dir))?;
        let val_l1 = mean_l1(trainer.model(), &va, vcfg.train.batch_size)?;
        let translator = ModelTranslator {
            model: trainer.model(),
            batch_size: vcfg.eval.batch_size,
        };
        let report = if test_set.is_empty() {
            None
        } else {
            Some(evaluate_cases(variant.label(), &translator, &test_set.cases, segmenter.as_deref(), &eval_options(&vcfg))?)
        };
        if let Some(r) = &report {
            r.save_json(&dir.join("report.json"))?;
        }
        rows.push((variant, val_l1, report));
    }
    println!("| Method | val L1 | SSIM (%) | PSNR (dB) | SegScore (%) |\n|---|---|---|---|---|");
    for (variant, val_l1, report) in &rows {
        let (ssim, psnr, seg) = match report {
            Some(r) => (
                format!("{:.2}", 100.0 * r.aggregate.ms_ssim),
                format!("{:.2}", r.aggregate.psnr),
                r.aggregate.seg_score.map(|s| format!("{:.2}", 100.0 * s)).unwrap_or_else(|| "-".into()),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        println!("| {} | {val_l1:.5} | {ssim} | {psnr} | {seg} |", variant.label());
    }
    let summary: Vec<serde_json::Value> = rows
        .iter()
        .map(|(v, l1, r)| serde_json::json!({ "variant": v.to_string(), "label": v.label(), "val_l1": l1, "report": r }))
        .collect();
    let path = cfg.train.out_dir.join("ablation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Cmd::Train { config, resume } => run_train(&config, resume.as_deref()),
        Cmd::Evaluate {
            ckpt,
            config,
            segmenter,
            split,
            baseline,
            out,
        } => run_evaluate(&ckpt, &config, segmenter, split.into(), baseline.as_deref(), &out),
        Cmd::Translate { ckpt, input, out, config } => run_translate(&ckpt, &input, &out, config.as_deref()),
        Cmd::Ablate { config, segmenter } => run_ablate(&config, segmenter),
        Cmd::Synth {
            out,
            cases,
            size,
            depth,
            task,
            seed,
        } => {
            let spec = PhantomSpec {
                depth,
                height: size,
                width: size,
                task: serde_json::from_value(serde_json::Value::String(task.clone()))
                    .with_context(|| format!("unknown task `{task}`"))?,
                ..Default::default()
            };
            let entries = synth_dataset(&out, cases, &spec, seed)?;
            println!("wrote {} cases and manifest.csv to {}", entries.len(), out.display());
            Ok(())
        }
    }
}
