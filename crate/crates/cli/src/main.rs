//! `importance`: generate synthetic scenes, train, evaluate, predict and run
//! ablations of the object importance model.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use importance_core::checkpoint::{load_checkpoint, save_checkpoint};
use importance_core::dataset::{
    clip_end_frames, generate_synthetic, load_dataset, load_scene, sample_clip, ClipOptions, Split,
};
use importance_core::eval::{collect_clips, evaluate, EvalReport};
use importance_core::overlay::{frame_overlay, gate_json, save_overlay};
use importance_core::train::{write_history_csv, Trainer};
use importance_core::{AblationPreset, ExperimentConfig, ForwardOptions, ImportanceModel};

#[derive(Parser)]
#[command(name = "importance", version, about = "On-road object importance estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with rule-derived importance labels.
    MakeSynthetic {
        #[command(flatten)]
        config: ConfigArgs,
        /// Generator seed; overrides `synthetic.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of scenes; overrides `synthetic.n_clips`.
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split, logging test-split metrics per epoch.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for the checkpoint, log and resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint and exit once this many epochs are complete.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report JSON path; PR-curve and per-object CSVs are written beside it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Clip-end spacing; defaults to the checkpoint's training config.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score one clip of a scene and draw the overlay.
    Predict {
        /// Scene directory inside a dataset root.
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        overlay_dir: PathBuf,
        /// Clip end frame; defaults to the last frame with a full window.
        #[arg(long)]
        frame: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Train and evaluate ablated variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Preset name, repeatable (bu, bu+trg, bu+disg, full, ofe-spatial, ...).
        #[arg(long = "preset", required = true)]
        presets: Vec<AblationPreset>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config; keys override the profile named by its `profile` key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile when no config file is given.
    #[arg(long, default_value = "standard")]
    profile: String,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display())),
            None => Ok(ExperimentConfig::profile(&self.profile)?),
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::MakeSynthetic {
            config,
            seed,
            clips,
            out,
        } => make_synthetic(&config, seed, clips, &out),
        Command::Train {
            data,
            config,
            out,
            resume,
            stop_after,
        } => {
            let exp = config.load()?;
            let ckpt = train(&data, &exp, &out, resume.as_deref(), stop_after)?;
            println!("checkpoint: {}", ckpt.display());
            Ok(())
        }
        Command::Eval {
            data,
            checkpoint,
            report,
            split,
            stride,
            threshold,
        } => eval(&data, &checkpoint, &report, split, stride, threshold),
        Command::Predict {
            clip,
            checkpoint,
            overlay_dir,
            frame,
            threshold,
        } => predict(&clip, &checkpoint, &overlay_dir, frame, threshold),
        Command::Ablate {
            data,
            config,
            presets,
            out,
        } => ablate(&data, &config.load()?, &presets, &out),
    }
}

fn make_synthetic(config: &ConfigArgs, seed: Option<u64>, clips: Option<usize>, out: &Path) -> Result<()> {
    let mut synth = config.load()?.synthetic;
    if let Some(s) = seed {
        synth.seed = s;
    }
    if let Some(n) = clips {
        synth.n_clips = n;
    }
    let manifest = generate_synthetic(&synth, out)?;
    println!(
        "wrote {} scenes ({} train / {} test) to {}",
        manifest.scenes.len(),
        manifest.splits.train.len(),
        manifest.splits.test.len(),
        out.display()
    );
    Ok(())
}

/// Trains and writes `model.safetensors`, `train_log.csv` and `config.toml`
/// under `out`. Returns the checkpoint path.
fn train(
    data: &Path,
    exp: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (model, mut trainer) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if ckpt.model.config() != &exp.model {
                log::warn!("resuming with the model config stored in {}", path.display());
            }
            let trainer = ckpt.trainer()?;
            (ckpt.model, trainer)
        }
        None => {
            let model = ImportanceModel::new(&exp.model, exp.train.precision.dtype(), exp.train.seed)?;
            (model, Trainer::new(exp.train.clone())?)
        }
    };
    let train_scenes = load_dataset(data, Split::Train)?;
    let test_scenes = load_dataset(data, Split::Test)?;
    let train_clips = collect_clips(&train_scenes, model.config(), 1)?;
    let val_clips = collect_clips(&test_scenes, model.config(), trainer.config().eval_stride)?;
    if train_clips.is_empty() {
        bail!("no training clips under {}", data.display());
    }
    log::info!(
        "{} training clips, {} validation clips, {} parameters",
        train_clips.len(),
        val_clips.len(),
        model.parameter_count()
    );
    let log_path = out.join("train_log.csv");
    let stop = stop_after.unwrap_or(usize::MAX);
    trainer.fit_until(&model, &train_clips, Some(&val_clips), stop, |_| {})?;
    write_history_csv(&log_path, trainer.history())?;
    let ckpt = out.join("model.safetensors");
    save_checkpoint(&ckpt, &model, &trainer)?;
    let resolved = ExperimentConfig {
        model: model.config().clone(),
        train: trainer.config().clone(),
        synthetic: exp.synthetic.clone(),
    };
    fs::write(out.join("config.toml"), resolved.to_toml_string()?)?;
    Ok(ckpt)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    report.write_json(path)?;
    report.write_pr_csv(&sibling(path, "_pr.csv"))?;
    report.write_predictions_csv(&sibling(path, "_objects.csv"))?;
    Ok(())
}

fn eval(
    data: &Path,
    checkpoint: &Path,
    report_path: &Path,
    split: Split,
    stride: Option<usize>,
    threshold: Option<f64>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let scenes = load_dataset(data, split)?;
    let stride = stride.unwrap_or(ckpt.train.eval_stride);
    let threshold = threshold.unwrap_or(ckpt.train.threshold);
    let report = evaluate(&ckpt.model, &scenes, stride, threshold)?;
    write_report(&report, report_path)?;
    println!(
        "AP {:.4}  F1 {:.4}  Acc {:.4}  ({} objects, {} clips)",
        report.ap,
        report.f1,
        report.acc,
        report.per_object.len(),
        report.num_clips
    );
    Ok(())
}

fn predict(scene_dir: &Path, checkpoint: &Path, overlay_dir: &Path, frame: Option<usize>, threshold: f64) -> Result<()> {
    let scene_dir = scene_dir
        .canonicalize()
        .with_context(|| format!("resolving {}", scene_dir.display()))?;
    let (Some(root), Some(scene_id)) = (scene_dir.parent(), scene_dir.file_name().and_then(|s| s.to_str())) else {
        bail!("{} is not a scene directory", scene_dir.display());
    };
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = &ckpt.model;
    let scene = load_scene(root, scene_id)?;
    let t_end = match frame {
        Some(f) => f,
        None => *clip_end_frames(&scene, model.config().clip_len, 1)
            .last()
            .with_context(|| format!("scene {scene_id} has no full clip window"))?,
    };
    let clip = sample_clip(&scene, t_end, &ClipOptions::from(model.config()))?;
    let trace = model.forward_trace(&clip, &ForwardOptions::eval())?;
    let scores = trace.scores.to_vec()?;
    let gates = trace.gate_coefficients()?;

    fs::create_dir_all(overlay_dir)?;
    let img = frame_overlay(&scene, t_end, &clip.track_ids, &scores, gates.as_deref(), threshold)?;
    let png = overlay_dir.join(format!("{scene_id}_{t_end:06}.png"));
    save_overlay(&png, &img)?;
    if let (Some(lane), Some(p_c)) = (&trace.lane, &gates) {
        let p = lane.p.to_dtype(importance_core::candle::DType::F64)?.to_vec1::<f64>()?;
        let json = gate_json(&clip.track_ids, &p, p_c)?;
        fs::write(overlay_dir.join(format!("{scene_id}_{t_end:06}_gates.json")), json)?;
    }
    println!("track  score   label");
    for (i, id) in clip.track_ids.iter().enumerate() {
        println!("{id:>5}  {:.4}  {}", scores[i], u8::from(clip.labels[i]));
    }
    println!("overlay: {}", png.display());
    Ok(())
}

fn ablate(data: &Path, base: &ExperimentConfig, presets: &[AblationPreset], out: &Path) -> Result<()> {
    let test_scenes = load_dataset(data, Split::Test)?;
    let mut rows = Vec::new();
    for &preset in presets {
        let exp = ExperimentConfig {
            model: preset.apply(&base.model),
            ..base.clone()
        };
        let dir = out.join(preset.name());
        log::info!("training preset {preset}");
        let ckpt_path = train(data, &exp, &dir, None, None)?;
        let ckpt = load_checkpoint(&ckpt_path)?;
        let report = evaluate(&ckpt.model, &test_scenes, exp.train.eval_stride, exp.train.threshold)?;
        write_report(&report, &dir.join("report.json"))?;
        rows.push((preset, report));
    }
    println!("{:<16} {:>7} {:>7} {:>7}", "preset", "AP", "F1", "Acc");
    for (preset, r) in &rows {
        println!("{:<16} {:>7.4} {:>7.4} {:>7.4}", preset.name(), r.ap, r.f1, r.acc);
    }
    Ok(())
}
