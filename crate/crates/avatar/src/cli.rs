//! Command line: `synth`, `cutmap`, `train`, `infer`, `eval`, `render`, `inspect`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use avatar_core::cutmap::{render_normal_map, Label, NO_POINT};
use avatar_core::synth::{cut_map_from_masks, SkirtKind};
use avatar_core::trainer::{blend_codes, TrainConfig, Variant};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{emit_dataset, load_dataset, view_name, DatasetConfig};
use crate::error::{AppError, Result};
use crate::formats::{read_cutmap, read_json, read_manifest, read_ply, read_pose, write_cutmap, write_json, write_ply, write_render, write_rgb};
use crate::runner::{frame_report, framing_cameras, global_code, infer_pose, load_model, metrics_report, run_training, write_report};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Long,
    Short,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Hybrid,
    DeformerOnly,
    GeneratorOnly,
}

#[derive(Debug, Parser)]
#[command(name = "avatar", version, about = "Hybrid clothed-human point cloud pipeline")]
pub struct Cli {
    /// Seed of every random choice (dataset generation and training).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file overriding preset values: `{"dataset": {...}, "train": {...}}`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Emit a synthetic dataset.
    Synth {
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
    },
    /// Build the cut map from a dataset's masks and visualize its labels.
    Cutmap {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Cut map to use instead of the dataset's.
        #[arg(long)]
        cutmap: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Pose a trained model.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset providing the body and cut map.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cutmap: Option<PathBuf>,
        /// A pose file or a directory of `*.pose.json`.
        #[arg(long)]
        pose: PathBuf,
        /// Blend the global garment codes of checkpoints A and B: (1-ALPHA) A + ALPHA B.
        #[arg(long, num_args = 3, value_names = ["A", "B", "ALPHA"])]
        garment_blend: Option<Vec<String>>,
    },
    /// Compare predicted clouds with ground truth (matched by frame id).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 1024)]
        size: usize,
        #[arg(long, default_value_t = avatar_core::evaluator::EVAL_SPLAT_RADIUS)]
        splat: f64,
    },
    /// Render front and back normal maps of a cloud.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1024)]
        size: usize,
        #[arg(long, default_value_t = avatar_core::evaluator::EVAL_SPLAT_RADIUS)]
        splat: f64,
    },
    /// Print a checkpoint manifest.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Effective configuration of a run, echoed into output directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset, then config file, then command-line flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let (name, dataset, train) = match cli.preset {
        Preset::Desk => ("desk", DatasetConfig::desk(), TrainConfig::desk()),
        Preset::Paper => ("paper", DatasetConfig::paper(), TrainConfig::paper()),
    };
    let mut cfg = RunConfig { preset: name.into(), dataset, train };
    if let Some(path) = &cli.config {
        let over: Value = read_json(path)?;
        let mut base = serde_json::to_value(&cfg)?;
        merge(&mut base, over);
        cfg = serde_json::from_value(base).map_err(|e| AppError::format(path, e.to_string()))?;
    }
    if let Some(s) = cli.seed {
        cfg.dataset.seed = s;
        cfg.train.seed = s;
    }
    match &cli.command {
        Command::Synth { frames, kind } => {
            if let Some(f) = frames {
                cfg.dataset.frames = *f;
            }
            if let Some(k) = kind {
                cfg.dataset.kind = match k {
                    KindArg::Long => SkirtKind::Long,
                    KindArg::Short => SkirtKind::Short,
                    KindArg::None => SkirtKind::None,
                };
            }
        }
        Command::Train { epochs, variant, .. } => {
            if let Some(e) = epochs {
                // keep the normal-loss start at the same fraction of the schedule
                let frac = cfg.train.normal_start_epoch as f64 / cfg.train.epochs as f64;
                cfg.train.epochs = *e;
                cfg.train.normal_start_epoch = ((frac * *e as f64).round() as usize).clamp(1, (*e).max(1));
            }
            if let Some(v) = variant {
                cfg.train.variant = match v {
                    VariantArg::Hybrid => Variant::Hybrid,
                    VariantArg::DeformerOnly => Variant::DeformerOnly,
                    VariantArg::GeneratorOnly => Variant::GeneratorOnly,
                };
            }
        }
        _ => {}
    }
    cfg.train.validate().map_err(|e| AppError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| AppError::Usage("--out is required for this command".into()))
}

fn echo_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(&out.join("effective_config.json"), cfg)
}

fn frame_id(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    Some(name.split('.').next()?.to_string())
}

/// Sorted `(id, path)` of files in `dir` whose names end with `suffix`.
fn list_files(dir: &Path, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| AppError::io(dir, e))? {
        let path = entry.map_err(|e| AppError::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if path.is_file() && name.ends_with(suffix) {
            if let Some(id) = frame_id(&path) {
                out.push((id, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn label_color(l: Label) -> [f64; 3] {
    match l {
        Label::Unclothed => [0.3, 0.75, 0.3],
        Label::Deformed => [0.25, 0.4, 0.85],
        Label::Generated => [0.95, 0.85, 0.2],
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Synth { .. } => {
            let out = out_dir(cli)?;
            let file = emit_dataset(&cfg.dataset, out)?;
            println!("wrote {} frames to {}", file.frame_ids.len(), out.display());
        }
        Command::Cutmap { data } => {
            let out = out_dir(cli)?;
            let ds = load_dataset(data)?;
            let figure = ds.file.config.figure()?;
            if figure.body != ds.body {
                return Err(AppError::format(data.join("body.json"), "body does not match the dataset configuration"));
            }
            let views = crate::dataset::load_mask_views(&ds, &figure)?;
            let samples = &ds.cut_map.sample_refs;
            let cut = cut_map_from_masks(&figure, samples, &views, ds.file.config.masks.claim_radius)?;
            write_cutmap(&out.join("cutmap.bin"), &cut)?;
            let oracle = figure.oracle_labels(samples);
            let agree = cut.labels.iter().zip(&oracle).filter(|(a, b)| a == b).count();
            let positions: Vec<_> = samples.iter().map(|b| avatar_core::geometry::interpolate_vec3(&figure.body.canonical_vertices, b)).collect();
            let mesh = figure.body.canonical_mesh();
            let normals = samples.iter().map(|b| mesh.face_normal(b.face_index as usize)).collect();
            let cloud = avatar_core::PointCloudN { points: positions, normals: Some(normals) };
            for v in &views {
                let r = render_normal_map(&cloud, &v.camera, 2.0)?;
                let rgb: Vec<[f64; 3]> = r.index.iter().map(|&i| if i == NO_POINT { [1.0; 3] } else { label_color(cut.labels[i as usize]) }).collect();
                write_rgb(&out.join(format!("labels_{}.png", view_name(v.camera.view))), r.width, r.height, &rgb)?;
            }
            let report = serde_json::json!({
                "samples": cut.labels.len(),
                "counts": { "unclothed": cut.counts()[0], "deformed": cut.counts()[1], "generated": cut.counts()[2] },
                "occluded": cut.occluded,
                "oracle_agreement": agree as f64 / cut.labels.len().max(1) as f64,
            });
            write_json(&out.join("cutmap_report.json"), &report)?;
            echo_config(out, &cfg)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Train { data, cutmap, .. } => {
            let out = out_dir(cli)?;
            let ds = load_dataset(data)?;
            let cut = match cutmap {
                Some(p) => read_cutmap(p)?,
                None => ds.cut_map.clone(),
            };
            echo_config(out, &cfg)?;
            let outcome = run_training(cfg.train.clone(), &ds, &cut, out)?;
            if let Some(last) = outcome.reports.last() {
                println!("epoch {} step {} loss {:.6e}", last.epoch + 1, last.step, last.total);
            }
            println!("checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Infer { checkpoint, data, cutmap, pose, garment_blend } => {
            let out = out_dir(cli)?;
            let body = crate::dataset::load_body(&data.join("body.json"))?;
            let cut = read_cutmap(&cutmap.clone().unwrap_or_else(|| data.join("cutmap.bin")))?;
            let loaded = load_model(checkpoint, &body, &cut)?;
            let code = match garment_blend {
                Some(args) => {
                    let alpha: f64 = args[2].parse().map_err(|_| AppError::Usage(format!("invalid blend weight `{}`", args[2])))?;
                    let a = global_code(&load_model(Path::new(&args[0]), &body, &cut)?);
                    let b = global_code(&load_model(Path::new(&args[1]), &body, &cut)?);
                    Some(blend_codes(&a, &b, alpha)?)
                }
                None => None,
            };
            let poses = if pose.is_dir() { list_files(pose, ".pose.json")? } else { vec![(frame_id(pose).unwrap_or_else(|| "pose".into()), pose.clone())] };
            let seed = cli.seed.unwrap_or(loaded.manifest.config.seed);
            for (id, path) in &poses {
                let p = read_pose(path, &body.joint_names)?;
                let inf = infer_pose(&loaded, &body, &p, code.as_deref(), seed)?;
                write_ply(&out.join(format!("{id}.ply")), &inf.cloud)?;
            }
            echo_config(out, &cfg)?;
            println!("wrote {} clouds to {}", poses.len(), out.display());
        }
        Command::Eval { pred, gt, size, splat } => {
            let out = out_dir(cli)?;
            let gt_dir = if gt.join("frames").is_dir() { gt.join("frames") } else { gt.clone() };
            let gts = list_files(&gt_dir, ".ply")?;
            let mut frames = Vec::new();
            for (id, path) in list_files(pred, ".ply")? {
                let Some((_, gpath)) = gts.iter().find(|(g, _)| *g == id) else {
                    return Err(AppError::format(&path, format!("no ground truth for frame `{id}` in {}", gt_dir.display())));
                };
                frames.push(frame_report(&id, &read_ply(&path)?, &read_ply(gpath)?, *size, *splat)?);
            }
            let report = metrics_report(frames, *size, *splat);
            write_report(&out.join("metrics.json"), &report)?;
            echo_config(out, &cfg)?;
            match &report.mean {
                Some(m) => println!("frames {} MSE {:.6} CD {:.6} NML {:.6}", report.frames.len(), m.mse, m.cd, m.nml),
                None => println!("frames 0"),
            }
        }
        Command::Render { input, size, splat } => {
            let out = out_dir(cli)?;
            let cloud = read_ply(input)?;
            let id = frame_id(input).unwrap_or_else(|| "cloud".into());
            for cam in framing_cameras(&cloud, *size) {
                let r = render_normal_map(&cloud, &cam, *splat)?;
                write_render(&out.join(format!("{id}_{}.png", view_name(cam.view))), &r)?;
            }
        }
        Command::Inspect { checkpoint } => {
            let m = read_manifest(checkpoint)?;
            let text = serde_json::to_string_pretty(&m)?;
            println!("{text}");
            if let Some(out) = &cli.out {
                write_json(&out.join("manifest.json"), &m)?;
            }
        }
    }
    Ok(())
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
