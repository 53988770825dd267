//! Training runs with logs and checkpoints, checkpoint loading, inference
//! and metric reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use avatar_core::body::{ArticulatedBody, Pose};
use avatar_core::cutmap::{CutMap, OrthoCamera, View};
use avatar_core::evaluator::{cd_eval, mse_normal_maps, nml_eval};
use avatar_core::geometry::bounds;
use avatar_core::trainer::{infer, variant_cut_map, FrameInputs, Inference, Layout, Model, StepReport, TrainConfig, Trainer};
use avatar_core::PointCloudN;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{AppError, Result};
use crate::formats::{read_checkpoint, tensor_entries, write_checkpoint, write_json, JsonLog, Manifest};

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogLine {
    #[serde(flatten)]
    pub report: StepReport,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub reports: Vec<StepReport>,
    pub final_checkpoint: PathBuf,
}

pub fn manifest(trainer: &Trainer, body: &ArticulatedBody, cut_map: &CutMap) -> Manifest {
    Manifest {
        version: 1,
        epoch: trainer.epoch,
        step: trainer.step,
        config: trainer.config.clone(),
        body_vertices: body.num_vertices(),
        cutmap_counts: cut_map.counts(),
        tensors: tensor_entries(&trainer.model.params()),
    }
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer, body: &ArticulatedBody, cut_map: &CutMap) -> Result<()> {
    let params = trainer.model.params();
    write_checkpoint(path, &manifest(trainer, body, cut_map), &params)
}

/// Trains on every frame of `dataset` with `cut_map`, writing
/// `train_log.jsonl`, `checkpoints/epoch_NNNN.ckpt` and `model.ckpt` under
/// `out`. On a numeric fault the last good state is saved as
/// `last_good.ckpt` and the fault is returned.
pub fn run_training(config: TrainConfig, dataset: &Dataset, cut_map: &CutMap, out: &Path) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut trainer = Trainer::new(config, &dataset.body, cut_map, dataset.samples.clone())?;
    let mut log = JsonLog::create(&out.join("train_log.jsonl"))?;
    let mut reports = Vec::new();
    let every = trainer.config.checkpoint_every;
    while trainer.epoch < trainer.config.epochs {
        match trainer.train_epoch() {
            Ok(rs) => {
                for r in rs {
                    log.append(&LogLine { report: r, wall_time: start.elapsed().as_secs_f64() })?;
                    reports.push(r);
                }
            }
            Err(e) => {
                save_checkpoint(&out.join("last_good.ckpt"), &trainer, &dataset.body, cut_map)?;
                return Err(e.into());
            }
        }
        if every > 0 && trainer.epoch % every == 0 && trainer.epoch < trainer.config.epochs {
            let path = out.join("checkpoints").join(format!("epoch_{:04}.ckpt", trainer.epoch));
            save_checkpoint(&path, &trainer, &dataset.body, cut_map)?;
        }
    }
    let final_checkpoint = out.join("model.ckpt");
    save_checkpoint(&final_checkpoint, &trainer, &dataset.body, cut_map)?;
    Ok(TrainOutcome { reports, final_checkpoint })
}

/// A model rebuilt from a checkpoint for a given body and cut map.
pub struct Loaded {
    pub manifest: Manifest,
    pub layout: Layout,
    pub model: Model,
}

pub fn load_model(path: &Path, body: &ArticulatedBody, cut_map: &CutMap) -> Result<Loaded> {
    let (manifest, params) = read_checkpoint(path)?;
    if manifest.body_vertices != body.num_vertices() {
        return Err(AppError::format(path, format!("checkpoint body has {} vertices, body has {}", manifest.body_vertices, body.num_vertices())));
    }
    if manifest.cutmap_counts != cut_map.counts() {
        return Err(AppError::format(path, "checkpoint was trained with a different cut map"));
    }
    let cfg = &manifest.config;
    let layout = Layout::new(body, variant_cut_map(cut_map, body, cfg.variant, &cfg.lower_body_parts)?)?;
    let mut model = Model::new(&cfg.model, body, &layout, cfg.seed)?;
    model.load_params(&params)?;
    Ok(Loaded { manifest, layout, model })
}

/// Merged output size: the configured budget capped by the union size.
pub fn merge_budget(loaded: &Loaded, inputs: &FrameInputs) -> usize {
    let gen = if loaded.layout.uses_generator { loaded.manifest.config.model.generator.points } else { 0 };
    loaded.manifest.config.merged_points.min(inputs.unclothed.len() + loaded.layout.deformed.len() + gen)
}

pub fn infer_pose(loaded: &Loaded, body: &ArticulatedBody, pose: &Pose, global_code: Option<&[f64]>, seed: u64) -> Result<Inference> {
    let cfg = &loaded.manifest.config;
    let inputs = FrameInputs::new(body, &loaded.layout, &cfg.model.generator, pose, seed)?;
    let n = merge_budget(loaded, &inputs);
    Ok(infer(&loaded.model, &loaded.layout, &inputs, global_code, n, seed)?)
}

pub fn global_code(loaded: &Loaded) -> Vec<f64> {
    loaded.model.codes.global.value.clone()
}

/// Front and back cameras framing `cloud` with a 10% margin.
pub fn framing_cameras(cloud: &PointCloudN, size: usize) -> Vec<OrthoCamera> {
    let (lo, hi) = bounds(cloud.points.iter().copied());
    let (lo, hi) = if cloud.is_empty() { ([-1.0; 3], [1.0; 3]) } else { (lo, hi) };
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let extent = ((hi[0] - lo[0]).max(hi[1] - lo[1]) * 1.1).max(1e-3);
    [View::Front, View::Back].into_iter().map(|v| OrthoCamera::framing(v, size, center, extent)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame_id: String,
    /// Normal-map MSE, units of 1e-2.
    pub mse: f64,
    /// Chamfer distance, units of 1e-4 m².
    pub cd: f64,
    /// Normal discrepancy, units of 1e-1.
    pub nml: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub convention: String,
    pub image_size: usize,
    pub splat_radius: f64,
    pub frames: Vec<FrameReport>,
    pub mean: Option<FrameReport>,
}

pub const MSE_CONVENTION: &str =
    "normal maps: front+back orthographic, white background, MSE over all pixels and RGB channels including background";

/// Metrics of one prediction against its ground truth; cameras frame the ground truth.
pub fn frame_report(id: &str, pred: &PointCloudN, gt: &PointCloudN, image_size: usize, splat: f64) -> Result<FrameReport> {
    let cams = framing_cameras(gt, image_size);
    let r = FrameReport {
        frame_id: id.to_string(),
        mse: mse_normal_maps(pred, gt, &cams, splat)?,
        cd: cd_eval(pred, gt)?,
        nml: nml_eval(pred, gt)?,
    };
    if !(r.mse.is_finite() && r.cd.is_finite() && r.nml.is_finite()) {
        return Err(AppError::NonFinite(format!("frame {id}: {r:?}")));
    }
    Ok(r)
}

pub fn metrics_report(frames: Vec<FrameReport>, image_size: usize, splat: f64) -> MetricsReport {
    let mean = if frames.is_empty() {
        None
    } else {
        let n = frames.len() as f64;
        Some(FrameReport {
            frame_id: "mean".into(),
            mse: frames.iter().map(|f| f.mse).sum::<f64>() / n,
            cd: frames.iter().map(|f| f.cd).sum::<f64>() / n,
            nml: frames.iter().map(|f| f.nml).sum::<f64>() / n,
        })
    };
    MetricsReport { convention: MSE_CONVENTION.into(), image_size, splat_radius: splat, frames, mean }
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    write_json(path, report)
}
