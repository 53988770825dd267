//! Synthetic dataset directories.
//!
//! ```text
//! config.json            DatasetFile: generation parameters and frame ids
//! body.json              ArticulatedBody
//! cutmap.bin             exact cut map from the analytic region oracle
//! masks/front.png        loose-region masks over rest-pose renders
//! masks/back.png
//! frames/<id>.pose.json  PoseFile
//! frames/<id>.scan.ply   ground-truth scan with normals
//! ```

use std::path::{Path, PathBuf};

use avatar_core::body::ArticulatedBody;
use avatar_core::cutmap::{CutMap, View};
use avatar_core::synth::{
    body_samples, make_figure, make_frames, oracle_masks, Figure, FigureSpec, MaskSpec, MaskView, ScanSpec, SkirtKind,
};
use avatar_core::trainer::TrainSample;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::formats::{read_cutmap, read_json, read_mask, read_ply, read_pose, write_cutmap, write_json, write_mask, write_ply, PoseFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: SkirtKind,
    pub figure: FigureSpec,
    pub frames: usize,
    /// Seeds pose sampling and scan sampling.
    pub seed: u64,
    /// Seeds the garment (wrinkle phases); shared by every frame.
    pub garment_seed: u64,
    pub scan: ScanSpec,
    pub masks: MaskSpec,
    /// Body surface samples labeled by the cut map.
    pub body_samples: usize,
}

impl DatasetConfig {
    pub fn desk() -> Self {
        DatasetConfig {
            kind: SkirtKind::Long,
            figure: FigureSpec::default(),
            frames: 8,
            seed: 0,
            garment_seed: 7,
            scan: ScanSpec::default(),
            masks: MaskSpec::default(),
            body_samples: 6000,
        }
    }

    pub fn paper() -> Self {
        DatasetConfig { body_samples: 47911, scan: ScanSpec { density: 40000.0, ..ScanSpec::default() }, ..Self::desk() }
    }

    pub fn figure(&self) -> Result<Figure> {
        Ok(make_figure(&self.figure, self.kind)?)
    }

    fn mask_seed(&self) -> u64 {
        self.seed ^ 0x6d61_736b
    }

    fn sample_seed(&self) -> u64 {
        self.seed ^ 0x5341_4d50
    }

    /// Mask renders of the rest pose; deterministic in the config.
    pub fn mask_views(&self, figure: &Figure) -> Result<Vec<MaskView>> {
        Ok(oracle_masks(figure, &self.masks, self.mask_seed())?)
    }

    /// Rest-pose samples the cut map labels.
    pub fn samples(&self, figure: &Figure) -> Result<Vec<avatar_core::BaryRecord>> {
        Ok(body_samples(figure, self.body_samples, self.sample_seed())?)
    }

    /// Cut map from the analytic region oracle.
    pub fn exact_cut_map(&self, figure: &Figure) -> Result<CutMap> {
        let samples = self.samples(figure)?;
        let labels = figure.oracle_labels(&samples);
        Ok(CutMap { labels, sample_refs: samples, occluded: 0 })
    }
}

/// Contents of `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub version: u32,
    pub config: DatasetConfig,
    pub frame_ids: Vec<String>,
}

pub fn view_name(view: View) -> &'static str {
    match view {
        View::Front => "front",
        View::Back => "back",
    }
}

pub fn mask_path(dir: &Path, view: View) -> PathBuf {
    dir.join("masks").join(format!("{}.png", view_name(view)))
}

pub fn pose_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("frames").join(format!("{id}.pose.json"))
}

pub fn scan_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("frames").join(format!("{id}.scan.ply"))
}

/// Writes a complete dataset directory.
pub fn emit_dataset(config: &DatasetConfig, dir: &Path) -> Result<DatasetFile> {
    let figure = config.figure()?;
    let frames = make_frames(&figure, config.frames, config.seed, config.garment_seed, &config.scan)?;
    write_json(&dir.join("body.json"), &figure.body)?;
    write_cutmap(&dir.join("cutmap.bin"), &config.exact_cut_map(&figure)?)?;
    for v in config.mask_views(&figure)? {
        write_mask(&mask_path(dir, v.camera.view), v.camera.width, v.camera.height, &v.mask)?;
    }
    let mut frame_ids = Vec::with_capacity(frames.len());
    for f in &frames {
        let id = &f.sample.frame_id;
        let pose = PoseFile { joint_names: figure.body.joint_names.clone(), axis_angles: f.axis_angles.clone(), root_translation: f.sample.pose.root_translation };
        write_json(&pose_path(dir, id), &pose)?;
        write_ply(&scan_path(dir, id), &f.sample.scan)?;
        frame_ids.push(id.clone());
    }
    let file = DatasetFile { version: 1, config: config.clone(), frame_ids };
    write_json(&dir.join("config.json"), &file)?;
    Ok(file)
}

/// A loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub file: DatasetFile,
    pub body: ArticulatedBody,
    pub cut_map: CutMap,
    pub samples: Vec<TrainSample>,
}

pub fn load_body(path: &Path) -> Result<ArticulatedBody> {
    let body: ArticulatedBody = read_json(path)?;
    body.validate().map_err(|e| AppError::format(path, e.to_string()))?;
    Ok(body)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let file: DatasetFile = read_json(&dir.join("config.json"))?;
    let body = load_body(&dir.join("body.json"))?;
    let cut_map = read_cutmap(&dir.join("cutmap.bin"))?;
    let mesh = body.canonical_mesh();
    for b in &cut_map.sample_refs {
        b.validate_against(&mesh).map_err(|e| AppError::format(dir.join("cutmap.bin"), e.to_string()))?;
    }
    let mut samples = Vec::with_capacity(file.frame_ids.len());
    for id in &file.frame_ids {
        let pose = read_pose(&pose_path(dir, id), &body.joint_names)?;
        let scan = read_ply(&scan_path(dir, id))?;
        let sample = TrainSample { frame_id: id.clone(), pose, scan };
        sample.validate(&body).map_err(|e| AppError::format(scan_path(dir, id), e.to_string()))?;
        samples.push(sample);
    }
    Ok(Dataset { dir: dir.to_path_buf(), file, body, cut_map, samples })
}

/// Mask views with the mask bits replaced by the PNGs in the dataset.
pub fn load_mask_views(dataset: &Dataset, figure: &Figure) -> Result<Vec<MaskView>> {
    let mut views = dataset.file.config.mask_views(figure)?;
    for v in &mut views {
        let path = mask_path(&dataset.dir, v.camera.view);
        let (w, h, mask) = read_mask(&path)?;
        if w != v.camera.width || h != v.camera.height {
            return Err(AppError::format(&path, format!("mask is {w}×{h}, renders are {}×{}", v.camera.width, v.camera.height)));
        }
        v.mask = mask;
    }
    Ok(views)
}
