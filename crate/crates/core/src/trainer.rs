//! Training and inference: per-frame inputs, the hybrid forward pass, the
//! loss and its backward pass, branch merging, flip augmentation and the
//! optimization schedule.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::body::{forward_kinematics, skin_vertices, ArticulatedBody, Pose};
use crate::cutmap::{CutMap, Label};
use crate::deformer::{DeformSamples, Deformer, GarmentCodes, PoseEncoderConfig, PosedBody};
use crate::error::{bail, Error, Result};
use crate::generator::{leg_parts, sample_part_points_posed, Generator, GeneratorConfig};
use crate::geometry::{farthest_point_sample, interpolate_vec3, BaryRecord, MeshSdf, PointCloudN};
use crate::linalg::{mat_mul, scale, Mat3, Vec3};
use crate::losses::{
    collision_with_grad, displacement_reg, displacement_reg_grad, garment_reg, garment_reg_grad, penetration_fraction, LossTerms,
    LossWeights, Matching,
};
use crate::nn::{check_finite, clip_grad_norm, AdamConfig, Mat, Param, Parameterized};
use crate::rng::Rng;

/// Which branches produce the loose region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Deformer on deformed samples, generator on the generated region.
    Hybrid,
    /// Generated samples are deformed instead; no generator.
    DeformerOnly,
    /// The generator replaces every clothed lower-body sample.
    GeneratorOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: PoseEncoderConfig,
    pub garment_dim: usize,
    pub decoder_width: usize,
    pub generator: GeneratorConfig,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig { encoder: PoseEncoderConfig::paper(), garment_dim: 64, decoder_width: 256, generator: GeneratorConfig::paper() }
    }

    pub fn desk() -> Self {
        ModelConfig { encoder: PoseEncoderConfig::desk(), garment_dim: 64, decoder_width: 128, generator: GeneratorConfig::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.generator.validate()?;
        if self.garment_dim == 0 || self.decoder_width == 0 {
            bail!(Argument, "garment dimension and decoder width must be positive");
        }
        if self.generator.pose_dim == 0 || self.generator.garment_dim != self.garment_dim {
            bail!(
                Argument,
                "generator garment dimension {} differs from garment codes {}",
                self.generator.garment_dim,
                self.garment_dim
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate of the garment codes; `None` shares the network rate.
    pub code_learning_rate: Option<f64>,
    /// First (0-based) epoch whose loss includes the normal term.
    pub normal_start_epoch: usize,
    pub seed: u64,
    /// Size of the merged output cloud.
    pub merged_points: usize,
    pub flip_probability: f64,
    pub weights: LossWeights,
    /// Epoch stride of checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub grad_clip: Option<f64>,
    pub variant: Variant,
    /// Parts the generator takes over in the generator-only variant.
    pub lower_body_parts: Vec<String>,
    pub model: ModelConfig,
}

fn lower_body() -> Vec<String> {
    let mut parts = vec![String::from("pelvis")];
    parts.extend(leg_parts());
    parts
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 8,
            learning_rate: 3.0e-4,
            code_learning_rate: None,
            normal_start_epoch: 400,
            seed: 0,
            merged_points: 47911,
            flip_probability: 0.5,
            weights: LossWeights::default(),
            checkpoint_every: 100,
            grad_clip: None,
            variant: Variant::Hybrid,
            lower_body_parts: lower_body(),
            model: ModelConfig::paper(),
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 2,
            learning_rate: 1.0e-3,
            code_learning_rate: None,
            normal_start_epoch: 120,
            seed: 0,
            merged_points: 4096,
            flip_probability: 0.5,
            weights: LossWeights::default(),
            checkpoint_every: 50,
            grad_clip: None,
            variant: Variant::Hybrid,
            lower_body_parts: lower_body(),
            model: ModelConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.merged_points == 0 {
            bail!(Argument, "epochs, batch size and merged points must be positive");
        }
        if !(self.normal_start_epoch > 0 && self.normal_start_epoch <= self.epochs) {
            bail!(Argument, "normal start epoch {} outside (0, {}]", self.normal_start_epoch, self.epochs);
        }
        let lrs = [Some(self.learning_rate), self.code_learning_rate];
        if lrs.iter().flatten().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            bail!(Argument, "learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            bail!(Argument, "flip probability {} outside [0, 1]", self.flip_probability);
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                bail!(Argument, "gradient clip must be positive");
            }
        }
        self.weights.validate()?;
        self.model.validate()
    }

    pub fn normal_active(&self, epoch: usize) -> bool {
        epoch >= self.normal_start_epoch
    }
}

/// One training frame: a pose and the scan observed in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub frame_id: String,
    pub pose: Pose,
    pub scan: PointCloudN,
}

impl TrainSample {
    pub fn validate(&self, body: &ArticulatedBody) -> Result<()> {
        self.pose.validate(body.num_joints())?;
        if self.scan.is_empty() {
            bail!(Validation, "frame `{}` has an empty scan", self.frame_id);
        }
        self.scan.validate()?;
        self.scan.normals()?;
        Ok(())
    }
}

fn mirror_x(v: Vec3) -> Vec3 {
    [-v[0], v[1], v[2]]
}

fn mirror_rotation(r: &Mat3) -> Mat3 {
    let s = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&s, &mat_mul(r, &s))
}

/// Mirrors a pose across the `x = 0` plane: left and right joints swap and
/// every rotation is conjugated by the reflection.
pub fn mirror_pose(pose: &Pose, body: &ArticulatedBody) -> Result<Pose> {
    pose.validate(body.num_joints())?;
    let map = ArticulatedBody::mirror_map(&body.joint_names)?;
    let joint_rotations = (0..body.num_joints()).map(|j| mirror_rotation(&pose.joint_rotations[map[j]])).collect();
    Ok(Pose { joint_rotations, root_translation: mirror_x(pose.root_translation) })
}

/// Horizontal flip of a sample along the x-axis. The body is assumed
/// symmetric about `x = 0`.
pub fn augment_flip(sample: &TrainSample, body: &ArticulatedBody) -> Result<TrainSample> {
    let pose = mirror_pose(&sample.pose, body)?;
    let points = sample.scan.points.iter().map(|p| mirror_x(*p)).collect();
    let normals = sample.scan.normals.as_ref().map(|n| n.iter().map(|v| mirror_x(*v)).collect());
    Ok(TrainSample { frame_id: sample.frame_id.clone(), pose, scan: PointCloudN { points, normals } })
}

/// Concatenates the three branches and keeps `n` points by farthest point
/// sampling. Returns the merged cloud and the branch of every point.
pub fn merge_branches(
    unclothed: &PointCloudN,
    deformed: &PointCloudN,
    generated: &PointCloudN,
    n: usize,
    seed: u64,
) -> Result<(PointCloudN, Vec<Label>)> {
    let total = unclothed.len() + deformed.len() + generated.len();
    if n > total {
        bail!(Argument, "merge budget {n} exceeds the {total} available points");
    }
    let mut points = Vec::with_capacity(total);
    let mut normals = Vec::with_capacity(total);
    let mut origin = Vec::with_capacity(total);
    for (cloud, label) in [(unclothed, Label::Unclothed), (deformed, Label::Deformed), (generated, Label::Generated)] {
        points.extend_from_slice(&cloud.points);
        match &cloud.normals {
            Some(nrm) => normals.extend_from_slice(nrm),
            None if cloud.is_empty() => {}
            None => bail!(Argument, "{label:?} branch has no normals"),
        }
        origin.extend(core::iter::repeat_n(label, cloud.len()));
    }
    let keep = if n == total { (0..total).collect() } else { farthest_point_sample(&points, n, seed)? };
    let merged = PointCloudN {
        points: keep.iter().map(|&i| points[i]).collect(),
        normals: Some(keep.iter().map(|&i| normals[i]).collect()),
    };
    Ok((merged, keep.iter().map(|&i| origin[i]).collect()))
}

/// Applies a variant to a cut map.
pub fn variant_cut_map(cut: &CutMap, body: &ArticulatedBody, variant: Variant, lower_body_parts: &[String]) -> Result<CutMap> {
    match variant {
        Variant::Hybrid => Ok(cut.clone()),
        Variant::DeformerOnly => Ok(cut.without_generation()),
        Variant::GeneratorOnly => {
            let parts = lower_body_parts.iter().map(|n| body.part_id(n)).collect::<Result<Vec<_>>>()?;
            let labels = cut
                .labels
                .iter()
                .zip(&cut.sample_refs)
                .map(|(l, b)| {
                    let part = body.part_labels[b.vertex_ids[0] as usize];
                    if *l == Label::Deformed && parts.contains(&part) {
                        Label::Generated
                    } else {
                        *l
                    }
                })
                .collect();
            Ok(CutMap { labels, sample_refs: cut.sample_refs.clone(), occluded: cut.occluded })
        }
    }
}

/// Sample sets of each branch, fixed for a cut map.
#[derive(Debug, Clone)]
pub struct Layout {
    pub cut_map: CutMap,
    pub unclothed: Vec<BaryRecord>,
    pub deformed: DeformSamples,
    /// Rest-pose centroid of the generated region (origin if it is empty).
    pub anchor: Vec3,
    pub uses_generator: bool,
}

impl Layout {
    pub fn new(body: &ArticulatedBody, cut_map: CutMap) -> Result<Self> {
        cut_map.validate()?;
        for b in &cut_map.sample_refs {
            b.validate_against(&body.canonical_mesh())?;
        }
        let unclothed = cut_map.records_with(Label::Unclothed);
        let deformed = DeformSamples::new(body, cut_map.records_with(Label::Deformed))?;
        let generated = cut_map.records_with(Label::Generated);
        let mut anchor = [0.0; 3];
        for b in &generated {
            let p = interpolate_vec3(&body.canonical_vertices, b);
            anchor = crate::linalg::add(anchor, p);
        }
        if !generated.is_empty() {
            anchor = scale(anchor, 1.0 / generated.len() as f64);
        }
        let uses_generator = !generated.is_empty();
        Ok(Layout { cut_map, unclothed, deformed, anchor, uses_generator })
    }
}

/// Everything the forward pass needs about one posed frame.
#[derive(Debug, Clone)]
pub struct FrameInputs {
    pub posed: PosedBody,
    /// Posed unclothed samples with body normals.
    pub unclothed: PointCloudN,
    /// Posed surface samples of the generator's parts.
    pub part_clouds: Vec<PointCloudN>,
    pub sdf: MeshSdf,
}

impl FrameInputs {
    pub fn new(body: &ArticulatedBody, layout: &Layout, generator: &GeneratorConfig, pose: &Pose, seed: u64) -> Result<Self> {
        let bones = forward_kinematics(body, pose)?;
        let (posed_vertices, _) = skin_vertices(body, &bones)?;
        let mesh = body.posed_mesh(posed_vertices.clone());
        let sdf = MeshSdf::new(&mesh)?;
        let points = layout.unclothed.iter().map(|b| mesh.point_at(b)).collect();
        let normals = layout.unclothed.iter().map(|b| mesh.face_normal(b.face_index as usize)).collect();
        let part_clouds = if layout.uses_generator {
            sample_part_points_posed(body, &posed_vertices, &generator.parts, generator.part_points, seed)?
        } else {
            Vec::new()
        };
        let posed = PosedBody::new(body, pose, &layout.deformed)?;
        Ok(FrameInputs { posed, unclothed: PointCloudN { points, normals: Some(normals) }, part_clouds, sdf })
    }
}

/// Network weights and garment codes.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub deformer: Deformer,
    pub generator: Option<Generator>,
    pub codes: GarmentCodes,
}

impl Model {
    pub fn new(config: &ModelConfig, body: &ArticulatedBody, layout: &Layout, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, 1);
        let deformer = Deformer::new(body, config.encoder.clone(), config.garment_dim, config.decoder_width, &mut rng)?;
        let mut rng = Rng::derive(seed, 2);
        let generator = if layout.uses_generator {
            Some(Generator::new(config.generator.clone(), layout.anchor, &mut rng)?)
        } else {
            None
        };
        let mut rng = Rng::derive(seed, 3);
        let codes = GarmentCodes::new(body.num_vertices(), config.garment_dim, &mut rng);
        Ok(Model { config: config.clone(), deformer, generator, codes })
    }

    pub fn params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.clone()));
        out
    }

    /// Copies values and optimizer moments from `params`, which must match
    /// this model's parameters by name and shape, in order.
    pub fn load_params(&mut self, params: &[Param]) -> Result<()> {
        let count = self.num_params_tensors();
        if count != params.len() {
            bail!(Validation, "checkpoint holds {} tensors, model has {count}", params.len());
        }
        let mut i = 0;
        let mut err: Option<Error> = None;
        self.visit_params_mut(&mut |p| {
            let src = &params[i];
            i += 1;
            if err.is_some() {
                return;
            }
            if src.name != p.name || src.shape != p.shape || src.value.len() != p.value.len() {
                err = Some(Error::Validation(format!(
                    "checkpoint tensor `{}` {:?} does not match model tensor `{}` {:?}",
                    src.name, src.shape, p.name, p.shape
                )));
                return;
            }
            p.value.clone_from(&src.value);
            if src.m.len() == p.value.len() && src.v.len() == p.value.len() {
                p.m.clone_from(&src.m);
                p.v.clone_from(&src.v);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn num_params_tensors(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_| n += 1);
        n
    }
}

impl Parameterized for Model {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.deformer.visit_params(f);
        if let Some(g) = &self.generator {
            g.visit_params(f);
        }
        self.codes.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.deformer.visit_params_mut(f);
        if let Some(g) = &mut self.generator {
            g.visit_params_mut(f);
        }
        self.codes.visit_params_mut(f);
    }
}

/// Branch outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub unclothed: PointCloudN,
    pub deformed: PointCloudN,
    pub generated: PointCloudN,
    /// Canonical displacements of the deformed samples.
    pub displacements: Vec<Vec3>,
}

impl Prediction {
    /// Union of the three branches, in branch order.
    pub fn union(&self) -> (Vec<Vec3>, Vec<Vec3>) {
        let mut points = Vec::new();
        let mut normals = Vec::new();
        for c in [&self.unclothed, &self.deformed, &self.generated] {
            points.extend_from_slice(&c.points);
            if let Some(n) = &c.normals {
                normals.extend_from_slice(n);
            }
        }
        (points, normals)
    }
}

pub struct ForwardCache {
    deform: Option<crate::deformer::DeformCache>,
    generate: Option<(crate::generator::PartPoseCode, crate::generator::PartCache, crate::generator::GeneratorCache)>,
}

fn empty_cloud() -> PointCloudN {
    PointCloudN { points: Vec::new(), normals: Some(Vec::new()) }
}

/// Part-pooled pose code of the generator for one frame.
pub fn part_pose_code(model: &Model, inputs: &FrameInputs) -> Result<Option<Vec<f64>>> {
    match &model.generator {
        Some(g) => Ok(Some(g.part_encoder.encode(&inputs.part_clouds)?.0.pooled)),
        None => Ok(None),
    }
}

/// Runs every branch. `global_code` overrides the learned global garment code.
pub fn forward(model: &Model, layout: &Layout, inputs: &FrameInputs, global_code: Option<&[f64]>) -> Result<(Prediction, ForwardCache)> {
    let blended;
    let codes = match global_code {
        Some(h) => {
            if h.len() != model.codes.dim() {
                bail!(Validation, "garment code has {} entries, expected {}", h.len(), model.codes.dim());
            }
            let mut c = model.codes.clone();
            c.global.value.copy_from_slice(h);
            blended = c;
            &blended
        }
        None => &model.codes,
    };
    let (deformed, displacements, deform) = if layout.deformed.is_empty() {
        (empty_cloud(), Vec::new(), None)
    } else {
        let (out, cache) = model.deformer.forward(&inputs.posed, &layout.deformed, codes)?;
        (PointCloudN { points: out.points, normals: Some(out.posed_normals) }, out.displacements, Some(cache))
    };
    let (generated, generate) = match &model.generator {
        Some(g) if layout.uses_generator => {
            let (code, part_cache) = g.part_encoder.encode(&inputs.part_clouds)?;
            let (cloud, gen_cache) = g.generate(&code.pooled, &codes.global.value)?;
            (cloud, Some((code, part_cache, gen_cache)))
        }
        _ if layout.uses_generator => bail!(Validation, "layout has a generated region but the model has no generator"),
        _ => (empty_cloud(), None),
    };
    let prediction = Prediction { unclothed: inputs.unclothed.clone(), deformed, generated, displacements };
    Ok((prediction, ForwardCache { deform, generate }))
}

/// Loss of one frame; accumulates `scale`-weighted gradients into the model.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_backward(
    model: &mut Model,
    layout: &Layout,
    inputs: &FrameInputs,
    scan: &PointCloudN,
    weights: &LossWeights,
    normal_active: bool,
    grad_scale: f64,
) -> Result<LossTerms> {
    let (pred, cache) = forward(model, layout, inputs, None)?;
    let (points, normals) = pred.union();
    let target_normals = scan.normals()?;
    let matching = Matching::new(&points, &scan.points)?;
    let n_u = pred.unclothed.len();
    let n_d = pred.deformed.len();
    let mut terms = LossTerms {
        chamfer: matching.chamfer(),
        normal: matching.normal_loss(&normals, target_normals),
        displacement: displacement_reg(&pred.displacements),
        ..LossTerms::default()
    };
    let zg: &[f64] = cache.deform.as_ref().map(|c| c.garment_codes.data.as_slice()).unwrap_or(&[]);
    terms.garment = garment_reg(zg, &model.codes.global.value);
    let (collision, d_col) = if pred.generated.is_empty() {
        (0.0, Vec::new())
    } else {
        collision_with_grad(&pred.generated.points, &inputs.sdf, weights.epsilon)?
    };
    terms.collision = collision;
    if !terms.all_finite() {
        bail!(Numeric, "non-finite loss terms {terms:?}");
    }

    let d_points: Vec<Vec3> = matching.chamfer_grad(&points, &scan.points).into_iter().map(|g| scale(g, grad_scale * weights.chamfer)).collect();
    let d_normals: Vec<Vec3> = if normal_active {
        matching.normal_grad(&normals, target_normals).into_iter().map(|g| scale(g, grad_scale * weights.normal)).collect()
    } else {
        vec![[0.0; 3]; points.len()]
    };
    let (dz, dh) = garment_reg_grad(zg, &model.codes.global.value);
    for (g, d) in model.codes.global.grad.iter_mut().zip(&dh) {
        *g += grad_scale * weights.garment * d;
    }
    if let Some(dc) = &cache.deform {
        let d_disp: Vec<Vec3> = displacement_reg_grad(&pred.displacements).into_iter().map(|g| scale(g, grad_scale * weights.displacement)).collect();
        let d_zg = Mat::from_vec(dc.garment_codes.rows, dc.garment_codes.cols, dz.iter().map(|v| v * grad_scale * weights.garment).collect());
        let range = n_u..n_u + n_d;
        model.deformer.backward(
            &mut model.codes,
            &inputs.posed,
            &layout.deformed,
            dc,
            &d_points[range.clone()],
            &d_normals[range],
            Some(&d_disp),
            Some(&d_zg),
        );
    }
    if let (Some((code, part_cache, gen_cache)), Some(g)) = (&cache.generate, model.generator.as_mut()) {
        let off = n_u + n_d;
        let dp: Vec<Vec3> = d_points[off..]
            .iter()
            .zip(&d_col)
            .map(|(a, c)| crate::linalg::add(*a, scale(*c, grad_scale * weights.collision)))
            .collect();
        let (d_hp, d_hg) = g.backward(gen_cache, &dp, &d_normals[off..]);
        g.part_encoder.backward(code, part_cache, &d_hp);
        for (a, b) in model.codes.global.grad.iter_mut().zip(&d_hg) {
            *a += b;
        }
    }
    Ok(terms)
}

/// Loss report of one optimization step (batch means of the unweighted terms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    pub step: u64,
    pub terms: LossTerms,
    /// Weighted total; the normal term contributes 0 before its start epoch.
    pub total: f64,
    pub normal_active: bool,
    pub grad_norm: f64,
}

/// A training frame with precomputed inputs for both flip states.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub sample: TrainSample,
    pub inputs: FrameInputs,
    pub flipped: Option<(TrainSample, FrameInputs)>,
}

fn frame_seed(seed: u64, index: usize, flipped: bool) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ ((index as u64) << 1 | flipped as u64)
}

/// Optimization state.
pub struct Trainer {
    pub config: TrainConfig,
    pub layout: Layout,
    pub model: Model,
    pub frames: Vec<PreparedFrame>,
    pub step: u64,
    pub epoch: usize,
    rng: Rng,
    adam: AdamConfig,
}

impl Trainer {
    /// `cut_map` is the unmodified map; the configured variant is applied here.
    pub fn new(config: TrainConfig, body: &ArticulatedBody, cut_map: &CutMap, samples: Vec<TrainSample>) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            bail!(Argument, "training needs at least one frame");
        }
        let layout = Layout::new(body, variant_cut_map(cut_map, body, config.variant, &config.lower_body_parts)?)?;
        let model = Model::new(&config.model, body, &layout, config.seed)?;
        let mut frames = Vec::with_capacity(samples.len());
        for (i, sample) in samples.into_iter().enumerate() {
            sample.validate(body)?;
            let gen = &config.model.generator;
            let inputs = FrameInputs::new(body, &layout, gen, &sample.pose, frame_seed(config.seed, i, false))?;
            let flipped = if config.flip_probability > 0.0 {
                let f = augment_flip(&sample, body)?;
                let fi = FrameInputs::new(body, &layout, gen, &f.pose, frame_seed(config.seed, i, true))?;
                Some((f, fi))
            } else {
                None
            };
            frames.push(PreparedFrame { sample, inputs, flipped });
        }
        let rng = Rng::derive(config.seed, 7);
        Ok(Trainer { config, layout, model, frames, step: 0, epoch: 0, rng, adam: AdamConfig::default() })
    }

    /// Runs one epoch and returns one report per step. On a numeric fault
    /// the model is left as it was before the failing step.
    pub fn train_epoch(&mut self) -> Result<Vec<StepReport>> {
        let mut order: Vec<usize> = (0..self.frames.len()).collect();
        self.rng.shuffle(&mut order);
        let flips: Vec<bool> = order.iter().map(|_| self.rng.uniform() < self.config.flip_probability).collect();
        let mut reports = Vec::new();
        let bs = self.config.batch_size;
        for start in (0..order.len()).step_by(bs) {
            let end = (start + bs).min(order.len());
            let batch: Vec<(usize, bool)> = (start..end).map(|k| (order[k], flips[k])).collect();
            reports.push(self.train_step(&batch)?);
        }
        self.epoch += 1;
        Ok(reports)
    }

    /// One optimizer step over `(frame index, flipped)` pairs.
    pub fn train_step(&mut self, batch: &[(usize, bool)]) -> Result<StepReport> {
        let active = self.config.normal_active(self.epoch);
        let w = self.config.weights;
        let inv = 1.0 / batch.len() as f64;
        self.model.zero_grad();
        let mut sum = LossTerms::default();
        for &(i, flip) in batch {
            let frame = &self.frames[i];
            let (sample, inputs) = match (&frame.flipped, flip) {
                (Some((s, fi)), true) => (s, fi),
                _ => (&frame.sample, &frame.inputs),
            };
            let t = loss_and_backward(&mut self.model, &self.layout, inputs, &sample.scan, &w, active, inv)?;
            sum.chamfer += t.chamfer * inv;
            sum.normal += t.normal * inv;
            sum.displacement += t.displacement * inv;
            sum.garment += t.garment * inv;
            sum.collision += t.collision * inv;
        }
        let total = sum.total(&w, active);
        if !total.is_finite() {
            bail!(Numeric, "non-finite loss at step {}", self.step + 1);
        }
        let grad_norm = match self.config.grad_clip {
            Some(c) => clip_grad_norm(&mut self.model, c),
            None => {
                let mut sq = 0.0;
                self.model.visit_params(&mut |p| sq += p.grad.iter().map(|g| g * g).sum::<f64>());
                libm::sqrt(sq)
            }
        };
        check_finite(&self.model)?;
        self.step += 1;
        let (lr, code_lr) = (self.config.learning_rate, self.config.code_learning_rate.unwrap_or(self.config.learning_rate));
        let (adam, step) = (self.adam, self.step);
        self.model.visit_params_mut(&mut |p| {
            let rate = if p.name.starts_with("garment.") { code_lr } else { lr };
            p.adam_update(&adam, rate, step);
        });
        Ok(StepReport { epoch: self.epoch, step: self.step, terms: sum, total, normal_active: active, grad_norm })
    }
}

/// Inference output: merged cloud with the branch of every point.
#[derive(Debug, Clone)]
pub struct Inference {
    pub cloud: PointCloudN,
    pub origin: Vec<Label>,
    pub prediction: Prediction,
}

/// Linear garment-code blend `(1 − α) a + α b`.
pub fn blend_codes(a: &[f64], b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        bail!(Argument, "cannot blend codes of lengths {} and {}", a.len(), b.len());
    }
    Ok(a.iter().zip(b).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect())
}

/// Poses the model and merges its branches to `merged_points` points.
pub fn infer(
    model: &Model,
    layout: &Layout,
    inputs: &FrameInputs,
    global_code: Option<&[f64]>,
    merged_points: usize,
    seed: u64,
) -> Result<Inference> {
    let (prediction, _) = forward(model, layout, inputs, global_code)?;
    let (cloud, origin) = merge_branches(&prediction.unclothed, &prediction.deformed, &prediction.generated, merged_points, seed)?;
    Ok(Inference { cloud, origin, prediction })
}

/// Evaluation of one frame in loss units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub chamfer: f64,
    pub normal: f64,
    /// Fraction of generated points inside the body.
    pub penetration: f64,
}

pub fn frame_metrics(inference: &Inference, scan: &PointCloudN, sdf: &MeshSdf) -> Result<FrameMetrics> {
    let m = Matching::new(&inference.cloud.points, &scan.points)?;
    let penetration = if inference.prediction.generated.is_empty() {
        0.0
    } else {
        penetration_fraction(&inference.prediction.generated.points, sdf)
    };
    Ok(FrameMetrics { chamfer: m.chamfer(), normal: m.normal_loss(inference.cloud.normals()?, scan.normals()?), penetration })
}

/// Metrics of the trainer's own (unflipped) frames.
pub fn evaluate_training_frames(trainer: &Trainer) -> Result<Vec<FrameMetrics>> {
    trainer
        .frames
        .iter()
        .map(|f| {
            let inf = infer(&trainer.model, &trainer.layout, &f.inputs, None, merge_budget(trainer, &f.inputs), trainer.config.seed)?;
            frame_metrics(&inf, &f.sample.scan, &f.inputs.sdf)
        })
        .collect()
}

fn merge_budget(trainer: &Trainer, inputs: &FrameInputs) -> usize {
    let gen = if trainer.layout.uses_generator { trainer.config.model.generator.points } else { 0 };
    trainer.config.merged_points.min(inputs.unclothed.len() + trainer.layout.deformed.len() + gen)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_exact_budget_is_union() {
        let a = PointCloudN::with_normals(vec![[0.0; 3]], vec![[0.0, 0.0, 1.0]]).unwrap();
        let b = PointCloudN::with_normals(vec![[1.0, 0.0, 0.0]], vec![[0.0, 1.0, 0.0]]).unwrap();
        let (m, o) = merge_branches(&a, &b, &empty_cloud(), 2, 3).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(o, vec![Label::Unclothed, Label::Deformed]);
        assert!(merge_branches(&a, &b, &empty_cloud(), 3, 3).is_err());
    }

    #[test]
    fn blend_endpoints() {
        let a = [1.0, 2.0];
        let b = [3.0, -1.0];
        assert_eq!(blend_codes(&a, &b, 0.0).unwrap(), a.to_vec());
        assert_eq!(blend_codes(&a, &b, 1.0).unwrap(), b.to_vec());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::paper().validate().is_ok());
        let bad = TrainConfig { normal_start_epoch: 0, ..TrainConfig::desk() };
        assert!(bad.validate().is_err());
    }
}
