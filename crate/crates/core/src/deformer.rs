//! Skinning-based local deformation: per-vertex pose features from a
//! hierarchical encoder over the canonical template (posed coordinates as
//! features), barycentric pose and garment codes per surface sample, and a
//! decoder predicting a canonical displacement and normal that are then posed
//! with the sample's blended skinning transform.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::body::{point_transforms, pose_points, skin_vertices, forward_kinematics, ArticulatedBody, Pose, PointTransform};
use crate::encoder::{EncoderCache, HierEncoder, Hierarchy};
use crate::error::{bail, Error, Result};
use crate::geometry::{barycentric_accumulate, barycentric_interpolate, barycentric_scatter, interpolate_vec3, BaryRecord};
use crate::linalg::{mat_t_vec, Vec3};
use crate::nn::{normalize_backward, normalize_rows3, softplus, softplus_backward, Dense, Init, Input, Mat, Param, Parameterized};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEncoderConfig {
    /// Number of abstracted points per level, strictly decreasing.
    pub abstraction_counts: Vec<usize>,
    /// Feature width after each level.
    pub level_widths: Vec<usize>,
    /// Neighbourhood size of every grouping.
    pub neighbors: usize,
    /// Per-vertex output width `M_p`.
    pub output_dim: usize,
}

impl PoseEncoderConfig {
    pub fn paper() -> Self {
        PoseEncoderConfig {
            abstraction_counts: vec![2048, 512, 128, 32],
            level_widths: vec![64, 128, 256, 256],
            neighbors: 16,
            output_dim: 256,
        }
    }

    pub fn desk() -> Self {
        PoseEncoderConfig { abstraction_counts: vec![512, 128, 32, 8], level_widths: vec![32, 48, 64, 64], neighbors: 16, output_dim: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.abstraction_counts.is_empty() || self.abstraction_counts.windows(2).any(|w| w[1] >= w[0]) {
            bail!(Validation, "abstraction counts must be non-empty and strictly decreasing: {:?}", self.abstraction_counts);
        }
        if self.abstraction_counts.contains(&0) {
            bail!(Validation, "abstraction counts must be positive");
        }
        if self.level_widths.len() != self.abstraction_counts.len() || self.level_widths.contains(&0) {
            bail!(Validation, "need one positive width per level, got {:?}", self.level_widths);
        }
        if self.output_dim == 0 || self.neighbors == 0 {
            bail!(Validation, "output dimension and neighbourhood size must be positive");
        }
        Ok(())
    }
}

/// Learnable garment codes: one local code per template vertex and a global code.
#[derive(Debug, Clone, PartialEq)]
pub struct GarmentCodes {
    /// `N_t × M_g`, row-major.
    pub local: Param,
    pub global: Param,
}

impl GarmentCodes {
    /// Gaussian initialization with standard deviation 0.01.
    pub fn new(num_vertices: usize, dim: usize, rng: &mut Rng) -> Self {
        let local = (0..num_vertices * dim).map(|_| 0.01 * rng.normal()).collect();
        let global = (0..dim).map(|_| 0.01 * rng.normal()).collect();
        GarmentCodes {
            local: Param::new("garment.local", vec![num_vertices, dim], local),
            global: Param::new("garment.global", vec![dim], global),
        }
    }

    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.local.len() / self.dim().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.local.len() != self.num_vertices() * self.dim() {
            bail!(Validation, "local garment codes do not tile into rows of width {}", self.dim());
        }
        if self.local.value.iter().chain(&self.global.value).any(|v| !v.is_finite()) {
            bail!(Validation, "garment codes contain non-finite values");
        }
        Ok(())
    }
}

impl Parameterized for GarmentCodes {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.local);
        f(&self.global);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.local);
        f(&mut self.global);
    }
}

/// Per-vertex pose encoder over the canonical template.
#[derive(Debug, Clone)]
pub struct PoseEncoder {
    pub config: PoseEncoderConfig,
    pub graph: Hierarchy,
    pub net: HierEncoder,
}

impl PoseEncoder {
    pub fn new(canonical_vertices: &[Vec3], config: PoseEncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let graph = Hierarchy::build(canonical_vertices, &config.abstraction_counts, config.neighbors)?;
        let net = HierEncoder::new("pose_encoder", 3, &config.level_widths, config.output_dim, true, rng);
        Ok(PoseEncoder { config, graph, net })
    }

    pub fn num_vertices(&self) -> usize {
        self.graph.positions[0].len()
    }

    /// Per-vertex features `N_t × M_p` for posed vertex positions.
    pub fn encode(&self, posed_vertices: &[Vec3]) -> Result<(Mat, EncoderCache)> {
        if posed_vertices.len() != self.num_vertices() {
            bail!(Validation, "encoder expects {} posed vertices, got {}", self.num_vertices(), posed_vertices.len());
        }
        let f0 = Mat::from_vec(posed_vertices.len(), 3, posed_vertices.iter().flatten().copied().collect());
        self.net.forward(&self.graph, &f0)
    }

    pub fn backward(&mut self, cache: &EncoderCache, d_features: &Mat) {
        self.net.backward(&self.graph, cache, d_features);
    }
}

/// Local pose code of a surface sample.
pub fn pose_code_at(bary: &BaryRecord, features: &Mat) -> Result<Vec<f64>> {
    barycentric_interpolate(&features.data, features.cols, bary)
}

/// Continuous local garment code of a surface sample.
pub fn garment_code_at(bary: &BaryRecord, codes: &GarmentCodes) -> Result<Vec<f64>> {
    barycentric_interpolate(&codes.local.value, codes.dim(), bary)
}

fn gather_codes(table: &[f64], dim: usize, bary: &[BaryRecord]) -> Mat {
    let mut out = Mat::zeros(bary.len(), dim);
    for (i, b) in bary.iter().enumerate() {
        barycentric_accumulate(table, dim, b, out.row_mut(i));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub pose_dim: usize,
    pub garment_dim: usize,
    pub width: usize,
}

/// Feed-forward decoder on `[z^p, z^g, h^g, p^c]`: four softplus layers with
/// the input re-injected at the third, then displacement and normal heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseDecoder {
    pub config: DecoderConfig,
    pub l1: Dense,
    pub l2: Dense,
    pub l3: Dense,
    pub l4: Dense,
    pub displacement: Dense,
    pub normal: Dense,
}

/// Decoder activations kept for the backward pass.
pub struct DecoderCache {
    zp: Mat,
    zg: Mat,
    hg: Vec<f64>,
    pc: Mat,
    pre: [Mat; 4],
    act: [Mat; 4],
    normals: Vec<Vec3>,
    norms: Vec<f64>,
}

/// Gradients of the decoder inputs.
pub struct DecoderGrads {
    pub zp: Mat,
    pub zg: Mat,
    pub hg: Vec<f64>,
}

/// Bias of the normal head at initialization; with zeroed weights every
/// predicted normal starts as this direction.
pub const INITIAL_NORMAL: Vec3 = [0.0, 0.0, 1.0];

impl PoseDecoder {
    pub fn new(config: DecoderConfig, rng: &mut Rng) -> Self {
        let DecoderConfig { pose_dim: p, garment_dim: g, width: w } = config;
        let inputs = [p, g, g, 3];
        let mut skip = vec![w];
        skip.extend_from_slice(&inputs);
        let mut normal = Dense::new("decoder.normal", &[w], 3, Init::Zero, rng);
        normal.bias.value.copy_from_slice(&INITIAL_NORMAL);
        PoseDecoder {
            config,
            l1: Dense::new("decoder.l1", &inputs, w, Init::Uniform, rng),
            l2: Dense::new("decoder.l2", &[w], w, Init::Uniform, rng),
            l3: Dense::new("decoder.l3", &skip, w, Init::Uniform, rng),
            l4: Dense::new("decoder.l4", &[w], w, Init::Uniform, rng),
            displacement: Dense::new("decoder.displacement", &[w], 3, Init::Zero, rng),
            normal,
        }
    }

    /// Returns displacements `r^c` and unit normals `n^c`, one per row.
    pub fn forward(&self, zp: &Mat, zg: &Mat, hg: &[f64], pc: &Mat) -> Result<(Vec<Vec3>, Vec<Vec3>, DecoderCache)> {
        let c = &self.config;
        let n = zp.rows;
        if zp.cols != c.pose_dim || zg.cols != c.garment_dim || hg.len() != c.garment_dim || pc.cols != 3 || zg.rows != n || pc.rows != n {
            bail!(
                Validation,
                "decoder inputs {}×{}, {}×{}, {}, {}×{} do not match dims ({}, {}, {}, 3)",
                zp.rows,
                zp.cols,
                zg.rows,
                zg.cols,
                hg.len(),
                pc.rows,
                pc.cols,
                c.pose_dim,
                c.garment_dim,
                c.garment_dim
            );
        }
        let pre1 = self.l1.forward(&[Input::Rows(zp), Input::Rows(zg), Input::Broadcast(hg), Input::Rows(pc)]);
        let act1 = softplus(&pre1);
        let pre2 = self.l2.forward1(&act1);
        let act2 = softplus(&pre2);
        let pre3 = self.l3.forward(&[Input::Rows(&act2), Input::Rows(zp), Input::Rows(zg), Input::Broadcast(hg), Input::Rows(pc)]);
        let act3 = softplus(&pre3);
        let pre4 = self.l4.forward1(&act3);
        let act4 = softplus(&pre4);
        let r = self.displacement.forward1(&act4);
        let raw = self.normal.forward1(&act4);
        let disp: Vec<Vec3> = (0..n).map(|i| [r.at(i, 0), r.at(i, 1), r.at(i, 2)]).collect();
        let raw3: Vec<Vec3> = (0..n).map(|i| [raw.at(i, 0), raw.at(i, 1), raw.at(i, 2)]).collect();
        let (normals, norms) = normalize_rows3(&raw3);
        let cache = DecoderCache {
            zp: zp.clone(),
            zg: zg.clone(),
            hg: hg.to_vec(),
            pc: pc.clone(),
            pre: [pre1, pre2, pre3, pre4],
            act: [act1, act2, act3, act4],
            normals: normals.clone(),
            norms,
        };
        Ok((disp, normals, cache))
    }

    /// Accumulates parameter gradients and returns input gradients, given
    /// gradients with respect to displacements and unit normals.
    pub fn backward(&mut self, cache: &DecoderCache, d_disp: &[Vec3], d_normals: &[Vec3]) -> DecoderGrads {
        let n = cache.zp.rows;
        let dr = Mat::from_vec(n, 3, d_disp.iter().flatten().copied().collect());
        let mut draw = Mat::zeros(n, 3);
        for i in 0..n {
            let g = normalize_backward(cache.normals[i], cache.norms[i], d_normals[i]);
            draw.row_mut(i).copy_from_slice(&g);
        }
        let [pre1, pre2, pre3, pre4] = &cache.pre;
        let [act1, act2, act3, act4] = &cache.act;
        let mut d4 = self.displacement.backward1(act4, &dr, true).unwrap();
        d4.add_assign(&self.normal.backward1(act4, &draw, true).unwrap());
        softplus_backward(pre4, &mut d4);
        let mut d3 = self.l4.backward1(act3, &d4, true).unwrap();
        softplus_backward(pre3, &mut d3);
        let inputs3 = [
            Input::Rows(act2),
            Input::Rows(&cache.zp),
            Input::Rows(&cache.zg),
            Input::Broadcast(&cache.hg),
            Input::Rows(&cache.pc),
        ];
        let mut g3 = self.l3.backward(&inputs3, &d3, &[true, true, true, true, false]).into_iter();
        let mut d2 = g3.next().flatten().unwrap().into_rows();
        let mut dzp = g3.next().flatten().unwrap().into_rows();
        let mut dzg = g3.next().flatten().unwrap().into_rows();
        let mut dhg = g3.next().flatten().unwrap().into_broadcast();
        softplus_backward(pre2, &mut d2);
        let mut d1 = self.l2.backward1(act1, &d2, true).unwrap();
        softplus_backward(pre1, &mut d1);
        let inputs1 = [Input::Rows(&cache.zp), Input::Rows(&cache.zg), Input::Broadcast(&cache.hg), Input::Rows(&cache.pc)];
        let mut g1 = self.l1.backward(&inputs1, &d1, &[true, true, true, false]).into_iter();
        dzp.add_assign(&g1.next().flatten().unwrap().into_rows());
        dzg.add_assign(&g1.next().flatten().unwrap().into_rows());
        for (a, b) in dhg.iter_mut().zip(g1.next().flatten().unwrap().into_broadcast()) {
            *a += b;
        }
        DecoderGrads { zp: dzp, zg: dzg, hg: dhg }
    }
}

impl Parameterized for PoseDecoder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for d in [&self.l1, &self.l2, &self.l3, &self.l4, &self.displacement, &self.normal] {
            d.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for d in [&mut self.l1, &mut self.l2, &mut self.l3, &mut self.l4, &mut self.displacement, &mut self.normal] {
            d.visit_params_mut(f);
        }
    }
}

/// Fixed per-body description of the samples handled by the deformer.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformSamples {
    pub bary: Vec<BaryRecord>,
    /// Canonical positions `p^c`.
    pub canonical: Vec<Vec3>,
}

impl DeformSamples {
    pub fn new(body: &ArticulatedBody, bary: Vec<BaryRecord>) -> Result<Self> {
        let mut canonical = Vec::with_capacity(bary.len());
        for b in &bary {
            b.validate()?;
            for &v in &b.vertex_ids {
                if v as usize >= body.num_vertices() {
                    return Err(Error::Index { index: v as usize, len: body.num_vertices() });
                }
            }
            canonical.push(interpolate_vec3(&body.canonical_vertices, b));
        }
        Ok(DeformSamples { bary, canonical })
    }

    pub fn len(&self) -> usize {
        self.bary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bary.is_empty()
    }
}

/// Posed body state for one frame.
#[derive(Debug, Clone)]
pub struct PosedBody {
    pub vertices: Vec<Vec3>,
    /// Skinning transform per sample of the associated [`DeformSamples`].
    pub transforms: Vec<PointTransform>,
}

impl PosedBody {
    pub fn new(body: &ArticulatedBody, pose: &Pose, samples: &DeformSamples) -> Result<Self> {
        let bones = forward_kinematics(body, pose)?;
        let (vertices, vt) = skin_vertices(body, &bones)?;
        let transforms = point_transforms(&samples.bary, &vt)?;
        Ok(PosedBody { vertices, transforms })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformerOutput {
    pub displacements: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub points: Vec<Vec3>,
    pub posed_normals: Vec<Vec3>,
}

/// Encoder plus decoder of the deformation branch.
#[derive(Debug, Clone)]
pub struct Deformer {
    pub encoder: PoseEncoder,
    pub decoder: PoseDecoder,
}

pub struct DeformCache {
    encoder: EncoderCache,
    decoder: DecoderCache,
    /// Interpolated local garment codes `z^g`, one row per sample.
    pub garment_codes: Mat,
}

impl Deformer {
    pub fn new(body: &ArticulatedBody, encoder: PoseEncoderConfig, garment_dim: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        let pose_dim = encoder.output_dim;
        let encoder = PoseEncoder::new(&body.canonical_vertices, encoder, rng)?;
        let decoder = PoseDecoder::new(DecoderConfig { pose_dim, garment_dim, width }, rng);
        Ok(Deformer { encoder, decoder })
    }

    pub fn forward(&self, posed: &PosedBody, samples: &DeformSamples, codes: &GarmentCodes) -> Result<(DeformerOutput, DeformCache)> {
        if codes.dim() != self.decoder.config.garment_dim || codes.num_vertices() != self.encoder.num_vertices() {
            bail!(
                Validation,
                "garment codes are {}×{}, deformer expects {}×{}",
                codes.num_vertices(),
                codes.dim(),
                self.encoder.num_vertices(),
                self.decoder.config.garment_dim
            );
        }
        if posed.transforms.len() != samples.len() {
            bail!(Validation, "{} transforms for {} samples", posed.transforms.len(), samples.len());
        }
        let (phi, enc_cache) = self.encoder.encode(&posed.vertices)?;
        let zp = gather_codes(&phi.data, phi.cols, &samples.bary);
        let zg = gather_codes(&codes.local.value, codes.dim(), &samples.bary);
        let pc = Mat::from_vec(samples.len(), 3, samples.canonical.iter().flatten().copied().collect());
        let (r, nc, dec_cache) = self.decoder.forward(&zp, &zg, &codes.global.value, &pc)?;
        let (points, posed_normals) = pose_points(&samples.canonical, &r, &nc, &posed.transforms)?;
        for (i, p) in points.iter().enumerate() {
            if !crate::linalg::is_finite(*p) {
                bail!(Numeric, "deformer produced a non-finite point for sample {i}");
            }
        }
        let out = DeformerOutput { displacements: r, normals: nc, points, posed_normals };
        Ok((out, DeformCache { encoder: enc_cache, decoder: dec_cache, garment_codes: zg }))
    }

    /// Backpropagates gradients with respect to posed points, posed normals,
    /// displacements (added directly, e.g. from a regularizer) and
    /// interpolated garment codes. Returns the gradient of the global code,
    /// which is also accumulated into `codes.global.grad`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &mut self,
        codes: &mut GarmentCodes,
        posed: &PosedBody,
        samples: &DeformSamples,
        cache: &DeformCache,
        d_points: &[Vec3],
        d_posed_normals: &[Vec3],
        d_displacements: Option<&[Vec3]>,
        d_garment_codes: Option<&Mat>,
    ) -> Vec<f64> {
        let n = samples.len();
        let mut dr = Vec::with_capacity(n);
        let mut dn = Vec::with_capacity(n);
        for i in 0..n {
            let t = &posed.transforms[i];
            let mut g = mat_t_vec(&t.affine.linear, d_points[i]);
            if let Some(extra) = d_displacements {
                g = crate::linalg::add(g, extra[i]);
            }
            dr.push(g);
            dn.push(mat_t_vec(&t.rigid.rotation, d_posed_normals[i]));
        }
        let mut grads = self.decoder.backward(&cache.decoder, &dr, &dn);
        if let Some(extra) = d_garment_codes {
            grads.zg.add_assign(extra);
        }
        let dim = codes.dim();
        for (i, b) in samples.bary.iter().enumerate() {
            barycentric_scatter(grads.zg.row(i), dim, b, &mut codes.local.grad);
        }
        for (g, d) in codes.global.grad.iter_mut().zip(&grads.hg) {
            *g += d;
        }
        let mp = grads.zp.cols;
        let mut dphi = Mat::zeros(self.encoder.num_vertices(), mp);
        for (i, b) in samples.bary.iter().enumerate() {
            barycentric_scatter(grads.zp.row(i), mp, b, &mut dphi.data);
        }
        self.encoder.backward(&cache.encoder, &dphi);
        grads.hg
    }
}

impl Parameterized for Deformer {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.net.visit_params(f);
        self.decoder.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.net.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
    }
}

/// Full deformation chain for one pose: encode, interpolate codes, decode and pose.
pub fn deform(
    body: &ArticulatedBody,
    pose: &Pose,
    samples: &DeformSamples,
    codes: &GarmentCodes,
    deformer: &Deformer,
) -> Result<DeformerOutput> {
    let posed = PosedBody::new(body, pose, samples)?;
    Ok(deformer.forward(&posed, samples, codes)?.0)
}
