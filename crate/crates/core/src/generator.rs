//! Skinning-free, part-aware generator for loose garment regions. Points
//! sampled from the posed leg parts are encoded by one shared set encoder,
//! max pooled into a part-based pose code, and together with the global
//! garment code they modulate `K` patch decoders that morph a fixed lattice on
//! the unit square into posed-space points with normals.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::body::{forward_kinematics, skin_vertices, ArticulatedBody, Pose};
use crate::encoder::{EncoderCache, HierEncoder, Hierarchy};
use crate::error::{bail, Result};
use crate::geometry::{sample_surface, PointCloudN, TriMesh};
use crate::linalg::Vec3;
use crate::nn::{
    max_pool_groups, normalize_backward, normalize_rows3, softplus_scalar, sigmoid, Dense, Init, Input, Mat, Param,
    Parameterized,
};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Number of patches `K`.
    pub patches: usize,
    /// Total generated points `N_g`; a multiple of `patches`.
    pub points: usize,
    /// Hidden width of each patch decoder.
    pub width: usize,
    /// Number of modulated hidden layers per patch decoder.
    pub hidden_layers: usize,
    /// Part-based pose code width `M_p`.
    pub pose_dim: usize,
    /// Garment code width `M_g`.
    pub garment_dim: usize,
    /// Body parts whose posed surface conditions the generator.
    pub parts: Vec<String>,
    /// Points sampled from each part.
    pub part_points: usize,
    pub part_counts: Vec<usize>,
    pub part_widths: Vec<usize>,
    pub neighbors: usize,
}

pub fn leg_parts() -> Vec<String> {
    ["l_upper_leg", "l_lower_leg", "r_upper_leg", "r_lower_leg"].iter().map(|s| String::from(*s)).collect()
}

impl GeneratorConfig {
    /// Dress-scale configuration (use `points = 16384` for skirts).
    pub fn paper() -> Self {
        GeneratorConfig {
            patches: 8,
            points: 32768,
            width: 256,
            hidden_layers: 3,
            pose_dim: 256,
            garment_dim: 64,
            parts: leg_parts(),
            part_points: 2048,
            part_counts: vec![512, 128, 32],
            part_widths: vec![64, 128, 256],
            neighbors: 16,
        }
    }

    pub fn desk() -> Self {
        GeneratorConfig {
            patches: 4,
            points: 1024,
            width: 64,
            hidden_layers: 3,
            pose_dim: 64,
            garment_dim: 64,
            parts: leg_parts(),
            part_points: 256,
            part_counts: vec![64, 16],
            part_widths: vec![32, 64],
            neighbors: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches == 0 || self.points == 0 || self.points % self.patches != 0 {
            bail!(Validation, "patch count {} must divide the point count {}", self.patches, self.points);
        }
        if self.width == 0 || self.hidden_layers == 0 || self.pose_dim == 0 {
            bail!(Validation, "generator widths must be positive");
        }
        if self.parts.is_empty() || self.part_points == 0 {
            bail!(Validation, "generator needs at least one conditioning part with points");
        }
        if self.part_counts.len() != self.part_widths.len() || self.part_counts.is_empty() {
            bail!(Validation, "part encoder needs one width per level");
        }
        Ok(())
    }

    pub fn points_per_patch(&self) -> usize {
        self.points / self.patches
    }

    pub fn style_dim(&self) -> usize {
        self.pose_dim + self.garment_dim
    }
}

/// Lattice shape `(rows, cols)` for `n` points: the most square factorization.
pub fn grid_shape(n: usize) -> (usize, usize) {
    let mut rows = crate::linalg::sqrt(n as f64) as usize;
    while rows > 1 && n % rows != 0 {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, n / rows)
}

/// Regular lattice on `[0,1]²`, row-major, `n` points.
pub fn unit_grid(n: usize) -> Mat {
    let (rows, cols) = grid_shape(n);
    let coord = |i: usize, m: usize| if m > 1 { i as f64 / (m - 1) as f64 } else { 0.5 };
    let mut g = Mat::zeros(n, 2);
    for r in 0..rows {
        for c in 0..cols {
            g.row_mut(r * cols + c).copy_from_slice(&[coord(c, cols), coord(r, rows)]);
        }
    }
    g
}

/// Area-weighted samples from each named part of the posed body.
pub fn sample_part_points_posed(
    body: &ArticulatedBody,
    posed_vertices: &[Vec3],
    part_names: &[String],
    n_per_part: usize,
    seed: u64,
) -> Result<Vec<PointCloudN>> {
    let mut clouds = Vec::with_capacity(part_names.len());
    for (k, name) in part_names.iter().enumerate() {
        let part = body.part_id(name)?;
        let faces: Vec<[u32; 3]> =
            (0..body.faces.len()).filter(|&f| body.face_part(f) == part).map(|f| body.faces[f]).collect();
        if faces.is_empty() {
            bail!(Argument, "part `{name}` has no faces");
        }
        let mesh = TriMesh::new(posed_vertices.to_vec(), faces)?;
        let stream = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k as u64 + 1);
        clouds.push(sample_surface(&mesh, n_per_part, stream)?.0);
    }
    Ok(clouds)
}

pub fn sample_part_points(
    body: &ArticulatedBody,
    pose: &Pose,
    part_names: &[String],
    n_per_part: usize,
    seed: u64,
) -> Result<Vec<PointCloudN>> {
    let bones = forward_kinematics(body, pose)?;
    let (posed, _) = skin_vertices(body, &bones)?;
    sample_part_points_posed(body, &posed, part_names, n_per_part, seed)
}

/// Per-part features and their element-wise maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct PartPoseCode {
    /// `K_b × M_p`.
    pub parts: Mat,
    pub pooled: Vec<f64>,
    /// Part that supplied each pooled channel.
    pub argmax: Vec<u32>,
}

pub struct PartCache {
    hierarchies: Vec<Hierarchy>,
    caches: Vec<EncoderCache>,
}

/// Shared encoder applied to every part cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PartEncoder {
    pub counts: Vec<usize>,
    pub neighbors: usize,
    pub net: HierEncoder,
}

impl PartEncoder {
    pub fn new(config: &GeneratorConfig, rng: &mut Rng) -> Self {
        PartEncoder {
            counts: config.part_counts.clone(),
            neighbors: config.neighbors,
            net: HierEncoder::new("part_encoder", 3, &config.part_widths, config.pose_dim, false, rng),
        }
    }

    pub fn encode(&self, clouds: &[PointCloudN]) -> Result<(PartPoseCode, PartCache)> {
        if clouds.is_empty() {
            bail!(Argument, "no part clouds to encode");
        }
        let mut parts = Mat::zeros(clouds.len(), self.net.out_dim);
        let mut hierarchies = Vec::with_capacity(clouds.len());
        let mut caches = Vec::with_capacity(clouds.len());
        for (k, c) in clouds.iter().enumerate() {
            if c.is_empty() {
                bail!(Argument, "part cloud {k} is empty");
            }
            let h = Hierarchy::build(&c.points, &self.counts, self.neighbors)?;
            let f0 = Mat::from_vec(c.len(), 3, c.points.iter().flatten().copied().collect());
            let (code, cache) = self.net.forward(&h, &f0)?;
            parts.row_mut(k).copy_from_slice(&code.data);
            hierarchies.push(h);
            caches.push(cache);
        }
        let (pooled, argmax) = max_pool_groups(&parts, parts.rows);
        Ok((PartPoseCode { parts, pooled: pooled.data, argmax }, PartCache { hierarchies, caches }))
    }

    pub fn backward(&mut self, code: &PartPoseCode, cache: &PartCache, d_pooled: &[f64]) {
        let dim = d_pooled.len();
        for k in 0..code.parts.rows {
            let mut d = Mat::zeros(1, dim);
            let mut any = false;
            for c in 0..dim {
                if code.argmax[c] as usize == k {
                    d.data[c] = d_pooled[c];
                    any = true;
                }
            }
            if any {
                self.net.backward(&cache.hierarchies[k], &cache.caches[k], &d);
            }
        }
    }
}

/// Style-modulated decoder of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDecoder {
    pub layers: Vec<Dense>,
    /// Per layer, maps the style vector to `[γ, β]`.
    pub modulation: Vec<Dense>,
    /// Six outputs: position then raw normal.
    pub head: Dense,
}

struct PatchCache {
    /// Layer inputs; entry 0 is the lattice.
    inputs: Vec<Mat>,
    /// Affine pre-activations before modulation.
    pre: Vec<Mat>,
    /// Modulated pre-activations.
    modulated: Vec<Mat>,
    gamma_beta: Vec<Vec<f64>>,
    normals: Vec<Vec3>,
    norms: Vec<f64>,
}

pub struct GeneratorCache {
    style: Vec<f64>,
    patches: Vec<PatchCache>,
}

/// The free-form generator: patch decoders plus the part encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub part_encoder: PartEncoder,
    pub patches: Vec<PatchDecoder>,
    pub grid: Mat,
}

impl Generator {
    /// `anchor` initializes the position bias of every patch, typically the
    /// centroid of the region the generator replaces.
    pub fn new(config: GeneratorConfig, anchor: Vec3, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let part_encoder = PartEncoder::new(&config, rng);
        let w = config.width;
        let style = config.style_dim();
        let mut patches = Vec::with_capacity(config.patches);
        for k in 0..config.patches {
            let mut layers = Vec::with_capacity(config.hidden_layers);
            let mut modulation = Vec::with_capacity(config.hidden_layers);
            for l in 0..config.hidden_layers {
                let fan_in = if l == 0 { 2 } else { w };
                layers.push(Dense::new(&format!("generator.patch{k}.l{l}"), &[fan_in], w, Init::Uniform, rng));
                modulation.push(Dense::new(&format!("generator.patch{k}.style{l}"), &[style], 2 * w, Init::Uniform, rng));
            }
            let mut head = Dense::new(&format!("generator.patch{k}.head"), &[w], 6, Init::Uniform, rng);
            for v in head.blocks[0].value.iter_mut() {
                *v *= 0.1;
            }
            head.bias.value[..3].copy_from_slice(&anchor);
            head.bias.value[3..].copy_from_slice(&crate::deformer::INITIAL_NORMAL);
            patches.push(PatchDecoder { layers, modulation, head });
        }
        let grid = unit_grid(config.points_per_patch());
        Ok(Generator { config, part_encoder, patches, grid })
    }

    /// Generated points and unit normals in posed space, patch-major.
    pub fn generate(&self, pose_code: &[f64], global_code: &[f64]) -> Result<(PointCloudN, GeneratorCache)> {
        let c = &self.config;
        if pose_code.len() != c.pose_dim || global_code.len() != c.garment_dim {
            bail!(
                Validation,
                "generator codes have dims ({}, {}), expected ({}, {})",
                pose_code.len(),
                global_code.len(),
                c.pose_dim,
                c.garment_dim
            );
        }
        let mut style = pose_code.to_vec();
        style.extend_from_slice(global_code);
        let w = c.width;
        let mut points = Vec::with_capacity(c.points);
        let mut normals = Vec::with_capacity(c.points);
        let mut caches = Vec::with_capacity(self.patches.len());
        for (k, patch) in self.patches.iter().enumerate() {
            let mut inputs = vec![self.grid.clone()];
            let mut pres = Vec::with_capacity(patch.layers.len());
            let mut mods = Vec::with_capacity(patch.layers.len());
            let mut gbs = Vec::with_capacity(patch.layers.len());
            for (layer, m) in patch.layers.iter().zip(&patch.modulation) {
                let gb = m.forward(&[Input::Broadcast(&style)]).data;
                let pre = layer.forward1(inputs.last().unwrap());
                let mut modulated = pre.clone();
                for r in 0..modulated.rows {
                    for (j, v) in modulated.row_mut(r).iter_mut().enumerate() {
                        *v = (1.0 + gb[j]) * *v + gb[w + j];
                    }
                }
                let act = Mat {
                    rows: modulated.rows,
                    cols: modulated.cols,
                    data: modulated.data.iter().map(|&x| softplus_scalar(x)).collect(),
                };
                pres.push(pre);
                mods.push(modulated);
                gbs.push(gb);
                inputs.push(act);
            }
            let out = patch.head.forward1(inputs.last().unwrap());
            let raw: Vec<Vec3> = (0..out.rows).map(|i| [out.at(i, 3), out.at(i, 4), out.at(i, 5)]).collect();
            let (nrm, norms) = normalize_rows3(&raw);
            for i in 0..out.rows {
                let p = [out.at(i, 0), out.at(i, 1), out.at(i, 2)];
                if !crate::linalg::is_finite(p) || !crate::linalg::is_finite(nrm[i]) {
                    bail!(Numeric, "generator produced a non-finite output in patch {k}");
                }
                points.push(p);
            }
            normals.extend_from_slice(&nrm);
            caches.push(PatchCache { inputs, pre: pres, modulated: mods, gamma_beta: gbs, normals: nrm, norms });
        }
        Ok((PointCloudN { points, normals: Some(normals) }, GeneratorCache { style, patches: caches }))
    }

    /// Accumulates patch-decoder gradients and returns the gradients of the
    /// pose code and the global garment code.
    pub fn backward(&mut self, cache: &GeneratorCache, d_points: &[Vec3], d_normals: &[Vec3]) -> (Vec<f64>, Vec<f64>) {
        let w = self.config.width;
        let n = self.config.points_per_patch();
        let mut d_style = vec![0.0; cache.style.len()];
        for (k, (patch, pc)) in self.patches.iter_mut().zip(&cache.patches).enumerate() {
            let mut d_out = Mat::zeros(n, 6);
            for i in 0..n {
                let g = normalize_backward(pc.normals[i], pc.norms[i], d_normals[k * n + i]);
                let row = d_out.row_mut(i);
                row[..3].copy_from_slice(&d_points[k * n + i]);
                row[3..].copy_from_slice(&g);
            }
            let last = pc.inputs.len() - 1;
            let mut d_act = patch.head.backward1(&pc.inputs[last], &d_out, true).unwrap();
            for l in (0..patch.layers.len()).rev() {
                let gb = &pc.gamma_beta[l];
                let mut d_gb = Mat::zeros(1, 2 * w);
                let mut d_pre = d_act;
                for r in 0..n {
                    let pre_row = pc.pre[l].row(r);
                    let mod_row = pc.modulated[l].row(r);
                    let drow = d_pre.row_mut(r);
                    for j in 0..w {
                        let dm = drow[j] * sigmoid(mod_row[j]);
                        d_gb.data[j] += dm * pre_row[j];
                        d_gb.data[w + j] += dm;
                        drow[j] = dm * (1.0 + gb[j]);
                    }
                }
                let ds = patch.modulation[l].backward(&[Input::Broadcast(&cache.style)], &d_gb, &[true]);
                if let Some(g) = ds.into_iter().next().flatten() {
                    for (a, b) in d_style.iter_mut().zip(g.into_broadcast()) {
                        *a += b;
                    }
                }
                let need = l > 0;
                let dx = patch.layers[l].backward1(&pc.inputs[l], &d_pre, need);
                d_act = dx.unwrap_or_else(|| Mat::zeros(0, 0));
            }
        }
        let hg = d_style.split_off(self.config.pose_dim);
        (d_style, hg)
    }
}

impl Parameterized for Generator {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.part_encoder.net.visit_params(f);
        for p in &self.patches {
            for (l, m) in p.layers.iter().zip(&p.modulation) {
                l.visit_params(f);
                m.visit_params(f);
            }
            p.head.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.part_encoder.net.visit_params_mut(f);
        for p in &mut self.patches {
            for (l, m) in p.layers.iter_mut().zip(p.modulation.iter_mut()) {
                l.visit_params_mut(f);
                m.visit_params_mut(f);
            }
            p.head.visit_params_mut(f);
        }
    }
}
