//! Procedural test subject: a capsule-limbed articulated figure with an
//! analytic region oracle, a skirt whose shape depends on the pose, a pose
//! sampler, and oracle masks standing in for a segmentation model.
//!
//! Axes: `+y` up, `+z` forward (the front camera looks along `−z`), the
//! figure's left side at `+x`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::body::{forward_kinematics, skin_vertices, ArticulatedBody, Pose};
use crate::cutmap::{render_normal_map, Label, OrthoCamera, Render, NO_POINT};
use crate::error::{bail, Result};
use crate::geometry::{sample_surface, BaryRecord, MeshSdf, PointCloudN, TriMesh};
use crate::linalg::{add, cross, dist2, dot, mat_vec, norm, normalize, scale, sub, Vec3};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkirtKind {
    Long,
    Short,
    None,
}

/// Dimensions of the figure, in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureSpec {
    pub lower_leg_length: f64,
    pub upper_leg_length: f64,
    /// Lateral offset of each hip from the midline.
    pub hip_offset: f64,
    pub thigh_radius: f64,
    pub shin_radius: f64,
    pub pelvis_radius: f64,
    pub torso_radius: f64,
    pub torso_length: f64,
    pub head_radius: f64,
    /// Clearance between neighbouring capsules in the rest pose.
    pub gap: f64,
    /// Vertices around each ring.
    pub segments: usize,
    /// Rings per hemispherical cap.
    pub cap_rings: usize,
    /// Target spacing of cylinder rings.
    pub ring_spacing: f64,
    /// Falloff of skinning weights with distance to other parts.
    pub skin_falloff: f64,
}

impl Default for FigureSpec {
    fn default() -> Self {
        FigureSpec {
            lower_leg_length: 0.45,
            upper_leg_length: 0.42,
            hip_offset: 0.1,
            thigh_radius: 0.06,
            shin_radius: 0.045,
            pelvis_radius: 0.085,
            torso_radius: 0.12,
            torso_length: 0.28,
            head_radius: 0.1,
            gap: 0.02,
            segments: 24,
            cap_rings: 6,
            ring_spacing: 0.025,
            skin_falloff: 0.03,
        }
    }
}

impl FigureSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.lower_leg_length,
            self.upper_leg_length,
            self.hip_offset,
            self.thigh_radius,
            self.shin_radius,
            self.pelvis_radius,
            self.torso_radius,
            self.torso_length,
            self.head_radius,
            self.gap,
            self.ring_spacing,
            self.skin_falloff,
        ];
        if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) || self.segments < 3 || self.cap_rings < 1 {
            bail!(Argument, "figure dimensions must be positive: {self:?}");
        }
        if self.thigh_radius >= self.hip_offset {
            bail!(Argument, "thighs would overlap: radius {} ≥ hip offset {}", self.thigh_radius, self.hip_offset);
        }
        if 2.0 * self.shin_radius + self.gap >= self.lower_leg_length || 2.0 * self.thigh_radius + self.gap >= self.upper_leg_length {
            bail!(Argument, "leg segments too short for their radii");
        }
        Ok(())
    }
}

/// A capsule: segment `a`–`b` swept by a sphere of `radius`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
    pub part: u16,
}

impl Capsule {
    pub fn axis_distance(&self, p: Vec3) -> f64 {
        let ab = sub(self.b, self.a);
        let l2 = dot(ab, ab);
        let t = if l2 > 0.0 { (dot(sub(p, self.a), ab) / l2).clamp(0.0, 1.0) } else { 0.0 };
        norm(sub(p, add(self.a, scale(ab, t))))
    }
}

/// Skirt geometry shared by the simulator and the region oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkirtParams {
    /// Height of the waist above the pelvis joint (usually 0: hung at the joint).
    pub waist_offset: f64,
    /// Drop from waist to hem.
    pub length: f64,
    pub waist_radius: f64,
    pub hem_radius: f64,
    /// Minimum radial clearance kept from the body.
    pub clearance: f64,
    /// Wrinkle amplitude at the hem; it grows linearly from zero at the waist.
    pub wrinkle_amplitude: f64,
    pub frequencies: [f64; 3],
    pub weights: [f64; 3],
    /// Phase shift per meter of knee separation, per harmonic.
    pub knee_coupling: [f64; 3],
}

/// Analytic region labels of the rest-pose surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionOracle {
    pub waist_y: f64,
    /// `None` when there is no skirt.
    pub hem_y: Option<f64>,
    pub skirt_parts: Vec<u16>,
    pub unclothed_parts: Vec<u16>,
}

impl RegionOracle {
    /// Label of a rest-pose surface point on `part`.
    pub fn label(&self, p: Vec3, part: u16) -> Label {
        if self.unclothed_parts.contains(&part) {
            return Label::Unclothed;
        }
        match self.hem_y {
            Some(hem) if self.skirt_parts.contains(&part) && p[1] <= self.waist_y && p[1] >= hem => Label::Generated,
            _ => Label::Deformed,
        }
    }
}

/// The synthetic subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub spec: FigureSpec,
    pub kind: SkirtKind,
    pub body: ArticulatedBody,
    pub capsules: Vec<Capsule>,
    pub oracle: RegionOracle,
    pub skirt: Option<SkirtParams>,
    pub unclothed_parts: Vec<String>,
}

pub const JOINT_NAMES: [&str; 6] = ["pelvis", "l_upper_leg", "l_lower_leg", "r_upper_leg", "r_lower_leg", "torso"];
pub const PART_NAMES: [&str; 7] = ["pelvis", "l_upper_leg", "l_lower_leg", "r_upper_leg", "r_lower_leg", "torso", "head"];
const HEAD: u16 = 6;

/// Closed capsule mesh with outward winding, appended to `verts`/`faces`.
fn capsule_mesh(c: &Capsule, spec: &FigureSpec, verts: &mut Vec<Vec3>, faces: &mut Vec<[u32; 3]>) {
    let axis_v = sub(c.b, c.a);
    let len = norm(axis_v);
    let axis = if len > 0.0 { scale(axis_v, 1.0 / len) } else { [0.0, 1.0, 0.0] };
    let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let e1 = normalize(cross(axis, helper));
    let e2 = cross(axis, e1);
    let s = spec.segments;
    // rings from the `a` pole to the `b` pole as (axial offset from a, radius)
    let mut rings: Vec<(f64, f64)> = Vec::new();
    let h = spec.cap_rings;
    for i in 1..=h {
        let phi = -PI / 2.0 + PI / 2.0 * i as f64 / h as f64;
        rings.push((c.radius * libm::sin(phi), c.radius * libm::cos(phi)));
    }
    if len > 0.0 {
        let n_body = libm::ceil(len / spec.ring_spacing).max(1.0) as usize;
        for i in 1..=n_body {
            rings.push((len * i as f64 / n_body as f64, c.radius));
        }
    }
    for i in 1..h {
        let phi = PI / 2.0 * i as f64 / h as f64;
        rings.push((len + c.radius * libm::sin(phi), c.radius * libm::cos(phi)));
    }
    let base = verts.len() as u32;
    verts.push(sub(c.a, scale(axis, c.radius)));
    for &(t, r) in &rings {
        let center = add(c.a, scale(axis, t));
        for k in 0..s {
            let ang = 2.0 * PI * k as f64 / s as f64;
            let dir = add(scale(e1, libm::cos(ang)), scale(e2, libm::sin(ang)));
            verts.push(add(center, scale(dir, r)));
        }
    }
    verts.push(add(c.b, scale(axis, c.radius)));
    let top = verts.len() as u32 - 1;
    let ring = |i: usize, k: usize| base + 1 + (i * s + k % s) as u32;
    // winding: (e1, e2, axis) is right-handed, so increasing k turns counter-clockwise about the axis
    for k in 0..s {
        faces.push([base, ring(0, k + 1), ring(0, k)]);
    }
    for i in 0..rings.len() - 1 {
        for k in 0..s {
            faces.push([ring(i, k), ring(i, k + 1), ring(i + 1, k + 1)]);
            faces.push([ring(i, k), ring(i + 1, k + 1), ring(i + 1, k)]);
        }
    }
    let last = rings.len() - 1;
    for k in 0..s {
        faces.push([ring(last, k), ring(last, k + 1), top]);
    }
}

/// Builds the figure and its region oracle.
pub fn make_figure(spec: &FigureSpec, kind: SkirtKind) -> Result<Figure> {
    spec.validate()?;
    let g = spec.gap;
    let knee_y = spec.lower_leg_length;
    let hip_y = knee_y + spec.upper_leg_length;
    let pelvis_y = hip_y + g + spec.pelvis_radius;
    let torso_y = pelvis_y + spec.pelvis_radius + g;
    let torso_top = torso_y + 2.0 * spec.torso_radius + spec.torso_length;
    let head_y = torso_top + g + spec.head_radius;
    let h = spec.hip_offset;
    let joints = vec![
        [0.0, pelvis_y, 0.0],
        [h, hip_y, 0.0],
        [h, knee_y, 0.0],
        [-h, hip_y, 0.0],
        [-h, knee_y, 0.0],
        [0.0, torso_y, 0.0],
    ];
    let parent = vec![0, 0, 1, 0, 3, 0];
    let leg = |x: f64, part: u16| -> [Capsule; 2] {
        [
            Capsule {
                a: [x, knee_y + g / 2.0 + spec.thigh_radius, 0.0],
                b: [x, hip_y - spec.thigh_radius, 0.0],
                radius: spec.thigh_radius,
                part,
            },
            Capsule {
                a: [x, spec.shin_radius, 0.0],
                b: [x, knee_y - g / 2.0 - spec.shin_radius, 0.0],
                radius: spec.shin_radius,
                part: part + 1,
            },
        ]
    };
    let [lt, ls] = leg(h, 1);
    let [rt, rs] = leg(-h, 3);
    let capsules = vec![
        Capsule { a: [-h, pelvis_y, 0.0], b: [h, pelvis_y, 0.0], radius: spec.pelvis_radius, part: 0 },
        lt,
        ls,
        rt,
        rs,
        Capsule {
            a: [0.0, torso_y + spec.torso_radius, 0.0],
            b: [0.0, torso_y + spec.torso_radius + spec.torso_length, 0.0],
            radius: spec.torso_radius,
            part: 5,
        },
        Capsule { a: [0.0, head_y, 0.0], b: [0.0, head_y, 0.0], radius: spec.head_radius, part: HEAD },
    ];
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    let mut part_labels = Vec::new();
    for c in &capsules {
        let before = verts.len();
        capsule_mesh(c, spec, &mut verts, &mut faces);
        part_labels.extend(core::iter::repeat_n(c.part, verts.len() - before));
    }
    // skinning: each joint owns the capsule of the same index; weights fall off
    // with distance to the other capsules' surfaces, the head follows the torso
    let nj = joints.len();
    let mut skin_weights = vec![0.0; verts.len() * nj];
    for (v, p) in verts.iter().enumerate() {
        let row = &mut skin_weights[v * nj..(v + 1) * nj];
        if part_labels[v] == HEAD {
            row[5] = 1.0;
            continue;
        }
        let mut total = 0.0;
        for j in 0..nj {
            let d = (capsules[j].axis_distance(*p) - capsules[j].radius).max(0.0);
            let w = libm::exp(-(d / spec.skin_falloff) * (d / spec.skin_falloff));
            row[j] = w;
            total += w;
        }
        row.iter_mut().for_each(|w| *w /= total);
    }
    let body = ArticulatedBody {
        canonical_vertices: verts,
        faces,
        joints,
        parent,
        joint_names: JOINT_NAMES.iter().map(|s| String::from(*s)).collect(),
        skin_weights,
        part_labels,
        part_names: PART_NAMES.iter().map(|s| String::from(*s)).collect(),
    };
    body.validate()?;
    let lateral = h + spec.pelvis_radius;
    let (skirt, unclothed): (Option<SkirtParams>, &[&str]) = match kind {
        SkirtKind::None => (None, &["head"]),
        SkirtKind::Long => (Some(skirt_params(pelvis_y - 0.2, lateral, 0.3)), &["head"]),
        SkirtKind::Short => (Some(skirt_params(pelvis_y - knee_y - 0.15, lateral, 0.25)), &["head", "l_lower_leg", "r_lower_leg"]),
    };
    let unclothed_parts: Vec<String> = unclothed.iter().map(|s| String::from(*s)).collect();
    let oracle = RegionOracle {
        waist_y: pelvis_y,
        hem_y: skirt.as_ref().map(|s| pelvis_y - s.length),
        skirt_parts: vec![0, 1, 2, 3, 4],
        unclothed_parts: unclothed_parts.iter().map(|n| body.part_id(n)).collect::<Result<_>>()?,
    };
    Ok(Figure { spec: spec.clone(), kind, body, capsules, oracle, skirt, unclothed_parts })
}

fn skirt_params(length: f64, lateral: f64, hem_radius: f64) -> SkirtParams {
    SkirtParams {
        waist_offset: 0.0,
        length,
        waist_radius: lateral + 0.015,
        hem_radius,
        clearance: 0.015,
        wrinkle_amplitude: 0.012,
        frequencies: [5.0, 9.0, 14.0],
        weights: [1.0, 0.5, 0.3],
        knee_coupling: [20.0, 35.0, 50.0],
    }
}

impl Figure {
    /// Analytic label of every vertex-interpolated rest-pose sample.
    pub fn oracle_labels(&self, samples: &[BaryRecord]) -> Vec<Label> {
        samples
            .iter()
            .map(|b| {
                let p = crate::geometry::interpolate_vec3(&self.body.canonical_vertices, b);
                self.oracle.label(p, self.body.part_labels[b.vertex_ids[0] as usize])
            })
            .collect()
    }

    /// Rest-pose surface area.
    pub fn surface_area(&self) -> f64 {
        let m = self.body.canonical_mesh();
        (0..m.faces.len()).map(|f| m.face_area(f)).sum()
    }
}

/// World positions of the posed joints.
pub fn posed_joints(body: &ArticulatedBody, pose: &Pose) -> Result<Vec<Vec3>> {
    let bones = forward_kinematics(body, pose)?;
    Ok(bones.iter().zip(&body.joints).map(|(t, j)| t.apply_point(*j)).collect())
}

/// Random pose as per-joint axis-angle vectors: small root yaw, hip flexion
/// and abduction, knee bends, torso sway.
pub fn sample_axis_angles(body: &ArticulatedBody, rng: &mut Rng) -> Result<Vec<Vec3>> {
    let deg = PI / 180.0;
    let mut aa = vec![[0.0; 3]; body.num_joints()];
    aa[body.joint_id("pelvis")?] = [0.0, rng.range(-10.0, 10.0) * deg, 0.0];
    aa[body.joint_id("l_upper_leg")?] = [rng.range(-35.0, 25.0) * deg, 0.0, rng.range(-5.0, 20.0) * deg];
    aa[body.joint_id("r_upper_leg")?] = [rng.range(-35.0, 25.0) * deg, 0.0, -rng.range(-5.0, 20.0) * deg];
    aa[body.joint_id("l_lower_leg")?] = [rng.range(0.0, 60.0) * deg, 0.0, 0.0];
    aa[body.joint_id("r_lower_leg")?] = [rng.range(0.0, 60.0) * deg, 0.0, 0.0];
    aa[body.joint_id("torso")?] = [rng.range(-10.0, 10.0) * deg, 0.0, rng.range(-5.0, 5.0) * deg];
    Ok(aa)
}

pub fn sample_pose(body: &ArticulatedBody, rng: &mut Rng) -> Result<Pose> {
    Ok(Pose::from_axis_angle(&sample_axis_angles(body, rng)?, [0.0; 3]))
}

/// Wrinkle phases drawn from `seed`.
pub fn wrinkle_phases(seed: u64) -> [f64; 3] {
    let mut r = Rng::derive(seed, 0x5c1a7);
    [r.range(0.0, 2.0 * PI), r.range(0.0, 2.0 * PI), r.range(0.0, 2.0 * PI)]
}

/// Posed-body state used to evaluate the skirt surface.
struct SkirtFrame<'a> {
    params: &'a SkirtParams,
    center: Vec3,
    /// Horizontal basis of the pelvis (rest `+x` and `+z` after the root rotation).
    ex: Vec3,
    ez: Vec3,
    phases: [f64; 3],
    knee_distance: f64,
    mesh: &'a TriMesh,
    /// Faces of the skirted parts, bucketed by height.
    buckets: Vec<Vec<usize>>,
    y0: f64,
    bucket_h: f64,
    amplitude: f64,
}

impl SkirtFrame<'_> {
    fn cone_radius(&self, s: f64) -> f64 {
        self.params.waist_radius + s * (self.params.hem_radius - self.params.waist_radius)
    }

    fn wrinkle(&self, theta: f64, s: f64) -> f64 {
        let p = self.params;
        let mut w = 0.0;
        for h in 0..3 {
            w += p.weights[h] * libm::sin(p.frequencies[h] * theta + self.phases[h] + p.knee_coupling[h] * self.knee_distance);
        }
        s * self.amplitude * w
    }

    fn direction(&self, theta: f64) -> Vec3 {
        add(scale(self.ex, libm::cos(theta)), scale(self.ez, libm::sin(theta)))
    }

    fn height(&self, s: f64) -> f64 {
        self.center[1] + self.params.waist_offset - s * self.params.length
    }

    /// Farthest body crossing of the horizontal ray from the skirt axis.
    fn body_extent(&self, theta: f64, y: f64) -> f64 {
        let origin = [self.center[0], y, self.center[2]];
        let dir = self.direction(theta);
        let b = libm::floor((y - self.y0) / self.bucket_h);
        if b < 0.0 || b as usize >= self.buckets.len() {
            return 0.0;
        }
        let mut best = 0.0f64;
        for &f in &self.buckets[b as usize] {
            let t = self.mesh.triangle(f);
            if let Some(d) = crate::geometry::ray_triangle(origin, dir, t[0], t[1], t[2]) {
                if d > best {
                    best = d;
                }
            }
        }
        best
    }

    fn radius(&self, theta: f64, s: f64) -> f64 {
        let cone = self.cone_radius(s) + self.wrinkle(theta, s);
        let body = self.body_extent(theta, self.height(s));
        if body > 0.0 {
            cone.max(body + self.params.clearance)
        } else {
            cone
        }
    }

    fn point(&self, theta: f64, s: f64, r: f64) -> Vec3 {
        let d = self.direction(theta);
        [self.center[0] + r * d[0], self.height(s), self.center[2] + r * d[2]]
    }

    fn surface(&self, theta: f64, s: f64) -> Vec3 {
        self.point(theta, s, self.radius(theta, s))
    }
}

fn skirt_frame<'a>(figure: &'a Figure, params: &'a SkirtParams, pose: &Pose, mesh: &'a TriMesh, seed: u64, amplitude: f64) -> Result<SkirtFrame<'a>> {
    let body = &figure.body;
    let bones = forward_kinematics(body, pose)?;
    let joints: Vec<Vec3> = bones.iter().zip(&body.joints).map(|(t, j)| t.apply_point(*j)).collect();
    let root = &bones[0].rotation;
    let flat = |v: Vec3| normalize([v[0], 0.0, v[2]]);
    let ex = flat(mat_vec(root, [1.0, 0.0, 0.0]));
    let ez = [-ex[2], 0.0, ex[0]];
    let ez = if dot(ez, flat(mat_vec(root, [0.0, 0.0, 1.0]))) < 0.0 { scale(ez, -1.0) } else { ez };
    let knee_distance = norm(sub(joints[body.joint_id("l_lower_leg")?], joints[body.joint_id("r_lower_leg")?]));
    let center = joints[0];
    let y_top = center[1] + params.waist_offset + 0.01;
    let y0 = center[1] + params.waist_offset - params.length - 0.01;
    let bucket_h = 0.01;
    let nb = libm::ceil((y_top - y0) / bucket_h) as usize;
    let mut buckets = vec![Vec::new(); nb];
    let skirted = &figure.oracle.skirt_parts;
    for f in 0..mesh.faces.len() {
        if !skirted.contains(&body.face_part(f)) {
            continue;
        }
        let t = mesh.triangle(f);
        let lo = t.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let hi = t.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        if hi < y0 || lo > y_top {
            continue;
        }
        let b0 = libm::floor((lo - y0) / bucket_h).max(0.0) as usize;
        let b1 = (libm::floor((hi - y0) / bucket_h) as usize).min(nb - 1);
        for b in buckets.iter_mut().take(b1 + 1).skip(b0) {
            b.push(f);
        }
    }
    Ok(SkirtFrame {
        params,
        center,
        ex,
        ez,
        phases: wrinkle_phases(seed),
        knee_distance,
        mesh,
        buckets,
        y0,
        bucket_h,
        amplitude,
    })
}

/// Points of the skirt sheet only, with outward normals. `amplitude`
/// overrides the wrinkle amplitude of the figure's skirt.
pub fn skirt_sheet(figure: &Figure, pose: &Pose, garment_seed: u64, sample_seed: u64, n: usize, amplitude: Option<f64>) -> Result<PointCloudN> {
    let params = match &figure.skirt {
        Some(p) => p,
        None => bail!(Argument, "figure has no skirt"),
    };
    let bones = forward_kinematics(&figure.body, pose)?;
    let (posed, _) = skin_vertices(&figure.body, &bones)?;
    let mesh = figure.body.posed_mesh(posed);
    let sdf = MeshSdf::new(&mesh)?;
    let frame = skirt_frame(figure, params, pose, &mesh, garment_seed, amplitude.unwrap_or(params.wrinkle_amplitude))?;
    let mut rng = Rng::derive(sample_seed, 0x5a3e7);
    let (rw, rh) = (params.waist_radius, params.hem_radius);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let h = 1e-5;
    for _ in 0..n {
        let u = rng.uniform();
        // density proportional to the cone radius, so samples are area-uniform on the cone
        let s = if (rh - rw).abs() < 1e-12 { u } else { (libm::sqrt(rw * rw + u * (rh * rh - rw * rw)) - rw) / (rh - rw) };
        let theta = rng.range(0.0, 2.0 * PI);
        let mut r = frame.radius(theta, s);
        let mut p = frame.point(theta, s, r);
        let mut guard = 0;
        while sdf.signed_distance(p) < 1e-3 && guard < 200 {
            r += 2e-3;
            p = frame.point(theta, s, r);
            guard += 1;
        }
        let (s0, s1) = ((s - h).max(0.0), (s + h).min(1.0));
        let dt = sub(frame.surface(theta + h, s), frame.surface(theta - h, s));
        let ds = sub(frame.surface(theta, s1), frame.surface(theta, s0));
        let mut nrm = normalize(cross(dt, ds));
        if dot(nrm, frame.direction(theta)) < 0.0 {
            nrm = scale(nrm, -1.0);
        }
        points.push(p);
        normals.push(nrm);
    }
    PointCloudN::with_normals(points, normals)
}

/// Scan parameters: sampling density and the offset of tight clothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanSpec {
    /// Points per square meter on both body and skirt.
    pub density: f64,
    /// Outward offset of the deformed (tight clothing) region.
    pub tight_offset: f64,
}

impl Default for ScanSpec {
    fn default() -> Self {
        ScanSpec { density: 2500.0, tight_offset: 3e-3 }
    }
}

/// Ground-truth scan: skirt sheet plus posed body samples outside the skirted
/// region, with the deformed region offset outward.
pub fn simulate_skirt(figure: &Figure, pose: &Pose, seed: u64, scan: &ScanSpec) -> Result<PointCloudN> {
    simulate_scan(figure, pose, seed, seed, scan)
}

/// [`simulate_skirt`] with separate seeds for the wrinkle phases and for point sampling.
pub fn simulate_scan(figure: &Figure, pose: &Pose, garment_seed: u64, seed: u64, scan: &ScanSpec) -> Result<PointCloudN> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    if let Some(p) = &figure.skirt {
        let slant = libm::sqrt(p.length * p.length + (p.hem_radius - p.waist_radius) * (p.hem_radius - p.waist_radius));
        let area = PI * (p.waist_radius + p.hem_radius) * slant;
        let sheet = skirt_sheet(figure, pose, garment_seed, seed, libm::round(area * scan.density) as usize, None)?;
        normals.extend_from_slice(sheet.normals()?);
        points.extend(sheet.points);
    }
    let canonical = figure.body.canonical_mesh();
    let n_body = libm::round(figure.surface_area() * scan.density) as usize;
    let (_, bary) = sample_surface(&canonical, n_body, seed ^ 0xb0d1)?;
    let bones = forward_kinematics(&figure.body, pose)?;
    let (posed, _) = skin_vertices(&figure.body, &bones)?;
    let posed_mesh = figure.body.posed_mesh(posed);
    for (b, label) in bary.iter().zip(figure.oracle_labels(&bary)) {
        let nrm = posed_mesh.face_normal(b.face_index as usize);
        let p = posed_mesh.point_at(b);
        match label {
            Label::Generated => continue,
            Label::Unclothed => points.push(p),
            Label::Deformed => points.push(add(p, scale(nrm, scan.tight_offset))),
        }
        normals.push(nrm);
    }
    PointCloudN::with_normals(points, normals)
}

/// Front and back cameras framing the whole figure.
pub fn figure_cameras(figure: &Figure, size: usize) -> [OrthoCamera; 2] {
    let (lo, hi) = crate::geometry::bounds(figure.body.canonical_vertices.iter().copied());
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, 0.0];
    let extent = (hi[1] - lo[1]).max(hi[0] - lo[0]) * 1.1;
    [
        OrthoCamera::framing(crate::cutmap::View::Front, size, center, extent),
        OrthoCamera::framing(crate::cutmap::View::Back, size, center, extent),
    ]
}

/// Dense rest-pose samples used to render masks, with their oracle labels.
pub fn mask_cloud(figure: &Figure, n: usize, seed: u64) -> Result<(PointCloudN, Vec<Label>)> {
    let (cloud, bary) = sample_surface(&figure.body.canonical_mesh(), n, seed)?;
    let labels = figure.oracle_labels(&bary);
    Ok((cloud, labels))
}

/// Renders `cloud` and marks every pixel whose visible point is labeled generated.
pub fn oracle_mask(cloud: &PointCloudN, labels: &[Label], camera: &OrthoCamera, splat_radius: f64) -> Result<(Render, Vec<bool>)> {
    let render = render_normal_map(cloud, camera, splat_radius)?;
    let mask = render.index.iter().map(|&i| i != NO_POINT && labels[i as usize] == Label::Generated).collect();
    Ok((render, mask))
}

/// Rendering parameters of the oracle masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub size: usize,
    /// Rest-pose samples splatted into the mask renders.
    pub points: usize,
    pub splat_radius: f64,
    /// Largest distance at which a back-projected pixel claims a sample.
    pub claim_radius: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec { size: 512, points: 300_000, splat_radius: 0.0, claim_radius: 0.03 }
    }
}

/// One rendered view with its loose-region mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskView {
    pub camera: OrthoCamera,
    pub render: Render,
    pub mask: Vec<bool>,
}

/// Front and back oracle masks of the rest pose.
pub fn oracle_masks(figure: &Figure, spec: &MaskSpec, seed: u64) -> Result<Vec<MaskView>> {
    let (cloud, labels) = mask_cloud(figure, spec.points, seed)?;
    figure_cameras(figure, spec.size)
        .into_iter()
        .map(|camera| {
            let (render, mask) = oracle_mask(&cloud, &labels, &camera, spec.splat_radius)?;
            Ok(MaskView { camera, render, mask })
        })
        .collect()
}

/// Cut map of `samples` from mask views rendered in the rest pose.
pub fn cut_map_from_masks(figure: &Figure, samples: &[BaryRecord], views: &[MaskView], claim_radius: f64) -> Result<crate::cutmap::CutMap> {
    let mut claims = crate::cutmap::ClaimSet::default();
    for v in views {
        let (points, loose) = crate::cutmap::backproject_pixels(&v.mask, &v.render, &v.camera)?;
        claims.extend(points, loose);
    }
    let positions: Vec<Vec3> = samples.iter().map(|b| crate::geometry::interpolate_vec3(&figure.body.canonical_vertices, b)).collect();
    crate::cutmap::build_cut_map(&positions, samples, &claims, &figure.unclothed_parts, &figure.body, claim_radius)
}

/// Rest-pose body samples labeled by the cut map.
pub fn body_samples(figure: &Figure, n: usize, seed: u64) -> Result<Vec<BaryRecord>> {
    Ok(sample_surface(&figure.body.canonical_mesh(), n, seed)?.1)
}

/// A generated frame with the axis-angle form of its pose.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFrame {
    pub axis_angles: Vec<Vec3>,
    pub sample: crate::trainer::TrainSample,
}

/// `n` frames with sampled poses and simulated scans. Wrinkle phases follow
/// `garment_seed`; poses and scan sampling follow `seed`.
pub fn make_frames(figure: &Figure, n: usize, seed: u64, garment_seed: u64, scan: &ScanSpec) -> Result<Vec<SynthFrame>> {
    let mut rng = Rng::derive(seed, 0xf4a3e);
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let axis_angles = sample_axis_angles(&figure.body, &mut rng)?;
        let pose = Pose::from_axis_angle(&axis_angles, [0.0; 3]);
        let cloud = simulate_scan(figure, &pose, garment_seed, seed.wrapping_add(i as u64 * 7919), scan)?;
        let sample = crate::trainer::TrainSample { frame_id: alloc::format!("{i:04}"), pose, scan: cloud };
        frames.push(SynthFrame { axis_angles, sample });
    }
    Ok(frames)
}

/// Squared distance from `p` to the cone `r = waist + s (hem − waist)` around
/// the vertical axis through `center`, measured radially.
pub fn cone_residual(params: &SkirtParams, center: Vec3, p: Vec3) -> f64 {
    let s = (center[1] + params.waist_offset - p[1]) / params.length;
    let r = libm::sqrt(dist2([p[0], 0.0, p[2]], [center[0], 0.0, center[2]]));
    (r - (params.waist_radius + s * (params.hem_radius - params.waist_radius))).abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_figure_is_watertight_and_normalized() {
        let f = make_figure(&FigureSpec::default(), SkirtKind::Long).unwrap();
        assert!(f.body.canonical_mesh().is_watertight());
        let nj = f.body.num_joints();
        for v in 0..f.body.num_vertices() {
            let s: f64 = f.body.skin_weights[v * nj..(v + 1) * nj].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn capsules_wind_outward() {
        let f = make_figure(&FigureSpec::default(), SkirtKind::None).unwrap();
        let m = f.body.canonical_mesh();
        // positive signed volume of a closed mesh means outward normals
        let vol: f64 = (0..m.faces.len())
            .map(|i| {
                let t = m.triangle(i);
                dot(t[0], cross(t[1], t[2])) / 6.0
            })
            .sum();
        assert!(vol > 0.0);
    }

    #[test]
    fn no_skirt_no_generated() {
        let f = make_figure(&FigureSpec::default(), SkirtKind::None).unwrap();
        let (_, bary) = sample_surface(&f.body.canonical_mesh(), 500, 1).unwrap();
        assert!(f.oracle_labels(&bary).iter().all(|l| *l != Label::Generated));
    }

    #[test]
    fn invalid_dimensions() {
        let spec = FigureSpec { thigh_radius: -1.0, ..FigureSpec::default() };
        assert!(make_figure(&spec, SkirtKind::Long).is_err());
    }
}
