//! Articulated body: canonical template, skeleton, skinning weights, forward
//! kinematics and per-point linear blend skinning transforms.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::geometry::{BaryRecord, TriMesh};
use crate::linalg::{
    axis_angle_to_matrix, is_finite, mat_mul, mat_vec, normalize, sub, Affine, Mat3, RigidTransform, Vec3,
    IDENTITY3,
};

/// Template body in its canonical (rest) pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticulatedBody {
    pub canonical_vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub joints: Vec<Vec3>,
    /// Parent joint per joint; the root (joint 0) is its own parent.
    pub parent: Vec<usize>,
    pub joint_names: Vec<String>,
    /// Row-major `N_t × J` skinning weights.
    pub skin_weights: Vec<f64>,
    pub part_labels: Vec<u16>,
    pub part_names: Vec<String>,
}

impl ArticulatedBody {
    pub fn num_vertices(&self) -> usize {
        self.canonical_vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn canonical_mesh(&self) -> TriMesh {
        TriMesh { vertices: self.canonical_vertices.clone(), faces: self.faces.clone() }
    }

    pub fn posed_mesh(&self, posed_vertices: Vec<Vec3>) -> TriMesh {
        TriMesh { vertices: posed_vertices, faces: self.faces.clone() }
    }

    pub fn weights_row(&self, v: usize) -> &[f64] {
        let j = self.num_joints();
        &self.skin_weights[v * j..(v + 1) * j]
    }

    pub fn part_id(&self, name: &str) -> Result<u16> {
        self.part_names
            .iter()
            .position(|n| n == name)
            .map(|p| p as u16)
            .ok_or_else(|| Error::Validation(alloc::format!("unknown part name `{name}`")))
    }

    pub fn joint_id(&self, name: &str) -> Result<usize> {
        self.joint_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Validation(alloc::format!("unknown joint name `{name}`")))
    }

    /// Part id of the face (taken from its first vertex).
    pub fn face_part(&self, f: usize) -> u16 {
        self.part_labels[self.faces[f][0] as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let nt = self.num_vertices();
        let nj = self.num_joints();
        if nj == 0 {
            bail!(Validation, "body has no joints");
        }
        if self.parent.len() != nj || self.joint_names.len() != nj {
            bail!(Validation, "parent/name tables have {} / {} entries for {nj} joints", self.parent.len(), self.joint_names.len());
        }
        if self.skin_weights.len() != nt * nj {
            bail!(Validation, "skin weight table has {} entries, expected {}", self.skin_weights.len(), nt * nj);
        }
        if self.part_labels.len() != nt {
            bail!(Validation, "{} part labels for {nt} vertices", self.part_labels.len());
        }
        for (v, p) in self.canonical_vertices.iter().enumerate() {
            if !is_finite(*p) {
                bail!(Validation, "canonical vertex {v} is not finite");
            }
        }
        for f in &self.faces {
            for &v in f {
                if v as usize >= nt {
                    return Err(Error::Index { index: v as usize, len: nt });
                }
            }
        }
        for v in 0..nt {
            let row = self.weights_row(v);
            if row.iter().any(|w| !(*w >= 0.0)) {
                bail!(Validation, "vertex {v} has a negative skinning weight");
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                bail!(Validation, "skinning weights of vertex {v} sum to {s}");
            }
        }
        for (v, &l) in self.part_labels.iter().enumerate() {
            if l as usize >= self.part_names.len() {
                bail!(Validation, "vertex {v} has part label {l} outside {} parts", self.part_names.len());
            }
        }
        self.joint_order().map(|_| ())
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn joint_order(&self) -> Result<Vec<usize>> {
        let nj = self.num_joints();
        if self.parent.first() != Some(&0) {
            bail!(Validation, "joint 0 must be the root (its own parent)");
        }
        let mut depth = vec![usize::MAX; nj];
        depth[0] = 0;
        for j in 1..nj {
            // walk up until a resolved ancestor; more than nj steps means a cycle
            let mut chain = Vec::new();
            let mut cur = j;
            while depth[cur] == usize::MAX {
                chain.push(cur);
                let p = self.parent[cur];
                if p >= nj || p == cur || chain.len() > nj {
                    bail!(Validation, "joint parents do not form a tree rooted at joint 0");
                }
                cur = p;
            }
            let mut d = depth[cur];
            for &c in chain.iter().rev() {
                d += 1;
                depth[c] = d;
            }
        }
        let mut order: Vec<usize> = (0..nj).collect();
        order.sort_by_key(|&j| (depth[j], j));
        Ok(order)
    }

    /// Mirror map between `l_*`/`r_*` (or `left_*`/`right_*`) names; centre names map to themselves.
    pub fn mirror_map(names: &[String]) -> Result<Vec<usize>> {
        let mut map = vec![0; names.len()];
        for (i, n) in names.iter().enumerate() {
            let partner = mirror_name(n);
            match partner {
                None => map[i] = i,
                Some(p) => match names.iter().position(|m| *m == p) {
                    Some(j) => map[i] = j,
                    None => bail!(Validation, "`{n}` has no mirrored partner `{p}`"),
                },
            }
        }
        Ok(map)
    }
}

fn mirror_name(n: &str) -> Option<String> {
    for (a, b) in [("l_", "r_"), ("r_", "l_"), ("left_", "right_"), ("right_", "left_")] {
        if let Some(rest) = n.strip_prefix(a) {
            return Some(alloc::format!("{b}{rest}"));
        }
    }
    None
}

/// Joint rotations (local, relative to the parent) and a root translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub joint_rotations: Vec<Mat3>,
    pub root_translation: Vec3,
}

impl Pose {
    pub fn identity(num_joints: usize) -> Self {
        Pose { joint_rotations: vec![IDENTITY3; num_joints], root_translation: [0.0; 3] }
    }

    pub fn from_axis_angle(axis_angles: &[Vec3], root_translation: Vec3) -> Self {
        Pose { joint_rotations: axis_angles.iter().map(|a| axis_angle_to_matrix(*a)).collect(), root_translation }
    }

    pub fn validate(&self, num_joints: usize) -> Result<()> {
        if self.joint_rotations.len() != num_joints {
            bail!(Validation, "pose has {} rotations for {num_joints} joints", self.joint_rotations.len());
        }
        for (j, r) in self.joint_rotations.iter().enumerate() {
            RigidTransform::new(*r, self.root_translation)
                .map_err(|e| Error::Validation(alloc::format!("joint {j}: {e}")))?;
        }
        Ok(())
    }
}

/// Per-joint canonical→posed transforms. The root applies first and children
/// compose along the parent chain; the identity pose yields identities.
pub fn forward_kinematics(body: &ArticulatedBody, pose: &Pose) -> Result<Vec<RigidTransform>> {
    let nj = body.num_joints();
    pose.validate(nj)?;
    let order = body.joint_order()?;
    // B_j = B_parent ∘ (rotate by R_j about the rest joint J_j); the identity
    // pose gives exact identities because J_j − I·J_j vanishes exactly
    let mut bones = vec![RigidTransform::IDENTITY; nj];
    for &j in &order {
        let r = pose.joint_rotations[j];
        let jc = body.joints[j];
        let local = sub(jc, mat_vec(&r, jc));
        bones[j] = if j == 0 {
            RigidTransform { rotation: r, translation: crate::linalg::add(local, pose.root_translation) }
        } else {
            let p = bones[body.parent[j]];
            RigidTransform { rotation: mat_mul(&p.rotation, &r), translation: p.apply_point(local) }
        };
    }
    Ok(bones)
}

/// `a − I`; blends are accumulated as `I + Σ w (T − I)`, which equals `Σ w T`
/// for normalized weights and keeps identity inputs exact.
fn minus_identity(a: &Affine) -> Affine {
    let mut d = *a;
    for i in 0..3 {
        d.linear[i][i] -= 1.0;
    }
    d
}

/// Linear blend of bone transforms per vertex: `Σ_j w_kj T_j`.
pub fn vertex_transforms(body: &ArticulatedBody, bones: &[RigidTransform]) -> Result<Vec<Affine>> {
    let nj = body.num_joints();
    if bones.len() != nj {
        bail!(Validation, "{} bone transforms for {nj} joints", bones.len());
    }
    let bone_affine: Vec<Affine> = bones.iter().map(|b| minus_identity(&b.to_affine())).collect();
    Ok((0..body.num_vertices())
        .map(|v| {
            let mut m = Affine::IDENTITY;
            for (j, w) in body.weights_row(v).iter().enumerate() {
                if *w != 0.0 {
                    m.add_scaled(&bone_affine[j], *w);
                }
            }
            m
        })
        .collect())
}

/// Posed vertices `v_k = (Σ_j w_kj T_j) v^c_k` together with the blended transforms.
pub fn skin_vertices(body: &ArticulatedBody, bones: &[RigidTransform]) -> Result<(Vec<Vec3>, Vec<Affine>)> {
    let transforms = vertex_transforms(body, bones)?;
    let posed = body
        .canonical_vertices
        .iter()
        .zip(&transforms)
        .map(|(v, t)| t.apply_point(*v))
        .collect();
    Ok((posed, transforms))
}

/// Transform attached to a surface point: the linear blend of its triangle's
/// vertex transforms, plus the rigid transform whose rotation is the polar
/// factor of that blend (used for normals).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointTransform {
    pub affine: Affine,
    pub rigid: RigidTransform,
}

/// `Σ_j b_ij M(s_ij)` with the rotation block re-orthonormalized by polar decomposition.
/// `sample_id` only labels the error raised for a degenerate blend.
pub fn point_transform(bary: &BaryRecord, vertex_transforms: &[Affine], sample_id: usize) -> Result<PointTransform> {
    let mut m = Affine::IDENTITY;
    for j in 0..3 {
        let v = bary.vertex_ids[j] as usize;
        let t = vertex_transforms.get(v).ok_or(Error::Index { index: v, len: vertex_transforms.len() })?;
        m.add_scaled(&minus_identity(t), bary.weights[j]);
    }
    let rigid = m
        .to_rigid()
        .map_err(|e| Error::Numeric(alloc::format!("sample {sample_id}: {e}")))?;
    Ok(PointTransform { affine: m, rigid })
}

pub fn point_transforms(records: &[BaryRecord], vertex_transforms: &[Affine]) -> Result<Vec<PointTransform>> {
    records
        .iter()
        .enumerate()
        .map(|(i, b)| point_transform(b, vertex_transforms, i))
        .collect()
}

/// `x^d = T (p^c + r^c)` and `n^d = R n^c`.
pub fn pose_points(
    canonical_points: &[Vec3],
    displacements: &[Vec3],
    canonical_normals: &[Vec3],
    transforms: &[PointTransform],
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let n = canonical_points.len();
    if displacements.len() != n || canonical_normals.len() != n || transforms.len() != n {
        bail!(
            Validation,
            "length mismatch: {n} points, {} displacements, {} normals, {} transforms",
            displacements.len(),
            canonical_normals.len(),
            transforms.len()
        );
    }
    let mut xs = Vec::with_capacity(n);
    let mut ns = Vec::with_capacity(n);
    for i in 0..n {
        let p = crate::linalg::add(canonical_points[i], displacements[i]);
        xs.push(transforms[i].affine.apply_point(p));
        ns.push(normalize(transforms[i].rigid.apply_vector(canonical_normals[i])));
    }
    Ok((xs, ns))
}
