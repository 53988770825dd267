use avatar_core::body::{forward_kinematics, point_transforms, pose_points, skin_vertices, Pose};
use avatar_core::geometry::sample_surface;
use avatar_core::linalg::{axis_angle_to_matrix, Mat3, Vec3};
use avatar_core::rng::Rng;
use avatar_core::synth::{make_figure, posed_joints, sample_axis_angles, FigureSpec, SkirtKind};
use proptest::prelude::*;

type M4 = [[f64; 4]; 4];

fn m4_mul(a: &M4, b: &M4) -> M4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn m4_translate(t: Vec3) -> M4 {
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        m[i][i] = 1.0;
    }
    for i in 0..3 {
        m[i][3] = t[i];
    }
    m
}

fn m4_rot(r: &Mat3) -> M4 {
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j];
        }
    }
    m[3][3] = 1.0;
    m
}

fn m4_apply(m: &M4, p: Vec3) -> Vec3 {
    let mut o = [0.0; 3];
    for i in 0..3 {
        o[i] = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
    }
    o
}

/// Homogeneous world matrices: root first, each child composed onto its parent.
fn fk_oracle(parent: &[usize], joints: &[Vec3], pose: &Pose) -> Vec<M4> {
    let mut world: Vec<Option<M4>> = vec![None; joints.len()];
    fn resolve(j: usize, parent: &[usize], joints: &[Vec3], pose: &Pose, world: &mut Vec<Option<M4>>) -> M4 {
        if let Some(m) = world[j] {
            return m;
        }
        let jc = joints[j];
        let local = m4_mul(&m4_mul(&m4_translate(jc), &m4_rot(&pose.joint_rotations[j])), &m4_translate([-jc[0], -jc[1], -jc[2]]));
        let m = if j == 0 {
            m4_mul(&m4_translate(pose.root_translation), &local)
        } else {
            let p = resolve(parent[j], parent, joints, pose, world);
            m4_mul(&p, &local)
        };
        world[j] = Some(m);
        m
    }
    (0..joints.len()).map(|j| resolve(j, parent, joints, pose, &mut world)).collect()
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn figure() -> avatar_core::synth::Figure {
    make_figure(&FigureSpec::default(), SkirtKind::Long).unwrap()
}

#[test]
fn figure_forward_kinematics_matches_homogeneous_oracle() {
    let fig = figure();
    let body = &fig.body;
    let mut rng = Rng::new(7);
    for _ in 0..10 {
        let pose = Pose::from_axis_angle(&sample_axis_angles(body, &mut rng).unwrap(), [rng.normal(), rng.normal(), rng.normal()]);
        let bones = forward_kinematics(body, &pose).unwrap();
        let oracle = fk_oracle(&body.parent, &body.joints, &pose);
        for (b, m) in bones.iter().zip(&oracle) {
            for i in 0..3 {
                for j in 0..3 {
                    assert!((b.rotation[i][j] - m[i][j]).abs() < 1e-12);
                }
                assert!((b.translation[i] - m[i][3]).abs() < 1e-12);
            }
        }
        let (posed, _) = skin_vertices(body, &bones).unwrap();
        for (v, (c, x)) in body.canonical_vertices.iter().zip(&posed).enumerate() {
            let mut want = [0.0; 3];
            for (j, w) in body.weights_row(v).iter().enumerate() {
                let p = m4_apply(&oracle[j], *c);
                for k in 0..3 {
                    want[k] += w * p[k];
                }
            }
            assert!(dist(want, *x) < 1e-12);
        }
    }
}

#[test]
fn bending_the_knee_keeps_the_hip_and_moves_the_ankle_on_a_circle() {
    let fig = figure();
    let body = &fig.body;
    let knee = body.joint_id("l_lower_leg").unwrap();
    let mut aa = vec![[0.0; 3]; body.num_joints()];
    aa[knee] = [core::f64::consts::FRAC_PI_2, 0.0, 0.0];
    let pose = Pose::from_axis_angle(&aa, [0.0; 3]);
    let joints = posed_joints(body, &pose).unwrap();
    for j in 0..body.num_joints() {
        assert!(dist(joints[j], body.joints[j]) < 1e-12, "joint {j} moved");
    }
    // a vertex bound only to the shin rotates a quarter turn about the knee
    let bones = forward_kinematics(body, &pose).unwrap();
    let (posed, _) = skin_vertices(body, &bones).unwrap();
    let v = (0..body.num_vertices())
        .find(|&v| body.weights_row(v)[knee] == 1.0)
        .expect("a vertex fully bound to the shin");
    let r = axis_angle_to_matrix(aa[knee]);
    let jc = body.joints[knee];
    let off = [0, 1, 2].map(|i| body.canonical_vertices[v][i] - jc[i]);
    let want = [0, 1, 2].map(|i| jc[i] + r[i][0] * off[0] + r[i][1] * off[1] + r[i][2] * off[2]);
    assert!(dist(posed[v], want) < 1e-12);
}

#[test]
fn point_transforms_at_vertices_equal_vertex_transforms() {
    let fig = figure();
    let body = &fig.body;
    let mut rng = Rng::new(8);
    let pose = Pose::from_axis_angle(&sample_axis_angles(body, &mut rng).unwrap(), [0.0; 3]);
    let bones = forward_kinematics(body, &pose).unwrap();
    let (posed, vt) = skin_vertices(body, &bones).unwrap();
    let (_, recs) = sample_surface(&body.canonical_mesh(), 200, 9).unwrap();
    let corner: Vec<_> = recs
        .iter()
        .map(|b| {
            let mut b = *b;
            b.weights = [1.0, 0.0, 0.0];
            b
        })
        .collect();
    let pts = point_transforms(&corner, &vt).unwrap();
    for (b, t) in corner.iter().zip(&pts) {
        let v = b.vertex_ids[0] as usize;
        assert!(t.affine.max_abs_diff(&vt[v]) < 1e-12);
        assert!(dist(t.affine.apply_point(body.canonical_vertices[v]), posed[v]) < 1e-12);
    }
}

#[test]
fn pose_points_at_identity_returns_displaced_inputs() {
    let fig = figure();
    let body = &fig.body;
    let bones = forward_kinematics(body, &Pose::identity(body.num_joints())).unwrap();
    let (_, vt) = skin_vertices(body, &bones).unwrap();
    let (cloud, recs) = sample_surface(&body.canonical_mesh(), 100, 10).unwrap();
    let pts = point_transforms(&recs, &vt).unwrap();
    let r = vec![[0.0, 0.01, 0.0]; 100];
    let normals = cloud.normals.clone().unwrap();
    let (x, n) = pose_points(&cloud.points, &r, &normals, &pts).unwrap();
    for i in 0..100 {
        let p = cloud.points[i];
        assert_eq!(x[i], [p[0], p[1] + 0.01, p[2]]);
        assert!(dist(n[i], normals[i]) < 1e-12);
    }
    assert!(pose_points(&cloud.points, &r[..99], &normals, &pts).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn root_only_pose_is_rigid(aa in [-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64], t in [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64]) {
        let fig = figure();
        let body = &fig.body;
        let mut axis = vec![[0.0; 3]; body.num_joints()];
        axis[0] = aa;
        let bones = forward_kinematics(body, &Pose::from_axis_angle(&axis, t)).unwrap();
        let (posed, _) = skin_vertices(body, &bones).unwrap();
        let n = posed.len();
        for k in 0..200 {
            let (a, b) = ((k * 7919) % n, (k * 104_729 + 13) % n);
            let before = dist(body.canonical_vertices[a], body.canonical_vertices[b]);
            prop_assert!((dist(posed[a], posed[b]) - before).abs() <= 1e-9);
        }
    }
}
