use std::fs;

use avatar::formats::{
    read_checkpoint, read_cutmap, read_mask, read_manifest, read_ply, read_pose, tensor_entries, write_bytes, write_checkpoint, write_cutmap,
    write_json, write_mask, write_ply, Manifest, PoseFile,
};
use avatar::AppError;
use avatar_core::body::Pose;
use avatar_core::cutmap::CutMap;
use avatar_core::nn::Param;
use avatar_core::rng::Rng;
use avatar_core::synth::{body_samples, make_figure, sample_axis_angles, FigureSpec, SkirtKind};
use avatar_core::trainer::TrainConfig;
use avatar_core::PointCloudN;
use proptest::prelude::*;

fn random_cloud(rng: &mut Rng, n: usize, normals: bool) -> PointCloudN {
    let points = (0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
    let normals = normals.then(|| (0..n).map(|_| rng.unit_vector()).collect());
    PointCloudN { points, normals }
}

#[test]
fn binary_ply_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(1);
    for (n, with) in [(0, true), (1, false), (500, true)] {
        let cloud = random_cloud(&mut rng, n, with);
        let path = dir.path().join(format!("c{n}.ply"));
        write_ply(&path, &cloud).unwrap();
        assert_eq!(read_ply(&path).unwrap(), cloud);
    }
}

#[test]
fn ascii_and_foreign_plys_are_read() {
    let dir = tempfile::tempdir().unwrap();
    let ascii = "ply\nformat ascii 1.0\ncomment hand written\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n\
                 property uchar red\nproperty float nx\nproperty float ny\nproperty float nz\nelement face 1\n\
                 property list uchar int vertex_indices\nend_header\n0 1 2 255 0 0 1\n-1.5 0.25 3 7 1 0 0\n3 0 1 1\n";
    let path = dir.path().join("a.ply");
    fs::write(&path, ascii).unwrap();
    let c = read_ply(&path).unwrap();
    assert_eq!(c.points, vec![[0.0, 1.0, 2.0], [-1.5, 0.25, 3.0]]);
    assert_eq!(c.normals.unwrap(), vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);

    // big-endian float32 without normals
    let mut bytes = b"ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
    for v in [0.5f32, -2.0, 8.0] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    let path = dir.path().join("b.ply");
    fs::write(&path, &bytes).unwrap();
    let c = read_ply(&path).unwrap();
    assert_eq!(c.points, vec![[0.5, -2.0, 8.0]]);
    assert!(c.normals.is_none());

    // truncated payload and missing coordinates are format errors
    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(read_ply(&path), Err(AppError::Format { .. })));
    fs::write(&path, "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n").unwrap();
    assert!(matches!(read_ply(&path), Err(AppError::Format { .. })));
    assert!(matches!(read_ply(&dir.path().join("missing.ply")), Err(AppError::Io { .. })));
}

#[test]
fn cut_map_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let fig = make_figure(&FigureSpec::default(), SkirtKind::Long).unwrap();
    let recs = body_samples(&fig, 3000, 2).unwrap();
    let cut = CutMap { labels: fig.oracle_labels(&recs), sample_refs: recs, occluded: 17 };
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    write_cutmap(&a, &cut).unwrap();
    let back = read_cutmap(&a).unwrap();
    assert_eq!(back, cut);
    write_cutmap(&b, &back).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let bytes = fs::read(&a).unwrap();
    write_bytes(&b, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_cutmap(&b).is_err());
    write_bytes(&b, b"not a cut map").unwrap();
    assert!(read_cutmap(&b).is_err());
}

#[test]
fn checkpoint_keeps_values_and_moments() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(3);
    let params: Vec<Param> = [("a.weight", vec![3, 4]), ("a.bias", vec![4]), ("codes", vec![2, 2, 2])]
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let mut p = Param::new(name, shape, (0..n).map(|_| rng.normal()).collect());
            p.m = (0..n).map(|_| rng.normal()).collect();
            p.v = (0..n).map(|_| rng.uniform()).collect();
            p
        })
        .collect();
    let manifest = Manifest {
        version: 1,
        epoch: 5,
        step: 40,
        config: TrainConfig::desk(),
        body_vertices: 100,
        cutmap_counts: [1, 2, 3],
        tensors: tensor_entries(&params),
    };
    let path = dir.path().join("m.ckpt");
    write_checkpoint(&path, &manifest, &params).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), manifest);
    let (m, back) = read_checkpoint(&path).unwrap();
    assert_eq!(m, manifest);
    for (x, y) in params.iter().zip(&back) {
        assert_eq!((&x.name, &x.shape, &x.value, &x.m, &x.v), (&y.name, &y.shape, &y.value, &y.m, &y.v));
    }

    let bytes = fs::read(&path).unwrap();
    write_bytes(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(read_checkpoint(&path).is_err());
}

#[test]
fn pose_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let fig = make_figure(&FigureSpec::default(), SkirtKind::Long).unwrap();
    let names = &fig.body.joint_names;
    let aa = sample_axis_angles(&fig.body, &mut Rng::new(4)).unwrap();
    let pose = Pose::from_axis_angle(&aa, [0.1, -0.2, 0.3]);
    let path = dir.path().join("p.pose.json");
    write_json(&path, &PoseFile::from_pose(&pose, names)).unwrap();
    let back = read_pose(&path, names).unwrap();
    assert_eq!(back.root_translation, pose.root_translation);
    for (a, b) in back.joint_rotations.iter().zip(&pose.joint_rotations) {
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[i][j] - b[i][j]).abs() < 1e-12);
            }
        }
    }
    assert!(read_pose(&path, &names[1..]).is_err());
}

#[test]
fn masks_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h) = (13, 7);
    let mask: Vec<bool> = (0..w * h).map(|i| (i * 7 + i / 3) % 5 < 2).collect();
    let path = dir.path().join("m.png");
    write_mask(&path, w, h, &mask).unwrap();
    assert_eq!(read_mask(&path).unwrap(), (w, h, mask));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_cloud_round_trips(seed in 0u64..1000, n in 0usize..64, normals in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let cloud = random_cloud(&mut Rng::new(seed), n, normals);
        let path = dir.path().join("c.ply");
        write_ply(&path, &cloud).unwrap();
        prop_assert_eq!(read_ply(&path).unwrap(), cloud);
    }
}
