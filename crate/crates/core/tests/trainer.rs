use avatar_core::body::{ArticulatedBody, Pose};
use avatar_core::cutmap::{CutMap, Label};
use avatar_core::deformer::PoseEncoderConfig;
use avatar_core::generator::{leg_parts, GeneratorConfig};
use avatar_core::geometry::{farthest_point_sample, interpolate_vec3};
use avatar_core::rng::Rng;
use avatar_core::synth::{body_samples, make_figure, make_frames, posed_joints, sample_axis_angles, Figure, FigureSpec, ScanSpec, SkirtKind};
use avatar_core::trainer::{
    augment_flip, blend_codes, infer, merge_branches, mirror_pose, FrameInputs, TrainConfig, TrainSample, Trainer,
};
use avatar_core::{Error, PointCloudN, Vec3};

fn figure() -> Figure {
    let spec = FigureSpec { segments: 12, ring_spacing: 0.05, cap_rings: 3, ..FigureSpec::default() };
    make_figure(&spec, SkirtKind::Long).unwrap()
}

fn oracle_cut_map(fig: &Figure, n: usize) -> CutMap {
    let recs = body_samples(fig, n, 21).unwrap();
    CutMap { labels: fig.oracle_labels(&recs), sample_refs: recs, occluded: 0 }
}

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.model.encoder = PoseEncoderConfig { abstraction_counts: vec![128, 32, 8], level_widths: vec![16, 16, 16], neighbors: 8, output_dim: 16 };
    c.model.garment_dim = 8;
    c.model.decoder_width = 32;
    c.model.generator = GeneratorConfig {
        patches: 2,
        points: 128,
        width: 16,
        hidden_layers: 2,
        pose_dim: 16,
        garment_dim: 8,
        parts: leg_parts(),
        part_points: 64,
        part_counts: vec![16, 4],
        part_widths: vec![8, 8],
        neighbors: 8,
    };
    c.batch_size = 1;
    c.flip_probability = 0.0;
    c.merged_points = 400;
    c
}

fn frames(fig: &Figure, n: usize, seed: u64) -> Vec<TrainSample> {
    let scan = ScanSpec { density: 600.0, ..ScanSpec::default() };
    make_frames(fig, n, seed, 7, &scan).unwrap().into_iter().map(|f| f.sample).collect()
}

fn cloud(rng: &mut Rng, n: usize) -> PointCloudN {
    PointCloudN::with_normals((0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect(), (0..n).map(|_| rng.unit_vector()).collect()).unwrap()
}

fn d2(a: Vec3, b: Vec3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

#[test]
fn merge_keeps_exactly_n_points_of_the_union() {
    let mut rng = Rng::new(1);
    let (u, d, g) = (cloud(&mut rng, 10), cloud(&mut rng, 20), cloud(&mut rng, 30));
    let (all, origin) = merge_branches(&u, &d, &g, 60, 0).unwrap();
    let union: Vec<Vec3> = [&u, &d, &g].iter().flat_map(|c| c.points.clone()).collect();
    assert_eq!(all.points, union);
    assert_eq!(origin.iter().filter(|l| **l == Label::Generated).count(), 30);

    let (some, origin) = merge_branches(&u, &d, &g, 25, 3).unwrap();
    assert_eq!((some.len(), origin.len()), (25, 25));
    assert!(some.points.iter().all(|p| union.contains(p)));

    // greedy oracle from the same first pick
    let start = union.iter().position(|p| *p == some.points[0]).unwrap();
    let mut chosen = vec![start];
    let mut best: Vec<f64> = union.iter().map(|p| d2(*p, union[start])).collect();
    while chosen.len() < 25 {
        let next = (0..union.len()).fold(0, |b, i| if best[i] > best[b] { i } else { b });
        chosen.push(next);
        for i in 0..union.len() {
            best[i] = best[i].min(d2(union[i], union[next]));
        }
    }
    let want: Vec<Vec3> = chosen.iter().map(|&i| union[i]).collect();
    assert_eq!(some.points, want);
    assert_eq!(farthest_point_sample(&union, 25, 3).unwrap(), chosen);

    assert!(matches!(merge_branches(&u, &d, &g, 61, 0), Err(Error::Argument(_))));
}

#[test]
fn flip_mirrors_scan_and_pose() {
    let fig = figure();
    let body = &fig.body;
    let scan = frames(&fig, 1, 2).remove(0).scan;
    let rest = TrainSample { frame_id: "a".into(), pose: Pose::identity(body.num_joints()), scan };
    let f = augment_flip(&rest, body).unwrap();
    assert_eq!(f.pose, rest.pose);
    for (a, b) in f.scan.points.iter().zip(&rest.scan.points) {
        assert_eq!(*a, [-b[0], b[1], b[2]]);
    }

    let mut rng = Rng::new(3);
    let posed = TrainSample { pose: Pose::from_axis_angle(&sample_axis_angles(body, &mut rng).unwrap(), [0.1, 0.0, -0.2]), ..rest.clone() };
    let twice = augment_flip(&augment_flip(&posed, body).unwrap(), body).unwrap();
    assert_eq!(twice, posed);

    // posed joints of the mirrored pose are x-mirrors of the swapped originals
    let map = ArticulatedBody::mirror_map(&body.joint_names).unwrap();
    let a = posed_joints(body, &posed.pose).unwrap();
    let b = posed_joints(body, &mirror_pose(&posed.pose, body).unwrap()).unwrap();
    for j in 0..body.num_joints() {
        let m = a[map[j]];
        assert!(d2(b[j], [-m[0], m[1], m[2]]).sqrt() < 1e-9, "joint {j}");
    }

    let names: Vec<String> = ["pelvis", "l_hip"].iter().map(|s| s.to_string()).collect();
    assert!(ArticulatedBody::mirror_map(&names).is_err());
}

#[test]
fn single_frame_overfits() {
    let fig = figure();
    let cut = oracle_cut_map(&fig, 800);
    let mut cfg = tiny_config();
    cfg.epochs = 200;
    cfg.normal_start_epoch = 200;
    let mut t = Trainer::new(cfg, &fig.body, &cut, frames(&fig, 1, 4)).unwrap();
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..200 {
        let r = t.train_epoch().unwrap();
        first.get_or_insert(r[0].terms.chamfer);
        last = r[0].terms.chamfer;
    }
    let first = first.unwrap();
    assert!(first / last >= 10.0, "chamfer {first} -> {last}");
}

#[test]
fn normal_term_is_gated_before_its_epoch() {
    let fig = figure();
    let cut = oracle_cut_map(&fig, 600);
    let data = frames(&fig, 2, 5);
    let mut cfg = tiny_config();
    cfg.epochs = 10;
    cfg.normal_start_epoch = 3;
    let mut off = cfg.clone();
    off.weights.normal = 0.0;
    let mut a = Trainer::new(cfg, &fig.body, &cut, data.clone()).unwrap();
    let mut b = Trainer::new(off, &fig.body, &cut, data).unwrap();
    for epoch in 0..3 {
        let (ra, rb) = (a.train_epoch().unwrap(), b.train_epoch().unwrap());
        for (x, y) in ra.iter().zip(&rb) {
            assert!(!x.normal_active);
            assert!(x.terms.normal > 0.0);
            assert_eq!(x.total, x.terms.total(&a.config.weights, false));
            assert_eq!(x.total, y.total, "epoch {epoch}");
        }
    }
    assert_eq!(a.model.params(), b.model.params());
    let r = a.train_epoch().unwrap();
    assert!(r[0].normal_active);
    assert_eq!(r[0].total, r[0].terms.total(&a.config.weights, true));
}

#[test]
fn training_is_deterministic() {
    let fig = figure();
    let cut = oracle_cut_map(&fig, 600);
    let data = frames(&fig, 3, 6);
    let mut cfg = tiny_config();
    cfg.flip_probability = 0.5;
    cfg.batch_size = 2;
    let run = || {
        let mut t = Trainer::new(cfg.clone(), &fig.body, &cut, data.clone()).unwrap();
        (0..3).flat_map(|_| t.train_epoch().unwrap()).map(|r| r.total).collect::<Vec<_>>()
    };
    let (x, y) = (run(), run());
    assert_eq!(x.len(), y.len());
    for (a, b) in x.iter().zip(&y) {
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}

#[test]
fn small_steps_do_not_increase_the_loss() {
    let fig = figure();
    let cut = oracle_cut_map(&fig, 600);
    let mut cfg = tiny_config();
    cfg.learning_rate = 1e-5;
    let mut t = Trainer::new(cfg, &fig.body, &cut, frames(&fig, 1, 8)).unwrap();
    let totals: Vec<f64> = (0..11).map(|_| t.train_step(&[(0, false)]).unwrap().total).collect();
    for w in totals.windows(2) {
        assert!(w[1] <= w[0], "{totals:?}");
    }
}

#[test]
fn inference_copies_unclothed_samples_and_blends_codes() {
    let fig = figure();
    let body = &fig.body;
    let cut = oracle_cut_map(&fig, 800);
    let mut cfg = tiny_config();
    cfg.epochs = 2;
    cfg.normal_start_epoch = 2;
    let mut t = Trainer::new(cfg.clone(), body, &cut, frames(&fig, 2, 9)).unwrap();
    t.train_epoch().unwrap();
    let pose = Pose::from_axis_angle(&sample_axis_angles(body, &mut Rng::new(10)).unwrap(), [0.0; 3]);
    let inputs = FrameInputs::new(body, &t.layout, &cfg.model.generator, &pose, 11).unwrap();

    let plain = infer(&t.model, &t.layout, &inputs, None, 300, 0).unwrap();
    assert_eq!(plain.cloud.len(), 300);
    assert_eq!(plain.origin.len(), 300);

    // unclothed output equals the skinned body at those samples
    let (posed, _) = avatar_core::body::skin_vertices(body, &avatar_core::body::forward_kinematics(body, &pose).unwrap()).unwrap();
    let unclothed = cut.records_with(Label::Unclothed);
    assert!(!unclothed.is_empty());
    for (b, p) in unclothed.iter().zip(&plain.prediction.unclothed.points) {
        assert!(d2(interpolate_vec3(&posed, b), *p) < 1e-24);
    }

    let a = t.model.codes.global.value.clone();
    let other: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
    let blended = blend_codes(&a, &other, 0.0).unwrap();
    let zero = infer(&t.model, &t.layout, &inputs, Some(&blended), 300, 0).unwrap();
    assert_eq!(zero.cloud, plain.cloud);
    let one = infer(&t.model, &t.layout, &inputs, Some(&blend_codes(&a, &other, 1.0).unwrap()), 300, 0).unwrap();
    assert_ne!(one.cloud, plain.cloud);
    assert!(blend_codes(&a, &other[1..], 0.5).is_err());
}

#[test]
fn paper_preset_budget() {
    let c = TrainConfig::paper();
    assert_eq!((c.epochs, c.batch_size, c.learning_rate, c.normal_start_epoch, c.merged_points), (1000, 8, 3.0e-4, 400, 47911));
    assert!(c.validate().is_ok());
    let mut bad = c.clone();
    bad.normal_start_epoch = 0;
    assert!(bad.validate().is_err());
    assert!(tiny_config().model.validate().is_ok());
    let mut p = TrainConfig::desk();
    p.model.generator.garment_dim = 3;
    assert!(p.validate().is_err());
}

#[test]
fn training_rejects_bad_inputs() {
    let fig = figure();
    let cut = oracle_cut_map(&fig, 300);
    assert!(Trainer::new(tiny_config(), &fig.body, &cut, Vec::new()).is_err());
    let mut bad = frames(&fig, 1, 12);
    bad[0].scan = PointCloudN { points: Vec::new(), normals: Some(Vec::new()) };
    assert!(Trainer::new(tiny_config(), &fig.body, &cut, bad).is_err());
}
