use avatar_core::cutmap::render_normal_map;
use avatar_core::evaluator::{cd_eval, fid_stub, frechet_distance, mse_normal_maps, nml_eval, render_mse, Embedder, FidResult, EVAL_SPLAT_RADIUS};
use avatar_core::losses::{chamfer, normal_loss};
use avatar_core::rng::Rng;
use avatar_core::synth::{figure_cameras, make_figure, simulate_scan, Figure, FigureSpec, ScanSpec, SkirtKind};
use avatar_core::body::Pose;
use avatar_core::cutmap::Render;
use avatar_core::PointCloudN;

fn figure() -> Figure {
    make_figure(&FigureSpec::default(), SkirtKind::Long).unwrap()
}

fn scan(fig: &Figure, garment_seed: u64, seed: u64) -> PointCloudN {
    let spec = ScanSpec { density: 20_000.0, ..ScanSpec::default() };
    simulate_scan(fig, &Pose::identity(fig.body.num_joints()), garment_seed, seed, &spec).unwrap()
}

fn random_cloud(rng: &mut Rng, n: usize) -> PointCloudN {
    PointCloudN::with_normals((0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect(), (0..n).map(|_| rng.unit_vector()).collect()).unwrap()
}

#[test]
fn identical_clouds_score_zero() {
    let fig = figure();
    let gt = scan(&fig, 1, 2);
    let cams = figure_cameras(&fig, 256);
    assert_eq!(mse_normal_maps(&gt, &gt, &cams, EVAL_SPLAT_RADIUS).unwrap(), 0.0);
    assert_eq!(cd_eval(&gt, &gt).unwrap(), 0.0);
    assert_eq!(nml_eval(&gt, &gt).unwrap(), 0.0);
    assert!(mse_normal_maps(&gt, &gt, &[], EVAL_SPLAT_RADIUS).is_err());
}

#[test]
fn empty_prediction_matches_pixel_oracle() {
    let fig = figure();
    let gt = scan(&fig, 1, 3);
    let empty = PointCloudN::with_normals(Vec::new(), Vec::new()).unwrap();
    let cams = figure_cameras(&fig, 256);
    let got = mse_normal_maps(&empty, &gt, &cams, EVAL_SPLAT_RADIUS).unwrap();
    let mut want = 0.0;
    for cam in &cams {
        let r = render_normal_map(&gt, cam, EVAL_SPLAT_RADIUS).unwrap();
        let sum: f64 = r.rgb.iter().flat_map(|p| p.iter().map(|c| (c - 1.0) * (c - 1.0))).sum();
        want += sum / (3 * r.rgb.len()) as f64;
    }
    want *= 100.0 / cams.len() as f64;
    assert!(got > 0.0);
    assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");

    let small = render_normal_map(&gt, &figure_cameras(&fig, 64)[0], 0.0).unwrap();
    let big = render_normal_map(&gt, &cams[0], 0.0).unwrap();
    assert!(render_mse(&small, &big).is_err());
}

#[test]
fn mse_is_stable_under_halved_resolution() {
    let fig = figure();
    let gt = scan(&fig, 1, 4);
    let pred = scan(&fig, 9, 5);
    let full = mse_normal_maps(&pred, &gt, &figure_cameras(&fig, 512), EVAL_SPLAT_RADIUS).unwrap();
    // the splat shrinks with the pixel so its world footprint is unchanged
    let half = mse_normal_maps(&pred, &gt, &figure_cameras(&fig, 256), EVAL_SPLAT_RADIUS / 2.0).unwrap();
    assert!(full > 0.0);
    assert!((full - half).abs() / full < 0.05, "full {full} half {half}");
}

#[test]
fn point_metrics_are_scaled_losses() {
    let one = PointCloudN::with_normals(vec![[0.0; 3]], vec![[0.0, 0.0, 1.0]]).unwrap();
    let other = PointCloudN::with_normals(vec![[1.0, 0.0, 0.0]], vec![[0.0, 0.0, 1.0]]).unwrap();
    assert_eq!(cd_eval(&one, &other).unwrap(), 2e4);

    let mut rng = Rng::new(6);
    for _ in 0..5 {
        let (a, b) = (random_cloud(&mut rng, 80), random_cloud(&mut rng, 60));
        let cd = chamfer(&a.points, &b.points).unwrap();
        let nml = normal_loss(&a.points, a.normals().unwrap(), &b.points, b.normals().unwrap()).unwrap();
        assert!((cd_eval(&a, &b).unwrap() - 1e4 * cd).abs() <= 1e-9 * 1e4 * cd);
        assert!((nml_eval(&a, &b).unwrap() - 10.0 * nml).abs() <= 1e-9 * 10.0 * nml);
    }
    let bare = PointCloudN { points: vec![[0.0; 3]], normals: None };
    assert!(nml_eval(&bare, &one).is_err());
}

struct Mean;

impl Embedder for Mean {
    fn embed(&self, r: &Render) -> Vec<f64> {
        vec![r.rgb.iter().map(|p| p[0]).sum::<f64>() / r.rgb.len() as f64]
    }
}

#[test]
fn frechet_distance_examples() {
    let mut rng = Rng::new(7);
    let n = 20_000;
    let a: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal()]).collect();
    let b: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0 + rng.normal()]).collect();
    // closed form for equal unit variances is the squared mean gap
    let d = frechet_distance(&a, &b).unwrap();
    assert!((d - 1.0).abs() < 0.05, "{d}");
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);

    let wide: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0]).collect();
    assert!(frechet_distance(&a, &wide).is_err());
    assert!(frechet_distance(&[], &a).is_err());

    // 2-D oracle: diagonal Gaussians give Σ (σ₁ − σ₂)² per axis
    let c: Vec<Vec<f64>> = (0..n).map(|_| vec![2.0 * rng.normal(), rng.normal()]).collect();
    let e: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), 3.0 * rng.normal()]).collect();
    let d = frechet_distance(&c, &e).unwrap();
    assert!((d - 5.0).abs() < 0.25, "{d}");
}

#[test]
fn fid_needs_an_embedder() {
    let fig = figure();
    let gt = scan(&fig, 1, 8);
    let cams = figure_cameras(&fig, 32);
    let renders: Vec<Render> = cams.iter().map(|c| render_normal_map(&gt, c, 1.0).unwrap()).collect();
    assert_eq!(fid_stub(&renders, &renders, None).unwrap(), FidResult::Unavailable);
    match fid_stub(&renders, &renders, Some(&Mean)).unwrap() {
        FidResult::Value(v) => assert!(v.abs() < 1e-12),
        other => panic!("{other:?}"),
    }
}

#[test]
fn evaluation_renders_are_deterministic() {
    let fig = figure();
    let gt = scan(&fig, 1, 10);
    let cam = figure_cameras(&fig, 128)[1];
    let a = render_normal_map(&gt, &cam, EVAL_SPLAT_RADIUS).unwrap();
    let b = render_normal_map(&gt, &cam, EVAL_SPLAT_RADIUS).unwrap();
    assert_eq!(a.rgb, b.rgb);
}
