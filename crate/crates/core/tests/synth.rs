use std::collections::HashMap;

use avatar_core::body::{forward_kinematics, skin_vertices, Pose};
use avatar_core::cutmap::Label;
use avatar_core::geometry::MeshSdf;
use avatar_core::rng::Rng;
use avatar_core::synth::{
    body_samples, cone_residual, make_figure, make_frames, posed_joints, sample_pose, simulate_skirt, skirt_sheet, wrinkle_phases, Figure, FigureSpec,
    ScanSpec, SkirtKind,
};
use avatar_core::Error;

fn figure(kind: SkirtKind) -> Figure {
    make_figure(&FigureSpec::default(), kind).unwrap()
}

#[test]
fn figures_are_watertight_with_normalized_weights() {
    for kind in [SkirtKind::Long, SkirtKind::Short, SkirtKind::None] {
        let fig = figure(kind);
        let mut edges: HashMap<(u32, u32), usize> = HashMap::new();
        for f in &fig.body.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(edges.values().all(|&c| c == 2), "{kind:?}");
        let nj = fig.body.num_joints();
        assert_eq!(nj, 6);
        for row in fig.body.skin_weights.chunks(nj) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(row.iter().all(|w| *w >= 0.0));
        }
    }
    let bad = FigureSpec { shin_radius: 0.0, ..FigureSpec::default() };
    assert!(matches!(make_figure(&bad, SkirtKind::Long), Err(Error::Argument(_))));
}

#[test]
fn no_skirt_means_no_generated_labels() {
    let fig = figure(SkirtKind::None);
    let recs = body_samples(&fig, 5000, 1).unwrap();
    assert!(fig.oracle_labels(&recs).iter().all(|l| *l != Label::Generated));
    assert!(fig.skirt.is_none());
    let pose = Pose::identity(fig.body.num_joints());
    assert!(skirt_sheet(&fig, &pose, 0, 0, 10, None).is_err());

    let long = figure(SkirtKind::Long);
    assert!(long.oracle_labels(&recs).iter().any(|l| *l == Label::Generated));
}

#[test]
fn flat_skirt_at_rest_is_an_exact_cone() {
    let fig = figure(SkirtKind::Long);
    let pose = Pose::identity(fig.body.num_joints());
    let params = fig.skirt.as_ref().unwrap();
    let center = posed_joints(&fig.body, &pose).unwrap()[0];
    let sheet = skirt_sheet(&fig, &pose, 3, 4, 3000, Some(0.0)).unwrap();
    let worst = sheet.points.iter().map(|p| cone_residual(params, center, *p)).fold(0.0, f64::max);
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn skirt_stays_outside_the_body() {
    let fig = figure(SkirtKind::Long);
    let mut rng = Rng::new(5);
    for k in 0..4 {
        let pose = sample_pose(&fig.body, &mut rng).unwrap();
        let (posed, _) = skin_vertices(&fig.body, &forward_kinematics(&fig.body, &pose).unwrap()).unwrap();
        let sdf = MeshSdf::new(&fig.body.posed_mesh(posed)).unwrap();
        let sheet = skirt_sheet(&fig, &pose, 6, k, 2000, None).unwrap();
        let min = sheet.points.iter().map(|p| sdf.signed_distance(*p)).fold(f64::INFINITY, f64::min);
        assert!(min >= 1e-3, "pose {k}: {min}");
    }
}

#[test]
fn garment_seeds_share_the_cone_but_not_the_wrinkles() {
    let fig = figure(SkirtKind::Long);
    let pose = Pose::identity(fig.body.num_joints());
    let p = fig.skirt.as_ref().unwrap();
    let c = posed_joints(&fig.body, &pose).unwrap()[0];
    let residuals = |seed| -> Vec<f64> {
        skirt_sheet(&fig, &pose, seed, 11, 3000, None)
            .unwrap()
            .points
            .iter()
            .map(|q| {
                let s = (c[1] + p.waist_offset - q[1]) / p.length;
                ((q[0] - c[0]).powi(2) + (q[2] - c[2]).powi(2)).sqrt() - (p.waist_radius + s * (p.hem_radius - p.waist_radius))
            })
            .collect()
    };
    let corr = |a: &[f64], b: &[f64]| {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(a), mean(b));
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    };
    // a single pair can land near any value in [-1, 1] because the phases are
    // uniform; what is fixed is that only the phases are seed dependent, so
    // the measured correlation is Σ w² cos Δφ / Σ w² and averages out
    let w2: f64 = p.weights.iter().map(|w| w * w).sum();
    let mut total = 0.0;
    for k in 0..8u64 {
        let (a, b) = (residuals(2 * k), residuals(2 * k + 1));
        let (pa, pb) = (wrinkle_phases(2 * k), wrinkle_phases(2 * k + 1));
        let want: f64 = (0..3).map(|h| p.weights[h] * p.weights[h] * (pa[h] - pb[h]).cos()).sum::<f64>() / w2;
        let got = corr(&a, &b);
        assert!((got - want).abs() < 0.05, "seeds {}/{}: {got} vs {want}", 2 * k, 2 * k + 1);
        total += got;
    }
    assert!(total / 8.0 < 0.5, "mean correlation {}", total / 8.0);
    assert_eq!(residuals(4), residuals(4));
}

#[test]
fn frames_are_deterministic() {
    let fig = figure(SkirtKind::Long);
    let spec = ScanSpec { density: 400.0, ..ScanSpec::default() };
    let a = make_frames(&fig, 2, 12, 3, &spec).unwrap();
    assert_eq!(a, make_frames(&fig, 2, 12, 3, &spec).unwrap());
    assert_ne!(a[0].sample.pose, a[1].sample.pose);
    let scan = simulate_skirt(&fig, &a[0].sample.pose, 3, &spec).unwrap();
    assert_eq!(scan, simulate_skirt(&fig, &a[0].sample.pose, 3, &spec).unwrap());
    assert_eq!(scan.normals.as_ref().unwrap().len(), scan.len());
}
