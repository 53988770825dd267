//! Evaluation metrics: normal-map MSE over rendered views, Chamfer and
//! normal discrepancy in reporting units, and the Fréchet distance between
//! embedding sets.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cutmap::{render_normal_map, OrthoCamera, Render};
use crate::error::{bail, Result};
use crate::geometry::PointCloudN;
use crate::losses::Matching;

/// Reported MSE is in units of 10⁻².
pub const MSE_SCALE: f64 = 1e2;
/// Reported CD is in units of 10⁻⁴ m².
pub const CD_SCALE: f64 = 1e4;
/// Reported NML is in units of 10⁻¹.
pub const NML_SCALE: f64 = 1e1;

/// Default splat radius of evaluation renders, in pixels.
pub const EVAL_SPLAT_RADIUS: f64 = 5.0;

/// Mean squared difference of two renders over every pixel and channel,
/// background included.
pub fn render_mse(a: &Render, b: &Render) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        bail!(Argument, "render sizes differ: {}×{} vs {}×{}", a.width, a.height, b.width, b.height);
    }
    let n = a.rgb.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (p, q) in a.rgb.iter().zip(&b.rgb) {
        for c in 0..3 {
            let d = p[c] - q[c];
            sum += d * d;
        }
    }
    Ok(sum / (3 * n) as f64)
}

/// Normal-map MSE averaged over `cameras`, scaled to reporting units.
pub fn mse_normal_maps(pred: &PointCloudN, gt: &PointCloudN, cameras: &[OrthoCamera], splat_radius: f64) -> Result<f64> {
    if cameras.is_empty() {
        bail!(Argument, "normal-map MSE needs at least one camera");
    }
    let mut total = 0.0;
    for cam in cameras {
        let a = render_normal_map(pred, cam, splat_radius)?;
        let b = render_normal_map(gt, cam, splat_radius)?;
        total += render_mse(&a, &b)?;
    }
    Ok(MSE_SCALE * total / cameras.len() as f64)
}

pub fn cd_eval(pred: &PointCloudN, gt: &PointCloudN) -> Result<f64> {
    Ok(CD_SCALE * Matching::new(&pred.points, &gt.points)?.chamfer())
}

pub fn nml_eval(pred: &PointCloudN, gt: &PointCloudN) -> Result<f64> {
    let m = Matching::new(&pred.points, &gt.points)?;
    Ok(NML_SCALE * m.normal_loss(pred.normals()?, gt.normals()?))
}

/// Maps a render to a feature vector, e.g. a pretrained image network.
pub trait Embedder {
    fn embed(&self, render: &Render) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "lowercase")]
pub enum FidResult {
    Value(f64),
    /// No embedder was supplied.
    Unavailable,
}

/// FID between two render sets; `Unavailable` without an embedder.
pub fn fid_stub(pred: &[Render], gt: &[Render], embedder: Option<&dyn Embedder>) -> Result<FidResult> {
    let Some(e) = embedder else {
        return Ok(FidResult::Unavailable);
    };
    let a: Vec<Vec<f64>> = pred.iter().map(|r| e.embed(r)).collect();
    let b: Vec<Vec<f64>> = gt.iter().map(|r| e.embed(r)).collect();
    Ok(FidResult::Value(frechet_distance(&a, &b)?))
}

/// Mean and unbiased covariance (row-major `d×d`).
pub fn gaussian_fit(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(first) = samples.first() else {
        bail!(Argument, "cannot fit a Gaussian to no samples");
    };
    let d = first.len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        bail!(Argument, "embeddings must share one positive dimension");
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    let denom = (n - 1.0).max(1.0);
    for s in samples {
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (s[j] - mean[j]) / denom;
            }
        }
    }
    Ok((mean, cov))
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and column eigenvectors (row-major `d×d`).
pub fn symmetric_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * d + j] * m[i * d + j]).sum();
        let scale: f64 = m.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| m[i * d + i]).collect(), v)
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from round-off are clamped to zero.
pub fn sqrt_psd(a: &[f64], d: usize) -> Vec<f64> {
    let (vals, vecs) = symmetric_eigen(a, d);
    let mut out = vec![0.0; d * d];
    for k in 0..d {
        let s = libm::sqrt(vals[k].max(0.0));
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] += vecs[i * d + k] * s * vecs[j * d + k];
            }
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    crate::nn::gemm(d, d, d, 1.0, a, false, b, false, 0.0, &mut c);
    c
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁Σ₂)^{1/2})`, with the trace of the root
/// taken as that of the symmetric `(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m1, c1) = gaussian_fit(a)?;
    let (m2, c2) = gaussian_fit(b)?;
    let d = m1.len();
    if m2.len() != d {
        bail!(Argument, "embedding dimensions differ: {d} vs {}", m2.len());
    }
    let mean_term: f64 = m1.iter().zip(&m2).map(|(x, y)| (x - y) * (x - y)).sum();
    let s1 = sqrt_psd(&c1, d);
    let mut inner = matmul(&matmul(&s1, &c2, d), &s1, d);
    for i in 0..d {
        for j in i + 1..d {
            let avg = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = avg;
            inner[j * d + i] = avg;
        }
    }
    let (vals, _) = symmetric_eigen(&inner, d);
    let tr_root: f64 = vals.iter().map(|v| libm::sqrt(v.max(0.0))).sum();
    let tr: f64 = (0..d).map(|i| c1[i * d + i] + c2[i * d + i]).sum();
    Ok((mean_term + tr - 2.0 * tr_root).max(0.0))
}
